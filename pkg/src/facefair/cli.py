"""Command-line entry point: ``facefair <command> [--config PATH] [--seed N] [--out DIR]``.

Exit status is 0 on success, 1 for invalid configuration or missing inputs
and 2 for runtime failures (including a locked output directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import pipeline
from .cohort import ConfigurationError

COMMANDS = ("generate", "balance", "train", "audit", "attribute", "transfer", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facefair", description="Deterministic face-recognition fairness audit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("bundles", nargs="*", help="two audit bundles (or run directories) for 'transfer'")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="run seed (overrides the config file)")
    p.add_argument("--out", help="output directory (overrides the config file)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> pipeline.RunConfig:
    if args.config:
        with open(args.config) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{args.config}: top level must be a JSON object")
    else:
        data = {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["output_dir"] = args.out
    return pipeline.RunConfig.from_dict(data)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "transfer":
            if len(args.bundles) != 2:
                raise ConfigurationError("transfer needs exactly two bundle paths")
            if not args.out:
                raise ConfigurationError("transfer needs --out")
            kw = {}
            if args.config or args.seed is not None:
                cfg = load_config(args)
                kw = {"n_boot": cfg.bootstrap_n, "alpha": cfg.bootstrap_alpha}
            result = pipeline.cmd_transfer(args.bundles[0], args.bundles[1], args.out, **kw)
            print(json.dumps(pipeline._clean(result), indent=1, sort_keys=True))
            return 0
        if args.bundles:
            raise ConfigurationError(f"'{args.command}' takes no positional arguments")
        cfg = load_config(args)
        if args.command == "generate":
            print(pipeline.cmd_generate(cfg))
        elif args.command == "balance":
            summary = pipeline.cmd_balance(cfg)
            print(json.dumps(pipeline._clean(summary["max_mean_deviation"]), sort_keys=True))
        elif args.command == "train":
            print(json.dumps(pipeline._clean(pipeline.cmd_train(cfg)), indent=1, sort_keys=True))
        elif args.command == "audit":
            pipeline.cmd_audit(cfg)
            print(cfg.out / "bundle.json")
        elif args.command == "attribute":
            print(json.dumps(pipeline._clean(pipeline.cmd_attribute(cfg)["shares"]), sort_keys=True))
        elif args.command == "report":
            print(pipeline.cmd_report(cfg), end="")
        return 0
    except (ConfigurationError, ValueError, FileNotFoundError) as exc:
        print(f"facefair {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures: lock held, numerical breakdown, I/O
        print(f"facefair {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
