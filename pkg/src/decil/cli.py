"""Command line entry point: ``decil <subcommand> --config PATH``.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .exceptions import ExpertFailureError, NumericError
from .experiments import (
    MODEL_KINDS, ConfigError, load_config, run_ablation, run_audit, run_evaluate, run_fig2,
    run_gen_data, run_train, write_echo, write_metadata,
)

COMMANDS = {
    "gen-data": run_gen_data,
    "evaluate": run_evaluate,
    "fig2": run_fig2,
    "ablation": run_ablation,
    "audit": run_audit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "evaluate", "fig2", "ablation", "audit"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="replace the config's seeds with this one")
        p.add_argument("--out", help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field; dotted keys reach nested fields")
        if name == "train":
            p.add_argument("--model-kind", required=True, choices=MODEL_KINDS)
    return parser


def _summarise(result) -> str:
    def default(o):
        try:
            return o.tolist()
        except AttributeError:
            return str(o)

    if isinstance(result, dict) and len(json.dumps(result, default=default)) > 4000:
        result = {k: v for k, v in result.items() if not isinstance(v, (dict, list))} or \
            {"sections": sorted(result)}
    return json.dumps(result, indent=2, default=default)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, echo = load_config(args.config, args.override, args.seed, args.out)
        write_echo(cfg, echo)
        start = time.perf_counter()
        if args.command == "train":
            result = run_train(cfg, args.model_kind)
        else:
            result = COMMANDS[args.command](cfg)
        timings = result.pop("timings", None) if isinstance(result, dict) else None
        write_metadata(cfg, args.command, time.perf_counter() - start, timings)
    except ConfigError as exc:
        print(f"decil {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ExpertFailureError) as exc:
        print(f"decil {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    print(_summarise(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
