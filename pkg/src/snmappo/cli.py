"""Command-line entry point: ``snmappo {train,sweep,eval,analyze-gradients,baseline}``.

Exit codes: 0 success, 1 configuration error, 2 runtime or numeric failure,
3 analysis-law violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .errors import ConfigError, SnMappoError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ANALYSIS = 0, 1, 2, 3


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _overrides(args: argparse.Namespace) -> dict:
    out = _parse_set(args.set or [])
    if getattr(args, "seed", None) is not None:
        out["seeds"] = [args.seed]
    for attr, key in (("variant", "variant"), ("env", "env"), ("steps", "total_env_steps"), ("out", "out_dir")):
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snmappo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--variant", choices=sorted(harness.VARIANTS))
        p.add_argument("--env")
        p.add_argument("--steps", type=int, help="total environment steps")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    train = sub.add_parser("train", help="train a single seed")
    config_args(train)
    train.add_argument("--seed", type=int)
    train.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")

    sweep = sub.add_parser("sweep", help="train every configured seed and summarize")
    config_args(sweep)

    ev = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=32)
    ev.add_argument("--seed", type=int, default=0)

    base = sub.add_parser("baseline", help="random-policy statistics for an environment")
    base.add_argument("--env", required=True)
    base.add_argument("--episodes", type=int, default=20)
    base.add_argument("--seed", type=int, default=0)

    an = sub.add_parser("analyze-gradients", help="check sign preservation and gradient scaling laws")
    an.add_argument("--layers", type=int, nargs="+", default=[2, 3, 4], help="candidate layer counts")
    an.add_argument("--trials", type=int, default=50)
    an.add_argument("--max-width", type=int, default=32)
    an.add_argument("--seed", type=int, default=0)
    an.add_argument("--out", default="analysis_report.csv")
    an.add_argument("--skip-stop-gradient", action="store_true",
                    help="fault injection: differentiate through the singular value")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            config = harness.parse_config(args.config, _overrides(args))
            path = harness.run_training(config, config.seeds[0], resume=args.resume)
            print(path)
        elif args.command == "sweep":
            config = harness.parse_config(args.config, _overrides(args))
            result = harness.run_sweep(config)
            for seed, path in sorted(result.run_files.items()):
                print(f"seed {seed}: {path}")
            for seed, err in sorted(result.failed.items()):
                print(f"seed {seed}: FAILED {err}")
            print(result.summary_path)
            if result.failed:
                return EXIT_RUNTIME
        elif args.command == "eval":
            print(json.dumps(harness.evaluate_checkpoint(args.checkpoint, args.episodes, args.seed), indent=2))
        elif args.command == "baseline":
            print(json.dumps(harness.measure_random_baseline(args.env, args.episodes, args.seed), indent=2))
        elif args.command == "analyze-gradients":
            path, ok = harness.analyze_gradients_cmd(args.out, layers=args.layers, trials=args.trials,
                                                     max_width=args.max_width, seed=args.seed,
                                                     skip_stop_gradient=args.skip_stop_gradient)
            print(f"{'PASS' if ok else 'FAIL'} {path}")
            if not ok:
                return EXIT_ANALYSIS
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SnMappoError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
