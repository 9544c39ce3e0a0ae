"""Command-line entry point: ``eegground <subcommand> --config c.json``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .config import ConfigError, load_config

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

STAGE_OF = {
    "synth": "synth",
    "fit-tokenizer": "tokenizer",
    "proxy": "proxy",
    "align": "align",
    "predict-tokens": "predictor",
    "understand": "understand",
    "eval": "eval",
    "reconstruct": "reconstruct",
    "all": "reconstruct",
}

log = logging.getLogger("eegground")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (defaults are used for missing fields)")
    common.add_argument("--seed", type=int, help="override the global training seed")
    common.add_argument("--out", help="override the output root")
    common.add_argument("--force", action="store_true", help="rerun stages even when cached outputs exist")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(prog="eegground", description="EEG visual grounding pipeline at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    helps = {
        "synth": "generate synthetic datasets and splits",
        "fit-tokenizer": "fit the codebook and train the patch decoder",
        "proxy": "align clinical EEG with label text and attach proxy images",
        "align": "stage 1 trimodal alignment",
        "predict-tokens": "stage 2 token predictor",
        "understand": "stage 3 multiple-choice head",
        "eval": "classification reports from stage 3 predictions",
        "reconstruct": "reconstruction probe (PSNR/SSIM)",
        "all": "every stage in dependency order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    ab = sub.add_parser("ablate", parents=[common], help="alignment-mode and stage-wise ablations")
    ab.add_argument("--kind", choices=["alignment", "stages", "both"], default="both")
    ab.add_argument("--seeds", type=int, nargs="+", help="override ablation seeds")
    ck = sub.add_parser("check", parents=[common], help="run the acceptance suite; exit 1 on any failure")
    ck.add_argument("--only", type=int, nargs="+", help="criterion numbers to run")
    return parser


def _configure_logging(quiet: bool) -> None:
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    _configure_logging(args.quiet)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return EXIT_USAGE

    from .pipeline import LockError, StageFailure, deterministic_threads, output_lock

    try:
        with output_lock(cfg["paths"]["output_root"]), deterministic_threads():
            return _dispatch(args, cfg)
    except LockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the exit code contract covers every runtime failure
        log.exception("runtime failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args, cfg: dict) -> int:
    from .pipeline import Pipeline

    t0 = time.perf_counter()
    if args.command in STAGE_OF:
        pipe = Pipeline(cfg, force=args.force)
        pipe.run(STAGE_OF[args.command])
        path = pipe.write_record(time.perf_counter() - t0)
        if not args.quiet:
            print(json.dumps(pipe.record()["metrics"], indent=2, sort_keys=True, default=str))
        print(f"run record: {path}")
        return EXIT_OK
    if args.command == "ablate":
        from .evaluation import run_alignment_ablation, run_stage_ablation

        seeds = args.seeds or cfg["ablation"]["seeds"]
        out = {}
        if args.kind in ("alignment", "both"):
            out["alignment"] = run_alignment_ablation(cfg, seeds, cfg["ablation"]["modes"])["summary"]
        if args.kind in ("stages", "both"):
            out["stages"] = run_stage_ablation(cfg, seeds)["summary"]
        print(json.dumps(out, indent=2, sort_keys=True))
        return EXIT_OK
    if args.command == "check":
        from .acceptance import run_checks

        results = run_checks(cfg, only=args.only)
        for r in results:
            print(r.line())
        return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
