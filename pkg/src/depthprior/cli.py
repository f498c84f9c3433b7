"""Command-line entry point: ``depthprior {refine,fuse,eval,synth} --config FILE``.

Exit codes: 0 on success, 2 when the configuration or dataset fails
validation, 1 for any failure during the run itself.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .pipeline import EVAL_MODES, ValidationError, load_config, run_eval, run_fuse, run_refine, run_synth
from .metrics import format_value

logger = logging.getLogger("depthprior")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="INI pipeline configuration")
    common.add_argument("--output", type=Path, help="override the output directory")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--jobs", type=int, help="parallel views (default: logical cores)")
    common.add_argument("--force", action="store_true", help="redo completed work / overwrite")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="depthprior", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("refine", parents=[common], help="refine every view's depth map")
    sub.add_parser("fuse", parents=[common], help="fuse refined depth maps into a point cloud")
    ev = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    ev.add_argument("--mode", choices=EVAL_MODES, default="rmse")
    sub.add_parser("synth", parents=[common], help="render a synthetic dataset into the dataset root")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        overrides = {k: v for k, v in (("output", args.output), ("seed", args.seed), ("jobs", args.jobs))
                     if v is not None}
        config = dataclasses.replace(config, **overrides)

        if args.command == "refine":
            for outcome in run_refine(config, force=args.force):
                state = "skipped" if outcome.skipped else f"loss {outcome.final_loss:.6f}"
                print(f"view {outcome.view_id}: {state}")
        elif args.command == "fuse":
            print(f"{len(run_fuse(config))} points -> {config.output / 'fused.ply'}")
        elif args.command == "eval":
            for row in run_eval(config, args.mode):
                print(f"{row.name} {row.metric} {format_value(row.value)}")
        else:
            ids = run_synth(config, force=args.force)
            print(f"{len(ids)} views -> {config.dataset}")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any run failure maps to one exit code
        logger.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
