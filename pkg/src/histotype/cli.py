"""Command line entry point.

One subcommand per pipeline stage plus `run-all`, `synth` (generate a
synthetic cohort with ground truth), and `init-config`. All diagnostics
go to stderr; files are the only data output.

Exit codes: 0 success, 1 bad input (config, manifest, CLI usage),
2 runtime stage failure, 3 external scorer protocol violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import CLASS_ORDER, __version__
from .config import load_config, write_default_config
from .errors import HistotypeError, ProtocolError, ValidationError
from .pipeline import STAGES, PipelineContext, run_all, run_stage
from .synthetic import SynthConfig, generate_synthetic_cohort

log = logging.getLogger(__name__)

_STAGE_HELP = {
    "tile": "cut slides into tissue tiles at the working resolution",
    "split": "assign patients to train/validation/test sets",
    "build-ref": "score tumor tiles and fit the stain reference",
    "normalize": "stain-normalize the selected tumor tiles",
    "score": "run the four subtype scorers over normalized tiles",
    "threshold": "fit per-classifier operating points",
    "features": "aggregate per-slide count features",
    "train": "fit the boosted-tree slide classifier",
    "predict": "classify the test slides",
    "evaluate": "write the metrics report with bootstrap intervals",
    "heatmap": "render tumor-score overlays for the test slides",
}


def _add_pipeline_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True,
                        help="pipeline config file")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--scorer-cmd", default=None, metavar="CMD",
                        help="external scorer command; the classifier id "
                             "is appended as --classifier <id>")
    parser.add_argument("--force", action="store_true",
                        help="run even when provenance says up to date")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histotype",
        description="whole-slide H&E molecular subtyping pipeline")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        stage_parser = sub.add_parser(stage, help=_STAGE_HELP[stage])
        _add_pipeline_args(stage_parser)
    all_parser = sub.add_parser("run-all", help="run every stage in order")
    _add_pipeline_args(all_parser)

    synth = sub.add_parser(
        "synth", help="generate a synthetic cohort with ground truth")
    synth.add_argument("--out", required=True, help="cohort directory")
    synth.add_argument("--classes", default=",".join(CLASS_ORDER),
                       help="comma-separated subtype labels")
    synth.add_argument("--wsis-per-class", type=int, default=5)
    synth.add_argument("--signal", type=float, default=1.0,
                       help="synthetic scorer fidelity in [0, 1]")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--width", type=int, default=256,
                       help="slide width at the working resolution")
    synth.add_argument("--height", type=int, default=192)

    init = sub.add_parser("init-config",
                          help="write the default config file")
    init.add_argument("--out", required=True)
    init.add_argument("--force", action="store_true",
                      help="overwrite an existing file")
    return parser


def _make_context(args: argparse.Namespace) -> PipelineContext:
    overrides = list(args.override)
    if args.scorer_cmd is not None:
        overrides.append(f"scorer.command={args.scorer_cmd}")
    config = load_config(args.config, overrides)
    text = Path(args.config).read_text(encoding="utf-8")
    return PipelineContext.from_config(config, text, overrides)


def _run(args: argparse.Namespace) -> None:
    if args.command == "synth":
        classes = tuple(c for c in args.classes.split(",") if c)
        cohort = generate_synthetic_cohort(SynthConfig(
            out_dir=Path(args.out), classes=classes,
            wsis_per_class=args.wsis_per_class, signal=args.signal,
            seed=args.seed, wsi_width=args.width, wsi_height=args.height))
        log.info("cohort ready: %d slides; next: histotype run-all "
                 "--config %s", len(cohort.wsi_ids), cohort.config_path)
        return
    if args.command == "init-config":
        out = Path(args.out)
        if out.exists() and not args.force:
            raise ValidationError(
                f"{out} exists; pass --force to overwrite")
        write_default_config(out)
        log.info("wrote %s", out)
        return
    ctx = _make_context(args)
    if args.command == "run-all":
        run_all(ctx, args.force)
    else:
        run_stage(ctx, args.command, args.force)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except ProtocolError as exc:
        log.error("%s", exc)
        return 3
    except HistotypeError as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
