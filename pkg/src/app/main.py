"""Command-line entry point.

Loads the experiment config, applies command-line overrides, optionally
starts the metrics exporter and runs one pipeline command. Contract and
I/O errors are logged and turned into exit status 1; argparse usage
errors exit with status 2.
"""

import argparse
import sys
from collections.abc import Callable, Sequence
from typing import Any

from app import __version__, pipeline
from app.config import ExperimentConfig, load_config
from app.utils.errors import ProbeLabError
from app.utils.metrics_server import start_metrics_server
from app.utils.setup_logger import attach_run_log, detach_run_log, setup_logger

logger = setup_logger(__name__)

COMMANDS: dict[str, Callable[[ExperimentConfig], Any]] = {
    "generate": pipeline.cmd_generate,
    "train-base": pipeline.cmd_train_base,
    "probe": pipeline.cmd_probe,
    "finetune": pipeline.cmd_finetune,
    "report": pipeline.cmd_report,
}


def parse_boundaries(text: str) -> tuple[int, int]:
    """Parse ``l1,l2`` into two layer indices."""
    parts = [p.strip() for p in text.split(",")]
    try:
        l1, l2 = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'l1,l2', got {text!r}") from None
    return l1, l2


def parse_configs(text: str) -> list[str]:
    """Parse a comma-separated list of schedule names (``All,Middle,L>M``)."""
    names = [p.strip() for p in text.split(",") if p.strip()]
    if not names:
        raise argparse.ArgumentTypeError("expected at least one configuration name")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probe-gap-lab",
        description="Layer-wise linear probing and layer-group fine-tuning of a toy VLM.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="Experiment config JSON")
        cmd.add_argument("--seed", type=int)
        cmd.add_argument("--out", help="Run directory")
        cmd.add_argument("--precision", choices=["f32", "f64"])
        cmd.add_argument("--workers", type=int)
        cmd.add_argument("--boundaries", type=parse_boundaries, help="Manual split 'l1,l2'")
        cmd.add_argument("--configs", type=parse_configs, help="Schedules, e.g. 'All,L-M,M>U'")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    return config.with_overrides(
        seed=args.seed,
        out_dir=args.out,
        precision=args.precision,
        workers=args.workers,
        boundaries=args.boundaries,
        configs=args.configs,
    )


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and return the process exit status."""
    args = build_parser().parse_args(argv)
    run_log = None
    try:
        config = resolve_config(args)
        run_log = attach_run_log(config.out_dir, args.command)
        logger.info("🚀 %s (out=%s, seed=%d)", args.command, config.out_dir, config.seed)
        start_metrics_server()
        COMMANDS[args.command](config)
        logger.info("✅ %s finished", args.command)
    except (ProbeLabError, OSError, ValueError) as e:
        logger.exception("❌ %s failed: %s", args.command, e)
        return 1
    finally:
        if run_log is not None:
            detach_run_log(run_log)
    return 0


if __name__ == "__main__":
    sys.exit(main())
