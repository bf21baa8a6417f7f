"""
CLI entry point for neuralinterp.

Provides the gen, pretrain, finetune, ablate, trace and eval commands.
"""

import argparse
import logging
import sys
from dataclasses import replace

from neuralinterp import __version__
from neuralinterp.autodiff import AutodiffError
from neuralinterp.checkpoint import CheckpointError
from neuralinterp.config import ConfigError, ExperimentConfig, load_config, validate_config
from neuralinterp.experiments import (
    ExperimentError,
    cmd_ablate,
    cmd_eval,
    cmd_finetune,
    cmd_gen,
    cmd_pretrain,
    cmd_trace,
)
from neuralinterp.fuzzy import FuzzyError
from neuralinterp.models import AblationKind, FinetuneRegime
from neuralinterp.output import OutputError
from neuralinterp.params import ModelError
from neuralinterp.training import TrainingError
from neuralinterp.utils import parse_mask

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)

# (exception type, error category, exit code); first match wins.
ERROR_CATEGORIES: list[tuple[type[BaseException], str, int]] = [
    (ConfigError, "config", 2),
    (FileNotFoundError, "config", 2),
    (CheckpointError, "checkpoint", 1),
    (TrainingError, "training", 1),
    (ExperimentError, "experiment", 1),
    (OutputError, "output", 1),
    (ModelError, "model", 1),
    (FuzzyError, "data", 1),
    (AutodiffError, "autodiff", 1),
]


def _print_summary(title: str, lines: list[tuple[str, object]]) -> None:
    print(f"\n{'='*50}")
    print(title)
    print(f"{'='*50}")
    for label, value in lines:
        print(f"{label + ':':<22}{value}")
    print(f"{'='*50}\n")


def build_config(parsed: argparse.Namespace) -> ExperimentConfig:
    """
    Load the configuration and apply command-line flags on top.

    Order: YAML file, then --set overrides, then dedicated flags
    (--seed, --out-dir, --overwrite).
    """
    config = load_config(parsed.config, parsed.set)

    seed = getattr(parsed, "seed", None)
    if seed is not None:
        if parsed.command == "gen":
            config = replace(config, task=replace(config.task, seed=seed))
        else:
            config = replace(config, training=replace(config.training, seed=seed))
    if parsed.out_dir is not None:
        config = replace(config, output=replace(config.output, directory=parsed.out_dir))
    if parsed.overwrite:
        config = replace(config, output=replace(config.output, overwrite=True))

    for warning in validate_config(config):
        logger.warning(warning)
    return config


def run_command(parsed: argparse.Namespace) -> int:
    """
    Execute one parsed command.

    Returns:
        Exit code (0 for success)
    """
    config = build_config(parsed)
    command = parsed.command

    if command == "gen":
        manifest = cmd_gen(config)
        _print_summary("NEURALINTERP DATASETS", [
            ("Variables", manifest.n_vars),
            ("Samples per dataset", manifest.num_samples),
            ("Pretraining tasks", len(manifest.pretrain_tables)),
            ("Adaptation tasks", len(manifest.adapt_tables)),
            ("Seed", manifest.seed),
            ("Output directory", config.output.directory),
        ])

    elif command == "pretrain":
        result = cmd_pretrain(config, resume=parsed.resume)
        best = result.best
        _print_summary("NEURALINTERP PRETRAINING", [
            ("Epochs", len(result.history)),
            ("Best epoch", result.best_epoch),
            ("Best val loss", f"{best.val_loss:.6f}" if best else "n/a"),
            ("Best mean R^2", f"{best.mean_r2:.4f}" if best else "n/a"),
            ("Output directory", config.output.directory),
        ])

    elif command == "finetune":
        result = cmd_finetune(config, parsed.checkpoint, parsed.regime)
        best = result.best
        _print_summary("NEURALINTERP FINETUNING", [
            ("Regime", parsed.regime or config.training.regime.value),
            ("Best epoch", result.best_epoch),
            ("Best mean R^2", f"{best.mean_r2:.4f}" if best else "n/a"),
            ("Output directory", config.output.directory),
        ])

    elif command == "ablate":
        if parsed.mask:
            try:
                masks = [parse_mask(m) for m in parsed.mask]
            except ValueError as e:
                raise ConfigError(str(e)) from e
            config = replace(config, ablation=replace(config.ablation, drop_masks=masks))
        if parsed.sweep:
            config = replace(
                config, ablation=replace(config.ablation, iteration_sweep=parsed.sweep)
            )
        rows = cmd_ablate(config, parsed.checkpoint, parsed.kind)
        _print_summary(
            f"NEURALINTERP ABLATION ({parsed.kind})",
            [(row.setting, f"mean R^2 {row.mean_r2:.4f}") for row in rows],
        )

    elif command == "trace":
        count = cmd_trace(config, parsed.checkpoint, parsed.samples, parsed.from_init)
        _print_summary("NEURALINTERP TRACE", [
            ("Samples", parsed.samples),
            ("Records", count),
            ("Routing", "initialization" if parsed.from_init else "trained"),
        ])

    elif command == "eval":
        loss, r2 = cmd_eval(config, parsed.checkpoint, parsed.dataset, parsed.split)
        lines: list[tuple[str, object]] = [("MSE", f"{loss:.6f}")]
        lines += [(f"R^2 task {t}", f"{value:.4f}") for t, value in enumerate(r2)]
        _print_summary(f"NEURALINTERP EVAL ({parsed.dataset}/{parsed.split})", lines)

    return 0


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--config",
        "-c",
        default=None,
        help="Path to YAML configuration file (default: built-in desk-scale config)",
    )
    sub.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override a configuration key (repeatable), e.g. --set model.tau=1.4",
    )
    sub.add_argument(
        "--out-dir",
        default=None,
        help="Run directory (overrides output.directory)",
    )
    sub.add_argument(
        "--overwrite",
        action="store_true",
        help="Replace existing outputs",
    )
    sub.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Enable verbose logging",
    )


def _add_checkpoint(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--checkpoint",
        required=True,
        help="Checkpoint directory or manifest path",
    )


def create_parser() -> argparse.ArgumentParser:
    """Create argument parser."""
    parser = argparse.ArgumentParser(
        prog="neuralinterp",
        description=(
            "Train and analyse a Neural Interpreter on fuzzy Boolean regression tasks. "
            "Pure numpy, runs on a CPU."
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m neuralinterp gen --seed 0 --out-dir runs/desk
  python -m neuralinterp pretrain --seed 0 --out-dir runs/desk
  python -m neuralinterp finetune --checkpoint runs/desk/pretrain --out-dir runs/desk --regime cls_plus_type
  python -m neuralinterp ablate --checkpoint runs/desk/pretrain --out-dir runs/desk --kind anytime --sweep 1 2 4 8
  python -m neuralinterp trace --checkpoint runs/desk/pretrain --out-dir runs/desk --samples 64 --from-init
  python -m neuralinterp eval --checkpoint runs/desk/finetune_all --out-dir runs/desk --dataset adapt
  python -m neuralinterp pretrain --seed 1 --config sample_config.yaml --set model.tau=1.4
        """,
    )

    parser.add_argument(
        "--version",
        action="version",
        version=f"neuralinterp {__version__}",
    )

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen_parser = subparsers.add_parser("gen", help="Generate the fuzzy Boolean datasets")
    _add_common(gen_parser)
    gen_parser.add_argument("--seed", type=int, required=True, help="Truth-table seed")

    pretrain_parser = subparsers.add_parser("pretrain", help="Pretrain on the pretraining tasks")
    _add_common(pretrain_parser)
    pretrain_parser.add_argument("--seed", type=int, required=True, help="Model/training seed")
    pretrain_parser.add_argument(
        "--resume",
        action="store_true",
        help="Continue from the last-epoch checkpoint of this run directory",
    )

    finetune_parser = subparsers.add_parser("finetune", help="Finetune on the adaptation tasks")
    _add_common(finetune_parser)
    _add_checkpoint(finetune_parser)
    finetune_parser.add_argument(
        "--regime",
        choices=[r.value for r in FinetuneRegime],
        default=None,
        help="Parameter groups to update (default: training.regime)",
    )
    finetune_parser.add_argument("--seed", type=int, default=None, help="Training seed")

    ablate_parser = subparsers.add_parser("ablate", help="Run a structural ablation")
    _add_common(ablate_parser)
    _add_checkpoint(ablate_parser)
    ablate_parser.add_argument(
        "--kind",
        choices=[k.value for k in AblationKind],
        required=True,
        help="drop functions, extend with new functions, or sweep iterations",
    )
    ablate_parser.add_argument(
        "--mask",
        action="append",
        default=[],
        help="Keep mask for --kind drop as a bit string, e.g. 1011 (repeatable)",
    )
    ablate_parser.add_argument(
        "--sweep",
        type=int,
        nargs="+",
        default=None,
        help="Function iteration counts for --kind anytime",
    )

    trace_parser = subparsers.add_parser("trace", help="Export per-element routing")
    _add_common(trace_parser)
    _add_checkpoint(trace_parser)
    trace_parser.add_argument(
        "--samples",
        type=int,
        default=64,
        help="Number of validation samples to trace (default: 64)",
    )
    trace_parser.add_argument(
        "--from-init",
        action="store_true",
        help="Trace a freshly initialized model with the checkpoint's config and seed",
    )

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint")
    _add_common(eval_parser)
    _add_checkpoint(eval_parser)
    eval_parser.add_argument(
        "--dataset",
        choices=["pretrain", "adapt"],
        default="pretrain",
        help="Dataset to evaluate on (default: pretrain)",
    )
    eval_parser.add_argument(
        "--split",
        choices=["train", "val"],
        default="val",
        help="Split to evaluate on (default: val)",
    )

    return parser


def main(args: list[str] | None = None) -> int:
    """
    Main CLI entry point.

    Args:
        args: Command line arguments (uses sys.argv if None)

    Returns:
        Exit code
    """
    parser = create_parser()
    parsed_args = parser.parse_args(args)

    if parsed_args.command is None:
        parser.print_help()
        return 0

    if parsed_args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return run_command(parsed_args)
    except Exception as e:
        for error_type, category, code in ERROR_CATEGORIES:
            if isinstance(e, error_type):
                print(f"error[{category}]: {e}", file=sys.stderr)
                logger.debug("Traceback:", exc_info=True)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
