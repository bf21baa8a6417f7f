"""
Experiment drivers behind the CLI commands.

Each cmd_* function takes a validated ExperimentConfig, does one job,
writes its artifacts under output.directory and returns what it produced.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from neuralinterp.checkpoint import (
    LoadedCheckpoint,
    compare_model_configs,
    load_checkpoint,
    save_checkpoint,
)
from neuralinterp.config import ExperimentConfig, TaskConfig
from neuralinterp.fuzzy import FuzzyExpr, RegressionDataset, gen_dataset, sample_expressions
from neuralinterp.model import NeuralInterpreter, add_functions, create_model, drop_functions
from neuralinterp.models import (
    AblationKind,
    AblationRow,
    DatasetManifest,
    FinetuneRegime,
    TraceRecord,
)
from neuralinterp.output import (
    create_output_writer,
    read_dataset_manifest,
    trace_records,
    write_ablation_csv,
    write_dataset_manifest,
    write_eval_csv,
    write_metrics_csv,
    write_routing_summary,
    write_trace,
)
from neuralinterp.routing import RoutingRecorder
from neuralinterp.training import TrainResult, evaluate_model, finetune, pretrain
from neuralinterp.utils import format_duration, mask_label, timed

logger = logging.getLogger(__name__)

DATASET_MANIFEST = "dataset.yaml"
PRETRAIN_DIR = "pretrain"
LAST_DIR = "last"
TRACE_BATCH_SIZE = 256


class ExperimentError(Exception):
    """Raised when an experiment cannot run with the given inputs."""
    pass


@dataclass
class TaskDatasets:
    """The two regression datasets plus the manifest they were built from."""
    manifest: DatasetManifest
    pretrain: RegressionDataset
    adapt: RegressionDataset

    def get(self, name: str) -> RegressionDataset:
        if name == "pretrain":
            return self.pretrain
        if name == "adapt":
            return self.adapt
        raise ExperimentError(f"Unknown dataset: {name}. Must be 'pretrain' or 'adapt'.")


# ============== Datasets ==============

def generate_datasets(task: TaskConfig) -> TaskDatasets:
    """
    Sample pretraining then adaptation truth tables and build both datasets.

    Tables come from one generator seeded with task.seed; inputs and splits
    use task.seed for pretraining and task.seed + 1 for adaptation.
    """
    rng = np.random.default_rng(task.seed)
    pretrain_exprs = sample_expressions(task.n_pretrain_tasks, task.n_vars, rng)
    adapt_exprs = sample_expressions(task.n_adapt_tasks, task.n_vars, rng)
    manifest = DatasetManifest(
        n_vars=task.n_vars,
        num_samples=task.num_samples,
        seed=task.seed,
        pretrain_seed=task.seed,
        adapt_seed=task.seed + 1,
        pretrain_tables=[e.to_hex() for e in pretrain_exprs],
        adapt_tables=[e.to_hex() for e in adapt_exprs],
    )
    return datasets_from_manifest(manifest)


def datasets_from_manifest(manifest: DatasetManifest) -> TaskDatasets:
    """Regenerate both datasets from the tables and seeds of a manifest."""
    pretrain_exprs = [FuzzyExpr.from_hex(t, manifest.n_vars) for t in manifest.pretrain_tables]
    adapt_exprs = [FuzzyExpr.from_hex(t, manifest.n_vars) for t in manifest.adapt_tables]
    return TaskDatasets(
        manifest=manifest,
        pretrain=gen_dataset(pretrain_exprs, manifest.num_samples, manifest.pretrain_seed),
        adapt=gen_dataset(adapt_exprs, manifest.num_samples, manifest.adapt_seed),
    )


def load_task_datasets(config: ExperimentConfig) -> TaskDatasets:
    """
    Load the datasets written by cmd_gen for this run directory.

    Raises:
        ExperimentError: If the manifest is missing or the model cannot read it
    """
    path = create_output_writer(config.output).path(DATASET_MANIFEST)
    if not path.exists():
        raise ExperimentError(f"No dataset manifest at {path}; run 'neuralinterp gen' first")
    manifest = read_dataset_manifest(path)
    if manifest.n_vars != config.model.n_inputs:
        raise ExperimentError(
            f"Dataset has {manifest.n_vars} variables but model.n_inputs is "
            f"{config.model.n_inputs}"
        )
    return datasets_from_manifest(manifest)


def cmd_gen(config: ExperimentConfig) -> DatasetManifest:
    """
    Write the dataset manifest (hex truth tables and seeds), optionally CSVs.

    Raises:
        OutputError: If the manifest exists and overwrite is off
    """
    writer = create_output_writer(config.output)
    manifest_path = writer.prepare(DATASET_MANIFEST)
    datasets = generate_datasets(config.task)
    manifest = datasets.manifest

    if config.task.export_csv:
        for name in ("pretrain", "adapt"):
            csv_path = datasets.get(name).to_csv(writer.path(f"{name}.csv"))
            manifest.csv_files.append(csv_path.name)

    write_dataset_manifest(manifest_path, manifest)
    logger.info(
        f"Wrote {manifest_path}: {len(manifest.pretrain_tables)} pretraining + "
        f"{len(manifest.adapt_tables)} adaptation tasks over {manifest.n_vars} variables"
    )
    return manifest


# ============== Training commands ==============

def _check_checkpoint(loaded: LoadedCheckpoint, config: ExperimentConfig) -> None:
    problems = compare_model_configs(loaded.config.model, config.model)
    if problems:
        raise ExperimentError(
            "Checkpoint does not match the configuration: " + "; ".join(problems)
        )


def _save_run(
    result: TrainResult,
    run_dir: Path,
    config: ExperimentConfig,
) -> Path:
    """Best-validation checkpoint, last-epoch checkpoint with state, metrics CSV."""
    manifest_path = save_checkpoint(result.model, run_dir, config)
    last = result.model.clone()
    last.params.load_state_dict(result.last_params)
    save_checkpoint(last, run_dir / LAST_DIR, config, result.state)
    write_metrics_csv(run_dir / "metrics.csv", result.history)
    return manifest_path


def cmd_pretrain(config: ExperimentConfig, resume: bool = False) -> TrainResult:
    """
    Pretrain on the pretraining tasks and write the checkpoint and metrics.

    With `resume`, training continues from the last-epoch checkpoint of an
    earlier run in the same directory up to training.pretrain_epochs.

    Raises:
        ExperimentError: On a task/CLS count mismatch or nothing left to resume
    """
    datasets = load_task_datasets(config)
    n_tasks = datasets.pretrain.num_tasks
    if n_tasks != config.model.n_cls:
        raise ExperimentError(
            f"Dataset has {n_tasks} pretraining tasks but model.n_cls is {config.model.n_cls}"
        )
    writer = create_output_writer(config.output)

    state = None
    if resume:
        loaded = load_checkpoint(writer.path(PRETRAIN_DIR, LAST_DIR))
        _check_checkpoint(loaded, config)
        if loaded.state is None:
            raise ExperimentError("The last-epoch checkpoint carries no training state")
        model = loaded.model
        state = loaded.state
        remaining = config.training.pretrain_epochs - state.epoch
        if remaining < 1:
            raise ExperimentError(
                f"Run already completed {state.epoch} of {config.training.pretrain_epochs} epochs"
            )
        run_config = replace(
            config, training=replace(config.training, pretrain_epochs=remaining)
        )
        run_dir = writer.path(PRETRAIN_DIR)
    else:
        run_dir = writer.prepare(PRETRAIN_DIR)
        model = create_model(config.model, config.training.seed)
        run_config = config

    with timed() as elapsed:
        result = pretrain(model, datasets.pretrain, run_config, state)
    _save_run(result, run_dir, config)
    best = result.best
    logger.info(
        f"Pretraining finished in {format_duration(elapsed())}; best epoch "
        f"{result.best_epoch} (mean R^2 {best.mean_r2 if best else float('nan'):.4f})"
    )
    return result


def cmd_finetune(
    config: ExperimentConfig,
    checkpoint: str | Path,
    regime: FinetuneRegime | str | None = None,
) -> TrainResult:
    """
    Finetune a pretrained checkpoint on the adaptation tasks under a regime.

    Raises:
        ExperimentError: On a checkpoint/config mismatch
    """
    regime = FinetuneRegime(regime or config.training.regime)
    loaded = load_checkpoint(checkpoint)
    _check_checkpoint(loaded, config)
    datasets = load_task_datasets(config)
    run_dir = create_output_writer(config.output).prepare(f"finetune_{regime.value}")

    with timed() as elapsed:
        result = finetune(loaded.model, datasets.adapt, regime, config)
    _save_run(result, run_dir, config)
    logger.info(f"Finetuning ({regime.value}) finished in {format_duration(elapsed())}")
    return result


# ============== Ablations ==============

def default_drop_masks(n_functions: int) -> list[list[bool]]:
    """The full mask followed by every single-function drop."""
    masks = [[True] * n_functions]
    for u in range(n_functions):
        masks.append([v != u for v in range(n_functions)])
    return masks


def ablate_drop(
    model: NeuralInterpreter,
    dataset: RegressionDataset,
    masks: list[list[bool]],
    seed: int,
) -> list[AblationRow]:
    """Validation R^2 with each keep mask applied to every script."""
    x, y = dataset.split("val")
    rows = []
    for mask in masks:
        if len(mask) != model.n_functions:
            raise ExperimentError(
                f"Drop mask {mask_label(mask)} has {len(mask)} entries, "
                f"model has {model.n_functions} functions"
            )
        if not any(mask):
            raise ExperimentError("A drop mask must keep at least one function")
        view = drop_functions(model, mask)
        loss, r2 = evaluate_model(view.model, x, y, keep_masks=view.keep_masks)
        rows.append(AblationRow(AblationKind.DROP, f"keep={mask_label(mask)}", seed, r2, loss))
    return rows


def ablate_anytime(
    model: NeuralInterpreter,
    dataset: RegressionDataset,
    sweep: list[int],
    seed: int,
) -> list[AblationRow]:
    """Validation R^2 for each number of function iterations."""
    bad = [n for n in sweep if n < 1]
    if bad:
        raise ExperimentError(f"Function iteration counts must be >= 1, got {bad}")
    x, y = dataset.split("val")
    rows = []
    for n_iterations in sweep:
        loss, r2 = evaluate_model(model, x, y, n_iterations=n_iterations)
        rows.append(AblationRow(AblationKind.ANYTIME, f"n_i={n_iterations}", seed, r2, loss))
    return rows


def ablate_extend(
    model: NeuralInterpreter,
    dataset: RegressionDataset,
    config: ExperimentConfig,
) -> list[AblationRow]:
    """
    Finetune copies of the model with k added functions per script.

    Only the new CLS tokens and the new signatures/codes are trained.
    """
    rows = []
    for seed in config.ablation.seeds:
        run_config = replace(config, training=replace(config.training, seed=seed))
        for k in config.ablation.added_functions:
            candidate = model.clone()
            extra: list[str] = []
            if k > 0:
                extra = add_functions(candidate, k, np.random.default_rng([seed, k])).names
            result = finetune(
                candidate, dataset, FinetuneRegime.CLS_ONLY, run_config, extra=extra
            )
            best = result.best
            assert best is not None
            rows.append(
                AblationRow(AblationKind.EXTEND, f"added={k}", seed, best.r2, best.val_loss)
            )
    return rows


def cmd_ablate(
    config: ExperimentConfig,
    checkpoint: str | Path,
    kind: AblationKind | str,
) -> list[AblationRow]:
    """
    Run one structural ablation against a trained checkpoint.

    drop and anytime evaluate on the pretraining validation split; extend
    finetunes on the adaptation tasks.

    Returns:
        Report rows (also written as ablate_<kind>.csv)
    """
    try:
        kind = AblationKind(kind)
    except ValueError:
        raise ExperimentError(f"Unknown ablation kind: {kind}") from None
    loaded = load_checkpoint(checkpoint)
    _check_checkpoint(loaded, config)
    datasets = load_task_datasets(config)
    model = loaded.model
    report = create_output_writer(config.output).prepare(f"ablate_{kind.value}.csv")
    seed = loaded.manifest.seed

    if kind == AblationKind.EXTEND:
        rows = ablate_extend(model, datasets.adapt, config)
    else:
        _require_tasks(model, datasets.pretrain, "pretrain")
        if kind == AblationKind.DROP:
            masks = config.ablation.drop_masks or default_drop_masks(model.n_functions)
            rows = ablate_drop(model, datasets.pretrain, masks, seed)
        else:
            rows = ablate_anytime(model, datasets.pretrain, config.ablation.iteration_sweep, seed)

    write_ablation_csv(report, rows)
    for row in rows:
        logger.info(f"[{kind.value}] {row.setting} seed={row.seed}: mean R^2 {row.mean_r2:.4f}")
    return rows


# ============== Diagnostics ==============

def _require_tasks(model: NeuralInterpreter, dataset: RegressionDataset, name: str) -> None:
    if dataset.num_tasks != model.config.n_cls:
        raise ExperimentError(
            f"The {name} dataset has {dataset.num_tasks} tasks but the checkpoint has "
            f"{model.config.n_cls} CLS tokens"
        )


def collect_trace(
    model: NeuralInterpreter,
    inputs: np.ndarray,
    batch_size: int = TRACE_BATCH_SIZE,
) -> list[TraceRecord]:
    """Routing records for every row of `inputs`, without a tape."""
    records = []
    for start in range(0, inputs.shape[0], batch_size):
        recorder = RoutingRecorder()
        model.predict(inputs[start:start + batch_size], recorder=recorder)
        records.extend(trace_records(recorder.captures, sample_offset=start))
    return records


def cmd_trace(
    config: ExperimentConfig,
    checkpoint: str | Path,
    samples: int,
    from_init: bool = False,
) -> int:
    """
    Export the routing of the first `samples` pretraining validation rows.

    With `from_init`, a freshly initialized model with the checkpoint's
    config and seed is traced instead.

    Returns:
        Number of records written
    """
    if samples < 1:
        raise ExperimentError(f"Need at least one sample to trace, got {samples}")
    loaded = load_checkpoint(checkpoint)
    model = loaded.model
    if from_init:
        model = create_model(loaded.config.model, loaded.manifest.seed)
    x, _ = load_task_datasets(config).pretrain.split("val")
    if samples > x.shape[0]:
        raise ExperimentError(
            f"Only {x.shape[0]} validation samples available, asked for {samples}"
        )

    stem = "trace_init" if from_init else "trace"
    writer = create_output_writer(config.output)
    trace_path = writer.prepare(f"{stem}.jsonl")
    records = collect_trace(model, x[:samples])
    count = write_trace(trace_path, records)
    write_routing_summary(writer.path(f"{stem}_summary.csv"), records)
    logger.info(f"Wrote {count} routing records to {trace_path}")
    return count


def cmd_eval(
    config: ExperimentConfig,
    checkpoint: str | Path,
    dataset: str = "pretrain",
    split: str = "val",
) -> tuple[float, list[float]]:
    """
    Evaluate a checkpoint on one split of one dataset.

    Returns:
        Tuple of (mse, r2 per task)
    """
    loaded = load_checkpoint(checkpoint)
    data = load_task_datasets(config).get(dataset)
    _require_tasks(loaded.model, data, dataset)
    if split not in ("train", "val"):
        raise ExperimentError(f"Unknown split: {split}. Must be 'train' or 'val'.")
    x, y = data.split(split)
    loss, r2 = evaluate_model(loaded.model, x, y)
    report = create_output_writer(config.output).prepare(f"eval_{dataset}_{split}.csv")
    write_eval_csv(report, dataset, split, loss, r2)
    logger.info(f"{dataset}/{split}: mse={loss:.6f} mean R^2={sum(r2) / len(r2):.4f}")
    return loss, r2

