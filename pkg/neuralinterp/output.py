"""
Output writers for neuralinterp.

Metrics and ablation reports as CSV, routing traces as JSON Lines, and the
YAML dataset manifest.
"""

import csv
import logging
from collections.abc import Iterable
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from neuralinterp.config import OutputConfig
from neuralinterp.models import AblationRow, DatasetManifest, EpochMetrics, TraceRecord
from neuralinterp.routing import RoutingCapture

logger = logging.getLogger(__name__)


class OutputError(Exception):
    """Raised when output generation fails."""
    pass


def _r2_columns(count: int) -> list[str]:
    return [f"r2_task{t}" for t in range(count)]


def _write_rows(path: Path, header: list[str], rows: list[list]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise OutputError(f"Failed to write {path}: {e}") from e
    return path


# ============== CSV reports ==============

def write_metrics_csv(path: str | Path, history: list[EpochMetrics]) -> Path:
    """
    Write per-epoch metrics, one row per (epoch, split).

    Columns: phase, epoch, split, loss, mean_r2, r2_task0.., lr, seconds.
    R² is only known for the validation split.
    """
    n_tasks = max((len(m.r2) for m in history), default=0)
    header = ["phase", "epoch", "split", "loss", "mean_r2"] + _r2_columns(n_tasks)
    header += ["lr", "seconds"]
    rows = []
    for m in history:
        blank = [""] * n_tasks
        rows.append([m.phase, m.epoch, "train", m.train_loss, ""] + blank + [m.lr, m.seconds])
        r2 = [*m.r2, *[""] * (n_tasks - len(m.r2))]
        rows.append([m.phase, m.epoch, "val", m.val_loss, m.mean_r2] + r2 + [m.lr, m.seconds])
    return _write_rows(Path(path), header, rows)


def write_ablation_csv(path: str | Path, rows: list[AblationRow]) -> Path:
    """Write an ablation report: kind, setting, seed, val_loss, mean_r2, r2_task0.."""
    n_tasks = max((len(r.r2) for r in rows), default=0)
    header = ["kind", "setting", "seed", "val_loss", "mean_r2"] + _r2_columns(n_tasks)
    body = [
        [r.kind.value, r.setting, r.seed, r.val_loss, r.mean_r2]
        + [*r.r2, *[""] * (n_tasks - len(r.r2))]
        for r in rows
    ]
    return _write_rows(Path(path), header, body)


def write_eval_csv(
    path: str | Path,
    dataset: str,
    split: str,
    loss: float,
    r2: list[float],
) -> Path:
    """Write per-task R² of one evaluation."""
    rows = [[dataset, split, t, loss, value] for t, value in enumerate(r2)]
    return _write_rows(Path(path), ["dataset", "split", "task", "loss", "r2"], rows)


# ============== Routing traces ==============

def trace_records(
    captures: list[RoutingCapture],
    sample_offset: int = 0,
) -> list[TraceRecord]:
    """
    Split batched routing captures into one record per (sample, script, iteration).

    Args:
        captures: Captures of one forward pass, in execution order
        sample_offset: Index of the first sample of the batch

    Returns:
        Records ordered by sample, then script, then iteration
    """
    if not captures:
        return []
    batch = captures[0].compatibility.shape[0]
    records = []
    for b in range(batch):
        for capture in captures:
            records.append(
                TraceRecord(
                    sample=sample_offset + b,
                    script=capture.script,
                    iteration=capture.iteration,
                    compatibility=capture.compatibility[b].tolist(),
                    types=capture.types[b].tolist(),
                    closest_function=[int(i) for i in capture.closest[b]],
                )
            )
    return records


def write_trace(path: str | Path, records: Iterable[TraceRecord]) -> int:
    """
    Write records as JSON Lines.

    Returns:
        Number of records written
    """
    path = Path(path)
    count = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(record.model_dump_json())
                f.write("\n")
                count += 1
    except OSError as e:
        raise OutputError(f"Failed to write trace {path}: {e}") from e
    return count


def read_trace(path: str | Path) -> list[TraceRecord]:
    """
    Read and validate a JSON Lines trace.

    Raises:
        OutputError: On a missing file or an invalid record
    """
    path = Path(path)
    if not path.exists():
        raise OutputError(f"Trace file not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(TraceRecord.model_validate_json(line))
            except ValidationError as e:
                raise OutputError(f"{path}:{lineno}: invalid trace record: {e}") from e
    return records


def routing_summary(records: list[TraceRecord]) -> list[dict]:
    """
    Mean compatibility mass per (script, iteration, function).

    The mass of function u is the average over samples and elements of C_ui.
    """
    grouped: dict[tuple[int, int], list[np.ndarray]] = {}
    for record in records:
        grouped.setdefault((record.script, record.iteration), []).append(
            np.asarray(record.compatibility)
        )
    rows = []
    for (script, iteration), matrices in sorted(grouped.items()):
        mass = np.mean(np.stack(matrices), axis=(0, 2))
        for function, value in enumerate(mass):
            rows.append({
                "script": script,
                "iteration": iteration,
                "function": function,
                "mean_compatibility": float(value),
            })
    return rows


def write_routing_summary(path: str | Path, records: list[TraceRecord]) -> Path:
    rows = routing_summary(records)
    header = ["script", "iteration", "function", "mean_compatibility"]
    return _write_rows(Path(path), header, [[row[k] for k in header] for row in rows])


# ============== Dataset manifest ==============

def write_dataset_manifest(path: str | Path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(manifest.to_dict(), f, sort_keys=False)
    except OSError as e:
        raise OutputError(f"Failed to write dataset manifest {path}: {e}") from e
    return path


def read_dataset_manifest(path: str | Path) -> DatasetManifest:
    """
    Read a dataset manifest written by write_dataset_manifest.

    Raises:
        OutputError: If the file is missing or malformed
    """
    path = Path(path)
    if not path.exists():
        raise OutputError(f"Dataset manifest not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            return DatasetManifest.from_dict(yaml.safe_load(f))
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as e:
        raise OutputError(f"Invalid dataset manifest {path}: {e}") from e


# ============== Run directory ==============

class OutputWriter:
    """
    Resolves output files under the configured run directory.
    """

    def __init__(self, output_config: OutputConfig) -> None:
        """
        Initialize output writer.

        Args:
            output_config: Output configuration
        """
        self.config = output_config
        self.directory = Path(output_config.directory)

    def path(self, *parts: str) -> Path:
        return self.directory.joinpath(*parts)

    def prepare(self, *parts: str) -> Path:
        """
        Path for a new output, refusing to clobber unless overwrite is set.

        Raises:
            OutputError: If the target exists and overwrite is off
        """
        target = self.path(*parts)
        if target.exists() and not self.config.overwrite:
            raise OutputError(
                f"{target} already exists; pass --overwrite or set output.overwrite: true"
            )
        target.parent.mkdir(parents=True, exist_ok=True)
        return target


def create_output_writer(output_config: OutputConfig) -> OutputWriter:
    """
    Create an output writer.

    Args:
        output_config: Output configuration

    Returns:
        OutputWriter instance
    """
    return OutputWriter(output_config)
