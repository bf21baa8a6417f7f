"""
File-based checkpoints for neuralinterp.

A checkpoint is a YAML manifest (config, seed, tensor table, optional
training state) next to one raw blob of little-endian float64 values.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from neuralinterp.config import (
    ConfigError,
    ExperimentConfig,
    ModelConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
)
from neuralinterp.model import NeuralInterpreter, create_model
from neuralinterp.models import (
    CheckpointManifest,
    EpochMetrics,
    TensorEntry,
    TrainStateEntry,
)
from neuralinterp.params import ModelError
from neuralinterp.training import OptimizerState, TrainState

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f8")
MANIFEST_NAME = "checkpoint.yaml"
BLOB_NAME = "checkpoint.bin"

# Architecture keys a checkpoint and a requested config must agree on.
ARCHITECTURE_KEYS = (
    "n_inputs", "d_in", "d_out", "dim", "code_dim", "type_dim", "head_dim",
    "n_heads", "n_scripts", "n_locs", "n_functions", "positional_mode", "grid_shape",
    "relpos_dim", "aggregation",
)


class CheckpointError(Exception):
    """Raised when checkpoint operations fail."""
    pass


@dataclass
class LoadedCheckpoint:
    """
    A model restored from disk.

    Attributes:
        model: Interpreter with every tensor restored
        config: Experiment configuration stored with it
        manifest: Validated manifest
        state: Training state, if one was saved
    """
    model: NeuralInterpreter
    config: ExperimentConfig
    manifest: CheckpointManifest
    state: TrainState | None = None


def _paths(path: str | Path) -> tuple[Path, Path]:
    """Manifest and blob paths for a checkpoint directory or manifest file."""
    path = Path(path)
    if path.suffix in (".yaml", ".yml"):
        return path, path.with_suffix(".bin")
    return path / MANIFEST_NAME, path / BLOB_NAME


def _moment_name(prefix: str, kind: str, name: str) -> str:
    return f"{prefix}.{kind}.{name}"


def save_checkpoint(
    model: NeuralInterpreter,
    path: str | Path,
    config: ExperimentConfig,
    state: TrainState | None = None,
) -> Path:
    """
    Write a model (and optionally its training state) to disk.

    Tensors are written in sorted name order, so saving a reloaded model
    reproduces the blob byte for byte.

    Args:
        model: Model to save
        path: Checkpoint directory, or a manifest path ending in .yaml
        config: Experiment configuration; its model section is replaced by
            the model's live config (added functions, new CLS tokens)
        state: Optional TrainState to store with the parameters

    Returns:
        Path of the written manifest

    Raises:
        CheckpointError: If the files cannot be written
    """
    manifest_path, blob_path = _paths(path)
    saved_config = replace(config, model=replace(model.config))

    arrays: dict[str, np.ndarray] = dict(model.params.state_dict())
    state_entry = None
    if state is not None:
        prefix = "optimizer"
        state_entry = TrainStateEntry(
            step=state.optimizer.step,
            epoch=state.epoch,
            lr=state.lr,
            seed=state.seed,
            moment_prefix=prefix,
            history=[m.to_dict() for m in state.history],
        )
        for name, value in state.optimizer.m.items():
            arrays[_moment_name(prefix, "m", name)] = value
        for name, value in state.optimizer.v.items():
            arrays[_moment_name(prefix, "v", name)] = value

    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        data = np.array(arrays[name], dtype=BLOB_DTYPE, order="C")
        raw = data.tobytes()
        entries.append(
            TensorEntry(name=name, shape=list(data.shape), offset=offset, count=data.size)
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = CheckpointManifest(
        config=config_to_dict(saved_config),
        config_hash=config_hash(saved_config),
        seed=model.seed,
        blob=blob_path.name,
        blob_bytes=offset,
        tensors=entries,
        train_state=state_entry,
    )

    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        blob_path.write_bytes(b"".join(chunks))
        with open(manifest_path, "w", encoding="utf-8") as f:
            yaml.safe_dump(manifest.model_dump(), f, sort_keys=False)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint: {e}") from e

    logger.info(f"Saved checkpoint {manifest_path} ({len(entries)} tensors, {offset} bytes)")
    return manifest_path


def read_manifest(path: str | Path) -> CheckpointManifest:
    """
    Read and validate a checkpoint manifest.

    Raises:
        CheckpointError: If the manifest is missing or malformed
    """
    manifest_path, _ = _paths(path)
    if not manifest_path.exists():
        raise CheckpointError(f"Checkpoint manifest not found: {manifest_path}")
    try:
        with open(manifest_path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
        return CheckpointManifest.model_validate(data)
    except yaml.YAMLError as e:
        raise CheckpointError(f"Invalid YAML in checkpoint manifest: {e}") from e
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint manifest {manifest_path}: {e}") from e


def read_tensors(path: str | Path, manifest: CheckpointManifest) -> dict[str, np.ndarray]:
    """
    Read every tensor listed in a manifest from its blob.

    Raises:
        CheckpointError: On a missing blob or a blob/manifest length mismatch
    """
    manifest_path, _ = _paths(path)
    blob_path = manifest_path.parent / manifest.blob
    if not blob_path.exists():
        raise CheckpointError(f"Checkpoint blob not found: {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest.blob_bytes:
        raise CheckpointError(
            f"Blob {blob_path} has {len(blob)} bytes, manifest expects {manifest.blob_bytes}"
        )

    tensors = {}
    for entry in manifest.tensors:
        expected = int(np.prod(entry.shape, dtype=np.int64))
        end = entry.offset + entry.count * BLOB_DTYPE.itemsize
        if expected != entry.count or end > len(blob):
            raise CheckpointError(
                f"Tensor {entry.name} (shape {entry.shape}, {entry.count} values at "
                f"offset {entry.offset}) does not fit the {len(blob)}-byte blob"
            )
        values = np.frombuffer(blob, dtype=BLOB_DTYPE, count=entry.count, offset=entry.offset)
        tensors[entry.name] = values.astype(np.float64).reshape(entry.shape)
    return tensors


def _restore_state(manifest: CheckpointManifest, tensors: dict[str, np.ndarray]) -> TrainState:
    entry = manifest.train_state
    assert entry is not None
    optimizer = OptimizerState(step=entry.step)
    for kind, target in (("m", optimizer.m), ("v", optimizer.v)):
        marker = f"{entry.moment_prefix}.{kind}."
        for name, value in tensors.items():
            if name.startswith(marker):
                target[name[len(marker):]] = value
    return TrainState(
        optimizer=optimizer,
        seed=entry.seed,
        epoch=entry.epoch,
        lr=entry.lr,
        history=[EpochMetrics.from_dict(m) for m in entry.history],
    )


def _apply_parameters(
    model: NeuralInterpreter,
    manifest: CheckpointManifest,
    tensors: dict[str, np.ndarray],
) -> None:
    prefix = manifest.train_state.moment_prefix + "." if manifest.train_state else None
    params = {
        name: value for name, value in tensors.items()
        if prefix is None or not name.startswith(prefix)
    }
    try:
        model.params.load_state_dict(params)
    except ModelError as e:
        raise CheckpointError(f"Checkpoint does not fit the model: {e}") from e


def load_parameters(model: NeuralInterpreter, path: str | Path) -> CheckpointManifest:
    """
    Load a checkpoint's parameters into an existing model.

    Raises:
        CheckpointError: If a tensor is missing, unexpected, or has the
            wrong shape (the message names the tensor)
    """
    manifest = read_manifest(path)
    _apply_parameters(model, manifest, read_tensors(path, manifest))
    return manifest


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    """
    Rebuild a model from its stored config and seed, then restore every tensor.

    Args:
        path: Checkpoint directory or manifest path

    Returns:
        LoadedCheckpoint

    Raises:
        CheckpointError: On malformed files or a config the tensors do not fit
    """
    manifest = read_manifest(path)
    try:
        config = config_from_dict(manifest.config)
    except ConfigError as e:
        raise CheckpointError(f"Checkpoint config is invalid: {e}") from e
    if config_hash(config) != manifest.config_hash:
        raise CheckpointError(
            f"Checkpoint config hash {manifest.config_hash} does not match its config "
            f"({config_hash(config)})"
        )

    try:
        model = create_model(config.model, manifest.seed)
    except ModelError as e:
        raise CheckpointError(f"Cannot rebuild model from checkpoint config: {e}") from e
    tensors = read_tensors(path, manifest)
    _apply_parameters(model, manifest, tensors)
    state = _restore_state(manifest, tensors) if manifest.train_state else None

    logger.info(
        f"Loaded checkpoint {path} (config {manifest.config_hash}, "
        f"{model.params.count()} parameters)"
    )
    return LoadedCheckpoint(model=model, config=config, manifest=manifest, state=state)


def compare_model_configs(saved: ModelConfig, requested: ModelConfig) -> list[str]:
    """
    Architecture disagreements between a checkpoint and a requested config.

    Returns:
        One message per differing key (empty if compatible)
    """
    problems = []
    for key in ARCHITECTURE_KEYS:
        a = getattr(saved, key)
        b = getattr(requested, key)
        if key == "grid_shape":
            a, b = list(saved.resolved_grid_shape()), list(requested.resolved_grid_shape())
        if a != b:
            problems.append(f"model.{key}: checkpoint has {_show(a)}, config has {_show(b)}")
    return problems


def _show(value: object) -> str:
    return str(value.value) if hasattr(value, "value") else str(value)
