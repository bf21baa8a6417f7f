"""
Configuration loader and validation for neuralinterp.

Loads YAML config files with environment variable substitution
and validates against expected schema.
"""

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from neuralinterp.models import FinetuneRegime, PositionalMode, StreamAggregation


class ConfigError(Exception):
    """Raised when configuration is invalid."""
    pass


OPTIMIZER_NAMES = ("adam", "radam")
SCHEDULE_NAMES = ("none", "cosine")


@dataclass
class ModelConfig:
    """Architecture hyperparameters."""
    n_inputs: int = 5
    d_in: int = 1
    d_out: int = 1
    dim: int = 64
    code_dim: int = 64
    type_dim: int = 24
    head_dim: int = 32
    n_heads: int = 1
    n_scripts: int = 2
    n_iterations: int = 2
    n_locs: int = 1
    n_functions: int = 4
    n_cls: int = 8
    tau: float = 1.6
    positional_mode: PositionalMode = PositionalMode.LEARNED_1D
    grid_shape: list[int] = field(default_factory=list)  # empty: [1, n_inputs]
    relpos_dim: int = 16
    freeze_signatures: bool = True
    freeze_codes: bool = False
    aggregation: StreamAggregation = StreamAggregation.UPDATES

    def resolved_grid_shape(self) -> tuple[int, int]:
        if self.grid_shape:
            return int(self.grid_shape[0]), int(self.grid_shape[1])
        return 1, self.n_inputs


@dataclass
class TaskConfig:
    """Fuzzy Boolean regression tasks."""
    n_vars: int = 5
    n_pretrain_tasks: int = 8
    n_adapt_tasks: int = 4
    num_samples: int = 16384
    seed: int = 0
    export_csv: bool = False


@dataclass
class OptimizerConfig:
    """Optimizer and learning-rate schedule."""
    name: str = "adam"  # adam | radam
    lr: float = 0.006
    finetune_lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "none"  # none | cosine
    lr_min: float | None = None  # None: lr / 100
    decay_fraction: float = 0.85


@dataclass
class TrainingConfig:
    """Training loop settings."""
    batch_size: int = 128
    pretrain_epochs: int = 20
    finetune_epochs: int = 3
    regime: FinetuneRegime = FinetuneRegime.ALL
    seed: int = 0


@dataclass
class AblationConfig:
    """Structural ablation sweeps."""
    drop_masks: list[list[bool]] = field(default_factory=list)  # empty: full + single drops
    added_functions: list[int] = field(default_factory=lambda: [0, 1, 2])
    iteration_sweep: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class OutputConfig:
    """Output configuration."""
    directory: str = "runs"
    overwrite: bool = False


@dataclass
class ExperimentConfig:
    """
    Complete experiment configuration.

    This is the root configuration object containing all settings.
    """
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "task": TaskConfig,
    "optimizer": OptimizerConfig,
    "training": TrainingConfig,
    "ablation": AblationConfig,
    "output": OutputConfig,
}


def substitute_env_vars(value: str) -> str:
    """
    Substitute environment variables in a string.

    Supports ${VAR_NAME} syntax.

    Args:
        value: String potentially containing ${VAR_NAME} patterns

    Returns:
        String with environment variables substituted

    Raises:
        ConfigError: If required environment variable is not set
    """
    pattern = r'\$\{([^}]+)\}'

    def replace_var(match: re.Match) -> str:
        var_name = match.group(1)
        env_value = os.environ.get(var_name)
        if env_value is None:
            raise ConfigError(
                f"Environment variable '{var_name}' is not set. "
                f"Please set it before running neuralinterp."
            )
        return env_value

    return re.sub(pattern, replace_var, value)


def process_env_vars(obj: Any) -> Any:
    """Recursively substitute environment variables in strings of a config tree."""
    if isinstance(obj, dict):
        return {k: process_env_vars(v) for k, v in obj.items()}
    elif isinstance(obj, list):
        return [process_env_vars(item) for item in obj]
    elif isinstance(obj, str):
        return substitute_env_vars(obj)
    return obj


def _positive(section: str, key: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"{section}.{key} must be an integer >= 1, got {value!r}")
    return value


def _enum(section: str, key: str, enum_type: type, value: Any) -> Any:
    try:
        return enum_type(value)
    except ValueError:
        allowed = ", ".join(member.value for member in enum_type)
        raise ConfigError(
            f"Invalid {section}.{key}: {value!r}. Must be one of: {allowed}"
        ) from None


def parse_model_config(data: dict | None) -> ModelConfig:
    """Parse model configuration."""
    if not data:
        return ModelConfig()

    counts = {}
    for key in (
        "n_inputs", "d_in", "d_out", "dim", "code_dim", "type_dim", "head_dim", "n_heads",
        "n_scripts", "n_iterations", "n_locs", "n_functions", "n_cls", "relpos_dim",
    ):
        counts[key] = _positive("model", key, data.get(key, getattr(ModelConfig, key)))

    tau = float(data.get("tau", 1.6))
    if not 0.0 <= tau < 2.0:
        raise ConfigError(f"model.tau must lie in [0, 2), got {tau}")

    grid_shape = [int(v) for v in data.get("grid_shape", []) or []]
    if grid_shape and (len(grid_shape) != 2 or min(grid_shape) < 1):
        raise ConfigError(f"model.grid_shape must be two positive integers, got {grid_shape}")

    mode = _enum(
        "model", "positional_mode", PositionalMode, data.get("positional_mode", "learned-1d")
    )
    aggregation = _enum(
        "model", "aggregation", StreamAggregation, data.get("aggregation", "updates")
    )
    config = ModelConfig(
        tau=tau,
        positional_mode=mode,
        grid_shape=grid_shape,
        freeze_signatures=bool(data.get("freeze_signatures", True)),
        freeze_codes=bool(data.get("freeze_codes", False)),
        aggregation=aggregation,
        **counts,
    )
    if mode == PositionalMode.RELATIVE_GRID:
        rows, cols = config.resolved_grid_shape()
        if rows * cols != config.n_inputs:
            raise ConfigError(
                f"model.grid_shape {[rows, cols]} does not cover {config.n_inputs} inputs"
            )
    return config


def parse_task_config(data: dict | None) -> TaskConfig:
    """Parse task configuration."""
    if not data:
        return TaskConfig()

    num_samples = int(data.get("num_samples", 16384))
    if num_samples < 10:
        raise ConfigError(f"task.num_samples must be >= 10, got {num_samples}")

    return TaskConfig(
        n_vars=_positive("task", "n_vars", data.get("n_vars", 5)),
        n_pretrain_tasks=_positive("task", "n_pretrain_tasks", data.get("n_pretrain_tasks", 8)),
        n_adapt_tasks=_positive("task", "n_adapt_tasks", data.get("n_adapt_tasks", 4)),
        num_samples=num_samples,
        seed=int(data.get("seed", 0)),
        export_csv=bool(data.get("export_csv", False)),
    )


def parse_optimizer_config(data: dict | None) -> OptimizerConfig:
    """Parse optimizer configuration."""
    if not data:
        return OptimizerConfig()

    name = data.get("name", "adam")
    if name not in OPTIMIZER_NAMES:
        raise ConfigError(f"Invalid optimizer name: {name}. Must be 'adam' or 'radam'.")
    schedule = data.get("schedule", "none")
    if schedule not in SCHEDULE_NAMES:
        raise ConfigError(f"Invalid schedule: {schedule}. Must be 'none' or 'cosine'.")

    decay_fraction = float(data.get("decay_fraction", 0.85))
    if not 0.0 < decay_fraction <= 1.0:
        raise ConfigError(f"optimizer.decay_fraction must lie in (0, 1], got {decay_fraction}")

    lr = float(data.get("lr", 0.006))
    finetune_lr = float(data.get("finetune_lr", 0.05))
    if lr <= 0 or finetune_lr <= 0:
        raise ConfigError("optimizer learning rates must be positive")

    lr_min = data.get("lr_min")
    return OptimizerConfig(
        name=name,
        lr=lr,
        finetune_lr=finetune_lr,
        beta1=float(data.get("beta1", 0.9)),
        beta2=float(data.get("beta2", 0.999)),
        eps=float(data.get("eps", 1e-8)),
        schedule=schedule,
        lr_min=None if lr_min is None else float(lr_min),
        decay_fraction=decay_fraction,
    )


def parse_training_config(data: dict | None) -> TrainingConfig:
    """Parse training configuration."""
    if not data:
        return TrainingConfig()

    return TrainingConfig(
        batch_size=_positive("training", "batch_size", data.get("batch_size", 128)),
        pretrain_epochs=_positive("training", "pretrain_epochs", data.get("pretrain_epochs", 20)),
        finetune_epochs=_positive("training", "finetune_epochs", data.get("finetune_epochs", 3)),
        regime=_enum("training", "regime", FinetuneRegime, data.get("regime", "all")),
        seed=int(data.get("seed", 0)),
    )


def parse_ablation_config(data: dict | None) -> AblationConfig:
    """Parse ablation configuration."""
    if not data:
        return AblationConfig()

    sweep = [int(v) for v in data.get("iteration_sweep", [1, 2, 4, 8])]
    if any(v < 1 for v in sweep):
        raise ConfigError(f"ablation.iteration_sweep values must be >= 1, got {sweep}")
    added = [int(v) for v in data.get("added_functions", [0, 1, 2])]
    if any(v < 0 for v in added):
        raise ConfigError(f"ablation.added_functions values must be >= 0, got {added}")

    return AblationConfig(
        drop_masks=[[bool(b) for b in mask] for mask in data.get("drop_masks", [])],
        added_functions=added,
        iteration_sweep=sweep,
        seeds=[int(v) for v in data.get("seeds", [0, 1, 2])] or [0],
    )


def parse_output_config(data: dict | None) -> OutputConfig:
    """Parse output configuration."""
    if not data:
        return OutputConfig()

    return OutputConfig(
        directory=str(data.get("directory", "runs")),
        overwrite=bool(data.get("overwrite", False)),
    )


def config_from_dict(data: dict | None) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a plain dictionary.

    Args:
        data: Mapping with optional sections model, task, optimizer,
            training, ablation, output

    Returns:
        Parsed configuration with defaults for every missing key

    Raises:
        ConfigError: On unknown sections or invalid values
    """
    data = data or {}
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown configuration sections: {', '.join(unknown)}")

    return ExperimentConfig(
        model=parse_model_config(data.get("model")),
        task=parse_task_config(data.get("task")),
        optimizer=parse_optimizer_config(data.get("optimizer")),
        training=parse_training_config(data.get("training")),
        ablation=parse_ablation_config(data.get("ablation")),
        output=parse_output_config(data.get("output")),
    )


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "value") and isinstance(value.value, str):
        return value.value
    return value


def config_to_dict(config: ExperimentConfig) -> dict:
    """Plain-data view of a configuration (enums as their string values)."""
    return _plain(asdict(config))


def config_hash(config: ExperimentConfig) -> str:
    """First 12 hex digits of SHA-256 over the canonical JSON of the config."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """
    Apply ``section.key=value`` overrides to raw config data.

    Values are parsed as YAML, so ``model.tau=1.4`` yields a float and
    ``ablation.iteration_sweep=[1,2]`` a list.

    Raises:
        ConfigError: On malformed overrides or unknown keys
    """
    result = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    for override in overrides:
        key, sep, raw_value = override.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"Override must look like section.key=value, got {override!r}")
        if section not in SECTIONS:
            raise ConfigError(f"Unknown configuration section in override: {section}")
        if name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"Unknown key in override: {section}.{name}")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse override value {raw_value!r}: {e}") from e
        result.setdefault(section, {})
        if result[section] is None:
            result[section] = {}
        result[section][name] = value
    return result


def load_config_data(config_path: str | Path | None) -> dict:
    """
    Read raw configuration data from a YAML file.

    Raises:
        ConfigError: If the YAML is invalid or not a mapping
        FileNotFoundError: If the file doesn't exist
    """
    if config_path is None:
        return {}

    path = Path(config_path)
    if not path.exists():
        raise FileNotFoundError(f"Configuration file not found: {path}")

    try:
        with open(path, encoding="utf-8") as f:
            raw_config = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in config file: {e}") from e

    if raw_config is None:
        return {}
    if not isinstance(raw_config, dict):
        raise ConfigError("Configuration file must contain a mapping of sections")

    return process_env_vars(raw_config)


def load_config(
    config_path: str | Path | None,
    overrides: list[str] | None = None,
) -> ExperimentConfig:
    """
    Load and validate configuration from a YAML file.

    Args:
        config_path: Path to the YAML configuration file (None: defaults)
        overrides: Optional ``section.key=value`` strings applied on top

    Returns:
        Validated ExperimentConfig object

    Raises:
        ConfigError: If configuration is invalid
        FileNotFoundError: If config file doesn't exist
    """
    data = load_config_data(config_path)
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def validate_config(config: ExperimentConfig) -> list[str]:
    """
    Validate configuration and return list of warnings.

    Args:
        config: Configuration to validate

    Returns:
        List of warning messages (empty if no warnings)
    """
    warnings = []
    model = config.model

    if not 1.2 <= model.tau <= 1.7:
        warnings.append(
            f"model.tau={model.tau} is outside the usual range [1.2, 1.7]; "
            f"routing may become too sparse or too dense"
        )
    if not 20 <= model.type_dim <= 50:
        warnings.append(f"model.type_dim={model.type_dim} is outside the usual range [20, 50]")
    if model.n_locs not in (1, 2):
        warnings.append(f"model.n_locs={model.n_locs}; one or two LOCs per script work best")
    if not model.freeze_signatures:
        warnings.append(
            "model.freeze_signatures is false; learned signatures can collapse onto each other"
        )
    if model.freeze_codes:
        warnings.append("model.freeze_codes is true; runs tend to be less consistent")
    if model.aggregation == StreamAggregation.STREAMS:
        depth = model.n_scripts * model.n_iterations
        warnings.append(
            f"model.aggregation=streams re-adds the input on every function iteration; "
            f"the embeddings reach the head scaled by up to {2 ** depth}"
        )

    opt = config.optimizer
    if opt.schedule == "cosine" and opt.lr_min is not None:
        ratio = opt.lr / opt.lr_min if opt.lr_min > 0 else float("inf")
        if not 30.0 <= ratio <= 300.0:
            warnings.append(
                f"cosine schedule anneals by a factor of {ratio:.0f}; "
                f"about two orders of magnitude is recommended"
            )

    if config.task.n_vars > 12:
        warnings.append(
            f"task.n_vars={config.task.n_vars} gives truth tables with "
            f"{2 ** config.task.n_vars} rows"
        )

    return warnings
