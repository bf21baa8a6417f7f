"""
Data models for neuralinterp.

Enums, plain records passed between the training loop and the writers, and
the pydantic schemas of files that are read back and validated.
"""

from dataclasses import dataclass, field
from enum import Enum

from pydantic import BaseModel, Field


class PositionalMode(str, Enum):
    """How input elements learn where they sit."""
    LEARNED_1D = "learned-1d"
    RELATIVE_GRID = "relative-grid"
    NONE = "none"


class ElementRole(str, Enum):
    """Role of a set element."""
    INPUT = "input"
    CLS = "cls"


class FinetuneRegime(str, Enum):
    """Which parameter groups finetuning may update."""
    CLS_ONLY = "cls_only"
    CLS_PLUS_TYPE = "cls_plus_type"
    ALL = "all"


class AblationKind(str, Enum):
    """Structural ablation families."""
    DROP = "drop"
    EXTEND = "extend"
    ANYTIME = "anytime"


class StreamAggregation(str, Enum):
    """How the interpreter adds function streams back onto its input."""
    UPDATES = "updates"  # y = x + sum_u C_u * (stream_u - x)
    STREAMS = "streams"  # y = x + sum_u C_u * stream_u


@dataclass
class EpochMetrics:
    """
    Metrics of one training epoch.

    Attributes:
        epoch: 1-based epoch index
        phase: "pretrain" or "finetune"
        train_loss: Mean training loss over the epoch's batches
        val_loss: Validation loss after the epoch
        r2: Validation R^2 per task
        lr: Learning rate in effect at the end of the epoch
        seconds: Wall-clock duration of the epoch
    """
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    r2: list[float] = field(default_factory=list)
    lr: float = 0.0
    seconds: float = 0.0

    @property
    def mean_r2(self) -> float:
        return sum(self.r2) / len(self.r2) if self.r2 else float("nan")

    def to_dict(self) -> dict:
        """Convert to dictionary for serialization."""
        return {
            "epoch": self.epoch,
            "phase": self.phase,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "r2": list(self.r2),
            "lr": self.lr,
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EpochMetrics":
        """Create from dictionary."""
        return cls(
            epoch=int(data["epoch"]),
            phase=data["phase"],
            train_loss=float(data["train_loss"]),
            val_loss=float(data["val_loss"]),
            r2=[float(v) for v in data.get("r2", [])],
            lr=float(data.get("lr", 0.0)),
            seconds=float(data.get("seconds", 0.0)),
        )


@dataclass
class AblationRow:
    """
    One line of an ablation report.

    Attributes:
        kind: Ablation family
        setting: Human-readable setting, e.g. "keep=1011", "added=2", "n_i=4"
        seed: Seed of the run that produced the row
        r2: Per-task R^2
        val_loss: Validation MSE
    """
    kind: AblationKind
    setting: str
    seed: int
    r2: list[float]
    val_loss: float

    @property
    def mean_r2(self) -> float:
        return sum(self.r2) / len(self.r2) if self.r2 else float("nan")

    def to_dict(self) -> dict:
        """Convert to dictionary for serialization."""
        return {
            "kind": self.kind.value,
            "setting": self.setting,
            "seed": self.seed,
            "mean_r2": self.mean_r2,
            "val_loss": self.val_loss,
            "r2": list(self.r2),
        }


@dataclass
class DatasetManifest:
    """
    Everything needed to regenerate the two regression datasets.

    Attributes:
        n_vars: Number of fuzzy input variables N
        num_samples: Samples per dataset
        seed: Seed the truth tables were sampled with
        pretrain_seed: Seed for pretraining inputs and split
        adapt_seed: Seed for adaptation inputs and split
        pretrain_tables: Hex-encoded truth tables of the pretraining tasks
        adapt_tables: Hex-encoded truth tables of the adaptation tasks
        csv_files: Exported CSV paths, if any
    """
    n_vars: int
    num_samples: int
    seed: int
    pretrain_seed: int
    adapt_seed: int
    pretrain_tables: list[str]
    adapt_tables: list[str]
    csv_files: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Convert to dictionary for serialization."""
        return {
            "n_vars": self.n_vars,
            "num_samples": self.num_samples,
            "seed": self.seed,
            "pretrain_seed": self.pretrain_seed,
            "adapt_seed": self.adapt_seed,
            "pretrain_tables": list(self.pretrain_tables),
            "adapt_tables": list(self.adapt_tables),
            "csv_files": list(self.csv_files),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        """Create from dictionary."""
        return cls(
            n_vars=int(data["n_vars"]),
            num_samples=int(data["num_samples"]),
            seed=int(data["seed"]),
            pretrain_seed=int(data["pretrain_seed"]),
            adapt_seed=int(data["adapt_seed"]),
            pretrain_tables=[str(t) for t in data["pretrain_tables"]],
            adapt_tables=[str(t) for t in data["adapt_tables"]],
            csv_files=[str(p) for p in data.get("csv_files", [])],
        )


# ============== File schemas ==============

class TensorEntry(BaseModel):
    """Location of one parameter tensor inside a checkpoint blob."""
    name: str
    shape: list[int]
    offset: int = Field(ge=0, description="Byte offset into the blob")
    count: int = Field(ge=0, description="Number of float64 values")


class TrainStateEntry(BaseModel):
    """Optimizer progress stored next to the parameters."""
    step: int = 0
    epoch: int = 0
    lr: float = 0.0
    seed: int = 0
    moment_prefix: str = "optimizer"
    history: list[dict] = Field(default_factory=list)


class CheckpointManifest(BaseModel):
    """Text manifest written next to a checkpoint blob."""
    format_version: int = 1
    config: dict
    config_hash: str
    seed: int
    blob: str
    blob_bytes: int = Field(ge=0)
    tensors: list[TensorEntry]
    train_state: TrainStateEntry | None = None


class TraceRecord(BaseModel):
    """Routing of one sample through one function iteration of one script."""
    sample: int
    script: int
    iteration: int
    compatibility: list[list[float]]
    types: list[list[float]]
    closest_function: list[int]
