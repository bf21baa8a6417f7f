"""
Training for the interpreter model.

Multi-task MSE over CLS-token predictions, Adam (optionally rectified),
cosine annealing without warm-up, parameter groups for the three
finetuning regimes, and the pretrain/finetune loops with best-validation
retention.
"""

import logging
import math
import time
from collections.abc import Collection, Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from neuralinterp.autodiff import AutodiffError, Tape, Tensor, mul, reduce, sub
from neuralinterp.config import ExperimentConfig, OptimizerConfig
from neuralinterp.fuzzy import FuzzyError, RegressionDataset, r2_per_task
from neuralinterp.model import NeuralInterpreter
from neuralinterp.models import EpochMetrics, FinetuneRegime
from neuralinterp.params import ModelError

logger = logging.getLogger(__name__)

GROUP_NAMES = (
    "cls_tokens",
    "type_matching",
    "function_codes",
    "interpreter_and_embeddings",
    "regression_head",
)
EVAL_BATCH_SIZE = 1024
RADAM_THRESHOLD = 5.0
SIGNATURE_SUFFIX = ".signature"


class TrainingError(Exception):
    """Raised when training cannot proceed."""
    pass


# ============== Loss ==============

def multitask_mse(outputs: Tensor, targets: Tensor | np.ndarray) -> Tensor:
    """
    Mean squared error over batch and tasks.

    Raises:
        TrainingError: If shapes differ
    """
    target = targets if isinstance(targets, Tensor) else Tensor(targets)
    if outputs.shape != target.shape:
        raise TrainingError(
            f"Prediction shape {list(outputs.shape)} does not match targets {list(target.shape)}"
        )
    diff = sub(outputs, target)
    return reduce(mul(diff, diff), "mean")


# ============== Optimizer ==============

@dataclass
class OptimizerState:
    """Step counter and first/second moments per parameter name."""
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    rectified: bool = False,
    lr_scales: Mapping[str, float] | None = None,
) -> None:
    """
    One Adam update with bias correction, in place.

    With `rectified`, the adaptive step is scaled by the variance
    rectification term r_t while rho_t > 5 and replaced by the plain
    bias-corrected momentum step otherwise.

    Parameters named `*.signature` are projected back onto the unit sphere
    after their update.

    Args:
        params: Parameters to update
        grads: One gradient per parameter
        state: Moments and step counter (updated)
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator offset
        rectified: Use the rectified variant
        lr_scales: Optional per-parameter multipliers of lr

    Raises:
        TrainingError: On a missing or non-finite gradient
    """
    t = state.step + 1
    for name in params:
        if name not in grads:
            raise TrainingError(f"No gradient for trainable parameter {name}")
        if not np.isfinite(grads[name]).all():
            raise TrainingError(f"Non-finite gradient for {name} at step {t}")

    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    scale = 1.0
    adaptive = True
    if rectified:
        rho_inf = 2.0 / (1.0 - beta2) - 1.0
        rho_t = rho_inf - 2.0 * t * beta2 ** t / bias2
        if rho_t > RADAM_THRESHOLD:
            scale = math.sqrt(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
            )
        else:
            adaptive = False

    for name, param in params.items():
        grad = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * grad if m is None else beta1 * m + (1.0 - beta1) * grad
        v = (1.0 - beta2) * grad * grad if v is None else beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bias1
        step_lr = lr * (lr_scales.get(name, 1.0) if lr_scales else 1.0)
        if adaptive:
            update = step_lr * scale * m_hat / (np.sqrt(v / bias2) + eps)
        else:
            update = step_lr * m_hat
        data = param.data - update
        if name.endswith(SIGNATURE_SUFFIX):
            data = _project_to_sphere(name, data)
        param.data = data
    state.step = t


def _project_to_sphere(name: str, data: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(data)
    if norm == 0.0:
        raise TrainingError(f"Signature {name} collapsed to zero")
    return data / norm


class Adam:
    """
    Adam / RAdam over named parameters.

    Thin wrapper holding hyperparameters and an OptimizerState.
    """

    def __init__(
        self,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        rectified: bool = False,
        state: OptimizerState | None = None,
    ) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.rectified = rectified
        self.state = state or OptimizerState()

    def step(
        self,
        params: Mapping[str, Tensor],
        grads: Mapping[str, np.ndarray],
        lr: float,
        lr_scales: Mapping[str, float] | None = None,
    ) -> None:
        adam_step(
            params, grads, self.state, lr,
            self.beta1, self.beta2, self.eps, self.rectified, lr_scales,
        )


def create_optimizer(config: OptimizerConfig, state: OptimizerState | None = None) -> Adam:
    return Adam(
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        rectified=config.name == "radam",
        state=state,
    )


# ============== Schedules ==============

def cosine_schedule(step: int, lr_max: float, lr_min: float, decay_steps: int) -> float:
    """
    Cosine annealing from lr_max to lr_min over decay_steps, then constant.

    Raises:
        TrainingError: If decay_steps <= 0
    """
    if decay_steps <= 0:
        raise TrainingError(f"decay_steps must be positive, got {decay_steps}")
    progress = min(step, decay_steps) / decay_steps
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


def scheduled_lr(config: OptimizerConfig, base_lr: float, step: int, total_steps: int) -> float:
    """Learning rate for an optimizer step under the configured schedule."""
    if config.schedule == "none":
        return base_lr
    lr_min = config.lr_min if config.lr_min is not None else base_lr / 100.0
    decay_steps = max(1, round(config.decay_fraction * total_steps))
    return cosine_schedule(step, base_lr, lr_min, decay_steps)


# ============== Parameter groups ==============

def param_group_of(name: str) -> str:
    """Group a parameter name belongs to."""
    if name == "cls_tokens":
        return "cls_tokens"
    if name.startswith("head."):
        return "regression_head"
    if name.endswith(".code"):
        return "function_codes"
    if name.endswith(".signature") or name.endswith(".sigma_log") or ".type_mlp." in name:
        return "type_matching"
    return "interpreter_and_embeddings"


@dataclass
class ParamGroup:
    """A named set of parameters with a trainable flag and lr multiplier."""
    name: str
    params: list[str]
    trainable: bool = False
    lr_scale: float = 1.0


@dataclass
class ParamGroups:
    """
    Partition of a model's parameters into the five groups.

    Attributes:
        groups: Group name to ParamGroup
        frozen: Names held fixed even inside trainable groups
        extra: Names trained even inside frozen groups
    """
    groups: dict[str, ParamGroup]
    frozen: set[str] = field(default_factory=set)
    extra: set[str] = field(default_factory=set)

    def all_names(self) -> list[str]:
        return [name for group in self.groups.values() for name in group.params]

    def trainable_names(self) -> list[str]:
        names = []
        for group in self.groups.values():
            for name in group.params:
                if name in self.extra or (group.trainable and name not in self.frozen):
                    names.append(name)
        return names

    def trainable_count(self, model: NeuralInterpreter) -> int:
        return sum(model.params[name].size for name in self.trainable_names())

    def lr_scales(self) -> dict[str, float]:
        """Multiplier for every parameter whose group does not use the base lr."""
        return {
            name: group.lr_scale
            for group in self.groups.values() if group.lr_scale != 1.0
            for name in group.params
        }


REGIME_GROUPS: dict[FinetuneRegime, tuple[str, ...]] = {
    FinetuneRegime.CLS_ONLY: ("cls_tokens",),
    FinetuneRegime.CLS_PLUS_TYPE: ("cls_tokens", "type_matching"),
    FinetuneRegime.ALL: GROUP_NAMES,
}


def build_param_groups(
    model: NeuralInterpreter,
    regime: FinetuneRegime | str,
    respect_function_flags: bool = False,
    extra: Iterable[str] = (),
) -> ParamGroups:
    """
    Mark the groups a regime may update.

    cls_only trains the CLS tokens; cls_plus_type adds type-inference MLPs,
    signatures and sigma; all trains everything. With
    `respect_function_flags`, signatures/codes whose FunctionDef says they
    are frozen stay fixed (used at pretraining).

    Args:
        model: Model whose parameters are grouped
        regime: Finetuning regime
        respect_function_flags: Honor per-function trainable flags
        extra: Parameter names trained regardless of regime

    Returns:
        ParamGroups

    Raises:
        TrainingError: On an unknown regime or unknown extra names
    """
    try:
        regime = FinetuneRegime(regime)
    except ValueError:
        raise TrainingError(f"Unknown finetuning regime: {regime}") from None

    groups = {name: ParamGroup(name, []) for name in GROUP_NAMES}
    for name in model.params:
        groups[param_group_of(name)].params.append(name)
    for name in REGIME_GROUPS[regime]:
        groups[name].trainable = True

    frozen = set()
    if respect_function_flags:
        for script in model.scripts:
            for function in script.functions:
                if not function.signature_trainable:
                    frozen.add(f"{function.name}.signature")
                if not function.code_trainable:
                    frozen.add(f"{function.name}.code")

    extra_names = set(extra)
    unknown = sorted(extra_names - set(model.params))
    if unknown:
        raise TrainingError(f"Unknown parameters requested as trainable: {unknown[:5]}")

    return ParamGroups(groups=groups, frozen=frozen, extra=extra_names)


# ============== Evaluation ==============

def predict_batched(
    model: NeuralInterpreter,
    inputs: np.ndarray,
    n_iterations: int | None = None,
    keep_masks: np.ndarray | list[np.ndarray] | None = None,
    batch_size: int = EVAL_BATCH_SIZE,
) -> np.ndarray:
    """Predictions [S, T] computed without a tape, in chunks."""
    chunks = []
    for start in range(0, inputs.shape[0], batch_size):
        out = model.predict(inputs[start:start + batch_size], n_iterations, keep_masks)
        chunks.append(out.data)
    return np.concatenate(chunks, axis=0)


def evaluate_model(
    model: NeuralInterpreter,
    inputs: np.ndarray,
    targets: np.ndarray,
    n_iterations: int | None = None,
    keep_masks: np.ndarray | list[np.ndarray] | None = None,
) -> tuple[float, list[float]]:
    """
    MSE and per-task R^2 on a dataset slice.

    Returns:
        Tuple of (mse, r2 per task)
    """
    preds = predict_batched(model, inputs, n_iterations, keep_masks)
    mse = float(np.mean((preds - targets) ** 2))
    return mse, r2_per_task(preds, targets)


# ============== Loops ==============

@dataclass
class TrainState:
    """
    Everything needed to continue a run bit-exactly.

    Attributes:
        optimizer: Step counter and moments
        seed: Seed of the batch order
        epoch: Completed epochs
        lr: Learning rate of the last step
        history: Per-epoch metrics
    """
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    seed: int = 0
    epoch: int = 0
    lr: float = 0.0
    history: list[EpochMetrics] = field(default_factory=list)


@dataclass
class TrainResult:
    """Outcome of a training run."""
    model: NeuralInterpreter
    history: list[EpochMetrics]
    state: TrainState
    best_epoch: int = 0
    last_params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def final(self) -> EpochMetrics | None:
        return self.history[-1] if self.history else None

    @property
    def best(self) -> EpochMetrics | None:
        for metrics in self.history:
            if metrics.epoch == self.best_epoch:
                return metrics
        return None


class Trainer:
    """
    Minibatch training over the trainable names of a ParamGroups.

    Frozen parameters are excluded from the tape, so they are neither
    differentiated nor touched by the optimizer.
    """

    def __init__(
        self,
        model: NeuralInterpreter,
        groups: ParamGroups,
        optimizer_config: OptimizerConfig,
        base_lr: float,
        batch_size: int,
        phase: str,
        state: TrainState | None = None,
    ) -> None:
        self.model = model
        self.groups = groups
        self.optimizer_config = optimizer_config
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.phase = phase
        self.state = state or TrainState()
        self.optimizer = create_optimizer(optimizer_config, self.state.optimizer)
        self.trainable = groups.trainable_names()
        if not self.trainable:
            raise TrainingError("No trainable parameters selected")

    def _set_tracking(self, names: Collection[str] | None) -> None:
        for name, tensor in self.model.params.items():
            tensor.requires_grad = names is None or name in names

    def train_step(self, inputs: np.ndarray, targets: np.ndarray, total_steps: int) -> float:
        """One optimizer step on a minibatch; returns the batch loss."""
        params = {name: self.model.params[name] for name in self.trainable}
        step = self.state.optimizer.step
        try:
            with Tape() as tape:
                loss = multitask_mse(self.model.predict(inputs), targets)
            grads = tape.backward(loss, params)
        except (AutodiffError, ModelError) as e:
            raise TrainingError(f"{self.phase} step {step + 1} failed: {e}") from e

        lr = scheduled_lr(self.optimizer_config, self.base_lr, step, total_steps)
        self.optimizer.step(params, grads, lr, self.groups.lr_scales())
        self.state.lr = lr
        value = loss.item()
        logger.debug(f"{self.phase} step {step + 1}: loss={value:.6f} lr={lr:.3g}")
        return value

    def fit(self, dataset: RegressionDataset, epochs: int) -> TrainResult:
        """
        Train for `epochs` passes over the train split, validating after each.

        The parameters of the best validation epoch are restored at the end.

        Raises:
            TrainingError: On task-count mismatch or non-finite values
        """
        if dataset.num_tasks != self.model.config.n_cls:
            raise TrainingError(
                f"Dataset has {dataset.num_tasks} tasks but the model has "
                f"{self.model.config.n_cls} CLS tokens"
            )
        train_x, train_y = dataset.split("train")
        val_x, val_y = dataset.split("val")
        steps_per_epoch = math.ceil(train_x.shape[0] / self.batch_size)
        total_steps = steps_per_epoch * (self.state.epoch + epochs)

        best_loss = math.inf
        best_params = self.model.params.state_dict()
        best_epoch = self.state.epoch

        self._set_tracking(self.trainable)
        try:
            for _ in range(epochs):
                epoch = self.state.epoch + 1
                started = time.perf_counter()
                order = np.random.default_rng([self.state.seed, epoch]).permutation(
                    train_x.shape[0]
                )
                losses = []
                for start in range(0, order.size, self.batch_size):
                    rows = order[start:start + self.batch_size]
                    losses.append(self.train_step(train_x[rows], train_y[rows], total_steps))

                try:
                    val_loss, r2 = evaluate_model(self.model, val_x, val_y)
                except (AutodiffError, ModelError, FuzzyError) as e:
                    raise TrainingError(
                        f"{self.phase} validation at epoch {epoch} failed: {e}"
                    ) from e
                train_loss = float(np.mean(losses))
                if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                    raise TrainingError(
                        f"{self.phase} epoch {epoch}: non-finite loss "
                        f"(train={train_loss}, val={val_loss})"
                    )

                metrics = EpochMetrics(
                    epoch=epoch,
                    phase=self.phase,
                    train_loss=train_loss,
                    val_loss=val_loss,
                    r2=r2,
                    lr=self.state.lr,
                    seconds=time.perf_counter() - started,
                )
                self.state.history.append(metrics)
                self.state.epoch = epoch
                logger.info(
                    f"[{self.phase}] epoch {epoch}: train_loss={train_loss:.5f} "
                    f"val_loss={val_loss:.5f} mean_r2={metrics.mean_r2:.4f} "
                    f"lr={self.state.lr:.3g} ({metrics.seconds:.1f}s)"
                )

                if val_loss < best_loss:
                    best_loss = val_loss
                    best_params = self.model.params.state_dict()
                    best_epoch = epoch
        finally:
            self._set_tracking(None)

        last_params = self.model.params.state_dict()
        self.model.params.load_state_dict(best_params)
        return TrainResult(
            self.model, list(self.state.history), self.state, best_epoch, last_params
        )


def pretrain(
    model: NeuralInterpreter,
    dataset: RegressionDataset,
    config: ExperimentConfig,
    state: TrainState | None = None,
) -> TrainResult:
    """
    Train every parameter (respecting frozen signatures/codes) on the
    pretraining tasks.

    Args:
        model: Freshly built or resumed model
        dataset: One task per CLS token
        config: Experiment configuration
        state: Optional state to resume from

    Returns:
        TrainResult with the best-validation parameters loaded
    """
    groups = build_param_groups(model, FinetuneRegime.ALL, respect_function_flags=True)
    trainer = Trainer(
        model,
        groups,
        config.optimizer,
        config.optimizer.lr,
        config.training.batch_size,
        phase="pretrain",
        state=state or TrainState(seed=config.training.seed),
    )
    logger.info(
        f"Pretraining {groups.trainable_count(model)} of {model.params.count()} parameters "
        f"for {config.training.pretrain_epochs} epochs"
    )
    return trainer.fit(dataset, config.training.pretrain_epochs)


def finetune(
    model: NeuralInterpreter,
    dataset: RegressionDataset,
    regime: FinetuneRegime | str,
    config: ExperimentConfig,
    extra: Iterable[str] = (),
    reset_cls: bool = True,
) -> TrainResult:
    """
    Adapt a pretrained model to new tasks.

    Fresh CLS tokens (one per new task) are instantiated unless `reset_cls`
    is False; then only the regime's groups, plus any `extra` names (for
    example newly added signatures/codes), are updated.

    Args:
        model: Pretrained model (modified in place)
        dataset: Adaptation tasks
        regime: cls_only, cls_plus_type or all
        config: Experiment configuration
        extra: Additional trainable parameter names
        reset_cls: Instantiate new CLS tokens first

    Returns:
        TrainResult with the best-validation parameters loaded
    """
    if reset_cls:
        model.reset_cls_tokens(
            dataset.num_tasks, np.random.default_rng([config.training.seed, 1])
        )
    groups = build_param_groups(model, regime, extra=extra)
    trainer = Trainer(
        model,
        groups,
        config.optimizer,
        config.optimizer.finetune_lr,
        config.training.batch_size,
        phase="finetune",
        state=TrainState(seed=config.training.seed),
    )
    logger.info(
        f"Finetuning ({FinetuneRegime(regime).value}) {groups.trainable_count(model)} of "
        f"{model.params.count()} parameters for {config.training.finetune_epochs} epochs"
    )
    return trainer.fit(dataset, config.training.finetune_epochs)
