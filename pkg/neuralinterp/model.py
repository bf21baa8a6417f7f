"""
The interpreter model.

A model is a stack of scripts. Each script repeats a function iteration
n_i times with shared weights: infer a type for every set element, route
elements to functions by type/signature compatibility, then run every
function stream through the script's LOC stack and add the
compatibility-weighted stream updates back onto the input.

Functions carry no weights of their own beyond a signature (routing) and a
code (conditioning), so functions can be added or dropped after training
without touching the interpreter.
"""

import copy
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from neuralinterp.autodiff import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    index,
    matmul,
    mul,
    reshape,
    stack,
    sub,
)
from neuralinterp.config import ModelConfig
from neuralinterp.layers import LOC, Linear, RelativePositionBias
from neuralinterp.models import ElementRole, PositionalMode, StreamAggregation
from neuralinterp.params import ModelError, ParamStore, uniform_init, unit_vectors
from neuralinterp.routing import RoutingRecorder, TypeInference, compatibility

logger = logging.getLogger(__name__)

INTERPRETER_PREFIXES = (".locs.", ".type_mlp.", ".sigma_log")


@dataclass
class FunctionDef:
    """
    One routable function: a unit signature on the type sphere and a code.

    Attributes:
        name: Parameter-name prefix, e.g. ``scripts.0.functions.2``
        signature: [d_type] unit vector
        code: [d_cond] condition vector
        signature_trainable: Whether the optimizer may move the signature
        code_trainable: Whether the optimizer may move the code
    """
    name: str
    signature: Tensor
    code: Tensor
    signature_trainable: bool = False
    code_trainable: bool = True


@dataclass
class SetBatch:
    """A batch of sets: elements [B, S, d] with one role tag per position."""
    elements: Tensor
    roles: tuple[ElementRole, ...]

    def __post_init__(self) -> None:
        if self.elements.ndim != 3 or self.elements.shape[1] != len(self.roles):
            raise ModelError(
                f"Set batch of shape {list(self.elements.shape)} does not match "
                f"{len(self.roles)} role tags"
            )

    @property
    def set_size(self) -> int:
        return len(self.roles)

    def positions(self, role: ElementRole) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]


@dataclass
class FunctionGroup:
    """Parameter names of functions added after construction."""
    names: list[str] = field(default_factory=list)

    @property
    def signature_names(self) -> list[str]:
        return [n for n in self.names if n.endswith(".signature")]

    @property
    def code_names(self) -> list[str]:
        return [n for n in self.names if n.endswith(".code")]


def interpreter_forward(
    x: Tensor,
    codes: Tensor,
    compat: Tensor,
    locs: Sequence[LOC],
    aggregation: StreamAggregation = StreamAggregation.UPDATES,
) -> Tensor:
    """
    Broadcast every element to all function streams, run the LOC stack and
    sum the streams back with compatibility weights.

    updates: y_i = x_i + sum_u C[u, i] * (LOCs(x; c_u)_i - x_i)
    streams: y_i = x_i + sum_u C[u, i] * LOCs(x; c_u)_i

    Each LOC is residual, so a stream already carries x. With compatibilities
    summing to about one, ``streams`` roughly doubles x on every call.
    An element with C[., i] == 0 for every function is returned unchanged
    in both modes.

    Args:
        x: [B, S, d] set elements
        codes: [F, d_cond] function codes
        compat: [B, F, S] compatibilities
        locs: LOC stack shared by all functions
        aggregation: How streams are added back onto x

    Returns:
        [B, S, d] updated elements
    """
    batch, set_size, dim = x.shape
    n_funcs = codes.shape[0]
    if compat.shape != (batch, n_funcs, set_size):
        raise ModelError(
            f"Compatibility shape {list(compat.shape)} does not match "
            f"[{batch}, {n_funcs}, {set_size}]"
        )
    x_row = reshape(x, (batch, 1, set_size, dim))
    streams = broadcast_to(x_row, (batch, n_funcs, set_size, dim))
    for loc in locs:
        streams = loc(streams, codes, compat)
    if aggregation == StreamAggregation.UPDATES:
        streams = sub(streams, x_row)
    gate = reshape(compat, (batch, n_funcs, set_size, 1))
    return add(x, mul(gate, streams).sum(axis=1))


class Script:
    """
    Independently parameterized block of function iterations.

    Owns a type-inference MLP, a routing scale sigma (exp of a learnable
    log), a set of functions and a LOC stack. Nothing is shared with other
    scripts.
    """

    def __init__(
        self,
        params: ParamStore,
        prefix: str,
        config: ModelConfig,
        rng: np.random.Generator,
    ) -> None:
        self.params = params
        self.prefix = prefix
        self.tau = config.tau
        self.aggregation = config.aggregation
        self.type_inference = TypeInference(
            params, f"{prefix}.type_mlp", config.dim, config.type_dim, rng
        )
        self.sigma_log = params.register(f"{prefix}.sigma_log", np.zeros(()))
        self.functions: list[FunctionDef] = []

        signatures = unit_vectors(rng, config.n_functions, config.type_dim)
        codes = rng.standard_normal((config.n_functions, config.code_dim))
        for signature, code in zip(signatures, codes, strict=True):
            self.add_function(
                signature,
                code,
                signature_trainable=not config.freeze_signatures,
                code_trainable=not config.freeze_codes,
            )

        self.locs: list[LOC] = []
        for layer in range(config.n_locs):
            loc_prefix = f"{prefix}.locs.{layer}"
            bias = None
            if config.positional_mode == PositionalMode.RELATIVE_GRID:
                bias = RelativePositionBias(
                    params,
                    f"{loc_prefix}.position_bias",
                    config.resolved_grid_shape(),
                    config.n_heads,
                    config.relpos_dim,
                    config.code_dim,
                    rng,
                )
            self.locs.append(
                LOC(
                    params,
                    loc_prefix,
                    config.dim,
                    config.n_heads,
                    config.head_dim,
                    config.code_dim,
                    rng,
                    bias,
                )
            )

    @property
    def n_functions(self) -> int:
        return len(self.functions)

    def add_function(
        self,
        signature: np.ndarray,
        code: np.ndarray,
        signature_trainable: bool,
        code_trainable: bool,
    ) -> FunctionDef:
        """Register one more (signature, code) pair; the signature is normalized."""
        signature = np.asarray(signature, dtype=np.float64)
        norm = np.linalg.norm(signature)
        if norm == 0.0:
            raise ModelError("Function signature must be non-zero")
        name = f"{self.prefix}.functions.{len(self.functions)}"
        function = FunctionDef(
            name=name,
            signature=self.params.register(f"{name}.signature", signature / norm),
            code=self.params.register(f"{name}.code", np.asarray(code, dtype=np.float64)),
            signature_trainable=signature_trainable,
            code_trainable=code_trainable,
        )
        self.functions.append(function)
        return function

    def signatures(self) -> Tensor:
        return stack([f.signature for f in self.functions])

    def codes(self) -> Tensor:
        return stack([f.code for f in self.functions])

    def route(self, x: Tensor, keep_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Types [B, S, d_type] and compatibilities [B, F, S] for the current elements."""
        types = self.type_inference(x)
        compat = compatibility(types, self.signatures(), self.sigma_log, self.tau, keep_mask)
        return types, compat

    def fn_iter(
        self,
        x: Tensor,
        keep_mask: np.ndarray | None = None,
        recorder: RoutingRecorder | None = None,
        script_index: int = 0,
        iteration: int = 0,
    ) -> Tensor:
        """One function iteration: re-route from the current x, then interpret."""
        types, compat = self.route(x, keep_mask)
        if recorder is not None:
            recorder.record(script_index, iteration, compat, types, self.signatures())
        return interpreter_forward(x, self.codes(), compat, self.locs, self.aggregation)

    def forward(
        self,
        x: Tensor,
        n_iterations: int,
        keep_mask: np.ndarray | None = None,
        recorder: RoutingRecorder | None = None,
        script_index: int = 0,
    ) -> Tensor:
        if n_iterations < 1:
            raise ModelError(f"Number of function iterations must be >= 1, got {n_iterations}")
        for iteration in range(n_iterations):
            x = self.fn_iter(x, keep_mask, recorder, script_index, iteration)
        return x


class NeuralInterpreter:
    """
    Stack of scripts over a set of embedded scalar inputs plus CLS tokens,
    with a shared linear regression head on the CLS outputs.
    """

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        _check_model_config(config)
        self.config = replace(config, grid_shape=list(config.grid_shape))
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = ParamStore()

        self.embed_weight = self.params.register(
            "embed.weight", uniform_init(rng, config.d_in, (config.d_in, config.dim))
        )
        self.embed_bias = self.params.register(
            "embed.bias", uniform_init(rng, config.d_in, (config.dim,))
        )
        self.pos_embed: Tensor | None = None
        if config.positional_mode == PositionalMode.LEARNED_1D:
            self.pos_embed = self.params.register(
                "pos_embed", rng.standard_normal((config.n_inputs, config.dim))
            )
        self.cls_tokens = self.params.register(
            "cls_tokens", rng.standard_normal((config.n_cls, config.dim))
        )
        self.scripts = [
            Script(self.params, f"scripts.{s}", config, rng) for s in range(config.n_scripts)
        ]
        self.head = Linear(self.params, "head", config.dim, config.d_out, rng)

        logger.debug(
            f"Built interpreter: {len(self.params)} tensors, {self.params.count()} parameters"
        )

    @property
    def n_functions(self) -> int:
        return self.scripts[0].n_functions

    def embed_inputs(self, scalars: Tensor | np.ndarray) -> SetBatch:
        """
        Embed N scalar inputs and append the CLS tokens.

        Args:
            scalars: [B, N] (or [B, N, d_in]) raw inputs

        Returns:
            SetBatch with N input elements followed by the CLS tokens
        """
        x = as_tensor(scalars)
        cfg = self.config
        if x.ndim == 2:
            x = reshape(x, (x.shape[0], x.shape[1], 1))
        if x.ndim != 3 or x.shape[1] != cfg.n_inputs or x.shape[2] != cfg.d_in:
            raise ModelError(
                f"Expected inputs [B, {cfg.n_inputs}] or [B, {cfg.n_inputs}, {cfg.d_in}], "
                f"got {list(x.shape)}"
            )
        batch = x.shape[0]
        embedded = add(matmul(x, self.embed_weight), self.embed_bias)
        if self.pos_embed is not None:
            embedded = add(embedded, self.pos_embed)
        cls = broadcast_to(
            reshape(self.cls_tokens, (1, cfg.n_cls, cfg.dim)), (batch, cfg.n_cls, cfg.dim)
        )
        roles = (ElementRole.INPUT,) * cfg.n_inputs + (ElementRole.CLS,) * cfg.n_cls
        return SetBatch(concat([embedded, cls], axis=1), roles)

    def forward(
        self,
        batch: SetBatch,
        n_iterations: int | None = None,
        keep_masks: Sequence[np.ndarray] | np.ndarray | None = None,
        recorder: RoutingRecorder | None = None,
    ) -> SetBatch:
        """
        Run every script in order.

        Args:
            batch: Input set batch
            n_iterations: Function iterations per script (None: configured n_i)
            keep_masks: One boolean mask over functions shared by all scripts,
                or one mask per script
            recorder: Optional collector of per-iteration routing

        Returns:
            SetBatch of the same cardinality and roles
        """
        if batch.set_size == 0:
            raise ModelError("Cannot run the interpreter on an empty set")
        steps = self.config.n_iterations if n_iterations is None else n_iterations
        masks = self._resolve_keep_masks(keep_masks)
        x = batch.elements
        for s, script in enumerate(self.scripts):
            x = script.forward(x, steps, masks[s], recorder, s)
        return SetBatch(x, batch.roles)

    def predict(
        self,
        scalars: Tensor | np.ndarray,
        n_iterations: int | None = None,
        keep_masks: Sequence[np.ndarray] | np.ndarray | None = None,
        recorder: RoutingRecorder | None = None,
    ) -> Tensor:
        """Task predictions [B, n_cls] from raw inputs (d_out > 1 adds a last axis)."""
        out = self.forward(self.embed_inputs(scalars), n_iterations, keep_masks, recorder)
        cls_out = index(out.elements, (slice(None), slice(self.config.n_inputs, None)))
        preds = self.head(cls_out)
        if self.config.d_out == 1:
            return reshape(preds, (preds.shape[0], self.config.n_cls))
        return preds

    def _resolve_keep_masks(
        self,
        keep_masks: Sequence[np.ndarray] | np.ndarray | None,
    ) -> list[np.ndarray | None]:
        if keep_masks is None:
            return [None] * len(self.scripts)
        arrays = np.asarray(keep_masks, dtype=bool)
        if arrays.ndim == 1:
            arrays = np.broadcast_to(arrays, (len(self.scripts), arrays.shape[0]))
        if arrays.shape != (len(self.scripts), self.n_functions):
            raise ModelError(
                f"Keep masks of shape {list(arrays.shape)} do not match "
                f"{len(self.scripts)} scripts x {self.n_functions} functions"
            )
        if not arrays.any(axis=1).all():
            raise ModelError("Every script must keep at least one function")
        return [arrays[s] for s in range(len(self.scripts))]

    def reset_cls_tokens(self, count: int, rng: np.random.Generator) -> Tensor:
        """Replace the CLS tokens with `count` freshly initialized ones."""
        if count < 1:
            raise ModelError(f"Need at least one CLS token, got {count}")
        self.cls_tokens = self.params.replace(
            "cls_tokens", rng.standard_normal((count, self.config.dim))
        )
        self.config.n_cls = count
        return self.cls_tokens

    def interpreter_parameter_count(self) -> int:
        """Scalars in the LOC stacks, type-inference MLPs and routing scales."""
        return sum(
            t.size for name, t in self.params.items()
            if any(marker in name for marker in INTERPRETER_PREFIXES)
        )

    def function_of(self, name: str) -> FunctionDef | None:
        """The FunctionDef owning a signature/code parameter name, if any."""
        for script in self.scripts:
            for function in script.functions:
                if name.startswith(function.name + "."):
                    return function
        return None

    def clone(self) -> "NeuralInterpreter":
        """Independent deep copy (parameters included)."""
        return copy.deepcopy(self)


class FunctionDropView:
    """
    Evaluation-time view of a model with some functions disabled.

    Dropped functions get zero raw compatibility before normalization, so
    the kept functions renormalize among themselves. Parameters are shared
    with the underlying model.
    """

    def __init__(self, model: NeuralInterpreter, keep_masks: list[np.ndarray]) -> None:
        self.model = model
        self.keep_masks = keep_masks

    def forward(
        self,
        batch: SetBatch,
        n_iterations: int | None = None,
        recorder: RoutingRecorder | None = None,
    ) -> SetBatch:
        return self.model.forward(batch, n_iterations, self.keep_masks, recorder)

    def predict(
        self,
        scalars: Tensor | np.ndarray,
        n_iterations: int | None = None,
        recorder: RoutingRecorder | None = None,
    ) -> Tensor:
        return self.model.predict(scalars, n_iterations, self.keep_masks, recorder)


def _check_model_config(config: ModelConfig) -> None:
    counts = {
        "n_inputs": config.n_inputs, "d_in": config.d_in, "d_out": config.d_out,
        "dim": config.dim, "code_dim": config.code_dim, "type_dim": config.type_dim,
        "head_dim": config.head_dim, "n_heads": config.n_heads,
        "n_scripts": config.n_scripts, "n_iterations": config.n_iterations,
        "n_locs": config.n_locs, "n_functions": config.n_functions, "n_cls": config.n_cls,
    }
    bad = [key for key, value in counts.items() if value < 1]
    if bad:
        raise ModelError(f"Model counts must be >= 1: {', '.join(bad)}")
    if not 0.0 <= config.tau < 2.0:
        raise ModelError(f"tau must lie in [0, 2), got {config.tau}")
    if config.positional_mode == PositionalMode.RELATIVE_GRID:
        rows, cols = config.resolved_grid_shape()
        if rows * cols != config.n_inputs:
            raise ModelError(
                f"Grid {rows}x{cols} does not hold the {config.n_inputs} input elements"
            )


def create_model(config: ModelConfig, seed: int = 0) -> NeuralInterpreter:
    """
    Create a freshly initialized interpreter.

    Args:
        config: Architecture hyperparameters
        seed: Seed for every initializer

    Returns:
        NeuralInterpreter instance
    """
    return NeuralInterpreter(config, seed)


def fn_iter(batch: SetBatch, script: Script, keep_mask: np.ndarray | None = None) -> SetBatch:
    """One routing-plus-interpretation round of a single script."""
    return SetBatch(script.fn_iter(batch.elements, keep_mask), batch.roles)


def script_forward(batch: SetBatch, script: Script, n_iterations: int) -> SetBatch:
    """Apply one script's function iteration `n_iterations` times."""
    return SetBatch(script.forward(batch.elements, n_iterations), batch.roles)


def model_forward(
    batch: SetBatch,
    model: NeuralInterpreter,
    n_iterations: int | None = None,
) -> SetBatch:
    """Run the full script stack; `n_iterations` overrides n_i for every script."""
    return model.forward(batch, n_iterations)


def add_functions(
    model: NeuralInterpreter,
    k: int,
    rng: np.random.Generator,
    signatures: np.ndarray | None = None,
    codes: np.ndarray | None = None,
) -> FunctionGroup:
    """
    Append k functions to every script, leaving all other parameters untouched.

    Args:
        model: Model to extend in place
        k: Number of functions per script
        rng: Generator for signatures/codes not given explicitly
        signatures: Optional [k, d_type] signatures (normalized on entry)
        codes: Optional [k, d_cond] codes

    Returns:
        FunctionGroup naming the new signature and code parameters
    """
    if k < 1:
        raise ModelError(f"Need k >= 1 functions to add, got {k}")
    cfg = model.config
    group = FunctionGroup()
    for script in model.scripts:
        new_signatures = unit_vectors(rng, k, cfg.type_dim) if signatures is None else signatures
        new_codes = rng.standard_normal((k, cfg.code_dim)) if codes is None else codes
        shapes_ok = (
            np.shape(new_signatures) == (k, cfg.type_dim)
            and np.shape(new_codes) == (k, cfg.code_dim)
        )
        if not shapes_ok:
            raise ModelError(
                f"Added functions need signatures [{k}, {cfg.type_dim}] and "
                f"codes [{k}, {cfg.code_dim}]"
            )
        for signature, code in zip(new_signatures, new_codes, strict=True):
            function = script.add_function(
                signature, code, signature_trainable=True, code_trainable=True
            )
            group.names.extend([f"{function.name}.signature", f"{function.name}.code"])
    cfg.n_functions += k
    logger.info(f"Added {k} function(s) per script; n_f is now {cfg.n_functions}")
    return group


def drop_functions(
    model: NeuralInterpreter,
    keep_mask: Sequence[bool] | np.ndarray | Sequence[Sequence[bool]],
) -> FunctionDropView:
    """
    Disable functions for evaluation.

    Args:
        model: Trained model (not modified)
        keep_mask: [n_f] booleans shared by all scripts, or one row per script

    Returns:
        FunctionDropView sharing the model's parameters

    Raises:
        ModelError: If a script would keep no function
    """
    masks = model._resolve_keep_masks(np.asarray(keep_mask, dtype=bool))
    return FunctionDropView(model, [m for m in masks if m is not None])
