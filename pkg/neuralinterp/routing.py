"""
Type inference and function compatibility.

Each set element gets a unit type vector from a small MLP. Its distance to
a function signature is 1 - s.t; functions whose signature lies within the
truncation radius tau get a kernel weight exp(-d / sigma), normalized over
functions.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from neuralinterp.autodiff import (
    Tensor,
    add,
    div,
    exp,
    gelu,
    l2_normalize,
    mul,
    neg,
    reduce,
    reshape,
    sub,
    transpose,
)
from neuralinterp.layers import Linear
from neuralinterp.params import ModelError, ParamStore

logger = logging.getLogger(__name__)

COMPAT_EPS = 1e-8


class TypeInference:
    """Depth-2 GELU MLP whose output is projected onto the unit hypersphere."""

    def __init__(
        self,
        params: ParamStore,
        prefix: str,
        dim: int,
        type_dim: int,
        rng: np.random.Generator,
    ) -> None:
        self.hidden = Linear(params, f"{prefix}.hidden", dim, dim, rng)
        self.output = Linear(params, f"{prefix}.output", dim, type_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return l2_normalize(self.output(gelu(self.hidden(x))))


def type_distance(types: Tensor, signatures: Tensor) -> Tensor:
    """
    Kernel distance 1 - s_u . t_i.

    Args:
        types: [B, S, d_type] unit vectors
        signatures: [F, d_type] unit vectors

    Returns:
        [B, F, S] distances in [0, 2]
    """
    if types.shape[-1] != signatures.shape[-1]:
        raise ModelError(
            f"Type dim {types.shape[-1]} does not match signature dim {signatures.shape[-1]}"
        )
    batch, set_size, type_dim = types.shape
    # elementwise products summed per pair, so adding a function leaves the others untouched
    pairs = mul(reshape(types, (batch, set_size, 1, type_dim)), signatures)
    dots = transpose(reduce(pairs, "sum", axis=-1), (0, 2, 1))
    return sub(1.0, dots)


def compatibility(
    types: Tensor,
    signatures: Tensor,
    sigma_log: Tensor,
    tau: float,
    keep_mask: np.ndarray | None = None,
) -> Tensor:
    """
    Truncated-kernel routing weights C[b, u, i].

    Raw weights are exp(-d / sigma) where d <= tau and exactly zero
    elsewhere; dropped functions (keep_mask False) are zeroed the same way.
    The mask is a constant for differentiation. Normalization runs over
    functions with eps in the denominator, so an element no function
    reaches gets an all-zero column.

    Args:
        types: [B, S, d_type]
        signatures: [F, d_type]
        sigma_log: Scalar tensor, sigma = exp(sigma_log)
        tau: Truncation radius in [0, 2)
        keep_mask: Optional [F] booleans

    Returns:
        [B, F, S] compatibilities in [0, 1]
    """
    distance = type_distance(types, signatures)
    mask = distance.data <= tau
    if keep_mask is not None:
        keep = np.asarray(keep_mask, dtype=bool)
        if keep.shape != (signatures.shape[0],):
            raise ModelError(
                f"Keep mask has shape {list(keep.shape)}, expected [{signatures.shape[0]}]"
            )
        mask = mask & keep[None, :, None]

    sigma = exp(sigma_log)
    kernel = mul(exp(div(neg(distance), sigma)), Tensor(mask.astype(np.float64)))
    total = add(kernel.sum(axis=1, keepdims=True), COMPAT_EPS)
    return div(kernel, total)


def closest_function(types: Tensor | np.ndarray, signatures: Tensor | np.ndarray) -> np.ndarray:
    """Index of the signature nearest to each type: [B, S] integers."""
    t = types.data if isinstance(types, Tensor) else np.asarray(types)
    s = signatures.data if isinstance(signatures, Tensor) else np.asarray(signatures)
    return np.argmax(t @ s.T, axis=-1)


@dataclass
class RoutingCapture:
    """Routing quantities of one function iteration, as plain arrays."""
    script: int
    iteration: int
    compatibility: np.ndarray
    types: np.ndarray
    closest: np.ndarray


@dataclass
class RoutingRecorder:
    """Collects a RoutingCapture for every function iteration of a forward pass."""
    captures: list[RoutingCapture] = field(default_factory=list)

    def record(
        self,
        script: int,
        iteration: int,
        compat: Tensor,
        types: Tensor,
        signatures: Tensor,
    ) -> None:
        self.captures.append(
            RoutingCapture(
                script=script,
                iteration=iteration,
                compatibility=compat.data.copy(),
                types=types.data.copy(),
                closest=closest_function(types, signatures),
            )
        )

    def clear(self) -> None:
        self.captures.clear()
