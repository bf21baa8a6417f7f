"""
Code-conditioned layers executed by the interpreter.

Every modulated layer takes a stack of function codes of shape [F, d_cond]
and an input whose third-to-last axis indexes those F functions (shape
[..., F, S, d_in]). A single code of shape [d_cond] modulates every row.
"""

import logging
import math

import numpy as np

from neuralinterp.autodiff import (
    Tensor,
    add,
    concat,
    div,
    gelu,
    index,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    transpose,
)
from neuralinterp.params import ModelError, ParamStore, uniform_init

logger = logging.getLogger(__name__)

ATTENTION_EPS = 1e-8


class Linear:
    """Plain affine layer y = x @ W + b, W stored as [d_in, d_out]."""

    def __init__(
        self,
        params: ParamStore,
        prefix: str,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
    ) -> None:
        self.d_in = d_in
        self.d_out = d_out
        self.weight = params.register(f"{prefix}.weight", uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = params.register(f"{prefix}.bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ModelError(f"Linear expects {self.d_in} features, got shape {list(x.shape)}")
        return add(matmul(x, self.weight), self.bias)


class LayerNorm:
    """Learnable affine layer normalization over the last axis."""

    def __init__(self, params: ParamStore, prefix: str, width: int) -> None:
        self.gamma = params.register(f"{prefix}.gamma", np.ones(width))
        self.beta = params.register(f"{prefix}.beta", np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class ModLin:
    """
    Modulated linear layer: y = W (x * LayerNorm(W_c c)) + b.

    The modulation vector is computed once per code and broadcast over every
    set element of that function's stream.
    """

    def __init__(
        self,
        params: ParamStore,
        prefix: str,
        d_in: int,
        d_out: int,
        d_cond: int,
        rng: np.random.Generator,
    ) -> None:
        self.d_in = d_in
        self.d_out = d_out
        self.d_cond = d_cond
        self.weight = params.register(f"{prefix}.weight", uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = params.register(f"{prefix}.bias", np.zeros(d_out))
        self.cond_weight = params.register(
            f"{prefix}.cond_weight", uniform_init(rng, d_cond, (d_cond, d_in))
        )
        self.cond_norm = LayerNorm(params, f"{prefix}.cond_norm", d_in)

    def modulation(self, codes: Tensor) -> Tensor:
        """LayerNorm(W_c c): [F, d_in] for stacked codes, [d_in] for one code."""
        if codes.shape[-1] != self.d_cond:
            raise ModelError(
                f"ModLin expects codes with {self.d_cond} dims, got shape {list(codes.shape)}"
            )
        if codes.ndim == 1:
            projected = matmul(reshape(codes, (1, self.d_cond)), self.cond_weight)
            return reshape(self.cond_norm(projected), (self.d_in,))
        # one product per code: row u never depends on how many codes are stacked
        n_funcs = codes.shape[0]
        projected = matmul(reshape(codes, (n_funcs, 1, self.d_cond)), self.cond_weight)
        return reshape(self.cond_norm(projected), (n_funcs, self.d_in))

    def __call__(self, x: Tensor, codes: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ModelError(f"ModLin expects {self.d_in} features, got shape {list(x.shape)}")
        m = self.modulation(codes)
        if codes.ndim > 1:
            if x.ndim < 2 or (x.ndim >= 3 and x.shape[-3] != codes.shape[0]):
                raise ModelError(
                    f"ModLin input {list(x.shape)} does not index {codes.shape[0]} functions"
                )
            m = reshape(m, (codes.shape[0], 1, self.d_in))
        return add(matmul(mul(x, m), self.weight), self.bias)


class ModMLP:
    """Two ModLin layers sharing one condition, GELU in between."""

    def __init__(
        self,
        params: ParamStore,
        prefix: str,
        dim: int,
        hidden: int,
        d_cond: int,
        rng: np.random.Generator,
    ) -> None:
        self.inner = ModLin(params, f"{prefix}.inner", dim, hidden, d_cond, rng)
        self.outer = ModLin(params, f"{prefix}.outer", hidden, dim, d_cond, rng)

    def __call__(self, x: Tensor, codes: Tensor) -> Tensor:
        return self.outer(gelu(self.inner(x, codes)), codes)


class RelativePositionBias:
    """
    Per-function, per-head additive attention bias for grid-laid-out elements.

    For grid positions (r1, c1) -> (r2, c2) the bias of head h in the stream
    of function u is

        (p_row[dr] + e_row[dr]) + (p_col[dc] + e_col[dc])

    with dr = r2 - r1, dc = c2 - c1. p terms come from a ModLin over learned
    offset embeddings conditioned on the function code; e terms are per-head
    projections of the same embeddings. Elements past the grid (CLS tokens)
    get zero bias in both directions.
    """

    def __init__(
        self,
        params: ParamStore,
        prefix: str,
        grid_shape: tuple[int, int],
        n_heads: int,
        embed_dim: int,
        d_cond: int,
        rng: np.random.Generator,
    ) -> None:
        rows, cols = grid_shape
        if rows < 1 or cols < 1:
            raise ModelError(f"Invalid grid shape: {grid_shape}")
        self.grid_shape = (rows, cols)
        self.n_heads = n_heads
        self.embed_dim = embed_dim
        self.row_embed = params.register(
            f"{prefix}.row_embed", rng.normal(0.0, 0.02, (2 * rows - 1, embed_dim))
        )
        self.col_embed = params.register(
            f"{prefix}.col_embed", rng.normal(0.0, 0.02, (2 * cols - 1, embed_dim))
        )
        self.row_weights = [
            params.register(
                f"{prefix}.row_weight.{h}", uniform_init(rng, embed_dim, (embed_dim, 1))
            )
            for h in range(n_heads)
        ]
        self.col_weights = [
            params.register(
                f"{prefix}.col_weight.{h}", uniform_init(rng, embed_dim, (embed_dim, 1))
            )
            for h in range(n_heads)
        ]
        self.row_modlins = [
            ModLin(params, f"{prefix}.row_modlin.{h}", embed_dim, 1, d_cond, rng)
            for h in range(n_heads)
        ]
        self.col_modlins = [
            ModLin(params, f"{prefix}.col_modlin.{h}", embed_dim, 1, d_cond, rng)
            for h in range(n_heads)
        ]

    @property
    def n_grid(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    def offset_index(self, set_size: int) -> np.ndarray:
        """
        [S, S] lookup into the flattened (dr, dc) table; non-grid pairs point
        at the trailing zero entry.

        Raises:
            ModelError: If the set is smaller than the grid
        """
        rows, cols = self.grid_shape
        if set_size < self.n_grid:
            raise ModelError(
                f"Relative position bias needs {self.n_grid} grid elements, set has {set_size}"
            )
        pad = (2 * rows - 1) * (2 * cols - 1)
        lookup = np.full((set_size, set_size), pad, dtype=np.int64)
        r = np.arange(self.n_grid) // cols
        c = np.arange(self.n_grid) % cols
        dr = r[None, :] - r[:, None] + rows - 1
        dc = c[None, :] - c[:, None] + cols - 1
        lookup[: self.n_grid, : self.n_grid] = dr * (2 * cols - 1) + dc
        return lookup

    def offset_table(self, head: int, codes: Tensor) -> Tensor:
        """Bias per (function, dr, dc), shape [F, (2H-1)(2W-1)]."""
        n_funcs = codes.shape[0]
        rows, cols = self.grid_shape
        p_row = reshape(self.row_modlins[head](self.row_embed, codes), (n_funcs, 2 * rows - 1))
        p_col = reshape(self.col_modlins[head](self.col_embed, codes), (n_funcs, 2 * cols - 1))
        e_row = reshape(matmul(self.row_embed, self.row_weights[head]), (1, 2 * rows - 1))
        e_col = reshape(matmul(self.col_embed, self.col_weights[head]), (1, 2 * cols - 1))
        row_term = reshape(add(p_row, e_row), (n_funcs, 2 * rows - 1, 1))
        col_term = reshape(add(p_col, e_col), (n_funcs, 1, 2 * cols - 1))
        return reshape(add(row_term, col_term), (n_funcs, (2 * rows - 1) * (2 * cols - 1)))

    def __call__(self, head: int, codes: Tensor, set_size: int) -> Tensor:
        """Bias for every (function, i, j): shape [F, S, S]."""
        table = self.offset_table(head, codes)
        padded = concat([table, Tensor(np.zeros((codes.shape[0], 1)))], axis=1)
        return index(padded, (slice(None), self.offset_index(set_size)))


class ModAttn:
    """
    Compatibility-weighted multi-head attention with code-conditioned projections.

    For each function stream u and head h the raw weights are
    C[u,i] * C[u,j] * softmax_j(q_i . k_j / sqrt(d_key)); rows are then
    renormalized by eps + sum_j. Heads are concatenated along features and
    mixed by a final ModLin.
    """

    def __init__(
        self,
        params: ParamStore,
        prefix: str,
        dim: int,
        n_heads: int,
        head_dim: int,
        d_cond: int,
        rng: np.random.Generator,
        position_bias: RelativePositionBias | None = None,
    ) -> None:
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.queries = [
            ModLin(params, f"{prefix}.query.{h}", dim, head_dim, d_cond, rng)
            for h in range(n_heads)
        ]
        self.keys = [
            ModLin(params, f"{prefix}.key.{h}", dim, head_dim, d_cond, rng)
            for h in range(n_heads)
        ]
        self.values = [
            ModLin(params, f"{prefix}.value.{h}", dim, head_dim, d_cond, rng)
            for h in range(n_heads)
        ]
        self.mix = ModLin(params, f"{prefix}.mix", n_heads * head_dim, dim, d_cond, rng)
        self.position_bias = position_bias

    def attention_weights(self, x: Tensor, codes: Tensor, compat: Tensor, head: int) -> Tensor:
        """Renormalized weights W[b, u, i, j] of one head."""
        batch, n_funcs, set_size, _ = x.shape
        q = self.queries[head](x, codes)
        k = self.keys[head](x, codes)
        logits = div(matmul(q, transpose(k, (0, 1, 3, 2))), math.sqrt(self.head_dim))
        if self.position_bias is not None:
            bias = self.position_bias(head, codes, set_size)
            logits = add(logits, reshape(bias, (1, n_funcs, set_size, set_size)))
        probs = softmax(logits, axis=-1)
        c_rows = reshape(compat, (batch, n_funcs, set_size, 1))
        c_cols = reshape(compat, (batch, n_funcs, 1, set_size))
        raw = mul(mul(probs, c_rows), c_cols)
        return div(raw, add(raw.sum(axis=-1, keepdims=True), ATTENTION_EPS))

    def __call__(self, x: Tensor, codes: Tensor, compat: Tensor) -> Tensor:
        if x.ndim != 4 or compat.shape != x.shape[:3]:
            raise ModelError(
                f"ModAttn expects x [B, F, S, d] and C [B, F, S], got {list(x.shape)} "
                f"and {list(compat.shape)}"
            )
        heads = []
        for h in range(self.n_heads):
            weights = self.attention_weights(x, codes, compat, h)
            heads.append(matmul(weights, self.values[h](x, codes)))
        folded = heads[0] if self.n_heads == 1 else concat(heads, axis=-1)
        return self.mix(folded, codes)


class LOC:
    """
    One line of code: attention then MLP, each behind a compatibility-weighted
    residual. An element with C[u, i] == 0 leaves stream u unchanged.
    """

    def __init__(
        self,
        params: ParamStore,
        prefix: str,
        dim: int,
        n_heads: int,
        head_dim: int,
        d_cond: int,
        rng: np.random.Generator,
        position_bias: RelativePositionBias | None = None,
    ) -> None:
        self.attn_norm = LayerNorm(params, f"{prefix}.attn_norm", dim)
        self.attn = ModAttn(
            params, f"{prefix}.attn", dim, n_heads, head_dim, d_cond, rng, position_bias
        )
        self.mlp_norm = LayerNorm(params, f"{prefix}.mlp_norm", dim)
        self.mlp = ModMLP(params, f"{prefix}.mlp", dim, dim, d_cond, rng)

    def __call__(self, x: Tensor, codes: Tensor, compat: Tensor) -> Tensor:
        batch, n_funcs, set_size, _ = x.shape
        gate = reshape(compat, (batch, n_funcs, set_size, 1))
        a = add(x, mul(gate, self.attn(self.attn_norm(x), codes, compat)))
        return add(a, mul(gate, self.mlp(self.mlp_norm(a), codes)))
