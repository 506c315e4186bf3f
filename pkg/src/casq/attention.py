"""Scaled dot-product and multi-head attention.

Masking uses a large negative surrogate (-1e30) on disallowed logits
rather than -inf so the softmax stays NaN-free; query rows whose keys
are all disallowed produce exact zero outputs and zero gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

MASK_FILL = -1e30


class AttentionMask:
    """Boolean (queries x keys) table of allowed attention pairs."""

    def __init__(self, allowed: np.ndarray):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise DimensionError(f"mask must be 2-d, got shape {allowed.shape}")
        self.allowed = allowed

    @classmethod
    def causal(cls, n: int) -> "AttentionMask":
        """Each position may attend to itself and earlier positions."""
        return cls(np.tril(np.ones((n, n), dtype=bool)))

    @classmethod
    def key_prefix(cls, n_queries: int, n_keys: int, valid_keys: int) -> "AttentionMask":
        """All queries see only the first ``valid_keys`` key positions."""
        allowed = np.zeros((n_queries, n_keys), dtype=bool)
        allowed[:, :valid_keys] = True
        return cls(allowed)

    @classmethod
    def causal_key_prefix(cls, n: int, valid_keys: int) -> "AttentionMask":
        m = cls.causal(n)
        m.allowed[:, valid_keys:] = False
        return m


def scaled_dot_attention(
    q: T.Tensor, k: T.Tensor, v: T.Tensor, mask: AttentionMask | None = None
) -> T.Tensor:
    """softmax(q kᵀ / sqrt(d_k)) v as one fused tape node."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention operands must be 2-d")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key count {k.shape[0]} != value count {v.shape[0]}")
    if mask is not None and mask.allowed.shape != (q.shape[0], k.shape[0]):
        raise DimensionError(
            f"mask shape {mask.allowed.shape} != ({q.shape[0]}, {k.shape[0]})"
        )

    alpha = 1.0 / np.sqrt(q.shape[1])
    s = (q.data @ k.data.T) * alpha
    if mask is not None:
        s = np.where(mask.allowed, s, MASK_FILL)
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    if mask is not None:
        dead = ~mask.allowed.any(axis=1)
        if dead.any():
            p[dead] = 0.0
    out = p @ v.data

    def build():
        def bwd(g):
            T.accumulate_grad(v, p.T @ g)
            gp = g @ v.data.T
            gs = p * (gp - (gp * p).sum(axis=1, keepdims=True))
            T.accumulate_grad(q, (gs @ k.data) * alpha)
            T.accumulate_grad(k, (gs.T @ q.data) * alpha)

        return bwd

    return T.make_op(out, (q, k, v), build)


@dataclass
class MultiHeadParams:
    """Projection weights for multi-head attention (no biases).

    ``wq``, ``wk``, ``wv`` are d x d; head h uses their column block
    [h*d/H, (h+1)*d/H). ``wo`` mixes the concatenated head outputs back
    to d. Total parameter count is exactly 4*d*d.
    """

    wq: T.Tensor
    wk: T.Tensor
    wv: T.Tensor
    wo: T.Tensor
    n_heads: int

    def params(self) -> list[T.Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params())


def init_multi_head(
    d: int, n_heads: int, rng: np.random.Generator, name: str = "mha"
) -> MultiHeadParams:
    if d % n_heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {n_heads} heads")

    def w(suffix):
        return T.Tensor(
            rng.standard_normal((d, d)) / np.sqrt(d),
            requires_grad=True,
            name=f"{name}/{suffix}",
        )

    return MultiHeadParams(w("wq"), w("wk"), w("wv"), w("wo"), n_heads)


def multi_head(
    q_in: T.Tensor,
    k_in: T.Tensor,
    v_in: T.Tensor,
    p: MultiHeadParams,
    mask: AttentionMask | None = None,
) -> T.Tensor:
    """Concat over heads of attention on learned per-head projections."""
    d = p.wq.shape[0]
    if q_in.shape[1] != d or k_in.shape[1] != d or v_in.shape[1] != d:
        raise DimensionError(
            f"inputs must have width {d}: {q_in.shape}, {k_in.shape}, {v_in.shape}"
        )
    dh = d // p.n_heads
    heads = []
    for h in range(p.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh = T.matmul(q_in, T.slice_rc(p.wq, cols=cols))
        kh = T.matmul(k_in, T.slice_rc(p.wk, cols=cols))
        vh = T.matmul(v_in, T.slice_rc(p.wv, cols=cols))
        heads.append(scaled_dot_attention(qh, kh, vh, mask))
    return T.matmul(T.concat_last_axis(heads), p.wo)


def self_attention(
    x: T.Tensor, p: MultiHeadParams, mask: AttentionMask | None = None
) -> T.Tensor:
    """Multi-head attention with queries, keys and values all from x."""
    return multi_head(x, x, x, p, mask)
