"""Lightweight and dynamic convolutions over time and feature axes.

These replace the self-attention sublayer inside encoder/decoder blocks.
A lightweight convolution applies one small kernel per channel group,
shared across time; a dynamic convolution predicts that kernel afresh at
every time step from the current input vector. The frequency variants
slide the kernel over the feature channels of a single frame instead of
over time, and therefore stay non-causal even inside a decoder.

Conventions shared by all four ops:
  * zero padding outside the sequence (or channel range),
  * odd kernel sizes only, centered for non-causal use,
    ending at the current position for causal use,
  * kernels may be softmax-normalized along the tap axis before use,
  * DropConnect masks (already rescaled by 1/(1-rate)) multiply the
    time-axis kernel after normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError


def group_indices(d_v: int, n_shared: int) -> np.ndarray:
    """Channel -> kernel-group map: ceil((j+1)*H/d_v) - 1 for j = 0..d_v-1.

    Groups are contiguous and nondecreasing; when ``n_shared`` divides
    ``d_v`` every group covers exactly d_v/H consecutive channels.
    """
    j = np.arange(1, d_v + 1, dtype=np.int64)
    return (j * n_shared + d_v - 1) // d_v - 1


def _check_kernel(kernel: int) -> None:
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {kernel}")


def _shift_ranges(off: int, n: int) -> tuple[int, int, int, int] | None:
    """Output and source index ranges for a relative shift of ``off``."""
    if off >= 0:
        if off >= n:
            return None
        return 0, n - off, off, n
    if -off >= n:
        return None
    return -off, n, 0, n + off


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def lconv(
    v: T.Tensor,
    w: T.Tensor,
    causal: bool = False,
    kernel_softmax: bool = False,
    kernel_mask: np.ndarray | None = None,
) -> T.Tensor:
    """Time-axis lightweight convolution.

    ``w`` has shape (n_shared, kernel); channel j uses kernel row
    ``group_indices(d_v, n_shared)[j]``. Exactly n_shared*kernel weights.
    """
    if v.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"lconv needs 2-d input and kernel, got {v.shape}, {w.shape}")
    t_len, d_v = v.shape
    n_shared, kernel = w.shape
    _check_kernel(kernel)
    if kernel_mask is not None and kernel_mask.shape != (n_shared, kernel):
        raise DimensionError(f"kernel mask shape {kernel_mask.shape} != {w.shape}")
    gidx = group_indices(d_v, n_shared)
    c0 = kernel - 1 if causal else (kernel - 1) // 2

    soft = _softmax_last(w.data) if kernel_softmax else None
    eff = soft if kernel_softmax else w.data
    if kernel_mask is not None:
        eff = eff * kernel_mask
    wcols = eff[gidx, :]  # (d_v, kernel)

    out = np.zeros_like(v.data)
    for k in range(kernel):
        r = _shift_ranges(k - c0, t_len)
        if r is None:
            continue
        o0, o1, s0, s1 = r
        out[o0:o1] += wcols[:, k] * v.data[s0:s1]

    def build():
        def bwd(g):
            geff = np.zeros((n_shared, kernel))
            gv = np.zeros_like(v.data)
            for k in range(kernel):
                r = _shift_ranges(k - c0, t_len)
                if r is None:
                    continue
                o0, o1, s0, s1 = r
                colsum = (g[o0:o1] * v.data[s0:s1]).sum(axis=0)
                geff[:, k] = np.bincount(gidx, weights=colsum, minlength=n_shared)
                gv[s0:s1] += wcols[:, k] * g[o0:o1]
            if kernel_mask is not None:
                geff = geff * kernel_mask
            if kernel_softmax:
                graw = soft * (geff - (geff * soft).sum(axis=-1, keepdims=True))
            else:
                graw = geff
            T.accumulate_grad(w, graw)
            T.accumulate_grad(v, gv)

        return bwd

    return T.make_op(out, (v, w), build)


def dconv(
    v: T.Tensor,
    w_pred: T.Tensor,
    n_shared: int,
    kernel: int,
    causal: bool = False,
    kernel_softmax: bool = False,
    kernel_mask: np.ndarray | None = None,
) -> T.Tensor:
    """Time-axis dynamic convolution.

    The kernel at step t is predicted linearly from the input vector:
    ``w_pred`` has shape (n_shared*kernel, d_v) and the predicted bank at
    t is (w_pred @ v[t]).reshape(n_shared, kernel). Two gradient paths
    flow into ``v``: through the convolution and through the predictor.
    """
    if v.ndim != 2 or w_pred.ndim != 2:
        raise DimensionError(f"dconv needs 2-d operands, got {v.shape}, {w_pred.shape}")
    t_len, d_v = v.shape
    _check_kernel(kernel)
    if w_pred.shape != (n_shared * kernel, d_v):
        raise DimensionError(
            f"predictor shape {w_pred.shape} != ({n_shared * kernel}, {d_v})"
        )
    if kernel_mask is not None and kernel_mask.shape != (t_len, n_shared, kernel):
        raise DimensionError(
            f"kernel mask shape {kernel_mask.shape} != ({t_len}, {n_shared}, {kernel})"
        )
    gidx = group_indices(d_v, n_shared)
    c0 = kernel - 1 if causal else (kernel - 1) // 2

    raw = (v.data @ w_pred.data.T).reshape(t_len, n_shared, kernel)
    soft = _softmax_last(raw) if kernel_softmax else None
    eff = soft if kernel_softmax else raw
    if kernel_mask is not None:
        eff = eff * kernel_mask

    out = np.zeros_like(v.data)
    for k in range(kernel):
        r = _shift_ranges(k - c0, t_len)
        if r is None:
            continue
        o0, o1, s0, s1 = r
        out[o0:o1] += eff[o0:o1, gidx, k] * v.data[s0:s1]

    def build():
        onehot = (gidx[:, None] == np.arange(n_shared)[None, :]).astype(np.float64)

        def bwd(g):
            geff = np.zeros((t_len, n_shared, kernel))
            gv = np.zeros_like(v.data)
            for k in range(kernel):
                r = _shift_ranges(k - c0, t_len)
                if r is None:
                    continue
                o0, o1, s0, s1 = r
                geff[o0:o1, :, k] = (g[o0:o1] * v.data[s0:s1]) @ onehot
                gv[s0:s1] += eff[o0:o1, gidx, k] * g[o0:o1]
            if kernel_mask is not None:
                geff = geff * kernel_mask
            if kernel_softmax:
                graw = soft * (geff - (geff * soft).sum(axis=-1, keepdims=True))
            else:
                graw = geff
            flat = graw.reshape(t_len, n_shared * kernel)
            T.accumulate_grad(w_pred, flat.T @ v.data)
            gv += flat @ w_pred.data
            T.accumulate_grad(v, gv)

        return bwd

    return T.make_op(out, (v, w_pred), build)


def lconv_f(v: T.Tensor, w: T.Tensor, kernel_softmax: bool = False) -> T.Tensor:
    """Feature-axis lightweight convolution: one kernel slid over channels.

    ``w`` is a length-K vector. Always centered; channel order carries no
    causality so this stays symmetric even in a decoder.
    """
    if v.ndim != 2 or w.ndim != 1:
        raise DimensionError(f"lconv_f needs 2-d input and 1-d kernel, got {v.shape}, {w.shape}")
    t_len, d_v = v.shape
    kernel = w.shape[0]
    _check_kernel(kernel)
    c0 = (kernel - 1) // 2

    soft = _softmax_last(w.data) if kernel_softmax else None
    eff = soft if kernel_softmax else w.data

    out = np.zeros_like(v.data)
    for k in range(kernel):
        r = _shift_ranges(k - c0, d_v)
        if r is None:
            continue
        o0, o1, s0, s1 = r
        out[:, o0:o1] += eff[k] * v.data[:, s0:s1]

    def build():
        def bwd(g):
            geff = np.zeros(kernel)
            gv = np.zeros_like(v.data)
            for k in range(kernel):
                r = _shift_ranges(k - c0, d_v)
                if r is None:
                    continue
                o0, o1, s0, s1 = r
                geff[k] = (g[:, o0:o1] * v.data[:, s0:s1]).sum()
                gv[:, s0:s1] += eff[k] * g[:, o0:o1]
            if kernel_softmax:
                graw = soft * (geff - (geff * soft).sum())
            else:
                graw = geff
            T.accumulate_grad(w, graw)
            T.accumulate_grad(v, gv)

        return bwd

    return T.make_op(out, (v, w), build)


def dconv_f(v: T.Tensor, w_pred: T.Tensor, kernel_softmax: bool = False) -> T.Tensor:
    """Feature-axis dynamic convolution.

    The per-step kernel is predicted from the frame itself: ``w_pred``
    has shape (kernel, d_v) and the kernel at step t is w_pred @ v[t].
    Shared across channels within the step; always centered.
    """
    if v.ndim != 2 or w_pred.ndim != 2:
        raise DimensionError(f"dconv_f needs 2-d operands, got {v.shape}, {w_pred.shape}")
    t_len, d_v = v.shape
    kernel = w_pred.shape[0]
    _check_kernel(kernel)
    if w_pred.shape[1] != d_v:
        raise DimensionError(f"predictor width {w_pred.shape[1]} != channels {d_v}")
    c0 = (kernel - 1) // 2

    raw = v.data @ w_pred.data.T  # (t_len, kernel)
    soft = _softmax_last(raw) if kernel_softmax else None
    eff = soft if kernel_softmax else raw

    out = np.zeros_like(v.data)
    for k in range(kernel):
        r = _shift_ranges(k - c0, d_v)
        if r is None:
            continue
        o0, o1, s0, s1 = r
        out[:, o0:o1] += eff[:, k : k + 1] * v.data[:, s0:s1]

    def build():
        def bwd(g):
            geff = np.zeros((t_len, kernel))
            gv = np.zeros_like(v.data)
            for k in range(kernel):
                r = _shift_ranges(k - c0, d_v)
                if r is None:
                    continue
                o0, o1, s0, s1 = r
                geff[:, k] = (g[:, o0:o1] * v.data[:, s0:s1]).sum(axis=1)
                gv[:, s0:s1] += eff[:, k : k + 1] * g[:, o0:o1]
            if kernel_softmax:
                graw = soft * (geff - (geff * soft).sum(axis=-1, keepdims=True))
            else:
                graw = geff
            T.accumulate_grad(w_pred, graw.T @ v.data)
            gv += graw @ w_pred.data
            T.accumulate_grad(v, gv)

        return bwd

    return T.make_op(out, (v, w_pred), build)


# ---------------------------------------------------------------------------
# Convolution blocks (drop-in replacements for a self-attention sublayer)
# ---------------------------------------------------------------------------

CONV_KINDS = ("lconv", "dconv", "lconv2d", "dconv2d")


@dataclass
class ConvBlock:
    """One convolutional sublayer: GLU gate, conv, output projection.

    Plain time-axis kinds compute proj(conv(GLU(x @ w_in))); the 2d kinds
    run a time conv and a feature conv on the same gated input and mix
    the concatenation with a single (2d x d) projection instead of the
    per-branch output projection.
    """

    kind: str
    n_shared: int
    kernel: int
    w_in: T.Tensor                     # (d, 2d) GLU projection
    w_time: T.Tensor                   # lconv*: (H, K); dconv*: (H*K, d)
    w_out: T.Tensor | None = None      # (d, d), plain kinds only
    w_freq: T.Tensor | None = None     # lconv2d: (Kf,); dconv2d: (Kf, d)
    w_mix: T.Tensor | None = None      # (2d, d), 2d kinds only
    kernel_softmax: bool = False
    dropconnect: float = 0.0

    def params(self) -> list[T.Tensor]:
        out = [self.w_in, self.w_time]
        for p in (self.w_out, self.w_freq, self.w_mix):
            if p is not None:
                out.append(p)
        return out

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params())

    def _time_mask(
        self, t_len: int, training: bool, rng: np.random.Generator | None
    ) -> np.ndarray | None:
        """DropConnect mask over time-kernel weights, rescaled to keep scale."""
        if not training or self.dropconnect <= 0.0:
            return None
        if rng is None:
            raise ConfigError("DropConnect needs an rng in training mode")
        shape = (
            (self.n_shared, self.kernel)
            if self.kind in ("lconv", "lconv2d")
            else (t_len, self.n_shared, self.kernel)
        )
        keep = rng.random(shape) >= self.dropconnect
        return keep.astype(np.float64) / (1.0 - self.dropconnect)

    def forward(
        self,
        x: T.Tensor,
        causal: bool = False,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> T.Tensor:
        g = T.glu(T.matmul(x, self.w_in))
        mask = self._time_mask(g.shape[0], training, rng)
        if self.kind == "lconv":
            c = lconv(g, self.w_time, causal, self.kernel_softmax, mask)
            return T.matmul(c, self.w_out)
        if self.kind == "dconv":
            c = dconv(
                g, self.w_time, self.n_shared, self.kernel, causal,
                self.kernel_softmax, mask,
            )
            return T.matmul(c, self.w_out)
        if self.kind == "lconv2d":
            ct = lconv(g, self.w_time, causal, self.kernel_softmax, mask)
            cf = lconv_f(g, self.w_freq)
            return T.matmul(T.concat_last_axis([ct, cf]), self.w_mix)
        if self.kind == "dconv2d":
            ct = dconv(
                g, self.w_time, self.n_shared, self.kernel, causal,
                self.kernel_softmax, mask,
            )
            cf = dconv_f(g, self.w_freq)
            return T.matmul(T.concat_last_axis([ct, cf]), self.w_mix)
        raise ConfigError(f"unknown conv kind {self.kind!r}")


def init_conv_block(
    kind: str,
    d: int,
    n_shared: int,
    kernel: int,
    rng: np.random.Generator,
    kernel_softmax: bool = False,
    dropconnect: float = 0.0,
    freq_kernel: int | None = None,
    name: str = "conv",
) -> ConvBlock:
    """Allocate parameters for one conv sublayer of width ``d``."""
    if kind not in CONV_KINDS:
        raise ConfigError(f"conv kind must be one of {CONV_KINDS}, got {kind!r}")
    _check_kernel(kernel)
    if n_shared < 1:
        raise ConfigError(f"n_shared must be positive, got {n_shared}")
    kf = kernel if freq_kernel is None else freq_kernel
    _check_kernel(kf)

    def t(shape, scale, suffix):
        return T.Tensor(
            rng.standard_normal(shape) * scale, requires_grad=True, name=f"{name}/{suffix}"
        )

    w_in = t((d, 2 * d), 1.0 / np.sqrt(d), "w_in")
    w_out = w_freq = w_mix = None
    if kind in ("lconv", "lconv2d"):
        w_time = t((n_shared, kernel), 1.0 / np.sqrt(kernel), "w_time")
    else:
        w_time = t((n_shared * kernel, d), 1.0 / np.sqrt(d * kernel), "w_time")
    if kind in ("lconv", "dconv"):
        w_out = t((d, d), 1.0 / np.sqrt(d), "w_out")
    else:
        w_freq = (
            t((kf,), 1.0 / np.sqrt(kf), "w_freq")
            if kind == "lconv2d"
            else t((kf, d), 1.0 / np.sqrt(d * kf), "w_freq")
        )
        w_mix = t((2 * d, d), 1.0 / np.sqrt(2 * d), "w_mix")
    return ConvBlock(
        kind=kind,
        n_shared=n_shared,
        kernel=kernel,
        w_in=w_in,
        w_time=w_time,
        w_out=w_out,
        w_freq=w_freq,
        w_mix=w_mix,
        kernel_softmax=kernel_softmax,
        dropconnect=dropconnect,
    )
