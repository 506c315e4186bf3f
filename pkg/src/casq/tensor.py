"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major ``numpy`` float64 array. Operations on
tensors that participate in gradient tracking record a backward closure
and parent links on the result, forming a dynamic per-forward graph.
``backward`` walks that graph once, in reverse topological order, and
accumulates gradients into every reachable tensor that requires them.

Shapes are taken literally: the only implicit broadcast anywhere is
adding a length-n bias vector to every row of an m-by-n matrix. All
other shape coercions must be spelled out by the caller.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, VocabError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the ``with`` block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus optional gradient and tape participation.

    ``data`` is treated as immutable once the tensor has entered a graph;
    the optimizer is the single sanctioned writer of parameter data
    between forward passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; the named functions are the API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    bwd_builder: Callable[[], Callable[[np.ndarray], None]] | None,
) -> Tensor:
    """Wrap ``data`` as the result of an operation over ``parents``.

    ``bwd_builder`` is only invoked when the tape is live and some parent
    requires gradients, so closures (and anything they capture) are never
    allocated in evaluation mode.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and bwd_builder is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd_builder()
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating on first touch."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Fills ``grad`` on every reachable tensor with ``requires_grad`` and
    returns a map from reachable leaf tensors (parameters) to their
    gradients. Each tape node's closure runs exactly once, in reverse
    topological order, so repeated identical forward/backward runs are
    bit-identical.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require gradients (nothing on the tape)")

    # Iterative post-order DFS. A node is emitted only after all parents
    # it reaches have been scheduled, yielding a topological order.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        if node._bwd is not None:
            if node.grad is None:
                # Reachable from the loss but received no gradient; skip.
                continue
            node._bwd(node.grad)
        elif node.requires_grad and node.grad is not None:
            leaves[node] = node.grad
    return leaves


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m-by-k and a k-by-n tensor."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def build():
        def bwd(g):
            accumulate_grad(a, g @ b.data.T)
            accumulate_grad(b, a.data.T @ g)

        return bwd

    return make_op(out, (a, b), build)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got {a.shape}")
    out = a.data.T.copy()

    def build():
        def bwd(g):
            accumulate_grad(a, g.T)

        return bwd

    return make_op(out, (a,), build)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a length-n bias vector for an m-by-n lhs."""
    bias_row = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    if not bias_row and a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def build():
        def bwd(g):
            accumulate_grad(a, g)
            accumulate_grad(b, g.sum(axis=0) if bias_row else g)

        return bwd

    return make_op(out, (a, b), build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def build():
        def bwd(g):
            accumulate_grad(a, g * b.data)
            accumulate_grad(b, g * a.data)

        return bwd

    return make_op(out, (a, b), build)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def build():
        def bwd(g):
            accumulate_grad(a, g * c)

        return bwd

    return make_op(out, (a,), build)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused ``x @ w + b`` (bias broadcast over rows)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine shapes incompatible: {x.shape} @ {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"affine bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def build():
        def bwd(g):
            accumulate_grad(x, g @ w.data.T)
            accumulate_grad(w, x.data.T @ g)
            if b is not None:
                accumulate_grad(b, g.sum(axis=0))

        return bwd

    return make_op(out, parents, build)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def build():
        def bwd(g):
            accumulate_grad(a, g * (a.data > 0.0))

        return bwd

    return make_op(out, (a,), build)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def build():
        def bwd(g):
            accumulate_grad(a, g * out * (1.0 - out))

        return bwd

    return make_op(out, (a,), build)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def glu(a: Tensor) -> Tensor:
    """Gated linear unit over the last axis: ``value * sigmoid(gate)``."""
    d2 = a.shape[-1]
    if d2 % 2 != 0:
        raise DimensionError(f"glu needs an even last extent, got {a.shape}")
    d = d2 // 2
    val = a.data[..., :d]
    gate = _sigmoid(a.data[..., d:])
    out = val * gate

    def build():
        def bwd(g):
            ga = np.empty_like(a.data)
            ga[..., :d] = g * gate
            ga[..., d:] = g * val * gate * (1.0 - gate)
            accumulate_grad(a, ga)

        return bwd

    return make_op(out, (a,), build)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rejects NaN input."""
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    p = _softmax_rows(a.data)

    def build():
        def bwd(g):
            dot = (g * p).sum(axis=-1, keepdims=True)
            accumulate_grad(a, p * (g - dot))

        return bwd

    return make_op(p, (a,), build)


def log_softmax_rows(a: Tensor) -> Tensor:
    if np.isnan(a.data).any():
        raise NumericError("log-softmax input contains NaN")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def build():
        p = np.exp(out)

        def bwd(g):
            accumulate_grad(a, g - p * g.sum(axis=-1, keepdims=True))

        return bwd

    return make_op(out, (a,), build)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def build():
        def bwd(g):
            accumulate_grad(a, g / a.data)

        return bwd

    return make_op(out, (a,), build)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def build():
        def bwd(g):
            accumulate_grad(a, g * out)

        return bwd

    return make_op(out, (a,), build)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = a.data.sum()

    def build():
        def bwd(g):
            accumulate_grad(a, np.full(a.shape, float(g)))

        return bwd

    return make_op(np.asarray(out), (a,), build)


def concat_last_axis(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis, preserving argument order."""
    if not parts:
        raise DimensionError("concat of zero tensors")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat leading dims differ: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def build():
        def bwd(g):
            off = 0
            for p, w in zip(parts, widths):
                accumulate_grad(p, g[..., off : off + w])
                off += w

        return bwd

    return make_op(out, tuple(parts), build)


def pad(a: Tensor, rows: tuple[int, int] = (0, 0), cols: tuple[int, int] = (0, 0)) -> Tensor:
    """Zero-pad a 2-d tensor by (before, after) rows and columns."""
    if a.ndim != 2:
        raise DimensionError(f"pad needs a 2-d tensor, got {a.shape}")
    out = np.pad(a.data, (rows, cols))
    r0, r1 = rows[0], rows[0] + a.shape[0]
    c0, c1 = cols[0], cols[0] + a.shape[1]

    def build():
        def bwd(g):
            accumulate_grad(a, g[r0:r1, c0:c1])

        return bwd

    return make_op(out, (a,), build)


def slice_rc(a: Tensor, rows: slice = slice(None), cols: slice = slice(None)) -> Tensor:
    """Basic (possibly strided) row/column slice of a 2-d tensor."""
    if a.ndim != 2:
        raise DimensionError(f"slice needs a 2-d tensor, got {a.shape}")
    out = a.data[rows, cols].copy()

    def build():
        def bwd(g):
            ga = np.zeros_like(a.data)
            ga[rows, cols] = g
            accumulate_grad(a, ga)

        return bwd

    return make_op(out, (a,), build)


def embed_lookup(ids, table: Tensor) -> Tensor:
    """Gather rows of ``table`` by integer id; duplicate ids sum gradients."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"embed ids must be 1-d, got shape {idx.shape}")
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise VocabError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def build():
        def bwd(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            accumulate_grad(table, gt)

        return bwd

    return make_op(out, (table,), build)


def pick_rows(a: Tensor, ids) -> Tensor:
    """Select ``a[i, ids[i]]`` for every row i, yielding a vector."""
    idx = np.asarray(ids, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"pick_rows needs one id per row: {a.shape} vs {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise VocabError(f"column id out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx].copy()

    def build():
        def bwd(g):
            ga = np.zeros_like(a.data)
            ga[rows, idx] = g
            accumulate_grad(a, ga)

        return bwd

    return make_op(out, (a,), build)


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalization followed by an elementwise affine."""
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm shapes: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def build():
        def bwd(g):
            gxhat = g * gain.data
            m1 = gxhat.mean(axis=1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
            accumulate_grad(x, inv * (gxhat - m1 - xhat * m2))
            accumulate_grad(gain, (g * xhat).sum(axis=0))
            accumulate_grad(bias, g.sum(axis=0))

        return bwd

    return make_op(out, (x, gain, bias), build)
