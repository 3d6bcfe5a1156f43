"""Dense float64 tensors with a reverse-mode autodiff tape.

Covers exactly the operations the toy language model and its low-rank
adapter training need. Forward computation always works; recording onto a
Graph happens only when a Graph is active (``with Graph() as g:``) and an
input requires gradients. Without an active graph every op is a pure
numpy computation, which is what evaluation paths use.
"""

from __future__ import annotations

import numpy as np

RMS_EPS = 1e-5
MASK_FILL = -1e30


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


class Tensor:
    """A dense real-valued array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float64), requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn):
        self.out = out
        self.backward_fn = backward_fn


_ACTIVE: list["Graph"] = []


class Graph:
    """Ordered tape of recorded operations for one training step.

    Single-threaded by contract: one step owns one graph. Backward visits
    nodes in exact reverse of recorded order, so gradients are
    deterministic and bit-identical across repeated runs.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, backward_fn) -> None:
        out.requires_grad = True
        self._nodes.append(_Node(out, backward_fn))


def _active_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _maybe_record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    g = _active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        g._record(out, backward_fn)
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every reachable tensor.

    ``loss`` must be a scalar produced by operations recorded on ``graph``.
    Gradients of tensors not reachable from the loss are left untouched.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    for node in graph._nodes:
        node.out.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph._nodes):
        if node.out.grad is not None:
            node.backward_fn()


# ---------------------------------------------------------------------------
# Operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _maybe_record(out, (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    out = Tensor(x.data.T)  # view; ops never mutate input data

    def bwd():
        x._accum(out.grad.T)

    return _maybe_record(out, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _maybe_record(out, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s)

    def bwd():
        x._accum(out.grad * s)

    return _maybe_record(out, (x,), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd():
        g = out.grad
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _maybe_record(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd():
        x._accum(out.grad * (x.data > 0.0))

    return _maybe_record(out, (x,), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice [:, start:stop] of a rank-2 tensor."""
    if x.data.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}:{stop}] for shape {x.shape}")
    out = Tensor(x.data[:, start:stop])  # view; ops never mutate input data

    def bwd():
        g = np.zeros_like(x.data)
        g[:, start:stop] = out.grad
        x._accum(g)

    return _maybe_record(out, (x,), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate rank-2 tensors along columns."""
    if not parts:
        raise ShapeError("concat_cols: empty input list")
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError(
            f"concat_cols: row counts differ: {[p.shape for p in parts]}"
        )
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def bwd():
        g = out.grad
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accum(g[:, offset : offset + w])
            offset += w

    return _maybe_record(out, tuple(parts), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows"
        )
    out = Tensor(table.data[ids])

    def bwd():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        table._accum(g)

    return _maybe_record(out, (table,), bwd)


def rms_normalize(x: Tensor, gain: Tensor) -> Tensor:
    """Per-row x / sqrt(mean(x^2) + 1e-5), scaled by a learned gain vector."""
    if x.data.ndim != 2 or gain.data.ndim != 1 or gain.shape[0] != x.shape[1]:
        raise ShapeError(f"rms_normalize: shapes {x.shape} and {gain.shape}")
    inv = 1.0 / np.sqrt(np.mean(x.data**2, axis=1, keepdims=True) + RMS_EPS)
    normed = x.data * inv
    out = Tensor(normed * gain.data)
    n = x.shape[1]

    def bwd():
        g = out.grad
        if gain.requires_grad:
            gain._accum((g * normed).sum(axis=0))
        if x.requires_grad:
            gg = g * gain.data
            dot = (gg * x.data).sum(axis=1, keepdims=True)
            x._accum(gg * inv - x.data * (inv**3) * dot / n)

    return _maybe_record(out, (x, gain), bwd)


_CAUSAL_KEEP: dict[int, np.ndarray] = {}


def _causal_keep(t: int) -> np.ndarray:
    mask = _CAUSAL_KEEP.get(t)
    if mask is None:
        mask = np.tril(np.ones((t, t), dtype=bool))
        mask.setflags(write=False)
        _CAUSAL_KEEP[t] = mask
    return mask


def causal_masked_fill(scores: Tensor) -> Tensor:
    """Set positions j > i of a square score matrix to a large negative fill."""
    if scores.data.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"causal_masked_fill: need square matrix, got {scores.shape}")
    keep = _causal_keep(scores.shape[0])
    out = Tensor(np.where(keep, scores.data, MASK_FILL))

    def bwd():
        scores._accum(np.where(keep, out.grad, 0.0))

    return _maybe_record(out, (scores,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd():
        g = out.grad
        x._accum(y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _maybe_record(out, (x,), bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over positions of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.size != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs {targets.size} targets"
        )
    vocab = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy: target id out of range [0, {vocab})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    t = targets.size
    rows = np.arange(t)
    nll = lse - shifted[rows, targets]
    out = Tensor(np.float64(nll.mean()))

    def bwd():
        p = np.exp(shifted - lse[:, None])
        p[rows, targets] -= 1.0
        logits._accum(p * (float(out.grad) / t))

    return _maybe_record(out, (logits,), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.float64(x.data.sum()))

    def bwd():
        x._accum(np.full_like(x.data, float(out.grad)))

    return _maybe_record(out, (x,), bwd)
