"""Dense float64 tensors with a dynamic reverse-mode differentiation tape.

Everything downstream (attention, gating, span scoring) is built from the
operations in this module. Forward values are plain numpy arrays; when a
Tape is active, each op appends a backward closure so that Tape.backward
can replay the recorded program in reverse order and accumulate gradients
into Tensor.grad. Without an active tape the ops are pure numpy (fast
inference path).

The active tape is thread-local: one tape (and the forward pass recording
onto it) stays on its thread, so distinct model instances may train on
distinct threads without sharing state. A single tape is never shareable
across threads.
"""

from __future__ import annotations

import math
import threading
from collections.abc import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractViolation(RuntimeError):
    """An operation was called outside its documented preconditions."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic PCG64 generator for (seed, stream...).

    All randomness in the package flows through this helper so that runs
    are bit-reproducible from a single config seed. Distinct stream ids
    give statistically independent, order-insensitive substreams.
    """
    return np.random.default_rng([int(seed)] + [int(s) for s in stream])


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


_TLS = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_TLS, "tape", None)


class Tape:
    """Ordered record of executed differentiable operations.

    Ops are appended in execution order, so iterating the record backwards
    visits each node after everything that consumed its output: a reverse
    topological order. backward() consumes the tape.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractViolation("tapes do not nest")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TLS.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every tensor the scalar loss depends on."""
        if loss.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, back in reversed(self._nodes):
            if out.grad is not None:
                back(out.grad)
        self._nodes.clear()


def _accum(t: Tensor, g: np.ndarray) -> None:
    # copy on first write: g may alias another tensor's gradient buffer
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _make(data: np.ndarray, back: Callable[[np.ndarray], None], *inputs: Tensor) -> Tensor:
    """Wrap a forward result; record the backward closure if a tape is live."""
    tape = _active_tape()
    needs = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._nodes.append((out, back))
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, back, a, b)


def transpose(x: Tensor) -> Tensor:
    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g.T)

    return _make(x.data.T.copy(), back, x)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, back, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, back, a, b)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * c)

    return _make(x.data * c, back, x)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a learnable scalar tensor (size-1)."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by: scalar tensor expected, got shape {s.shape}")
    sv = float(s.data.reshape(-1)[0])

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * sv)
        if s.requires_grad:
            _accum(s, np.full_like(s.data, np.sum(g * x.data)))

    return _make(x.data * sv, back, x, s)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-m vector to every row of an n-by-m tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape}")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(x.data + b.data, back, x, b)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Scale row t of x by w[t] (w is a length-L vector, x is L-by-m)."""
    wv = w.data.reshape(-1)
    if x.data.ndim != 2 or wv.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows: shapes {x.shape} and {w.shape}")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * wv[:, None])
        if w.requires_grad:
            _accum(w, (g * x.data).sum(axis=1).reshape(w.shape))

    return _make(x.data * wv[:, None], back, x, w)


# ---------------------------------------------------------------------------
# shape surgery
# ---------------------------------------------------------------------------


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors vertically."""
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ: {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), back, *parts)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors horizontally."""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), back, *parts)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo <= hi <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{lo}:{hi}] out of range for shape {x.shape}")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[lo:hi] = g
            _accum(x, full)

    return _make(x.data[lo:hi].copy(), back, x)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] out of range for shape {x.shape}")

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            _accum(x, full)

    return _make(x.data[:, lo:hi].copy(), back, x)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup (embedding): out[i] = table[ids[i]]."""
    idx = np.asarray(list(ids), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: id out of range for table {table.shape}")

    def back(g: np.ndarray) -> None:
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _accum(table, full)

    return _make(table.data[idx].copy(), back, table)


def mean_pool_rows(x: Tensor, positions: Sequence[int]) -> Tensor:
    """Arithmetic mean of the selected rows, returned as a 1-by-m tensor."""
    pos = list(positions)
    if not pos:
        raise ContractViolation("mean_pool_rows: empty position set")
    if max(pos) >= x.shape[0] or min(pos) < 0:
        raise ShapeError(f"mean_pool_rows: position out of range for shape {x.shape}")
    idx = np.asarray(pos, dtype=np.intp)
    inv = 1.0 / len(pos)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g[0] * inv)
            _accum(x, full)

    return _make(x.data[idx].mean(axis=0, keepdims=True), back, x)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function; outputs strictly inside (0, 1).

    Saturated values are clamped to the nearest representable floats inside
    the open interval so extreme inputs cannot round onto the endpoints.
    """
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * out * (1.0 - out))

    return _make(out, back, x)


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth GELU (tanh form); smoothness keeps finite-difference checks clean."""
    xd = x.data
    inner = _GELU_K * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            d_inner = _GELU_K * (1.0 + 3 * 0.044715 * xd**2)
            _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * d_inner))

    return _make(out, back, x)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for overflow safety."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: 2-D input expected, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _make(out, back, x)


def weighted_softmax_rows(x: Tensor, w: Tensor) -> Tensor:
    """Softmax over rows where column j's exponential carries weight w[j].

    y[i,j] = w[j] exp(x[i,j]) / sum_k w[k] exp(x[i,k]), with weights >= 0.
    A zero-weight column contributes nothing, to the normalizer included,
    which is what lets a fully closed gate remove prefix slots exactly.
    Gradients w.r.t. the weights stay finite at w == 0.
    """
    wv = w.data.reshape(-1)
    if x.data.ndim != 2 or wv.shape[0] != x.shape[1]:
        raise ShapeError(f"weighted_softmax_rows: shapes {x.shape} and {w.shape}")
    if np.any(wv < 0):
        raise ContractViolation("weighted_softmax_rows: negative column weight")
    u = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    z = (u * wv).sum(axis=1, keepdims=True)
    if np.any(z == 0):
        raise ContractViolation("weighted_softmax_rows: all-zero row normalizer")
    out = u * wv / z

    def back(g: np.ndarray) -> None:
        r = (g * out).sum(axis=1, keepdims=True)
        if x.requires_grad:
            _accum(x, out * (g - r))
        if w.requires_grad:
            _accum(w, ((u / z) * (g - r)).sum(axis=0).reshape(w.shape))

    return _make(out, back, x, w)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to mean 0 / unit variance, then affine."""
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: shapes {x.shape}, {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    d = x.data - mu
    var = (d * d).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = d * inv
    out = y * gamma.data + beta.data

    def back(g: np.ndarray) -> None:
        if beta.requires_grad:
            _accum(beta, g.sum(axis=0))
        if gamma.requires_grad:
            _accum(gamma, (g * y).sum(axis=0))
        if x.requires_grad:
            dy = g * gamma.data
            _accum(
                x,
                inv * (dy - dy.mean(axis=1, keepdims=True) - y * (dy * y).mean(axis=1, keepdims=True)),
            )

    return _make(out, back, x, gamma, beta)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate {rate} outside [0, 1)")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g * mask)

    return _make(x.data * mask, back, x)


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, np.full_like(x.data, float(g)))

    return _make(np.asarray(x.data.sum()), back, x)


def row_nll(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Sum over rows of -log softmax(logits[k])[targets[k]].

    Computed in log space (max-shifted) so the value matches a direct
    softmax-then-log evaluation to full float64 precision.
    """
    tgt = np.asarray(list(targets), dtype=np.intp)
    if logits.data.ndim != 2 or tgt.shape[0] != logits.shape[0]:
        raise ShapeError(f"row_nll: logits {logits.shape} vs {tgt.shape[0]} targets")
    n = logits.shape[1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n):
        raise ContractViolation(f"row_nll: target index out of range 0..{n - 1}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    zsum = e.sum(axis=1)
    probs = e / zsum[:, None]
    rows = np.arange(tgt.shape[0])
    loss = float(np.sum(np.log(zsum) - shifted[rows, tgt]))

    def back(g: np.ndarray) -> None:
        if logits.requires_grad:
            dl = probs.copy()
            dl[rows, tgt] -= 1.0
            _accum(logits, dl * float(g))

    return _make(np.asarray(loss), back, logits)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def finite_diff_gradient(
    f: Callable[[], float], param: Tensor, flat_index: int, eps: float = 1e-4
) -> float:
    """Central-difference estimate of d f / d param[flat_index].

    f must be deterministic given the current parameter values; the probed
    entry is restored exactly afterwards.
    """
    flat = param.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + eps
    f_plus = f()
    flat[flat_index] = orig - eps
    f_minus = f()
    flat[flat_index] = orig
    return (f_plus - f_minus) / (2.0 * eps)


def relative_error(a: float, b: float, floor: float = 1e-3) -> float:
    """|a - b| scaled by max(|a|, |b|, floor); floor absorbs near-zero noise."""
    return abs(a - b) / max(abs(a), abs(b), floor)
