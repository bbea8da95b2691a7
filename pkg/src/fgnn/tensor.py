"""Dense float64 tensors with reverse-mode automatic differentiation.

The design is a classic gradient tape: while a :class:`Tape` is active (as a
context manager), every primitive that touches a tracked tensor appends a
backward closure to the tape.  ``Tape.backward(loss)`` seeds the scalar loss
with gradient 1 and replays the records in reverse, accumulating into the
``grad`` buffers of tracked inputs.  Leaf gradients accumulate across
``backward`` calls; intermediate gradients are reset at the start of each
call.  Outside a tape, all primitives are plain numpy forward computations.

Only the primitives the recommendation model needs are provided; there is no
general broadcasting engine beyond what those primitives use.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ShapeError, VocabError


class Tensor:
    """A float64 ndarray plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small amount of operator sugar so model code reads naturally
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every tracked leaf's grad."""
        if loss.data.ndim != 0:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss.grad is None:
            raise ContractError("loss tensor is not tracked by this tape")
        for out, _ in self._records:
            out.grad[...] = 0.0
        loss.grad[...] = 1.0
        for out, backward_fn in reversed(self._records):
            backward_fn(out.grad)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_output(data, inputs, backward_fn) -> Tensor:
    """Create an op output; register its backward rule when tracing."""
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape._records.append((out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: need 2-d x (1|2)-d, got {a.shape} x {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    data = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        if a.requires_grad:
            if b_data.ndim == 2:
                a.grad += g @ b_data.T
            else:
                a.grad += np.outer(g, b_data)
        if b.requires_grad:
            b.grad += a_data.T @ g

    return _make_output(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need 2-d, got {a.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += g.T

    return _make_output(np.ascontiguousarray(a.data.T), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.grad += g[tuple(sl)]

    return _make_output(data, tensors, backward)


def gather(a: Tensor, indices) -> Tensor:
    """Rows (axis 0) of ``a`` at ``indices``; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather: indices must be 1-d, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise VocabError(f"gather: index out of range [0, {a.data.shape[0]})")
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            if g.ndim == 2:
                kernels.scatter_add_rows(a.grad, idx, np.ascontiguousarray(g))
            else:
                kernels.scatter_add_1d(a.grad, idx, np.ascontiguousarray(g))

    return _make_output(data, (a,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _make_output(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} - {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    return _make_output(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b_data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a_data, b.data.shape)

    return _make_output(data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    positive = a.data > 0.0

    def backward(g):
        if a.requires_grad:
            a.grad += g * positive

    return _make_output(data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0.0, 1.0, slope)
    data = a.data * factor

    def backward(g):
        if a.requires_grad:
            a.grad += g * factor

    return _make_output(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * data

    return _make_output(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    a_data = a.data

    def backward(g):
        if a.requires_grad:
            a.grad += g / a_data

    return _make_output(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # exp of a non-positive argument on both branches, so no overflow
    e = np.exp(-np.abs(a.data))
    data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        if a.requires_grad:
            a.grad += g * data * (1.0 - data)

    return _make_output(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * (1.0 - data * data)

    return _make_output(data, (a,), backward)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - numpy-style name
    data = a.data.sum(axis=axis)
    shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.grad += g
            else:
                a.grad += np.broadcast_to(np.expand_dims(g, axis), shape)

    return _make_output(data, (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    data = a.data.mean(axis=axis)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.grad += g / n
            else:
                a.grad += np.broadcast_to(np.expand_dims(g, axis), shape) / n

    return _make_output(data, (a,), backward)


def masked_softmax(a: Tensor, mask) -> Tensor:
    """Softmax over the True positions of each row; exact zeros elsewhere.

    The reduction is restricted to the mask (off-mask logits never enter the
    normalisation), so off-mask outputs and gradients are exactly zero.
    ``mask`` broadcasts against ``a`` along leading axes.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax: some row has an empty mask")
    masked = np.where(mask, a.data, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (data * g).sum(axis=-1, keepdims=True)
            a.grad += data * (g - dot)

    return _make_output(data, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    return masked_softmax(a, np.ones(a.data.shape[-1], dtype=bool))


def log_softmax_nll(z: Tensor, labels) -> Tensor:
    """Summed negative log-likelihood of ``labels`` under softmax rows of ``z``."""
    if z.data.ndim != 2:
        raise ShapeError(f"log_softmax_nll: need 2-d logits, got {z.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, m = z.data.shape
    if labels.shape != (n,):
        raise ShapeError(
            f"log_softmax_nll: labels shape {labels.shape} does not match {n} rows"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise VocabError(f"log_softmax_nll: label outside [0, {m})")
    row_max = z.data.max(axis=1, keepdims=True)
    shifted = z.data - row_max
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    data = np.float64((log_norm - picked).sum())
    probs = np.exp(shifted - log_norm[:, None])

    def backward(g):
        if z.requires_grad:
            dz = probs.copy()
            dz[np.arange(n), labels] -= 1.0
            z.grad += g * dz

    return _make_output(data, (z,), backward)


# ---------------------------------------------------------------------------
# segment primitives over ragged batches (CSR offsets, non-empty segments)
# ---------------------------------------------------------------------------

def segment_softmax(scores: Tensor, offsets: np.ndarray, mask=None) -> Tensor:
    """Per-segment softmax of a flat score vector.

    With ``mask`` (bool per entry) the normalisation runs over eligible
    entries only and ineligible outputs are exactly zero.  Every segment must
    keep at least one eligible entry.
    """
    if scores.data.ndim != 1:
        raise ShapeError(f"segment_softmax: need 1-d scores, got {scores.shape}")
    offsets = np.asarray(offsets, dtype=np.int64)
    if mask is None:
        data = kernels.segment_softmax(scores.data, offsets)
    else:
        mask = np.ascontiguousarray(mask, dtype=bool)
        if (np.add.reduceat(mask, offsets[:-1]) == 0).any():
            raise ContractError("segment_softmax: a segment has no eligible entry")
        data = kernels.masked_segment_softmax(scores.data, offsets, mask)

    def backward(g):
        if scores.requires_grad:
            scores.grad += kernels.segment_softmax_grad(
                data, np.ascontiguousarray(g), offsets
            )

    return _make_output(data, (scores,), backward)


def segment_weighted_sum(weights: Tensor, rows: Tensor, offsets: np.ndarray) -> Tensor:
    """Per-segment sum of ``weights[e] * rows[e]`` giving one row per segment."""
    if weights.data.ndim != 1 or rows.data.ndim != 2:
        raise ShapeError(
            f"segment_weighted_sum: need (E,) and (E, d), got {weights.shape}, {rows.shape}"
        )
    if weights.data.shape[0] != rows.data.shape[0]:
        raise ShapeError(
            f"segment_weighted_sum: {weights.shape} vs {rows.shape} rows differ"
        )
    offsets = np.asarray(offsets, dtype=np.int64)
    data = kernels.segment_weighted_sum(weights.data, rows.data, offsets)
    w_data, r_data = weights.data, rows.data

    def backward(g):
        gw, gr = kernels.segment_weighted_sum_grad(
            w_data, r_data, np.ascontiguousarray(g), offsets
        )
        if weights.requires_grad:
            weights.grad += gw
        if rows.requires_grad:
            rows.grad += gr

    return _make_output(data, (weights, rows), backward)


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------

@dataclass
class GRUParams:
    """Gate parameters for a GRU cell (input maps w_*, hidden maps u_*)."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    def named(self, prefix: str = "gru"):
        for field in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"):
            yield f"{prefix}.{field}", getattr(self, field)


def gru_cell(x: Tensor, h: Tensor, p: GRUParams) -> Tensor:
    """One GRU step: rows of ``x`` are inputs, rows of ``h`` previous hidden.

    Reset-after convention: the reset gate scales the hidden contribution
    inside the candidate; new hidden = (1 - z) * candidate + z * h.
    """
    if x.data.shape[0] != h.data.shape[0]:
        raise ShapeError(f"gru_cell: batch sizes differ, {x.shape} vs {h.shape}")
    if x.data.shape[1] != p.w_z.data.shape[0] or h.data.shape[1] != p.u_z.data.shape[0]:
        raise ShapeError(
            f"gru_cell: input {x.shape} / hidden {h.shape} do not match "
            f"weights {p.w_z.shape} / {p.u_z.shape}"
        )
    z = sigmoid(matmul(x, p.w_z) + matmul(h, p.u_z) + p.b_z)
    r = sigmoid(matmul(x, p.w_r) + matmul(h, p.u_r) + p.b_r)
    cand = tanh(matmul(x, p.w_h) + r * matmul(h, p.u_h) + p.b_h)
    return (1.0 - z) * cand + z * h


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, tensors, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f()`` and central differences.

    ``f`` must return a scalar Tensor computed from the given tracked
    ``tensors``.  Relative error per coordinate is |a - b| / max(1e-8, |a| + |b|).
    """
    tensors = list(tensors)
    for t in tensors:
        if not t.requires_grad:
            raise ContractError("grad_check: all checked tensors must require grad")
        t.zero_grad()
    with Tape() as tape:
        out = f()
    if not np.isfinite(out.data):
        raise NumericError("grad_check: function value is not finite")
    tape.backward(out)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("grad_check: non-finite perturbed value")
            numeric = (up - down) / (2.0 * eps)
            rel = abs(g_flat[i] - numeric) / max(1e-8, abs(g_flat[i]) + abs(numeric))
            if rel > worst:
                worst = rel
    return worst


# ---------------------------------------------------------------------------
# named-tensor archive (checkpoint format)
# ---------------------------------------------------------------------------

_MANIFEST = "manifest.json"
_TENSORS = "tensors.bin"


def save_tensor_archive(directory, named_arrays, extra: dict | None = None) -> None:
    """Write named float64 arrays as raw little-endian bytes plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / _TENSORS, "wb") as fh:
        for name, arr in named_arrays:
            arr = np.asarray(arr, dtype=np.float64)
            raw = arr.astype("<f8").tobytes(order="C")
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += len(raw)
    manifest = {"tensors": entries}
    if extra:
        manifest.update(extra)
    with open(directory / _MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_tensor_archive(directory):
    """Read back (ordered name->array dict, manifest dict)."""
    directory = Path(directory)
    with open(directory / _MANIFEST, encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = (directory / _TENSORS).read_bytes()
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        buf = raw[start:start + count * struct.calcsize("<d")]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, manifest
