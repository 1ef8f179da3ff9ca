"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Everything downstream (attention blocks, the two decoders, the losses) is
built from the primitive operations in this module. Each operation records
its inputs and a backward closure on the produced tensor; calling
``backward`` on a scalar loss walks the recorded graph in reverse
topological order and accumulates gradients into every reachable tensor
that requires them.

Gradients accumulate across backward calls, so callers zero them
explicitly between optimizer applications (see ``zero_grads``). All math
is 64-bit; checkpoints are stored as 32-bit floats.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "parameter",
    "zero_grads",
    "backward",
    "add",
    "add_bias",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "concat_cols",
    "slice_cols",
    "mask_fill",
    "embedding_rows",
    "softmax_rows",
    "layer_norm_rows",
    "sum_all",
    "nll_probs_rows",
    "cross_entropy_rows",
    "AdamState",
    "adam_step",
    "finite_difference_check",
    "CHECKPOINT_MAGIC",
    "save_checkpoint",
    "load_checkpoint",
]

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording (pure forward math)."""

    def __enter__(self):
        self._saved = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAD_ENABLED[0] = self._saved
        return False


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Tensors produced by operations hold references to their parents and a
    backward closure; leaf tensors created with ``requires_grad=True`` are
    trainable parameters. Values are treated as immutable once created
    (the optimizer updates parameter values in place between steps, which
    is outside any recorded graph).
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Small conveniences for tests and call sites; all defer to module ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def parameter(values) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(values, requires_grad=True)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out = Tensor(values, requires_grad=True)
        out._parents = parents
        out._backward = backward_fn
        return out
    return Tensor(values)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    """Reset gradient slots; call between optimizer applications."""
    for t in tensors:
        t.grad = None


def backward(loss: Tensor) -> None:
    """Fill the grad slots of every tensor reachable from ``loss``.

    ``loss`` must be a scalar (a single value). Gradients add into any
    existing slots, so zero them first when reusing parameters.
    """
    if loss.values.size != 1:
        raise ValueError(
            f"backward requires a scalar, got shape {loss.values.shape}"
        )
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, children_done = stack.pop()
        if children_done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _ensure(a), _ensure(b)
    if a.values.shape != b.values.shape:
        raise ValueError(f"add shape mismatch: {a.values.shape} vs {b.values.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _result(a.values + b.values, (a, b), bwd)


def add_bias(m: Tensor, bias: Tensor) -> Tensor:
    """Add a length-d row vector to every row of an n x d matrix."""
    m, bias = _ensure(m), _ensure(bias)

    def bwd(g):
        if m.requires_grad:
            _accum(m, g)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _result(m.values + bias.values, (m, bias), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, same shapes."""
    a, b = _ensure(a), _ensure(b)
    if a.values.shape != b.values.shape:
        raise ValueError(f"mul shape mismatch: {a.values.shape} vs {b.values.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * bv)
        if b.requires_grad:
            _accum(b, g * av)

    return _result(av * bv, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    a = _ensure(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _result(a.values * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    av, bv = a.values, b.values

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ bv.T)
        if b.requires_grad:
            _accum(b, av.T @ g)

    return _result(av @ bv, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    a = _ensure(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _result(a.values.T.copy(), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = _ensure(a)
    keep = a.values > 0

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * keep)

    return _result(np.where(keep, a.values, 0.0), (a,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices with equal row counts along columns."""
    parts = [_ensure(p) for p in parts]
    widths = [p.values.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[:, lo:hi])

    return _result(np.concatenate([p.values for p in parts], axis=1), tuple(parts), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _ensure(a)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[:, start:stop] = g
            _accum(a, full)

    return _result(a.values[:, start:stop].copy(), (a,), bwd)


def mask_fill(m: Tensor, allowed: np.ndarray) -> Tensor:
    """Replace entries where ``allowed`` is False with -inf.

    Used on attention scores before softmax so forbidden keys receive
    exactly zero weight.
    """
    m = _ensure(m)
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != m.values.shape:
        raise ValueError(f"mask shape {allowed.shape} != matrix shape {m.values.shape}")

    def bwd(g):
        if m.requires_grad:
            _accum(m, g * allowed)

    return _result(np.where(allowed, m.values, -np.inf), (m,), bwd)


def embedding_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table; gradients scatter-add back."""
    table = _ensure(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise ValueError(
            f"id out of range [0, {table.values.shape[0]}): {int(idx.min())}..{int(idx.max())}"
        )

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.values)
            np.add.at(full, idx, g)
            _accum(table, full)

    return _result(table.values[idx], (table,), bwd)


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability.

    Rows containing -inf entries (from ``mask_fill``) give those entries
    exactly zero probability; at least one finite entry per row is assumed.
    """
    m = _ensure(m)
    v = m.values
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        if m.requires_grad:
            dot = (g * out).sum(axis=1, keepdims=True)
            _accum(m, out * (g - dot))

    return _result(out, (m,), bwd)


def layer_norm_rows(m: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance, then scale and shift.

    Population variance over the row width, guarded by ``eps`` inside the
    square root.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    m, gain, bias = _ensure(m), _ensure(gain), _ensure(bias)
    v = m.values
    mu = v.mean(axis=1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = (v - mu) * inv_std
    out = normed * gain.values + bias.values

    def bwd(g):
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))
        if gain.requires_grad:
            _accum(gain, (g * normed).sum(axis=0))
        if m.requires_grad:
            gy = g * gain.values
            mean_gy = gy.mean(axis=1, keepdims=True)
            mean_gy_n = (gy * normed).mean(axis=1, keepdims=True)
            _accum(m, inv_std * (gy - mean_gy - normed * mean_gy_n))

    return _result(out, (m, gain, bias), bwd)


def sum_all(a: Tensor) -> Tensor:
    a = _ensure(a)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.full_like(a.values, float(g)))

    return _result(np.asarray(a.values.sum()), (a,), bwd)


def _row_selector(n_rows: int, row_mask) -> np.ndarray:
    if row_mask is None:
        return np.arange(n_rows)
    row_mask = np.asarray(row_mask, dtype=bool)
    return np.flatnonzero(row_mask)


def nll_probs_rows(probs: Tensor, ids, row_mask=None) -> Tensor:
    """Sum of -log(probs[i, ids[i]]) over selected rows.

    ``probs`` rows are probability distributions (e.g. softmax output).
    """
    probs = _ensure(probs)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.shape[0] != probs.values.shape[0]:
        raise ValueError("ids length must match row count")
    if idx.size and (idx.min() < 0 or idx.max() >= probs.values.shape[1]):
        raise ValueError(f"gold id out of range [0, {probs.values.shape[1]})")
    rows = _row_selector(probs.values.shape[0], row_mask)
    picked = probs.values[rows, idx[rows]]

    def bwd(g):
        if probs.requires_grad:
            full = np.zeros_like(probs.values)
            full[rows, idx[rows]] = -float(g) / picked
            _accum(probs, full)

    return _result(np.asarray(-np.log(picked).sum()), (probs,), bwd)


def cross_entropy_rows(logits: Tensor, ids, row_mask=None) -> Tensor:
    """Sum over selected rows of softmax cross-entropy against ``ids``.

    Computed as logsumexp(row) - row[id]; backward is softmax(row) minus
    the one-hot target.
    """
    logits = _ensure(logits)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.shape[0] != logits.values.shape[0]:
        raise ValueError("ids length must match row count")
    if idx.size and (idx.min() < 0 or idx.max() >= logits.values.shape[1]):
        raise ValueError(f"gold id out of range [0, {logits.values.shape[1]})")
    rows = _row_selector(logits.values.shape[0], row_mask)
    sel = logits.values[rows]
    m = sel.max(axis=1, keepdims=True)
    e = np.exp(sel - m)
    z = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(z)).ravel()
    picked = sel[np.arange(len(rows)), idx[rows]]
    total = np.asarray((lse - picked).sum())

    def bwd(g):
        if logits.requires_grad:
            soft = e / z
            soft[np.arange(len(rows)), idx[rows]] -= 1.0
            full = np.zeros_like(logits.values)
            full[rows] = float(g) * soft
            _accum(logits, full)

    return _result(total, (logits,), bwd)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments and step counter, keyed by parameter name."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    Missing gradients are treated as zero. Call ``zero_grads`` before the
    next backward pass.
    """
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        m = state.m.setdefault(name, np.zeros_like(p.values))
        v = state.v.setdefault(name, np.zeros_like(p.values))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    Runs one recorded forward/backward pass to obtain analytic gradients,
    then perturbs every entry of every parameter by +/- h with recording
    disabled. Returns the maximum over entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    zero_grads(params)
    loss = f(params)
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.values)
        for p in params
    ]
    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.values.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(f(params).values)
                flat[i] = orig - h
                f_minus = float(f(params).values)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = ana_flat[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if rel > worst:
                    worst = rel
    return worst


# ---------------------------------------------------------------------------
# Checkpoint archive
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"QOIE-CKPT v1\n"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors as a QOIE-CKPT v1 archive.

    Layout after the magic line, per tensor: u32 name byte length, UTF-8
    name, u32 rank, u32 dims, then raw little-endian float32 values. Order
    follows the mapping's iteration order.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            if data.ndim:
                fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a QOIE-CKPT v1 archive into name -> float32 array."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a QOIE-CKPT v1 archive")
        out: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError(f"{path}: truncated archive")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if rank else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out
