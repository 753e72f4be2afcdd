"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op that has at least one grad-requiring input records a
:class:`Node` on its output. :func:`backward` orders the recorded nodes into a
:class:`Tape` (inputs before outputs), walks it in reverse exactly once and
then releases it; a second ``backward`` over the same graph raises
:class:`UsageError` instead of silently double-accumulating.

Only bias-row broadcasting is supported (``add`` of a trailing-axis vector).
Batched ``matmul`` requires identical leading dimensions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, UsageError

_ids = itertools.count(1)

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, float(other))

    __rmul__ = __mul__

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass(eq=False)
class Node:
    """One recorded op: its inputs, its output and how to push gradients back."""

    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    op: str
    id: int = field(default_factory=lambda: next(_ids))


@dataclass
class Tape:
    """Recorded ops in topological order (inputs precede consumers)."""

    entries: list[tuple[Node, Tensor]]

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[tuple[Node, Tensor]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                order.append((node, t))
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((t, True))
            for inp in node.inputs:
                if inp._node is not None and inp._node.id not in seen:
                    stack.append((inp, False))
        return cls(order)


def _record(out: Tensor, inputs: tuple[Tensor, ...], op: str, fn) -> Tensor:
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(inputs, fn, op)
        out._node = node
        out.tape_id = node.id
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _new(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t.tape_id = None
    t._node = None
    t.name = None
    return t


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly."""
    if (
        a.data.ndim < 2
        or a.data.ndim != b.data.ndim
        or a.shape[-1] != b.shape[-2]
        or a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _new(np.matmul(a.data, b.data))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), "matmul", back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; defaults to swapping the last two."""
    if axes is None:
        if a.data.ndim < 2:
            raise DimensionError(f"transpose needs >= 2 dims, got {a.shape}")
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _new(np.transpose(a.data, axes))
    return _record(out, (a,), "transpose", lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    out = _new(data)
    return _record(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along ``axis`` (dropping it)."""
    out = _new(np.ascontiguousarray(np.take(a.data, index, axis=axis)))

    def back(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (a,), "select", back)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a bias row matching ``a``'s last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        out = _new(a.data + b.data)
        return _record(out, (a, b), "add", lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = _new(a.data + b.data)
        lead = tuple(range(a.data.ndim - 1))
        return _record(out, (a, b), "add_bias", lambda g: (g, g.sum(axis=lead)))
    raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = _new(a.data * b.data)
    return _record(out, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def mul_const(a: Tensor, c: float) -> Tensor:
    out = _new(a.data * c)
    return _record(out, (a,), "mul_const", lambda g: (g * c,))


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``a`` by the single-element tensor ``s``.

    The gradient reaching ``s`` is ``sum(a * upstream)``; this is the path a
    learnable scaling factor trains through.
    """
    s = as_tensor(s)
    if s.size != 1:
        raise DimensionError(f"scale factor must have one element, got shape {s.shape}")
    sv = s.data.reshape(-1)[0]
    out = _new(a.data * sv)

    def back(g):
        ga = g * sv if a.requires_grad else None
        gs = np.array([np.sum(a.data * g)]).reshape(s.shape) if s.requires_grad else None
        return ga, gs

    return _record(out, (a, s), "scale", back)


def sum_all(a: Tensor) -> Tensor:
    out = _new(np.array([a.data.sum()]))
    return _record(out, (a,), "sum", lambda g: (np.full_like(a.data, g[0]),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + GELU_K * x2))
    half_1pt = 0.5 + 0.5 * t
    out = _new(x * half_1pt)

    def back(g):
        d = half_1pt + (0.5 * GELU_C) * x * (1.0 - t * t) * (1.0 + 3.0 * GELU_K * x2)
        return (g * d,)

    return _record(out, (a,), "gelu", back)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` (broadcastable boolean, True = excluded) sends entries to -inf
    before normalisation. A slice with every entry excluded yields zeros.
    """
    if a.data.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {a.shape}")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, -np.inf, x)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    z = np.sum(e, axis=axis, keepdims=True)
    y = np.divide(e, z, out=np.zeros_like(e), where=z > 0)
    out = _new(y)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record(out, (a,), "softmax", back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply gain and bias."""
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs input {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _new(xhat * gain.data + bias.data)
    lead = tuple(range(x.ndim - 1))

    def back(g):
        ga = None
        if a.requires_grad:
            dxhat = g * gain.data
            ga = inv / n * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return ga, gg, gb

    return _record(out, (a, gain, bias), "layer_norm", back)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"embedding id out of range [0, {table.shape[0]})")
    out = _new(table.data[ids])

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), "embedding", back)


def dropout(a: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return a
    if rng is None:
        raise UsageError("train-mode dropout needs an rng")
    keep = (rng.random(a.shape) >= p).astype(np.float64) * (1.0 / (1.0 - p))
    out = _new(a.data * keep)
    return _record(out, (a,), "dropout", lambda g: (g * keep,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, stabilised by max-subtraction."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects batch x classes, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {int(labels[i])} at index {i} outside [0, {k})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    out = _new(np.array([-logp[rows, labels].mean()]))

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g[0] / n),)

    return _record(out, (logits,), "cross_entropy", back)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    The graph is consumed: intermediate buffers are dropped and a second call
    on the same graph raises :class:`UsageError`.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a single-element loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
            return
        raise UsageError("loss is not on a tape (no input requires grad)")
    tape = Tape.from_output(loss)
    if any(node.backward_fn is None for node, _ in tape.entries):
        raise UsageError("graph already consumed by an earlier backward(); rebuild the forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node, out in reversed(tape.entries):
        g = grads.pop(id(out), None)
        fn = node.backward_fn
        node.backward_fn = None
        if g is None:
            continue
        in_grads = fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def ridders_derivative(
    g: Callable[[float], float], h0: float = 1e-3, shrink: float = 2.0, max_levels: int = 8, rtol: float = 1e-7
) -> tuple[float, float]:
    """Derivative of ``g`` at 0 by Richardson extrapolation of central differences.

    Starts at step ``h0`` and shrinks it by ``shrink`` per level, keeping the
    estimate (plain or extrapolated) with the smallest error estimate. If the
    first two central differences already agree to within round-off, ``g`` is
    linear at this scale and the largest-step estimate is returned, since
    shrinking the step would only amplify round-off. Otherwise stops once the
    tableau diverges or the error estimate drops below ``rtol`` relative.
    Returns (estimate, error estimate).
    """
    mag = 0.0

    def central(h: float) -> float:
        nonlocal mag
        a, b = g(h), g(-h)
        mag = max(mag, abs(a), abs(b))
        return (a - b) / (2.0 * h)

    c2 = shrink * shrink
    h = h0
    prev = [central(h)]
    best, err = prev[0], math.inf
    for level in range(1, max_levels):
        h /= shrink
        row = [central(h)]
        e = abs(row[0] - prev[0])
        if level == 1 and e <= 8.0 * np.finfo(float).eps * mag / h:
            return prev[0], e
        if e <= err:
            best, err = row[0], e
        fac = c2
        for j in range(1, len(prev) + 1):
            row.append((row[j - 1] * fac - prev[j - 1]) / (fac - 1.0))
            fac *= c2
            e = max(abs(row[j] - row[j - 1]), abs(row[j] - prev[j - 1]))
            if e <= err:
                best, err = row[j], e
        if abs(row[-1] - prev[-1]) >= 2.0 * err or err <= rtol * max(abs(best), 1e-8):
            break
        prev = row
    return best, err


def finite_diff_check(
    f: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-5,
    indices: Iterable[int] | None = None,
    method: str = "central",
) -> float:
    """Worst relative error between analytic and numerical gradients.

    ``f`` rebuilds the forward pass from current parameter values and returns
    a scalar tensor. Relative error uses max(|analytic|, |numeric|, 1e-8) as
    the denominator. ``indices`` restricts the check to some flat coordinates.
    ``method="central"`` takes one central difference of size ``step``;
    ``method="ridders"`` extrapolates a shrinking sequence of them starting
    at ``step``, which copes with both round-off (exactly zero gradients)
    and strong curvature in one pass.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    if method not in ("central", "ridders"):
        raise ConfigError(f"unknown finite-difference method {method!r}")
    saved = param.grad
    param.grad = np.zeros_like(param.data)
    backward(f())
    analytic = param.grad.reshape(-1).copy()
    param.grad = saved
    flat = param.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]

        def g(dx: float) -> float:
            flat[i] = orig + dx
            try:
                return f().item()
            finally:
                flat[i] = orig

        if method == "central":
            num = (g(step) - g(-step)) / (2.0 * step)
        else:
            num = ridders_derivative(g, step)[0]
        denom = max(abs(analytic[i]), abs(num), 1e-8)
        worst = max(worst, abs(analytic[i] - num) / denom)
    return worst
