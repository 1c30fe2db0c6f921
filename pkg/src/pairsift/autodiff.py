"""Reverse-mode gradient engine over float64 numpy arrays.

Small tape-based autodiff: ``Tensor`` wraps an ndarray and remembers how it
was produced; ``backward`` walks the graph once in reverse topological order
and returns a gradient per registered parameter.  All arithmetic is float64.
Gradients are accumulated in a per-call map, never stored on tensors, so
repeated forward passes over the same parameters cannot contaminate each
other.

Scalar conventions:

- ``huber`` uses a fixed threshold of 1: ``a**2 / 2`` for ``|a| <= 1`` and
  ``|a| - 1/2`` beyond; the derivative is ``clip(a, -1, 1)`` (the two
  branches agree at the kink).
- ``softplus`` is computed as ``max(a, 0) + log1p(exp(-|a|))`` so it never
  overflows.
- ``relu`` takes derivative 0 at exactly 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NonDeterministicLossError",
    "as_tensor",
    "backward",
    "check_gradients",
    "expand_dims",
    "gather_rows",
    "huber",
    "matmul",
    "relu",
    "sigmoid",
    "softmax_rows",
    "softplus",
    "sym_from_packed",
    "log",
    "exp",
    "sqrt",
    "GradCheckReport",
]


class NonDeterministicLossError(RuntimeError):
    """Two forward passes of a supposedly deterministic builder disagreed."""


class Tensor:
    """One node of the computation graph; holds a float64 ndarray."""

    __slots__ = ("data", "_parents", "_vjps", "_rg", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple = ()
        self._rg = bool(requires_grad)
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, rg={self._rg})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t):
    raise ValueError(f"expected a scalar tensor, got shape {t.data.shape}")


def as_tensor(x) -> Tensor:
    """Wrap arrays/floats as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjps) -> Tensor:
    """Build an op-result node; drops history when no parent needs grads."""
    out = Tensor(data)
    keep = tuple((p, v) for p, v in zip(parents, vjps) if p._rg)
    if keep:
        out._rg = True
        out._parents = tuple(p for p, _ in keep)
        out._vjps = tuple(v for _, v in keep)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    return _make(a.data**p, (a,), (lambda g: g * p * a.data ** (p - 1.0),))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return _make(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T, (a,), (lambda g: g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def expand_dims(a, axis: int):
    a = as_tensor(a)
    return _make(np.expand_dims(a.data, axis), (a,), (lambda g: np.squeeze(g, axis=axis),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make(out, (a,), (vjp,))


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def gather_rows(a, idx):
    """Select rows ``a[idx]``; duplicate indices accumulate gradients."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _make(a.data[idx], (a,), (vjp,))


def sym_from_packed(u, d: int):
    """Materialise a symmetric (d, d) matrix from its packed upper triangle.

    ``u`` stores the rows of the upper triangle (diagonal included) in order;
    entry (k, l) with k < l lands in both A[k, l] and A[l, k], so symmetry is
    structural and gradients from both positions flow back to the one slot.
    """
    u = as_tensor(u)
    if u.data.size != d * (d + 1) // 2:
        raise ValueError(f"packed length {u.data.size} does not fit d={d}")
    iu = np.triu_indices(d)
    A = np.zeros((d, d))
    A[iu] = u.data
    A = A + A.T - np.diag(np.diag(A))

    def vjp(g):
        gs = g + g.T - np.diag(np.diag(g))
        return gs[iu]

    return _make(A, (u,), (vjp,))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    if not isinstance(a, Tensor):
        return _sigmoid(np.asarray(a, dtype=np.float64))
    s = _sigmoid(a.data)
    return _make(s, (a,), (lambda g: g * s * (1.0 - s),))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    """log(1 + exp(a)) in the overflow-safe form max(a,0) + log1p(exp(-|a|))."""
    if not isinstance(a, Tensor):
        x = np.asarray(a, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("softplus requires finite input")
        out = _softplus(x)
        return float(out) if np.isscalar(a) or out.ndim == 0 else out
    return _make(_softplus(a.data), (a,), (lambda g: g * _sigmoid(a.data),))


def huber(a):
    """Piecewise loss: a**2/2 inside [-1, 1], |a| - 1/2 outside."""
    if not isinstance(a, Tensor):
        x = np.asarray(a, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("huber requires finite input")
        out = np.where(np.abs(x) <= 1.0, 0.5 * x * x, np.abs(x) - 0.5)
        return float(out) if np.isscalar(a) or out.ndim == 0 else out
    x = a.data
    val = np.where(np.abs(x) <= 1.0, 0.5 * x * x, np.abs(x) - 0.5)
    return _make(val, (a,), (lambda g: g * np.clip(x, -1.0, 1.0),))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), (lambda g: g * e,))


def sqrt(a):
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return _make(r, (a,), (lambda g: g * 0.5 / r,))


def softmax_rows(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return s * (g - (g * s).sum(axis=-1, keepdims=True))

    return _make(s, (a,), (vjp,))


# ---------------------------------------------------------------------------
# tape, backward pass, finite-difference verification
# ---------------------------------------------------------------------------


class GradTape:
    """Registry of named trainable parameters for one model instance."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self._params)

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the grad-requiring subgraph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _grads_of(loss: Tensor) -> dict[int, np.ndarray]:
    """Run the reverse pass; gradients keyed by node identity."""
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return grads


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every parameter registered on ``tape``.

    Parameters that do not appear in the loss graph get zero gradients.
    Calling backward twice on the same loss node raises: rebuild the forward
    pass instead.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("this loss node was already consumed by backward()")
    loss._consumed = True
    grads = _grads_of(loss)
    out: dict[str, np.ndarray] = {}
    for name, p in tape._params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(out[name])):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    return out


@dataclass
class GradCheckReport:
    """Per-parameter-block comparison of reverse-mode vs central differences."""

    blocks: dict[str, tuple[float, float]] = field(default_factory=dict)  # name -> (max, mean)
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((mx for mx, _ in self.blocks.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self):
        lines = [
            f"{name}: max={mx:.3e} mean={mn:.3e}" for name, (mx, mn) in sorted(self.blocks.items())
        ]
        lines.append(f"overall: max={self.max_rel_err:.3e} tol={self.tol:.1e} "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def check_gradients(build, params: dict[str, Tensor], step: float = 1e-5,
                    tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``build`` must be a zero-argument callable returning the scalar loss
    tensor, deterministic given the current parameter values.  Every
    coordinate of every block in ``params`` is perturbed by ``+-step``.
    Relative error uses denominator ``max(|fd|, |ad|, 1e-8)``.
    """
    l1 = build()
    l2 = build()
    if l1.size != 1:
        raise ValueError("builder must return a scalar loss")
    if float(l1.data) != float(l2.data):
        raise NonDeterministicLossError(
            f"two forward passes disagree: {float(l1.data)!r} vs {float(l2.data)!r}"
        )
    analytic = _grads_of(build())
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        ad = analytic.get(id(p))
        ad = np.zeros_like(p.data) if ad is None else ad
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(build().data)
            flat[i] = orig - step
            dn = float(build().data)
            flat[i] = orig
            fd[i] = (up - dn) / (2.0 * step)
        fd = fd.reshape(p.data.shape)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), 1e-8)
        rel = np.abs(fd - ad) / denom
        report.blocks[name] = (float(rel.max()), float(rel.mean()))
    return report
