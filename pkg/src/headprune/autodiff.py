"""Small dense-tensor engine with reverse-mode differentiation.

Every op records two backward rules on its output node: the usual
vector-Jacobian product used by :func:`backward`, and a relevance
redistribution rule used by :mod:`headprune.lrp`.  Relevance arrays carry an
extra leading "probe" axis so that many relevance signals (one per generation
step, say) can be pushed through the same recorded graph in one pass.

All data is float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

MASK_FILL = -1e9
STABILIZER = 1e-9


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (inference / decoding)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A node in the computation graph.

    ``requires_grad`` marks nodes whose gradient is wanted (parameters and
    anything computed from them).  ``carries`` marks nodes that lie on an
    activation path and can therefore receive relevance.
    """

    __slots__ = ("data", "grad", "requires_grad", "carries", "op", "name",
                 "_parents", "_backward", "_lrp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.carries = False
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._lrp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}, shape={self.shape}{tag})"

    def mark_activation(self) -> "Tensor":
        """Declare this node an activation source for relevance propagation."""
        self.carries = True
        return self

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _check_finite(op: str, out: np.ndarray):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], backward, lrp=None,
          carries: bool | None = None) -> Tensor:
    _check_finite(op, out)
    node = Tensor(out)
    node.op = op
    if not _GRAD_ENABLED:
        return node
    node.requires_grad = any(p.requires_grad for p in parents)
    node.carries = any(p.carries for p in parents) if carries is None else carries
    if node.requires_grad or node.carries:
        node._parents = tuple(parents)
        node._backward = backward
        node._lrp = lrp
    return node


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...], lead: int = 0) -> np.ndarray:
    """Sum ``grad`` down to ``shape``; ``lead`` extra leading axes are kept."""
    target_nd = len(shape)
    extra = grad.ndim - lead - target_nd
    if extra > 0:
        grad = grad.sum(axis=tuple(range(lead, lead + extra)))
    axes = tuple(lead + i for i, n in enumerate(shape) if n == 1 and grad.shape[lead + i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _stable(z: np.ndarray) -> np.ndarray:
    """Denominator with sign(z)*1e-9 added; exact zeros stay zero."""
    return z + np.sign(z) * STABILIZER


class Parts(tuple):
    """Relevance parts for each parent, plus the mass a stabilized
    denominator held back (``lost``, shaped like the incoming relevance)."""

    lost: np.ndarray | None = None

    @classmethod
    def with_loss(cls, parts, lost):
        p = cls(parts)
        p.lost = lost
        return p


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    den_s = _stable(den)
    out = np.zeros(np.broadcast_shapes(num.shape, den_s.shape))
    np.divide(num, den_s, out=out, where=den_s != 0)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    def lrp(R):
        if a.carries and b.carries:
            # residual rule: split by |contribution|, half/half when both vanish
            wa, wb = np.abs(a.data), np.abs(b.data)
            tot = wa + wb
            fa = np.where(tot > 0, wa / np.where(tot > 0, tot, 1.0), 0.5)
            ra = R * fa
            return _unbroadcast(ra, a.shape, 1), _unbroadcast(R - ra, b.shape, 1)
        if a.carries:
            return _unbroadcast(R, a.shape, 1), None
        return None, _unbroadcast(R, b.shape, 1)

    return _make("add", out, (a, b), backward, lrp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    def lrp(R):
        return (R,)

    return _make("scale", a.data * c, (a,), backward, lrp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    def lrp(R):
        if a.carries and b.carries:
            den = a.data + b.data
            fa = _safe_ratio(a.data, den)
            fa = np.where(den == 0, 0.5, fa)
            ra = R * fa
            return _unbroadcast(ra, a.shape, 1), _unbroadcast(R - ra, b.shape, 1)
        # a constant factor is a single weighted input: ratio 1
        if a.carries:
            return _unbroadcast(R, a.shape, 1), None
        return None, _unbroadcast(R, b.shape, 1)

    return _make("mul", out, (a, b), backward, lrp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        if b.ndim == 2 and a.ndim > 2:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
        else:
            out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} @ {b.shape}") from exc

    def backward(g):
        if b.ndim == 2:
            # fold batch axes so the weight gradient is one BLAS call
            k, m = b.shape
            ga = (g.reshape(-1, m) @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    def lrp(R):
        if a.carries and b.carries:
            raise NotImplementedError("relevance through a product of two activation matrices")
        z = out
        s = _safe_ratio(R, z)
        zero = (z == 0)
        lost = R - s * z
        if a.carries:
            k = a.shape[-1]
            ra = a.data * (s @ np.swapaxes(b.data, -1, -2))
            if zero.any():
                ra = ra + (R * zero).sum(-1, keepdims=True) / k
            return Parts.with_loss((_unbroadcast(ra, a.shape, 1), None), lost - R * zero)
        k = b.shape[-2]
        rb = b.data * (np.swapaxes(a.data, -1, -2) @ s)
        if zero.any():
            rb = rb + (R * zero).sum(-2, keepdims=True) / k
        return Parts.with_loss((None, _unbroadcast(rb, b.shape, 1)), lost - R * zero)

    return _make("matmul", out, (a, b), backward, lrp)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis.  Its output acts as fixed coefficients for
    relevance purposes, so it never carries relevance."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), backward, None, carries=False)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), backward, None, carries=False)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0),)

    def lrp(R):
        return (R,)

    return _make("relu", out, (a,), backward, lrp)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    def lrp(R):
        return (R,)

    return _make("sigmoid", out, (a,), backward, lrp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient flows only through the unclipped region."""
    out = np.clip(a.data, lo, hi)

    def backward(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    def lrp(R):
        return (R,)

    return _make("clamp", out, (a,), backward, lrp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if a.requires_grad:
            gh = g * gain.data
            n = a.shape[-1]
            gx = inv / n * (n * gh - gh.sum(-1, keepdims=True)
                            - xhat * (gh * xhat).sum(-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    def lrp(R):
        # treated as identity per feature
        return R, None, None

    return _make("layer_norm", out, (a, gain, bias), backward, lrp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat: shapes disagree off the concat axis")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def _split(g, lead):
        idx = [slice(None)] * g.ndim
        parts = []
        for i in range(len(tensors)):
            idx[lead + ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(idx)])
        return parts

    def backward(g):
        return _split(g, 0)

    def lrp(R):
        return [r if t.carries else None for r, t in zip(_split(R, 1), tensors)]

    return _make("concat", out, tensors, backward, lrp)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup.  The output is an activation source; relevance stops here."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of size {table.shape[0]}")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding", out, (table,), backward, None, carries=True)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def backward(g):
        return (np.transpose(g, inv),)

    def lrp(R):
        return (np.transpose(R, (0,) + tuple(i + 1 for i in inv)),)

    return _make("transpose", out, (a,), backward, lrp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    def lrp(R):
        return (R.reshape((R.shape[0],) + a.shape),)

    return _make("reshape", out, (a,), backward, lrp)


def masked_fill(a: Tensor, mask) -> Tensor:
    """Add -1e9 where ``mask`` is true (broadcast against ``a``)."""
    mask = np.asarray(mask, dtype=bool)
    out = a.data + np.where(mask, MASK_FILL, 0.0)

    def backward(g):
        return (g,)

    def lrp(R):
        return (np.where(mask, 0.0, R),)

    return _make("masked_fill", out, (a,), backward, lrp)


def identity(a: Tensor) -> Tensor:
    """A pass-through node, useful as a named tap on an edge."""

    def backward(g):
        return (g,)

    def lrp(R):
        return (R,)

    return _make("identity", a.data.copy(), (a,), backward, lrp)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(a.data.sum()), (a,), backward, None)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        return (np.full(a.shape, float(g) / n),)

    return _make("mean", np.asarray(a.data.mean()), (a,), backward, None)


def pick(a: Tensor, ids) -> Tensor:
    """Gather ``a[..., ids[...]]`` along the last axis (used by the loss)."""
    ids = np.asarray(ids)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index shape {ids.shape} does not match {a.shape[:-1]}")
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, ids[..., None], g[..., None], axis=-1)
        return (ga,)

    return _make("pick", out, (a,), backward, None)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor, follow: Callable[[Tensor], bool]) -> list[Tensor]:
    """Nodes reachable from ``root`` through parents satisfying ``follow``,
    ordered so that every node precedes its consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and follow(p):
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable node."""
    if seed is None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        seed = np.ones_like(root.data)
    order = topological_order(root, lambda p: p.requires_grad)
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# gradient checking


def numeric_grad(f: Callable[[], float], x: np.ndarray, index, h: float = 1e-5) -> float:
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)


def gradcheck(build: Callable[[np.random.Generator], tuple[list[Tensor], Callable[[list[Tensor]], Tensor]]],
              seed: int = 0, h: float = 1e-5, max_entries: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build(rng)`` returns ``(leaves, fn)`` with ``fn(leaves)`` producing a
    scalar root.  Leaf data is perturbed in place for the numeric side.  With
    ``max_entries`` set, that many entries are sampled across all leaves.
    """
    leaves, fn = build(np.random.default_rng(seed))
    for leaf in leaves:
        leaf.zero_grad()
    backward(fn(leaves))
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]

    def evaluate() -> float:
        with no_grad():
            return float(fn(leaves).data)

    entries = [(li, idx) for li, l in enumerate(leaves) for idx in np.ndindex(l.shape)]
    if max_entries is not None and len(entries) > max_entries:
        rng = np.random.default_rng(seed + 1)
        chosen = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(chosen)]
    worst = 0.0
    for li, idx in entries:
        num = numeric_grad(evaluate, leaves[li].data, idx, h)
        worst = max(worst, relative_error(float(analytic[li][idx]), num))
    return worst
