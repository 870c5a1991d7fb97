"""Dense fp64 tensors with a recording tape for reverse-mode gradients.

Every primitive computes its forward value with numpy, checks it for
non-finite entries, and (when a :class:`Tape` is active and some input
requires gradients) records an adjoint closure.  Gradients are produced by
replaying the tape in reverse execution order, which is a fixed reverse
topological order, so repeated replays are bit-identical.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "NonFiniteError",
    "ContractError",
    "OpCounter",
    "count_ops",
    "sabotage_adjoint",
    "reverse_gradients",
    "finite_difference_check",
    "no_tape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "softmax_rows",
    "mean_rows",
    "masked_mean_rows",
    "select_rows",
    "gather",
    "concat",
    "relu",
    "leaky_relu",
    "sigmoid",
    "layer_norm",
    "bce_with_logits",
    "tsum",
    "tmean",
    "segment_sum",
    "segment_softmax",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """A forward primitive produced NaN or Inf."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    # Make ``ndarray <op> Tensor`` defer to the reflected Tensor operator.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


_TAPES: list[Tape] = []
_COUNTERS: list[OpCounter] = []
_ADJOINT_SCALE: dict[str, float] = {}


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the block whose
    inputs require gradients are appended in execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Adjoint of ``loss`` w.r.t. every tensor reached on the tape, keyed by ``id``."""
        if loss.data.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.backward(g)
            factor = _ADJOINT_SCALE.get(node.op)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if factor is not None:
                    gi = gi * factor
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = np.array(gi, dtype=np.float64)
        return adj

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf that requires gradients."""
        adj = self.gradients(loss)
        seen = set()
        for node in self.nodes:
            for inp in node.inputs:
                if isinstance(inp, Tensor) and inp.requires_grad and id(inp) not in seen:
                    seen.add(id(inp))
                    if id(inp) in adj:
                        inp.grad = adj[id(inp)]


def reverse_gradients(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(loss)/d(p) for each of ``params``; zeros for parameters not on the tape."""
    adj = tape.gradients(loss)
    out = []
    for p in params:
        g = adj.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else g)
    return out


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


class OpCounter:
    """Accumulates an arithmetic-operation count per primitive."""

    def __init__(self):
        self.by_op: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, n: int) -> None:
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextlib.contextmanager
def sabotage_adjoint(op: str, factor: float) -> Iterator[None]:
    """Scale the adjoint of primitive ``op`` by ``factor`` (gradient-checker sanity tests)."""
    _ADJOINT_SCALE[op] = float(factor)
    try:
        yield
    finally:
        _ADJOINT_SCALE.pop(op, None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple, backward: Callable, flops: int) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"primitive '{op}' produced non-finite output")
    for c in _COUNTERS:
        c.add(op, flops)
    req = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = req
    out.grad = None
    out.name = None
    if req and _TAPES:
        _TAPES[-1].nodes.append(_Node(op, out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a.data, b.data)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), out.size)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a.data, b.data)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), out.size)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", out, (a, b), backward, out.size)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c
    return _emit("scale", out, (x,), lambda g: (g * c,), out.size)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)
    return _emit("relu", out, (x,), lambda g: (g * pos,), out.size)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    out = x.data * factor
    return _emit("leaky_relu", out, (x,), lambda g: (g * factor,), out.size)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),), 4 * out.size)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    flops = 2 * ad.shape[-1] * out.size
    return _emit("matmul", out, (a, b), backward, flops)


def transpose(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose needs ndim >= 2, got {x.shape}")
    out = np.swapaxes(x.data, -1, -2).copy()
    return _emit("transpose", out, (x,), lambda g: (np.swapaxes(g, -1, -2),), 0)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    src = x.shape
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),), 0)


# -- row-wise reductions ------------------------------------------------------


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax along the last axis.

    ``mask`` (boolean, broadcastable to ``x``) marks admissible columns; masked
    entries get probability exactly zero.  Every row must keep at least one
    admissible column.
    """
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ContractError(f"softmax_rows over an empty axis: shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax_rows: a row has every column masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", y, (x,), backward, 5 * y.size)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the row axis (``-2``): ``(..., M, d) -> (..., d)``."""
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ContractError(f"mean_rows needs at least one row, got {x.shape}")
    m = x.shape[-2]
    out = x.data.mean(axis=-2)
    shape = x.shape
    return _emit("mean_rows", out, (x,), lambda g: (np.broadcast_to(g[..., None, :] / m, shape).copy(),), x.size)


def masked_mean_rows(x: Tensor, mask) -> Tensor:
    """Mean over rows of ``x`` (axis ``-2``) restricted to rows where ``mask`` is true."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"masked_mean_rows: mask {mask.shape} does not match rows of {x.shape}")
    cnt = mask.sum(axis=-1, keepdims=True)
    if np.any(cnt == 0):
        raise ContractError("masked_mean_rows: a matrix has no unmasked rows")
    w = mask / cnt
    out = np.einsum("...m,...md->...d", w, x.data)
    return _emit("masked_mean_rows", out, (x,), lambda g: (w[..., :, None] * g[..., None, :],), 2 * x.size)


def select_rows(x: Tensor, pos) -> Tensor:
    """Pick row ``pos[b]`` of each matrix ``x[b]``: ``(B, M, d) -> (B, d)``."""
    pos = np.asarray(pos, dtype=np.int64)
    if x.ndim != 3 or pos.shape != (x.shape[0],):
        raise DimensionError(f"select_rows: x {x.shape} with positions {pos.shape}")
    b = np.arange(x.shape[0])
    out = x.data[b, pos]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[b, pos] = g
        return (gx,)

    return _emit("select_rows", out, (x,), backward, 0)


def gather(x: Tensor, idx) -> Tensor:
    """Embedding lookup along axis 0; ``idx`` may be an int or an int array."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim == 0:
        raise DimensionError("gather from a scalar")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractError(f"gather index out of range for axis of length {x.shape[0]}")
    out = x.data[idx]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("gather", out, (x,), backward, 0)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat of nothing")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, tuple(xs), backward, 0)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit("layer_norm", y, (x,), backward, 8 * x.size + d)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 ``targets``."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {t.shape}")
    n = logits.size
    if n == 0:
        raise ContractError("bce_with_logits on an empty batch")
    z = logits.data
    loss = np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))))
    p = _stable_sigmoid(z)
    return _emit("bce_with_logits", np.array(loss), (logits,), lambda g: (g * (p - t) / n,), 6 * n)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", out, (x,), backward, x.size)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if n == 0:
        raise ContractError("mean over an empty axis")
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- graph reductions -----------------------------------------------------------


def segment_sum(x: Tensor, seg, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` buckets: ``out[k] = sum_{e: seg[e]=k} x[e]``.

    Rows are added in index order, so the result does not depend on threading.
    """
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != x.shape[:1]:
        raise DimensionError(f"segment_sum: {seg.shape} segment ids for {x.shape}")
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return _emit("segment_sum", out, (x,), lambda g: (g[seg],), x.size)


def segment_softmax(x: Tensor, seg, n: int) -> Tensor:
    """Softmax of a score vector within each segment (e.g. over the in-edges of a node)."""
    seg = np.asarray(seg, dtype=np.int64)
    if x.ndim != 1 or seg.shape != x.shape:
        raise DimensionError(f"segment_softmax: scores {x.shape} vs segments {seg.shape}")
    z = x.data
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, seg, z)
    e = np.exp(z - mx[seg])
    den = np.zeros(n)
    np.add.at(den, seg, e)
    y = e / den[seg]

    def backward(g):
        s = np.zeros(n)
        np.add.at(s, seg, g * y)
        return (y * (g - s[seg]),)

    return _emit("segment_softmax", y, (x,), backward, 5 * y.size)


# -- gradient checking ----------------------------------------------------------


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` takes no arguments and reads ``params`` (mutated in place while
    probing).  The error for one entry is
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    with Tape() as tape:
        loss = fn()
    analytic = reverse_gradients(tape, loss, params)
    with no_tape():
        again = fn().data
    if not np.array_equal(again, loss.data):
        raise ContractError("function is not deterministic: two evaluations differ")

    worst = 0.0
    with no_tape():
        for p, g_ad in zip(params, analytic):
            flat = p.data.reshape(-1)
            g_flat = g_ad.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = float(fn().data)
                flat[k] = orig - eps
                down = float(fn().data)
                flat[k] = orig
                g_fd = (up - down) / (2.0 * eps)
                err = abs(g_flat[k] - g_fd) / max(1.0, abs(g_flat[k]), abs(g_fd))
                worst = max(worst, err)
    return worst
