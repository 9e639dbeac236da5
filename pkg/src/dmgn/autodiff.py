"""Dense tensors with tape-based reverse-mode differentiation.

Images are carried in N, C, H, W order. Every primitive checks its input
shapes, refuses to emit non-finite values, and records a backward closure on
the active :class:`Tape` whenever one of its inputs requires a gradient.

Typical use::

    with Tape() as tape:
        loss = mean(relu(conv2d(x, w, b, padding=1)))
    tape.backward(loss)
    w.grad  # populated
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumericFault",
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "precision",
    "default_dtype",
    "no_grad",
    "primitive_forward",
    "finite_diff_check",
    "conv2d",
    "upsample",
    "dense",
    "relu",
    "tanh",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "neg",
    "concat",
    "global_avg_pool",
    "mean",
    "sum_",
    "abs_",
    "reshape",
    "detach",
]


class NumericFault(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's shape rule."""


_ids = itertools.count(1)
_local = threading.local()


def _tapes() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Suspend recording on every active tape."""
    saved = _tapes()[:]
    _local.tapes = []
    try:
        yield
    finally:
        _local.tapes = saved


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return neg(self)


class _Node:
    __slots__ = ("out_id", "parents", "backward")

    def __init__(self, out_id, parents, backward):
        self.out_id = out_id
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed primitives.

    Nodes are appended in execution order, so parents always precede their
    children. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        if self in stack:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, parents: Sequence[Tensor], fn: Callable) -> None:
        for p in parents:
            if p.requires_grad and p.node_id not in self._produced:
                self.leaves.setdefault(p.node_id, p)
        self._produced.add(out.node_id)
        self.nodes.append(_Node(out.node_id, tuple(parents), fn))

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
        """Populate ``.grad`` on every requires-grad leaf seen by this tape.

        Leaves that the loss does not depend on (including any passed in
        ``leaves``) receive a zero gradient. Existing ``.grad`` values are
        overwritten, not accumulated.
        """
        if self._consumed:
            raise RuntimeError("backward already ran on this tape")
        if loss.data.size != 1 or loss.data.ndim != 0:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if loss.node_id not in self._produced and loss.node_id not in self.leaves:
            raise ValueError("backward: loss was not produced on this tape")
        self._consumed = True
        grads = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.node_id in grads:
                    grads[p.node_id] = grads[p.node_id] + pg
                else:
                    grads[p.node_id] = pg
        for leaf in itertools.chain(self.leaves.values(), leaves):
            g = grads.get(leaf.node_id)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
        if loss.node_id in self.leaves:
            loss.grad = np.ones_like(loss.data)


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] = ()) -> None:
    tape.backward(loss, leaves)


# --------------------------------------------------------------------------
# plumbing shared by primitives


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def _check_finite(kind: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericFault(f"{kind}: non-finite value in output")


def _emit(kind: str, out: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    _check_finite(kind, out)
    t = Tensor(out, dtype=out.dtype)
    stack = _tapes()
    if stack and any(p.requires_grad for p in parents):
        t.requires_grad = True
        stack[-1]._record(t, parents, fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


def _probe(x: np.ndarray) -> None:
    # records the sign pattern of kinked inputs for finite_diff_check
    probe = getattr(_local, "probe", None)
    if probe is not None:
        probe.append(x > 0)


# --------------------------------------------------------------------------
# primitives


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Shapes: x (N, C, H, W), w (O, C, kh, kw), b (O,) ->
    (N, O, (H + 2p - kh) // s + 1, (W + 2p - kw) // s + 1).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ck, kh, kw = w.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ck}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    p, s = padding, stride
    hp, wp = h + 2 * p, wd + 2 * p
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # im2col, channel-major: cols[c, i, j, n, y, x] = xp[n, c, s*y + i, s*x + j]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out = wmat @ cols2
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def fn(g):
        gx = gw = gb = None
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        if w.requires_grad:
            gw = (gmat @ cols2.T).reshape(w.shape)
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            gxt = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)[:, :, p : p + h, p : p + wd]
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=1)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _emit("conv2d", out, parents, fn)


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling: (N, C, H, W) -> (N, C, fH, fW)."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample: expected 4-D input, got {x.shape}")
    if factor < 1:
        raise ShapeError(f"upsample: factor must be >= 1, got {factor}")
    f = factor
    out = x.data.repeat(f, axis=2).repeat(f, axis=3)
    n, c, h, w = x.shape

    def fn(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _emit("upsample", out, (x,), fn)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map: x (N, D_in), w (D_out, D_in), b (D_out,) -> (N, D_out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def fn(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w, b) if b is not None else (x, w)
    return _emit("dense", out, parents, fn)


def relu(x: Tensor) -> Tensor:
    _probe(x.data)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)
    return _emit("relu", out, (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form stays finite for large |x| and gives sigmoid(0) == 0.5 exactly
    y = 0.5 * (1 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def add(a, b) -> Tensor:
    a, b = (_as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape("add", a, b)
    out = a.data + b.data
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = (_as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape("sub", a, b)
    out = a.data - b.data
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = (_as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None))
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", out, (a, b), fn)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            d1 != d2 for k, (d1, d2) in enumerate(zip(ref, t.shape)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _emit("global_avg_pool", out, (x,), fn)


def mean(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis), dtype=x.dtype)
    count = x.data.size // max(out.size, 1)

    def fn(g):
        if axis is None:
            return (np.full(x.shape, g / count, dtype=x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).astype(x.dtype),)

    return _emit("mean", out, (x,), fn)


def sum_(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def fn(g):
        if axis is None:
            return (np.full(x.shape, g, dtype=x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return _emit("sum", out, (x,), fn)


def abs_(x: Tensor) -> Tensor:
    _probe(x.data)
    sign = np.sign(x.data)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, dtype=x.dtype)


_KINDS: dict[str, Callable] = {
    "conv2d": conv2d,
    "upsample": upsample,
    "dense": dense,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "concat": lambda *ts, axis=1: concat(ts, axis=axis),
    "global_avg_pool": global_avg_pool,
    "mean": mean,
    "sum": sum_,
    "abs": abs_,
    "reshape": reshape,
}


def primitive_forward(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("conv2d", x, w, stride=2)``."""
    try:
        op = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(_KINDS)}") from None
    return op(*inputs, **attrs)


# --------------------------------------------------------------------------
# finite differences


def _eval_probed(f: Callable[[Tensor], Tensor], point: Tensor):
    _local.probe = []
    try:
        with no_grad():
            out = f(point)
        pattern = _local.probe
    finally:
        _local.probe = None
    val = float(out.data)
    if not np.isfinite(val):
        raise NumericFault("finite_diff_check: non-finite objective at perturbed point")
    return val, pattern


def _same_pattern(p1: list, p2: list) -> bool:
    return len(p1) == len(p2) and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(p1, p2))


def finite_diff_compare(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-4,
    coords: Iterable[int] | None = None,
) -> tuple[float, int, int]:
    """Like :func:`finite_diff_check` but also returns (checked, skipped) counts."""
    if point.dtype != np.float64:
        raise TypeError("finite_diff_check requires a float64 point")
    was = point.requires_grad
    point.requires_grad = True
    try:
        with Tape() as tape:
            out = f(point)
        tape.backward(out, leaves=[point])
        g_ad = point.grad.reshape(-1).copy()
        flat = point.data.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst, checked, skipped = 0.0, 0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp, pat_p = _eval_probed(f, point)
            flat[i] = orig - eps
            fm, pat_m = _eval_probed(f, point)
            flat[i] = orig
            if not _same_pattern(pat_p, pat_m):
                skipped += 1
                continue
            g_fd = (fp - fm) / (2 * eps)
            denom = max(abs(g_ad[i]), abs(g_fd), 1e-8)
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
            checked += 1
    finally:
        point.requires_grad = was
    return worst, checked, skipped


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-4,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between autodiff and central-difference gradients.

    The error per coordinate is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.
    Coordinates whose +/-eps perturbation flips the sign of any ReLU or abs
    input are skipped, since the derivative is ambiguous at the kink.
    ``coords`` restricts the check to a subset of flat indices.
    """
    return finite_diff_compare(f, point, eps, coords)[0]
