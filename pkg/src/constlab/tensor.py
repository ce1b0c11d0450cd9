"""Small define-by-run reverse-mode autodiff engine on top of numpy.

Every primitive takes and returns :class:`Tensor` objects holding float64
arrays. When any input requires a gradient, the primitive records a
:class:`Node` with a closure that maps the output gradient to input
gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order.

Broadcasting is limited on purpose: elementwise ops accept equal shapes,
a scalar, or a trailing bias vector. Everything else is explicit.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv1d",
    "conv1d_out_len",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "mean_pool_time",
    "embedding_lookup",
    "concat",
    "slice_axis",
    "transpose",
    "reshape",
    "dropout_mask_apply",
    "sum_all",
    "mean_axis",
    "pick",
    "l2_normalize",
    "linear",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an operation's signature."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
            if t.node is None:
                continue
            in_grads = t.node.backward_fn(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if isinstance(inp, Tensor) and inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise FloatingPointError(f"{op}: non-finite input")


def _result(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    need = _GRAD_ENABLED and any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out.requires_grad = need
    out.node = Node(op, inputs, backward_fn) if need else None
    return out


# ----------------------------------------------------------------------------
# elementwise


def _coerce_pair(op: str, a: Tensor, b: Tensor) -> str:
    """Classify the allowed shape combinations: same, scalar, or bias."""
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.data.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_bias"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_bias"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, which: str, shape: tuple) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{which}_scalar":
        return np.asarray(g.sum()).reshape(shape)
    if kind == f"{which}_bias":
        return g.reshape(-1, shape[0]).sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _coerce_pair("add", a, b)
    _check_finite("add", a.data, b.data)
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, kind, "a", a_shape), _reduce_to(g, kind, "b", b_shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _coerce_pair("mul", a, b)
    _check_finite("mul", a.data, b.data)
    ad, bd = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return (
            _reduce_to(g * bd, kind, "a", a_shape),
            _reduce_to(g * ad, kind, "b", b_shape),
        )

    return _result("mul", ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    _check_finite("scale", x.data)
    c = float(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x.data)
    pos = x.data > 0
    return _result("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    _check_finite("gelu", x.data)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _result("gelu", out, (x,), backward)


def dropout_mask_apply(x: Tensor, keep_mask: np.ndarray, rate: float) -> Tensor:
    """Multiply by a precomputed 0/1 keep mask and rescale by 1/(1-rate)."""
    keep_mask = np.asarray(keep_mask, dtype=np.float64)
    if keep_mask.shape != x.shape:
        raise ShapeError(f"dropout_mask_apply: mask shape {keep_mask.shape} vs input {x.shape}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    _check_finite("dropout_mask_apply", x.data)
    m = keep_mask / (1.0 - rate)
    return _result("dropout_mask_apply", x.data * m, (x,), lambda g: (g * m,))


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with equal leading dims, or a 2-D right operand (weights)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim == 2:
        pass
    elif b.ndim != 2 and a.ndim != b.ndim:
        raise ShapeError(f"matmul: rank mismatch {a.shape} and {b.shape}")
    _check_finite("matmul", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def conv1d_out_len(length: int, kernel: int, stride: int, pad: int) -> int:
    return (length + 2 * pad - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """1-D convolution over time.

    x: (N, T, C_in); w: (K, C_in, C_out); b: (C_out,) or None.
    Returns (N, T_out, C_out) with zero padding of ``pad`` frames per side.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv1d: stride must be >= 1 and pad >= 0")
    _check_finite("conv1d", x.data, w.data)
    n, t, c_in = x.shape
    k, _, c_out = w.shape
    t_out = conv1d_out_len(t, k, stride, pad)
    if t_out < 1:
        raise ShapeError(f"conv1d: input length {t} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]  # (T_out, K)
    cols = xp[:, idx, :].reshape(n, t_out, k * c_in)
    wmat = w.data.reshape(k * c_in, c_out)
    out = cols @ wmat
    inputs: tuple = (x, w)
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {b.shape} vs channels {c_out}")
        out = out + b.data
        inputs = (x, w, b)

    def backward(g):
        gw = (cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)).reshape(k, c_in, c_out)
        gcols = (g @ wmat.T).reshape(n, t_out, k, c_in)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (slice(None), idx), gcols)
        gx = gxp[:, pad : pad + t, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return _result("conv1d", out, inputs, backward)


# ----------------------------------------------------------------------------
# normalisation / reductions


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get probability 0."""
    _check_finite("softmax", x.data)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result("softmax", p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite("log_softmax", x.data)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    _check_finite("layer_norm", x.data)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), backward)


def mean_pool_time(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Average (N, T, d) over valid time steps -> (N, d). Also accepts (T, d)."""
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"mean_pool_time: expected (N, T, d), got {x.shape}")
    n, t, _ = xd.shape
    m = np.ones((n, t)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(n, t)
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise ValueError(f"mean_pool_time: all positions padded in row(s) {np.flatnonzero(counts == 0).tolist()}")
    _check_finite("mean_pool_time", xd)
    w = m / counts[:, None]
    out = np.einsum("nt,ntd->nd", w, xd)

    def backward(g):
        gx = w[:, :, None] * g[:, None, :]
        return (gx[0] if squeeze else gx,)

    return _result("mean_pool_time", out[0] if squeeze else out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_axis(x: Tensor, axis: int = -1) -> Tensor:
    n = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _result("mean_axis", x.data.mean(axis=axis), (x,), backward)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[..., index[...]]`` along the last axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {index.shape} vs leading dims of {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
        raise IndexError("pick: index out of range")
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, index[..., None], g[..., None], axis=-1)
        return (gx,)

    return _result("pick", out, (x,), backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    _check_finite("l2_normalize", x.data)
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        raise ValueError("l2_normalize: zero-norm row")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result("l2_normalize", y, (x,), backward)


# ----------------------------------------------------------------------------
# indexing / shape


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= v))
    if bad.size:
        raise IndexError(f"embedding_lookup: token id {ids[tuple(bad[0])]} at position {tuple(bad[0].tolist())} outside vocab of size {v}")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result("embedding_lookup", out, (table,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, splits, axis=ax)

    return _result("concat", np.concatenate([t.data for t in xs], axis=ax), xs, backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {ax} of shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _result("slice", x.data[sl], (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _result("reshape", out, (x,), lambda g: (g.reshape(old),))


# ----------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tol for e in self.max_rel_error)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def grad_check(f: Callable[..., Tensor], point, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` with central differences.

    ``point`` is a Tensor or a sequence of Tensors passed positionally to ``f``.
    Relative error per element uses max(|analytic|, |numeric|, 1e-8) as
    denominator; the report carries the worst value per input.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    leaves = [Tensor(p.data.copy(), requires_grad=True) for p in points]

    def evaluate(arrays) -> float:
        with no_grad():
            return _as_tensor(f(*[Tensor(a) for a in arrays])).item()

    base = [p.data.copy() for p in leaves]
    first, second = evaluate(base), evaluate(base)
    if first != second:
        raise RuntimeError("grad_check: f is not deterministic at the given point")

    out = f(*leaves)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()

    errors = []
    for li, leaf in enumerate(leaves):
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(leaf.data)
        flat = base[li].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = evaluate(base)
            flat[j] = orig - h
            fm = evaluate(base)
            flat[j] = orig
            numeric.reshape(-1)[j] = (fp - fm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        errors.append(float((np.abs(analytic - numeric) / denom).max(initial=0.0)))
    return GradCheckReport(errors, tol)
