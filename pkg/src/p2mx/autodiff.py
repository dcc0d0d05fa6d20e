"""Dense tensors with reverse-mode differentiation on an explicit tape.

Every differentiable operation appends one entry to the module-level tape;
``backward`` replays the entries in reverse (they are recorded in execution
order, so the list is already topologically sorted) and then consumes the
tape.  Tensors are immutable values; the tape is confined to a single
training thread.

Reductions accumulate in float64 even when tensors are float32: Chamfer
sums over thousands of points are cancellation-prone.
"""

import math

import numpy as np

from .errors import P2mxError, ShapeMismatchError
from . import kernels

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise P2mxError(f"unsupported tensor dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Immutable dense array, optionally tracked on the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape_node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeMismatchError("item", self.shape, detail="expected a scalar tensor")

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are promoted to matching-dtype tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=None):
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def glorot_uniform(rng, shape, fan_in, fan_out):
    """Uniform in +-sqrt(6/(fan_in+fan_out)); deterministic given the generator."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(_DEFAULT_DTYPE)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "out")

    def __init__(self, op, inputs, backward_fn, out):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out = out


class Tape:
    """Ordered record of operations; replayed in reverse by ``backward``."""

    def __init__(self):
        self.entries = []

    def clear(self):
        for node in self.entries:
            node.out.tape_node = None
        self.entries.clear()


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape():
    return _TAPE


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _make(op, data, inputs, backward_fn):
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        node = _Node(op, inputs, backward_fn, out)
        _TAPE.entries.append(node)
        out.tape_node = node
    return out


def backward(loss):
    """Propagate gradients from a scalar loss to all requires_grad leaves.

    Returns a map {leaf Tensor: gradient Tensor}; also sets ``leaf.grad`` as
    a numpy array.  Consumes the tape.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeMismatchError("backward", getattr(loss, "shape", None),
                                 detail="loss must be a scalar tensor")
    if not loss.requires_grad:
        _TAPE.clear()
        return {}
    if loss.tape_node is None:
        raise P2mxError("loss is not connected to the active tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_TAPE.entries):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.tape_node is None:
                prev = leaves.get(id(inp))
                leaves[id(inp)] = (inp, ig if prev is None else prev[1] + ig)
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig

    result = {}
    for leaf, g in leaves.values():
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = Tensor(g)
    _TAPE.clear()
    return result


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# shape helpers


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def _f64_sum(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype, copy=False)


def _f64_mean(x, axis=None, keepdims=False):
    return np.mean(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# elementwise and linear algebra ops


def add(a, b):
    _check_broadcast("add", a, b)
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(g, b.shape) if nb else None)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    _check_broadcast("sub", a, b)
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(-g, b.shape) if nb else None)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if na else None,
                _unbroadcast(g * ad, b.shape) if nb else None)

    return _make("mul", ad * bd, (a, b), bw)


def div(a, b):
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g / bd, a.shape) if na else None,
                _unbroadcast(-g * out / bd, b.shape) if nb else None)

    return _make("div", out, (a, b), bw)


def scale(a, c):
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make("scale", a.data * c, (a,), bw)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (g @ bd.T if na else None, ad.T @ g if nb else None)

    return _make("matmul", ad @ bd, (a, b), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", np.where(mask, a.data, 0), (a,), bw)


def sqrt_(a):
    out = np.sqrt(a.data)

    def bw(g):
        return (g / (2.0 * out),)

    return _make("sqrt", out, (a,), bw)


def square(a):
    ad = a.data

    def bw(g):
        return (2.0 * ad * g,)

    return _make("square", ad * ad, (a,), bw)


def softmax(a):
    """Softmax along the last axis (numerically stabilized)."""
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), bw)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    _check_broadcast("maximum", a, b)
    take_a = a.data >= b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(np.where(take_a, g, 0), a.shape) if na else None,
                _unbroadcast(np.where(take_a, 0, g), b.shape) if nb else None)

    return _make("maximum", np.where(take_a, a.data, b.data), (a, b), bw)


def where(mask, a, b):
    """Select a where mask else b; mask is a constant boolean array."""
    mask = np.asarray(mask, dtype=bool)
    _check_broadcast("where", a, b)
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(np.where(mask, g, 0), a.shape) if na else None,
                _unbroadcast(np.where(mask, 0, g), b.shape) if nb else None)

    return _make("where", np.where(mask, a.data, b.data), (a, b), bw)


def clamp(a, lo=None, hi=None):
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def bw(g):
        return (np.where(inside, g, 0),)

    return _make("clamp", np.clip(a.data, lo, hi), (a,), bw)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation regardless of tensor dtype)


def _spread(g, shape, dtype):
    # materialize: broadcast_to alone yields read-only zero-stride views
    out = np.empty(shape, dtype=dtype)
    out[...] = g
    return out


def sum_(a, axis=None, keepdims=False):
    def bw(g):
        g2 = g if axis is None or keepdims else np.expand_dims(g, axis)
        return (_spread(g2, a.shape, a.dtype),)

    return _make("sum", _f64_sum(a.data, axis, keepdims), (a,), bw)


def mean_(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]

    def bw(g):
        g2 = g if axis is None or keepdims else np.expand_dims(g, axis)
        return (_spread(g2 / n, a.shape, a.dtype),)

    return _make("mean", _f64_mean(a.data, axis, keepdims), (a,), bw)


def _extreme(op, a, axis, keepdims, argfn, redfn):
    if axis is None:
        idx = argfn(a.data)
        out = a.data.reshape(-1)[idx]
        if keepdims:
            out = np.full((1,) * a.ndim, out, dtype=a.dtype)

        def bw(g):
            d = np.zeros_like(a.data)
            d.reshape(-1)[idx] = np.asarray(g).reshape(-1)[0]
            return (d,)

        return _make(op, out, (a,), bw)

    am = argfn(a.data, axis=axis)
    out = redfn(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        d = np.zeros_like(a.data)
        np.put_along_axis(d, np.expand_dims(am, axis), g2, axis)
        return (d,)

    return _make(op, out, (a,), bw)


def max_(a, axis=None, keepdims=False):
    """Max reduction; ties route the gradient to the first attaining index."""
    return _extreme("max", a, axis, keepdims, np.argmax, np.max)


def min_(a, axis=None, keepdims=False):
    return _extreme("min", a, axis, keepdims, np.argmin, np.min)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatchError("concat", detail="no inputs")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    needs = [t.requires_grad for t in tensors]
    ndim = tensors[0].ndim

    def bw(g):
        outs = []
        slicer = [slice(None)] * ndim
        for i, need in enumerate(needs):
            if need:
                slicer[axis] = slice(offsets[i], offsets[i + 1])
                outs.append(g[tuple(slicer)])
            else:
                outs.append(None)
        return tuple(outs)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", *[t.shape for t in tensors]) from None
    return _make("concat", data, tuple(tensors), bw)


def reshape(a, shape):
    def bw(g):
        return (g.reshape(a.shape),)

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, tuple(shape)) from None
    return _make("reshape", data, (a,), bw)


def narrow(a, axis, start, length):
    """Slice `length` entries starting at `start` along `axis`."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        d = np.zeros_like(a.data)
        d[idx] = g
        return (d,)

    return _make("narrow", a.data[idx], (a,), bw)


def gather_rows(a, index):
    """Select rows (axis 0) by integer index; duplicates accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeMismatchError("gather_rows", a.shape,
                                 detail=f"index out of range [0, {a.shape[0]})")

    def bw(g):
        d = np.zeros_like(a.data)
        np.add.at(d, index, g)
        return (d,)

    return _make("gather_rows", a.data[index], (a,), bw)


def sqdist_matrix(a, b):
    """All-pairs squared Euclidean distances between row sets a (N,D), b (M,D)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("sqdist_matrix", a.shape, b.shape)
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = _f64_sum(diff * diff, axis=2)
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        w = 2.0 * g[:, :, None] * diff
        return (w.sum(axis=1).astype(a.dtype, copy=False) if na else None,
                (-w.sum(axis=0)).astype(b.dtype, copy=False) if nb else None)

    return _make("sqdist_matrix", out, (a, b), bw)


def spmm(csr, x):
    """Constant sparse CSR matrix times dense tensor; gradient is csr.T @ g."""
    if csr.shape[1] != x.shape[0]:
        raise ShapeMismatchError("spmm", csr.shape, x.shape)

    def bw(g):
        t = getattr(csr, "_p2mx_t", None)
        if t is None:
            t = csr.T.tocsr()
            csr._p2mx_t = t
        return (np.asarray(t @ g, dtype=x.dtype),)

    return _make("spmm", np.asarray(csr @ x.data, dtype=x.dtype), (x,), bw)


def block_matmul(block, x):
    """y[k*B:(k+1)*B] = block @ x[k*B:(k+1)*B] for every block of B rows.

    `block` is a constant (B, B) matrix applied to each of the N/B row
    blocks (batched BLAS; used for the repeated per-fan adjacency).
    """
    b = block.shape[0]
    if x.ndim != 2 or x.shape[0] % b:
        raise ShapeMismatchError("block_matmul", block.shape, x.shape)
    n = x.shape[0] // b
    w = x.shape[1]
    blk = block.astype(x.dtype, copy=False)
    out = np.matmul(blk, x.data.reshape(n, b, w)).reshape(n * b, w)

    def bw(g):
        return (np.matmul(blk.T, g.reshape(n, b, w)).reshape(n * b, w),)

    return _make("block_matmul", out, (x,), bw)


# ---------------------------------------------------------------------------
# image kernels (backed by the compiled core when available)


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2D convolution, x (Ci,H,W) with w (Co,Ci,kh,kw); zero padding."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, w.shape)
    if stride not in (1, 2):
        raise ShapeMismatchError("conv2d", x.shape, detail=f"unsupported stride {stride}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeMismatchError("conv2d", w.shape, bias.shape, detail="bias must be (Co,)")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xd, wd, stride, pad)
    if bias is not None:
        out = out + bias.data[:, None, None]
    nx, nw = x.requires_grad, w.requires_grad

    if bias is None:
        def bw(g):
            g = np.ascontiguousarray(g)
            return (kernels.conv2d_backward_input(g, wd, xd.shape, stride, pad) if nx else None,
                    kernels.conv2d_backward_weight(g, xd, wd.shape, stride, pad) if nw else None)

        return _make("conv2d", out, (x, w), bw)

    def bw(g):
        g = np.ascontiguousarray(g)
        return (kernels.conv2d_backward_input(g, wd, xd.shape, stride, pad) if nx else None,
                kernels.conv2d_backward_weight(g, xd, wd.shape, stride, pad) if nw else None,
                _f64_sum(g, axis=(1, 2)))

    return _make("conv2d", out, (x, w, bias), bw)


def maxpool2(x):
    """2x2 max pooling with stride 2; H and W must be even."""
    if x.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeMismatchError("maxpool2", x.shape, detail="H and W must be even")
    xd = np.ascontiguousarray(x.data)
    out, am = kernels.maxpool2_forward(xd)

    def bw(g):
        return (kernels.maxpool2_backward(np.ascontiguousarray(g), am, xd.shape),)

    return _make("maxpool2", out, (x,), bw)


_COORD_TOL = 1e-6


def bilinear(fmap, xs, ys):
    """Bilinear sample of fmap (C,H,W) at xs, ys (P,), in [0, W-1] x [0, H-1].

    Differentiable in the map values and in the coordinates.
    """
    if fmap.ndim != 3 or xs.ndim != 1 or ys.ndim != 1 or xs.shape != ys.shape:
        raise ShapeMismatchError("bilinear", fmap.shape, xs.shape, ys.shape)
    _, h, w = fmap.shape
    xd = xs.data
    yd = ys.data
    if not (np.all(np.isfinite(xd)) and np.all(np.isfinite(yd))):
        raise ShapeMismatchError("bilinear", fmap.shape, detail="non-finite sample coordinates")
    if xd.size and (xd.min() < -_COORD_TOL or xd.max() > w - 1 + _COORD_TOL
                    or yd.min() < -_COORD_TOL or yd.max() > h - 1 + _COORD_TOL):
        raise ShapeMismatchError("bilinear", fmap.shape,
                                 detail="sample coordinates outside the map (caller must clamp)")
    fd = np.ascontiguousarray(fmap.data)
    xc = np.ascontiguousarray(np.clip(xd, 0, w - 1), dtype=fd.dtype)
    yc = np.ascontiguousarray(np.clip(yd, 0, h - 1), dtype=fd.dtype)
    out = kernels.bilinear_forward(fd, xc, yc)

    def bw(g):
        dmap, dxs, dys = kernels.bilinear_backward(
            fd, xc, yc, np.ascontiguousarray(g, dtype=fd.dtype))
        return dmap, dxs.astype(xs.dtype, copy=False), dys.astype(ys.dtype, copy=False)

    return _make("bilinear", out, (fmap, xs, ys), bw)


# ---------------------------------------------------------------------------
# dispatcher and gradient checking


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "relu": relu,
    "softmax": softmax,
    "conv2d": conv2d,
    "maxpool2": maxpool2,
    "mean": mean_,
    "max": max_,
    "min": min_,
    "sum": sum_,
    "sqrt": sqrt_,
    "square": square,
    "concat": lambda *ts, **kw: concat(list(ts), **kw),
    "gather_rows": gather_rows,
    "sqdist_matrix": sqdist_matrix,
    "maximum": maximum,
    "reshape": reshape,
    "narrow": narrow,
    "clamp": clamp,
    "bilinear": bilinear,
    "spmm": spmm,
    "where": where,
}


def apply(op_kind, *inputs, **kwargs):
    """Dispatch an operation by name; see _OPS for the supported kinds."""
    fn = _OPS.get(op_kind)
    if fn is None:
        raise P2mxError(f"unknown op kind '{op_kind}'")
    return fn(*inputs, **kwargs)


def op_kinds():
    return sorted(_OPS)


def grad_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if eps <= 0:
        raise P2mxError("grad_check requires eps > 0")
    if not isinstance(x, Tensor):
        x = Tensor(x, requires_grad=True)
    base = Tensor(x.data.copy(), requires_grad=True)
    loss = f(base)
    if loss.size != 1:
        raise ShapeMismatchError("grad_check", loss.shape, detail="f must return a scalar")
    backward(loss)
    analytic = np.zeros_like(base.data) if base.grad is None else np.asarray(base.grad)

    numeric = np.zeros(base.shape, dtype=np.float64)
    with no_grad():
        for i in range(base.size):
            fvals = []
            for sign in (1.0, -1.0):
                pert = np.ascontiguousarray(base.data)
                pert = pert.copy()
                pert.reshape(-1)[i] += sign * eps
                fvals.append(float(f(Tensor(pert)).data.reshape(-1)[0]))
            numeric.reshape(-1)[i] = (fvals[0] - fvals[1]) / (2.0 * eps)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise P2mxError("grad_check encountered non-finite values")
    rel = np.abs(analytic.astype(np.float64) - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
