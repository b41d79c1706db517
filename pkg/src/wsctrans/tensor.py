"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy buffers (row-major). Every differentiable
operation links its output to its inputs so that ``backward`` on a scalar
loss accumulates gradients into the participating leaves. The graph is
rebuilt on every forward pass and, unless ``retain=True``, torn down after
backward.

Broadcasting is deliberately restricted to scalars: all elementwise ops
require identical shapes otherwise.
"""

from __future__ import annotations

import contextlib
import hashlib
import numbers

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Rng", "zeros", "ones", "full", "randn",
    "add", "sub", "mul", "div", "neg", "matmul", "bmm", "linear",
    "concat", "split", "reshape", "permute", "slice_axes", "pad", "roll",
    "conv3d", "conv_transpose3d", "group_norm", "layer_norm",
    "relu", "gelu", "softmax", "tensor_sum", "tensor_mean",
    "grad_check",
]


class Rng:
    """Deterministic pseudorandom stream.

    Backed by numpy's PCG64 bit generator, which produces the same sequence
    for the same seed on every platform. ``child(tag)`` derives an
    independent, reproducible stream so that e.g. parameter initialization
    and batch shuffling never share state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: str) -> "Rng":
        digest = hashlib.blake2b(
            f"{self.seed}/{tag}".encode(), digest_size=8).digest()
        return Rng(int.from_bytes(digest, "little"))

    def standard_normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


class Tensor:
    """N-dimensional array with optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # Scalar-only broadcasting: `other` may be a python number; anything else
    # must match shape exactly.
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

    def __neg__(self):
        return neg(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def backward(self, retain: bool = False):
        """Reverse-mode sweep from a scalar loss.

        Leaf gradients accumulate across calls; pass ``retain=True`` if the
        graph must survive for another sweep, otherwise it is freed.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {tuple(self.shape)}")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        # Transient per-node grads; only leaves keep a persistent .grad.
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

        if not retain:
            for node in topo:
                node._backward = None
                node._parents = ()


class _GradMode:
    enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; forwards run without closures or buffers."""
    prev = _GradMode.enabled
    _GradMode.enabled = False
    try:
        yield
    finally:
        _GradMode.enabled = prev


def grad_enabled() -> bool:
    return _GradMode.enabled


def _make(data, parents, backward_fn) -> Tensor:
    track = _GradMode.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("shape must have at least one extent")
    for s in shape:
        if s < 1:
            raise ValueError(f"extents must be >= 1, got {shape}")
    return shape


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=dtype))


def full(shape, value, dtype=np.float32) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype))


def randn(shape, rng: Rng, dtype=np.float32) -> Tensor:
    """Standard-normal tensor, deterministic for a given rng state."""
    return Tensor(rng.standard_normal(_check_shape(shape), dtype=dtype))


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if isinstance(b, numbers.Number):
        b = float(b)  # python floats never promote float32 buffers
        return _make(a.data + b, (a,), lambda g: [(a, g)])
    if isinstance(a, numbers.Number):
        return add(b, a)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: [(a, g), (b, g)])


def sub(a, b) -> Tensor:
    if isinstance(b, numbers.Number):
        b = float(b)
        return _make(a.data - b, (a,), lambda g: [(a, g)])
    if isinstance(a, numbers.Number):
        a = float(a)
        return _make(a - b.data, (b,), lambda g: [(b, -g)])
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: [(a, g), (b, -g)])


def mul(a, b) -> Tensor:
    if isinstance(b, numbers.Number):
        b = float(b)
        return _make(a.data * b, (a,), lambda g: [(a, g * b)])
    if isinstance(a, numbers.Number):
        return mul(b, a)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: [(a, g * bd), (b, g * ad)])


def div(a, b) -> Tensor:
    if isinstance(b, numbers.Number):
        return mul(a, 1.0 / b)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: [(a, g / bd), (b, -g * ad / (bd * bd))])


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: [(a, -g)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; backward uses g @ b^T and a^T @ g."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: [(a, g @ bd.T), (b, ad.T @ g)])


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over stacked 2-D matrices [B,M,K] x [B,K,N]."""
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError(f"bmm expects 3-D tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm: incompatible shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: [(a, g @ bd.transpose(0, 2, 1)),
                            (b, ad.transpose(0, 2, 1) @ g)])


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map y = x @ w + b for x [M,K], w [K,N], b [N]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} vs {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        out = [(x, g @ wd.T), (w, xd.T @ g)]
        if b is not None:
            out.append((b, g.sum(axis=0)))
        return out

    return _make(y, parents, bw)


def concat(tensors, axis: int) -> Tensor:
    """Stack tensors along an existing axis; backward slices the gradient."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ValueError(f"concat: axis {axis} out of range for rank {nd}")
    axis = axis % nd
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != nd or s[:axis] != ref[:axis] or s[axis + 1:] != ref[axis + 1:]:
            raise ValueError(
                f"concat: shapes must match off-axis, {tuple(ref)} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return [(t, np.ascontiguousarray(
                    np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)))
                for i, t in enumerate(tensors)]

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, bw)


def split(x: Tensor, sizes, axis: int) -> list:
    """Inverse of concat: cut x into consecutive chunks along axis."""
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split: sizes {sizes} do not cover extent {x.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + size)
        outs.append(slice_axes(x, tuple(idx)))
        start += size
    return outs


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _make(x.data.reshape(shape), (x,),
                 lambda g: [(x, g.reshape(old))])


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of rank {x.ndim}")
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: [(x, np.ascontiguousarray(g.transpose(inv)))])


def slice_axes(x: Tensor, key) -> Tensor:
    """Basic (start:stop) slicing; backward zero-fills the dropped region."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice) or k.step not in (None, 1):
            raise ValueError("slice_axes supports contiguous slices only")
    shape = x.shape

    def bw(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[key] = g
        return [(x, buf)]

    return _make(np.ascontiguousarray(x.data[key]), (x,), bw)


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero-pad; pad_width is ((before, after), ...) per axis."""
    pw = tuple((int(b), int(a)) for b, a in pad_width)
    if len(pw) != x.ndim:
        raise ValueError(f"pad: need {x.ndim} pairs, got {len(pw)}")
    key = tuple(slice(b, b + s) for (b, _), s in zip(pw, x.shape))
    return _make(np.pad(x.data, pw), (x,),
                 lambda g: [(x, np.ascontiguousarray(g[key]))])


def roll(x: Tensor, shifts, axes) -> Tensor:
    """Cyclic shift; backward rolls the gradient the opposite way."""
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(a) for a in axes)
    inv = tuple(-s for s in shifts)
    return _make(np.roll(x.data, shifts, axes), (x,),
                 lambda g: [(x, np.roll(g, inv, axes))])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0), (x,),
                 lambda g: [(x, g * mask)])


_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return [(x, g * (cdf + xd * pdf))]

    return _make(out, (x,), bw)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along one axis; rows sum to one."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [(x, y * (g - dot))]

    return _make(y, (x,), bw)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    shape = x.shape

    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def bw(g):
        return [(x, np.broadcast_to(g.reshape(kshape), shape).copy())]

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    elif isinstance(axis, int):
        count = x.shape[axis % x.ndim]
    else:
        count = int(np.prod([x.shape[a % x.ndim] for a in axis]))
    return mul(tensor_sum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Convolution kernels. Lowered as a sum over the k**3 kernel offsets, each a
# batched GEMM over a strided slice; this keeps memory traffic near the data
# size instead of materializing a full k**3-times-larger im2col buffer.
# ---------------------------------------------------------------------------

def _pad5(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _offset_view(xp, off, stride, out_spatial):
    kd, kh, kw = off
    do, ho, wo = out_spatial
    return xp[:, :, kd:kd + stride * do:stride,
              kh:kh + stride * ho:stride,
              kw:kw + stride * wo:stride]


# Forward column buffers above this size are dropped after the forward GEMM
# and regathered during backward instead of living in the graph.
_COLS_CACHE_LIMIT = 256 * 1024 * 1024


def _offsets(k):
    return [(kd, kh, kw) for kd in range(k) for kh in range(k) for kw in range(k)]


def _im2col_buf(xp, k, stride, out_spatial):
    """Column buffer [N, Ci*k^3, M], offsets gathered by strided block copies.

    Slices are assigned into a 6-D destination directly so each element moves
    exactly once; the final reshape of the contiguous buffer is free.
    """
    n, ci = xp.shape[:2]
    m = int(np.prod(out_spatial))
    buf = np.empty((n, ci, k ** 3) + tuple(out_spatial), dtype=xp.dtype)
    for j, off in enumerate(_offsets(k)):
        buf[:, :, j] = _offset_view(xp, off, stride, out_spatial)
    return buf.reshape(n, ci * k ** 3, m)


def _conv3d_gather(xp, w, stride, out_spatial):
    """out[n,co,m] = sum_off w[co,ci,off] * xp[n,ci,off + stride*m]."""
    n, ci = xp.shape[:2]
    co, k = w.shape[0], w.shape[2]
    m = int(np.prod(out_spatial))
    if k == 1 and stride == 1:
        out = w.reshape(co, ci)[None] @ xp.reshape(n, ci, m)
    else:
        out = w.reshape(co, ci * k ** 3)[None] @ _im2col_buf(xp, k, stride, out_spatial)
    return out.reshape((n, co) + tuple(out_spatial))


def _dilate(g, stride):
    if stride == 1:
        return g
    n, c, d, h, w = g.shape
    out = np.zeros((n, c, (d - 1) * stride + 1, (h - 1) * stride + 1,
                    (w - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride, ::stride] = g
    return out


def _conv3d_pair_weight(xp, g, k, stride):
    """dw[co,ci,off] = sum_{n,m} g[n,co,m] * xp[n,ci,off + stride*m]."""
    n, ci = xp.shape[:2]
    co = g.shape[1]
    out_spatial = g.shape[2:]
    m = int(np.prod(out_spatial))
    g3 = g.reshape(n, co, m)
    if k == 1 and stride == 1 and xp.shape[2:] == tuple(out_spatial):
        dw = (g3 @ xp.reshape(n, ci, m).transpose(0, 2, 1)).sum(axis=0)
    else:
        buf = _im2col_buf(xp, k, stride, out_spatial)
        dw = (g3 @ buf.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(co, ci, k, k, k)


def _conv3d_raw(x, w, stride, padding):
    k = w.shape[2]
    out_spatial = tuple((s + 2 * padding - k) // stride + 1 for s in x.shape[2:])
    return _conv3d_gather(_pad5(x, padding), w, stride, out_spatial)


def _conv3d_weight_grad(x, g, k, stride, padding):
    return _conv3d_pair_weight(_pad5(x, padding), g, k, stride)


def _conv3d_input_grad(g, w, in_spatial, stride, padding):
    # Full correlation of the (dilated) output grad with the flipped kernel,
    # embedded into the padded-input frame; the stride remainder region at
    # the far edge receives zero gradient by construction. Runs on the same
    # gather kernel as the forward pass, which keeps the GEMM well shaped.
    k = w.shape[2]
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    gd = _dilate(g, stride)
    full_spatial = tuple(s + k - 1 for s in gd.shape[2:])
    fullg = _conv3d_gather(_pad5(gd, k - 1), wf, 1, full_spatial)
    n, ci = g.shape[0], w.shape[1]
    padded = tuple(s + 2 * padding for s in in_spatial)
    if fullg.shape[2:] != padded:
        buf = np.zeros((n, ci) + padded, dtype=g.dtype)
        buf[:, :, :fullg.shape[2], :fullg.shape[3], :fullg.shape[4]] = fullg
        fullg = buf
    if padding:
        fullg = np.ascontiguousarray(
            fullg[:, :, padding:-padding, padding:-padding, padding:-padding])
    return fullg


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation of x [N,Ci,D,H,W] with w [Co,Ci,k,k,k].

    Output extent per axis is floor((in + 2*padding - k)/stride) + 1.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(f"conv3d expects 5-D tensors, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv3d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    k = w.shape[2]
    if w.shape[3] != k or w.shape[4] != k:
        raise ValueError(f"conv3d: kernel must be cubic, got {w.shape[2:]}")
    if stride < 1:
        raise ValueError(f"conv3d: stride must be >= 1, got {stride}")
    for s in x.shape[2:]:
        if s + 2 * padding < k:
            raise ValueError(
                f"conv3d: kernel {k} exceeds padded extent {s + 2 * padding}")
    if x.dtype != w.dtype:
        raise ValueError(f"conv3d: dtype mismatch {x.dtype} vs {w.dtype}")

    xd, wd = x.data, w.data
    in_spatial = x.shape[2:]
    out_spatial = tuple((s + 2 * padding - k) // stride + 1 for s in in_spatial)
    n, ci = xd.shape[:2]
    co = wd.shape[0]
    m = int(np.prod(out_spatial))
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = None
        y = (wd.reshape(co, ci)[None] @ xd.reshape(n, ci, m))
    else:
        cols = _im2col_buf(_pad5(xd, padding), k, stride, out_spatial)
        y = wd.reshape(co, ci * k ** 3)[None] @ cols
        if cols.nbytes > _COLS_CACHE_LIMIT:
            cols = None  # recomputed in backward rather than held in the graph
    y = y.reshape((n, co) + out_spatial)
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        out = []
        if x.requires_grad:
            out.append((x, _conv3d_input_grad(g, wd, in_spatial, stride, padding)))
        if w.requires_grad:
            g3 = g.reshape(n, co, m)
            if pointwise:
                dw = (g3 @ xd.reshape(n, ci, m).transpose(0, 2, 1)).sum(axis=0)
                dw = dw.reshape(co, ci, 1, 1, 1)
            elif cols is not None:
                dw = (g3 @ cols.transpose(0, 2, 1)).sum(axis=0)
                dw = dw.reshape(co, ci, k, k, k)
            else:
                dw = _conv3d_weight_grad(xd, g, k, stride, padding)
            out.append((w, dw))
        if b is not None and b.requires_grad:
            out.append((b, g.sum(axis=(0, 2, 3, 4))))
        return out

    return _make(y, parents, bw)


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed 3-D convolution (adjoint of conv3d) with w [Ci,Co,k,k,k].

    Output extent per axis is (in - 1)*stride - 2*padding + k; with the
    default k=2, stride=2 each spatial extent doubles.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(
            f"conv_transpose3d expects 5-D tensors, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(
            f"conv_transpose3d: input has {x.shape[1]} channels, weight expects {w.shape[0]}")
    if stride < 1:
        raise ValueError(f"conv_transpose3d: stride must be >= 1, got {stride}")
    if x.dtype != w.dtype:
        raise ValueError(f"conv_transpose3d: dtype mismatch {x.dtype} vs {w.dtype}")
    k = w.shape[2]
    out_spatial = tuple((s - 1) * stride - 2 * padding + k for s in x.shape[2:])
    if any(s < 1 for s in out_spatial):
        raise ValueError("conv_transpose3d: output extent would be < 1")

    xd, wd = x.data, w.data
    y = _conv3d_input_grad(xd, wd, out_spatial, stride, padding)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        out = []
        if x.requires_grad:
            out.append((x, _conv3d_raw(g, wd, stride, padding)))
        if w.requires_grad:
            out.append((w, _conv3d_weight_grad(g, xd, k, stride, padding)))
        if b is not None and b.requires_grad:
            out.append((b, g.sum(axis=(0, 2, 3, 4))))
        return out

    return _make(y, parents, bw)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Per-sample, per-group normalization over [N,C,*spatial] tensors."""
    if x.ndim < 3:
        raise ValueError(f"group_norm expects [N,C,...], got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    if c % groups != 0:
        raise ValueError(f"group_norm: {c} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("group_norm: gamma/beta must have shape (channels,)")

    xd = x.data
    m = xd.size // (n * groups)
    xg = xd.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(xd.shape)
    gshape = (1, c) + (1,) * (x.ndim - 2)
    y = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def bw(g):
        out = []
        red = (0,) + tuple(range(2, x.ndim))
        if gamma.requires_grad:
            out.append((gamma, (g * xhat).sum(axis=red)))
        if beta.requires_grad:
            out.append((beta, g.sum(axis=red)))
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(gshape)).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            mean_d = dxhat.mean(axis=2, keepdims=True)
            mean_dx = (dxhat * xh).mean(axis=2, keepdims=True)
            dx = (dxhat - mean_d - xh * mean_dx) * inv
            out.append((x, np.ascontiguousarray(dx.reshape(xd.shape))))
        return out

    return _make(y.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the trailing axis (per-token channel norm)."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("layer_norm: gamma/beta must have shape (channels,)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    y = gamma.data * xhat + beta.data

    def bw(g):
        out = []
        red = tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            out.append((gamma, (g * xhat).sum(axis=red)))
        if beta.requires_grad:
            out.append((beta, g.sum(axis=red)))
        if x.requires_grad:
            dxhat = g * gamma.data
            mean_d = dxhat.mean(axis=-1, keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
            out.append((x, (dxhat - mean_d - xhat * mean_dx) * inv))
        return out

    return _make(y.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, inputs, eps: float = 1e-5, skip=None, max_coords=None,
               rng: Rng | None = None) -> float:
    """Max relative error of analytic gradients vs central differences.

    ``f`` maps the tensors in ``inputs`` to a scalar Tensor. Inputs should be
    float64; float32 rounding drowns the finite-difference signal. ``skip``
    optionally gives one boolean mask per input marking coordinates to leave
    out (e.g. near activation kinks). ``max_coords`` caps the number of
    checked coordinates per input, sampled deterministically via ``rng``.
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    loss = f(*inputs)
    loss.backward()
    # FD evaluations do not need graphs.
    for t in inputs:
        t.requires_grad = False

    worst = 0.0
    for idx, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if skip is not None and skip[idx] is not None:
            coords = coords[~skip[idx].reshape(-1)]
        if max_coords is not None and coords.size > max_coords:
            pick_rng = rng if rng is not None else Rng(0)
            sel = pick_rng.permutation(coords.size)[:max_coords]
            coords = coords[np.sort(sel)]
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*inputs).data)
            flat[i] = orig - eps
            fm = float(f(*inputs).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-4)
            worst = max(worst, abs(a - numeric) / denom)
    for t in inputs:
        t.requires_grad = True
    return worst
