"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it provides exactly the operations the
three-branch CAM pipeline needs (convolutions, pooling, resizing, batch
normalization, attention matmuls and the elementwise glue), each with a
hand-written backward rule. Values are numpy arrays in float32 or
float64; the graph is built eagerly by the forward pass and consumed by
a single topological backward sweep.

Conventions:

* convolution is cross-correlation (no kernel flip),
* relu uses subgradient 0 at the kink,
* no op mutates its inputs; fan-out gradients accumulate additively,
* every op output is checked for NaN/Inf while debug checks are enabled
  (the default), so numeric failures surface at the op that caused them.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError, ValidationError

_FLOAT_DTYPES = (np.float32, np.float64)

_DEBUG_CHECKS = True
_GRAD_ENABLED = True


def set_debug_checks(enabled: bool) -> None:
    """Globally enable or disable per-op NaN/Inf detection."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextlib.contextmanager
def debug_checks(enabled: bool):
    """Temporarily toggle per-op NaN/Inf detection."""
    global _DEBUG_CHECKS
    prev = _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)
    try:
        yield
    finally:
        _DEBUG_CHECKS = prev


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense n-dimensional value that can carry a gradient.

    ``data`` is a row-major numpy array in float32 or float64. ``grad``
    is populated by :meth:`backward` with an array of the same shape and
    dtype. The graph edges (``_parents`` plus a ``_backward`` closure)
    are recorded only while gradients are enabled and some input
    requires them.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op!r})"

    # -- autodiff ------------------------------------------------------

    def backward(self, seed_grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every ancestor.

        ``self`` must be a scalar unless an explicit ``seed_grad`` of the
        same shape is supplied. Each graph node is visited exactly once;
        gradients from fan-out are summed.
        """
        if not self.requires_grad:
            raise ValidationError("backward() on a tensor that does not require grad")
        if seed_grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without seed requires a scalar output")
            seed_grad = np.ones_like(self.data)
        else:
            seed_grad = np.asarray(seed_grad, dtype=self.data.dtype)
            if seed_grad.shape != self.data.shape:
                raise ShapeError("seed gradient shape does not match output shape")

        # Iterative post-order: children before parents in `topo`.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = seed_grad if self.grad is None else self.grad + seed_grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def mean(self):
        return mean(self)

    def sum(self):
        return tensor_sum(self)

    def abs(self):
        return tensor_abs(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _check_finite(data: np.ndarray, op: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"op '{op}' produced non-finite values")


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
        out._op = op
    else:
        out._parents = ()
        out._backward = None
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValidationError(f"mixed tensor dtypes {sorted(d.name for d in dtypes)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _same_dtype(a, b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _from_op(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * np.asarray(c, dtype=x.data.dtype)

    def backward(g):
        _accum(x, g * np.asarray(c, dtype=x.data.dtype))

    return _from_op(data, (x,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        _accum(x, g * (x.data > 0))

    return _from_op(data, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, computed without overflowing exp."""
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return _from_op(out, (x,), backward, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) in the max(x, 0) + log1p(exp(-|x|)) form."""
    v = x.data
    data = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    sig = np.empty_like(v)
    pos = v >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    sig[~pos] = ev / (1.0 + ev)

    def backward(g):
        _accum(x, g * sig)

    return _from_op(data, (x,), backward, "softplus")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - inner))

    return _from_op(out, (x,), backward, "softmax")


def tensor_abs(x: Tensor) -> Tensor:
    data = np.abs(x.data)

    def backward(g):
        _accum(x, g * np.sign(x.data))

    return _from_op(data, (x,), backward, "abs")


def mean(x: Tensor) -> Tensor:
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)
    n = x.data.size

    def backward(g):
        _accum(x, np.full_like(x.data, g / n))

    return _from_op(data, (x,), backward, "mean")


def tensor_sum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accum(x, np.full_like(x.data, g))

    return _from_op(data, (x,), backward, "sum")


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _from_op(data, (x,), backward, "reshape")


def flatten_spatial(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C, H*W]."""
    if x.data.ndim != 4:
        raise ShapeError(f"flatten_spatial expects 4-d input, got {x.shape}")
    n, c, h, w = x.data.shape
    return reshape(x, (n, c, h * w))


def transpose_last2(x: Tensor) -> Tensor:
    data = x.data.swapaxes(-1, -2)

    def backward(g):
        _accum(x, g.swapaxes(-1, -2))

    return _from_op(data, (x,), backward, "transpose_last2")


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate [N, C_i, H, W] tensors along the channel axis."""
    if not tensors:
        raise ValidationError("concat_channels requires at least one tensor")
    _same_dtype(*tensors)
    data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=1)):
            _accum(t, piece)

    return _from_op(data, tuple(tensors), backward, "concat_channels")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics for 2-d and batched 3-d operands."""
    _same_dtype(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _from_op(data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    out = (extent + 2 * padding - k) // stride + 1
    if out < 1:
        raise ShapeError(
            f"convolution produces empty output: extent={extent} k={k} "
            f"stride={stride} padding={padding}"
        )
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Padded input [N,C,Hp,Wp] -> columns [N*oh*ow, C*kh*kw] (copy)."""
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    # [N, oh, ow, C, kh, kw] layout so one GEMM covers the whole batch.
    return np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(
        n * oh * ow, c * kh * kw
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw] plus bias.

    Output extents follow floor((H + 2p - kh)/stride) + 1. Internally one
    GEMM over im2col columns; the columns are kept for the weight
    gradient, the input gradient scatters back through the same window
    geometry.
    """
    _same_dtype(x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin} vs kernel {cin_w}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({cout},)")
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise ShapeError("conv2d requires kh,kw,stride >= 1 and padding >= 0")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(wd, kw, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = w.data.reshape(cout, -1)
    out2 = cols @ w2.T
    out2 += b.data
    # transposed view; the next elementwise op materializes NCHW for free
    out = out2.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        _accum(b, g2.sum(axis=0))
        _accum(w, (g2.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            # scatter in NHWC so the channel axis stays innermost
            dcols = (g2 @ w2).reshape(n, oh, ow, cin, kh, kw)
            hp, wp = h + 2 * padding, wd + 2 * padding
            dxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            for ky in range(kh):
                y_sl = slice(ky, ky + stride * oh, stride)
                for kx in range(kw):
                    dxp[:, y_sl, kx : kx + stride * ow : stride, :] += dcols[:, :, :, :, ky, kx]
            if padding:
                dxp = dxp[:, padding : padding + h, padding : padding + wd, :]
            _accum(x, dxp.transpose(0, 3, 1, 2))

    return _from_op(out, (x, w, b), backward, "conv2d")


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel linear map across channels: [N,C,H,W] x [K,C] -> [N,K,H,W]."""
    _same_dtype(x, w, b)
    if x.data.ndim != 4 or w.data.ndim != 2:
        raise ShapeError(f"conv1x1 expects 4-d input and 2-d weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.data.shape
    k, c_w = w.data.shape
    if c != c_w:
        raise ShapeError(f"conv1x1 channel mismatch: input {c} vs weight {c_w}")
    if b.data.shape != (k,):
        raise ShapeError(f"conv1x1 bias shape {b.shape} != ({k},)")
    flat = np.ascontiguousarray(x.data).reshape(n, c, h * wd)
    out = np.matmul(w.data, flat)  # [N, K, H*W]
    out += b.data[:, None]
    out = out.reshape(n, k, h, wd)

    def backward(g):
        g_flat = np.ascontiguousarray(g).reshape(n, k, h * wd)
        _accum(b, g_flat.sum(axis=(0, 2)))
        _accum(w, np.einsum("nkp,ncp->kc", g_flat, flat, optimize=True))
        if x.requires_grad:
            _accum(x, np.matmul(w.data.T, g_flat).reshape(n, c, h, wd))

    return _from_op(out, (x, w, b), backward, "conv1x1")


# ---------------------------------------------------------------------------
# Pooling and resizing
# ---------------------------------------------------------------------------


def _pool_matrix(in_extent: int, out_extent: int, dtype) -> np.ndarray:
    """Row i averages input window [floor(i*H/out), ceil((i+1)*H/out))."""
    m = np.zeros((out_extent, in_extent), dtype=dtype)
    for i in range(out_extent):
        lo = (i * in_extent) // out_extent
        hi = -((-(i + 1) * in_extent) // out_extent)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def _resize_matrix(in_extent: int, out_extent: int, dtype) -> np.ndarray:
    """Bilinear weights with src = (dst + 0.5) * scale - 0.5, edge-clamped."""
    m = np.zeros((out_extent, in_extent), dtype=np.float64)
    scale_f = in_extent / out_extent
    for i in range(out_extent):
        src = (i + 0.5) * scale_f - 0.5
        src = min(max(src, 0.0), in_extent - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_extent - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m.astype(dtype)


def _separable(x: Tensor, my: np.ndarray, mx: np.ndarray, op: str) -> Tensor:
    """Apply out = my @ x @ mx.T over the two spatial axes of [N,C,H,W]."""
    data = np.einsum("oh,nchw,pw->ncop", my, x.data, mx, optimize=True)

    def backward(g):
        _accum(x, np.einsum("oh,ncop,pw->nchw", my, g, mx, optimize=True))

    return _from_op(np.ascontiguousarray(data), (x,), backward, op)


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average-pool [N,C,H,W] onto an out_h x out_w grid.

    Cell (i, j) averages the window [floor(i*H/out_h), ceil((i+1)*H/out_h))
    by [floor(j*W/out_w), ceil((j+1)*W/out_w)); 1x1 output is the exact
    global mean.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.data.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(
            f"adaptive_avg_pool output {out_h}x{out_w} exceeds input {h}x{w}"
        )
    if out_h == h and out_w == w:
        return reshape(x, x.data.shape)
    if out_h == 1 and out_w == 1:
        data = x.data.mean(axis=(2, 3), keepdims=True)

        def backward(g):
            _accum(x, np.broadcast_to(g / (h * w), x.data.shape).copy())

        return _from_op(data, (x,), backward, "adaptive_avg_pool")
    my = _pool_matrix(h, out_h, x.data.dtype)
    mx = _pool_matrix(w, out_w, x.data.dtype)
    return _separable(x, my, mx, "adaptive_avg_pool")


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of [N,C,H,W] with edge-clamped sampling."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize expects 4-d input, got {x.shape}")
    _, _, h, w = x.data.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize output extents must be >= 1")
    if out_h == h and out_w == w:
        return reshape(x, x.data.shape)
    my = _resize_matrix(h, out_h, x.data.dtype)
    mx = _resize_matrix(w, out_w, x.data.dtype)
    return _separable(x, my, mx, "bilinear_resize")


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [N,C,H,W].

    Training mode normalizes by batch statistics and folds them into the
    running buffers as running = momentum * running + (1 - momentum) * batch
    (in place; the buffers are layer state, not graph inputs). Eval mode
    normalizes by the running buffers, which keeps the op linear in x and
    finite-difference friendly.
    """
    _same_dtype(x, gamma, beta)
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-d input, got {x.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("batchnorm2d gamma/beta must have shape (C,)")

    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = g4 * xhat + beta.data.reshape(1, c, 1, 1)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

        def backward(g):
            sum_g = g.sum(axis=(0, 2, 3))
            sum_gx = (g * xhat).sum(axis=(0, 2, 3))
            _accum(beta, sum_g)
            _accum(gamma, sum_gx)
            if x.requires_grad:
                coef = (gamma.data * inv_std / m).reshape(1, c, 1, 1)
                dx = coef * (
                    m * g
                    - sum_g.reshape(1, c, 1, 1)
                    - xhat * sum_gx.reshape(1, c, 1, 1)
                )
                _accum(x, dx)

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

        def backward(g):
            _accum(beta, g.sum(axis=(0, 2, 3)))
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                _accum(x, g * (gamma.data * inv_std).reshape(1, c, 1, 1))

    return _from_op(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------------------
# Per-map min-max normalization
# ---------------------------------------------------------------------------


def minmax_normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial rescale (v - min) / (max - min + eps).

    Constant maps collapse to zero; outputs lie in [0, 1). The min/max
    picks route their share of the gradient to the first extreme element,
    which keeps the op finite-difference checkable away from ties.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"minmax_normalize expects 4-d input, got {x.shape}")
    n, c, h, w = x.data.shape
    flat = x.data.reshape(n, c, h * w)
    amin = flat.argmin(axis=2)
    amax = flat.argmax(axis=2)
    lo = np.take_along_axis(flat, amin[:, :, None], axis=2)
    hi = np.take_along_axis(flat, amax[:, :, None], axis=2)
    denom = hi - lo + np.asarray(eps, dtype=x.data.dtype)
    out = ((flat - lo) / denom).reshape(n, c, h, w)

    def backward(g):
        gf = g.reshape(n, c, h * w)
        dx = gf / denom
        # d/d(min): (v - max - eps) / denom^2, routed to the argmin element.
        ga = (gf * (flat - hi - eps)).sum(axis=2, keepdims=True) / (denom * denom)
        gb = -(gf * (flat - lo)).sum(axis=2, keepdims=True) / (denom * denom)
        dx = dx.copy()
        np.put_along_axis(
            dx, amin[:, :, None], np.take_along_axis(dx, amin[:, :, None], axis=2) + ga, axis=2
        )
        np.put_along_axis(
            dx, amax[:, :, None], np.take_along_axis(dx, amax[:, :, None], axis=2) + gb, axis=2
        )
        _accum(x, dx.reshape(x.data.shape))

    return _from_op(out, (x,), backward, "minmax_normalize")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one analytic-vs-finite-difference comparison."""

    name: str
    max_rel_err: float
    n_checked: int
    passed: bool
    message: str = ""

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        line = f"{self.name:<28s} max_rel_err={self.max_rel_err:.3e} ({self.n_checked} elems) {status}"
        if self.message:
            line += f"  [{self.message}]"
        return line


def grad_check(
    fn,
    inputs: list[Tensor],
    name: str = "op",
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` to central differences.

    ``fn`` must return a scalar Tensor and be deterministic. Inputs to be
    checked must be float64 and have ``requires_grad`` set. The relative
    error uses denominator max(|analytic|, |numeric|, 1e-8); the check
    passes iff the maximum over all checked elements is at most ``tol``.
    Non-finite values anywhere fail the check with the op's name.
    """
    checked = [t for t in inputs if t.requires_grad]
    for t in checked:
        if t.data.dtype != np.float64:
            raise ValidationError(f"grad_check requires float64 inputs ({name})")
        t.zero_grad()

    try:
        out = fn(*inputs)
        out.backward()
    except NumericError as exc:
        return GradCheckReport(name, float("inf"), 0, False, f"non-finite: {exc}")

    analytic = []
    for t in checked:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())

    max_rel = 0.0
    n_checked = 0
    with no_grad():
        for t, ga in zip(checked, analytic):
            flat = t.data.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                f_plus = fn(*inputs).item()
                flat[idx] = orig - h
                f_minus = fn(*inputs).item()
                flat[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = ga.reshape(-1)[idx]
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    return GradCheckReport(
                        name, float("inf"), n_checked, False, "non-finite gradient"
                    )
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                max_rel = max(max_rel, rel)
                n_checked += 1
    return GradCheckReport(name, max_rel, n_checked, max_rel <= tol)
