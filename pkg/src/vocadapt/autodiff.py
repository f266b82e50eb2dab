"""Reverse-mode differentiable tensors over numpy arrays.

The engine provides exactly the operations the vocoder generators,
discriminators and losses need: 1-d (transposed, dilated, grouped)
convolutions, a small elementwise suite, reductions, pooling, the
period-reshape used by period discriminators, and the similarity /
divergence primitives of the consistency loss.

Conventions:
  * float32 is the training dtype; tests run the same ops in float64.
  * Only scalar and same-shape broadcasting are supported.  Shape surprises
    are bugs, so mixed shapes raise instead of broadcasting.
  * Any NaN/Inf produced in a forward or backward pass raises immediately,
    with the offending op named.
  * A graph may be backpropagated once; reusing a consumed graph raises.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_finite_checks = True


class no_grad:
    """Context manager: ops inside build no graph (pure forward)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf screening; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _check_finite(arr: np.ndarray, op: str, phase: str = "forward") -> None:
    # A single-pass sum is non-finite iff the array holds NaN/Inf (or has
    # overflowed, which deserves the same abort); cheaper than isfinite().all().
    if _finite_checks and not np.isfinite(arr.sum()):
        raise FloatingPointError(f"non-finite values in {phase} of op '{op}'")


class Tensor:
    """An n-d array node in a reverse-mode compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_tracked", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tracked = self.requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._done = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def set_requires_grad(self, flag: bool) -> None:
        if self._parents:
            raise ValueError("requires_grad can only be toggled on leaf tensors")
        self.requires_grad = bool(flag)
        self._tracked = bool(flag)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._tracked = False
        out._parents = ()
        out._backward = None
        out._op = "detach"
        out._done = False
        return out

    # -- operator sugar -----------------------------------------------------

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
        return scalar_mul(self, -1.0)

    def mean(self, axis=None):
        return mean(self, axis)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def make_op(data: np.ndarray, parents, backward_fn, name: str) -> Tensor:
    """Wrap an op result into the graph.

    ``backward_fn(grad)`` receives the output gradient and must push
    contributions into the parents via ``accumulate``.  Used by every builtin
    op and by fused extension ops (e.g. the differentiable log-mel front end).
    """
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._done = False
    out._op = name
    tracked = _grad_enabled and any(p._tracked for p in parents)
    out._tracked = tracked
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a tensor (copy-on-first-write)."""
    if not t._tracked:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def backward(out: Tensor) -> None:
    """Backpropagate from a scalar output; populates .grad on tracked leaves."""
    if out.data.size != 1:
        raise ValueError(f"backward() requires a scalar output, got shape {out.data.shape}")
    if out._done:
        raise RuntimeError("backward() called twice on the same graph; re-run the forward pass")
    if out._parents and out._backward is None:
        raise RuntimeError("stale graph: this output's graph was already consumed")

    order = []
    visited = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._tracked:
                stack.append((p, False))

    out.grad = np.ones_like(out.data)
    for node in reversed(order):
        if node._parents and node._backward is None:
            raise RuntimeError(f"stale graph at op '{node._op}': already consumed by a previous backward()")
        if node._backward is not None:
            _check_finite(node.grad, node._op, "backward")
            node._backward(node.grad)
            node._backward = None
    out._done = True


# -- helpers ------------------------------------------------------------------


def _as_tensor_pair(a, b, op):
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape} (only scalar/same-shape supported)")
        if a.data.dtype != b.data.dtype:
            raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
        return a, b, None
    return a, None, a.data.dtype.type(b)


# -- elementwise suite --------------------------------------------------------


def add(a, b) -> Tensor:
    a, bt, c = _as_tensor_pair(a, b, "add")
    if bt is not None:
        out = make_op(a.data + bt.data, (a, bt), None, "add")
        if out._tracked:
            def _bwd(g):
                accumulate(a, g)
                accumulate(bt, g)
            out._backward = _bwd
        return out
    out = make_op(a.data + c, (a,), None, "add")
    if out._tracked:
        out._backward = lambda g: accumulate(a, g)
    return out


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ValueError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
        if a.data.dtype != b.data.dtype:
            raise ValueError(f"sub: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
        out = make_op(a.data - b.data, (a, b), None, "sub")
        if out._tracked:
            def _bwd(g):
                accumulate(a, g)
                accumulate(b, -g)
            out._backward = _bwd
        return out
    if isinstance(a, Tensor):
        c = a.data.dtype.type(b)
        out = make_op(a.data - c, (a,), None, "sub")
        if out._tracked:
            out._backward = lambda g: accumulate(a, g)
        return out
    # scalar minus tensor
    c = b.data.dtype.type(a)
    bt = b
    out = make_op(c - bt.data, (bt,), None, "sub")
    if out._tracked:
        out._backward = lambda g: accumulate(bt, -g)
    return out


def mul(a, b) -> Tensor:
    a, bt, c = _as_tensor_pair(a, b, "mul")
    if bt is not None:
        out = make_op(a.data * bt.data, (a, bt), None, "mul")
        if out._tracked:
            def _bwd(g):
                accumulate(a, g * bt.data)
                accumulate(bt, g * a.data)
            out._backward = _bwd
        return out
    return scalar_mul(a, float(c))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    out = make_op(x.data * c, (x,), None, "scalar_mul")
    if out._tracked:
        out._backward = lambda g: accumulate(x, g * c)
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError("leaky_relu slope must be in [0, 1)")
    s = x.data.dtype.type(slope)
    out = make_op(np.maximum(x.data, x.data * s), (x,), None, "leaky_relu")
    if out._tracked:
        def _bwd(g):
            accumulate(x, np.where(x.data > 0, g, g * s))
        out._backward = _bwd
    return out


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = make_op(y, (x,), None, "tanh")
    if out._tracked:
        out._backward = lambda g: accumulate(x, g * (1.0 - y * y))
    return out


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    out = make_op(y, (x,), None, "log")
    if out._tracked:
        out._backward = lambda g: accumulate(x, g / x.data)
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = make_op(y, (x,), None, "exp")
    if out._tracked:
        out._backward = lambda g: accumulate(x, g * y)
    return out


def absolute(x: Tensor) -> Tensor:
    out = make_op(np.abs(x.data), (x,), None, "abs")
    if out._tracked:
        out._backward = lambda g: accumulate(x, g * np.sign(x.data))
    return out


# -- reductions ----------------------------------------------------------------


def mean(x: Tensor, axis=None) -> Tensor:
    if x.data.size == 0:
        raise ValueError("mean of empty tensor")
    y = np.mean(x.data, axis=axis)
    out = make_op(np.asarray(y), (x,), None, "mean")
    if out._tracked:
        n = x.data.size if axis is None else x.data.shape[axis]

        def _bwd(g):
            if axis is None:
                accumulate(x, np.broadcast_to(g / n, x.data.shape))
            else:
                accumulate(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape))
        out._backward = _bwd
    return out


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    if x.data.size == 0:
        raise ValueError("sum of empty tensor")
    y = np.sum(x.data, axis=axis)
    out = make_op(np.asarray(y), (x,), None, "sum")
    if out._tracked:
        def _bwd(g):
            if axis is None:
                accumulate(x, np.broadcast_to(g, x.data.shape))
            else:
                accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))
        out._backward = _bwd
    return out


# -- shape plumbing -------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = make_op(x.data.reshape(shape), (x,), None, "reshape")
    if out._tracked:
        out._backward = lambda g: accumulate(x, g.reshape(x.data.shape))
    return out


def moveaxis(x: Tensor, src: int, dst: int) -> Tensor:
    out = make_op(np.ascontiguousarray(np.moveaxis(x.data, src, dst)), (x,), None, "moveaxis")
    if out._tracked:
        out._backward = lambda g: accumulate(x, np.moveaxis(g, dst, src))
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("stack of empty list")
    shapes = {t.data.shape for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"stack: mismatched shapes {shapes}")
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) != 1:
        raise ValueError(f"stack: mismatched dtypes {dtypes}")
    data = np.stack([t.data for t in tensors], axis=axis)
    out = make_op(data, tuple(tensors), None, "stack")
    if out._tracked:
        def _bwd(g):
            for i, t in enumerate(tensors):
                accumulate(t, np.take(g, i, axis=axis))
        out._backward = _bwd
    return out


# -- pooling / periodization -----------------------------------------------------


def avg_pool1d(x: Tensor, kernel: int = 4, stride: int = 2, padding: int = 1) -> Tensor:
    """Mean pooling over the last axis; zero padding counts toward the mean."""
    data = x.data
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    B, C, L = data.shape
    L_out = (L + 2 * padding - kernel) // stride + 1
    if L_out < 1:
        raise ValueError(f"avg_pool1d: input length {L} too short for kernel {kernel}")
    xp = np.pad(data, ((0, 0), (0, 0), (padding, padding))) if padding else data
    sB, sC, sL = xp.strides
    win = np.lib.stride_tricks.as_strided(xp, (B, C, L_out, kernel), (sB, sC, sL * stride, sL))
    y = win.mean(-1)
    if squeeze:
        y = y[0]
    out = make_op(y, (x,), None, "avg_pool1d")
    if out._tracked:
        def _bwd(g):
            gg = g[None] if squeeze else g
            gxp = np.zeros_like(xp)
            share = gg / kernel
            for k in range(kernel):
                gxp[:, :, k:k + L_out * stride:stride] += share
            gx = gxp[:, :, padding:padding + L] if padding else gxp
            accumulate(x, gx[0] if squeeze else gx)
        out._backward = _bwd
    return out


def periodize(x: Tensor, period: int) -> Tensor:
    """Reshape [..., L] to [..., ceil(L/p), p]; the tail is zero padded.

    Element (..., i, j) maps to input position i*p + j, so the last axis
    indexes phase within one period.
    """
    if period < 1:
        raise ValueError("period must be >= 1")
    L = x.data.shape[-1]
    T = -(-L // period)
    pad = T * period - L
    data = np.pad(x.data, [(0, 0)] * (x.data.ndim - 1) + [(0, pad)]) if pad else x.data
    y = data.reshape(x.data.shape[:-1] + (T, period))
    out = make_op(y, (x,), None, "periodize")
    if out._tracked:
        def _bwd(g):
            flat = g.reshape(x.data.shape[:-1] + (T * period,))
            accumulate(x, flat[..., :L])
        out._backward = _bwd
    return out


# -- similarity / divergence -------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over a vector."""
    if x.data.ndim != 1 or x.data.size == 0:
        raise ValueError(f"softmax expects a non-empty vector, got shape {x.data.shape}")
    z = x.data - x.data.max()
    e = np.exp(z)
    y = e / e.sum()
    out = make_op(y, (x,), None, "softmax")
    if out._tracked:
        def _bwd(g):
            accumulate(x, y * (g - np.dot(g, y)))
        out._backward = _bwd
    return out


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """a.b / (max(|a|,eps) * max(|b|,eps)) for two vectors."""
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ValueError(f"cosine_similarity expects equal-length vectors, got {a.data.shape} vs {b.data.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    A = max(na, eps)
    B = max(nb, eps)
    dot = float(np.dot(a.data, b.data))
    out = make_op(np.asarray(dot / (A * B), dtype=a.data.dtype), (a, b), None, "cosine_similarity")
    if out._tracked:
        def _bwd(g):
            gs = float(g)
            ga = b.data / (A * B)
            gb = a.data / (A * B)
            if na > eps:
                ga = ga - (dot / (A * A * B)) * (a.data / na)
            if nb > eps:
                gb = gb - (dot / (A * B * B)) * (b.data / nb)
            accumulate(a, gs * ga)
            accumulate(b, gs * gb)
        out._backward = _bwd
    return out


def kl_divergence(p: Tensor, q: Tensor, eps: float = 1e-12) -> Tensor:
    """sum p * (log p - log q) with 0*log0 := 0; q is clamped at eps."""
    if p.data.shape != q.data.shape or p.data.ndim != 1:
        raise ValueError(f"kl_divergence expects equal-length vectors, got {p.data.shape} vs {q.data.shape}")
    if np.any(p.data < 0) or np.any(q.data < 0):
        raise ValueError("kl_divergence: probabilities must be non-negative")
    if abs(float(p.data.sum()) - 1.0) > 1e-6 or abs(float(q.data.sum()) - 1.0) > 1e-6:
        raise ValueError("kl_divergence: inputs must sum to 1 within 1e-6")
    qc = np.maximum(q.data, eps)
    logq = np.log(qc)
    active = p.data > 0
    logp = np.where(active, np.log(np.maximum(p.data, eps)), 0.0)
    val = float(np.sum(np.where(active, p.data * (logp - logq), 0.0)))
    out = make_op(np.asarray(val, dtype=p.data.dtype), (p, q), None, "kl_divergence")
    if out._tracked:
        def _bwd(g):
            gs = float(g)
            gp = np.where(active, logp - logq + 1.0, 0.0)
            gq = np.where(q.data > eps, -p.data / qc, 0.0)
            accumulate(p, gs * gp)
            accumulate(q, gs * gq)
        out._backward = _bwd
    return out


# -- convolutions -------------------------------------------------------------------


def _pad_last(x: np.ndarray, left: int, right: int) -> np.ndarray:
    """Zero padding on the last axis (manual: np.pad has heavy overhead)."""
    if left == 0 and right == 0:
        return x
    shape = x.shape[:-1] + (x.shape[-1] + left + right,)
    out = np.zeros(shape, dtype=x.dtype)
    out[..., left:left + x.shape[-1]] = x
    return out


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """Cross-correlation over the last axis.

    x: [C_in, L] or [B, C_in, L]; w: [C_out, C_in/groups, K]; bias: [C_out].
    Computed as K shifted batched matmuls, which keeps everything in GEMM
    without materializing an im2col buffer.
    """
    data = x.data
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    if data.ndim != 3 or w.data.ndim != 3:
        raise ValueError(f"conv1d: expected 2/3-d input and 3-d weight, got {x.data.shape} and {w.data.shape}")
    B, Ci, L = data.shape
    Co, Cig, K = w.data.shape
    if Ci != Cig * groups or Co % groups:
        raise ValueError(f"conv1d: incompatible channels in={Ci} weight={w.data.shape} groups={groups}")
    L_out = (L + 2 * padding - dilation * (K - 1) - 1) // stride + 1
    if L_out < 1:
        raise ValueError(f"conv1d: output length {L_out} < 1 for input length {L}")
    Cog = Co // groups

    Lp = L + 2 * padding
    xp = _pad_last(data, padding, padding).reshape(B, groups, Cig, Lp)
    sB, sG, sC, sL = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (B, groups, Cig, K, L_out), (sB, sG, sC, sL * dilation, sL * stride), writeable=False)
    col = np.ascontiguousarray(view).reshape(B, groups, Cig * K, L_out)
    wmat = w.data.reshape(groups, Cog, Cig * K)
    y = np.matmul(wmat, col).reshape(B, Co, L_out)
    if bias is not None:
        if bias.data.shape != (Co,):
            raise ValueError(f"conv1d: bias shape {bias.data.shape} != ({Co},)")
        y += bias.data[:, None]
    out_data = y[0] if squeeze else y
    parents = (x, w) if bias is None else (x, w, bias)
    out = make_op(out_data, parents, None, "conv1d")
    if out._tracked:
        span = (L_out - 1) * stride + 1

        def _bwd(g):
            gg = (g[None] if squeeze else g).reshape(B, groups, Cog, L_out)
            if bias is not None:
                accumulate(bias, gg.sum((0, 3)).reshape(Co))
            if w._tracked:
                gw = np.matmul(gg, col.transpose(0, 1, 3, 2)).sum(0)         # [g, Cog, Cig*K]
                accumulate(w, gw.reshape(Co, Cig, K))
            if x._tracked:
                gcol = np.matmul(wmat.transpose(0, 2, 1), gg)                # [B, g, Cig*K, Lo]
                gcol = gcol.reshape(B, groups, Cig, K, L_out)
                gxp = np.zeros_like(xp)
                for k in range(K):
                    off = k * dilation
                    gxp[:, :, :, off:off + span:stride] += gcol[:, :, :, k, :]
                gx = gxp.reshape(B, Ci, Lp)
                if padding:
                    gx = gx[:, :, padding:padding + L]
                accumulate(x, gx[0] if squeeze else gx)
        out._backward = _bwd
    return out


def conv_transpose1d(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv1d: upsamples by ``stride``.

    x: [C_in, L] or [B, C_in, L]; w: [C_in, C_out, K]; bias: [C_out].
    Output length is (L-1)*stride - 2*padding + K.
    """
    data = x.data
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    if data.ndim != 3 or w.data.ndim != 3:
        raise ValueError(f"conv_transpose1d: expected 2/3-d input and 3-d weight, got {x.data.shape} and {w.data.shape}")
    B, Ci, L = data.shape
    Ciw, Co, K = w.data.shape
    if Ci != Ciw:
        raise ValueError(f"conv_transpose1d: input channels {Ci} != weight in-channels {Ciw}")
    L_full = (L - 1) * stride + K
    L_out = L_full - 2 * padding
    if L_out < 1:
        raise ValueError(f"conv_transpose1d: output length {L_out} < 1")

    wmat = np.ascontiguousarray(w.data.transpose(2, 1, 0)).reshape(K * Co, Ci)
    span = (L - 1) * stride + 1
    tmp = np.matmul(wmat, data).reshape(B, K, Co, L)
    y = np.zeros((B, Co, L_full), dtype=data.dtype)
    for k in range(K):
        y[:, :, k:k + span:stride] += tmp[:, k]
    if padding:
        y = np.ascontiguousarray(y[:, :, padding:padding + L_out])
    if bias is not None:
        if bias.data.shape != (Co,):
            raise ValueError(f"conv_transpose1d: bias shape {bias.data.shape} != ({Co},)")
        y += bias.data[:, None]
    out_data = y[0] if squeeze else y
    parents = (x, w) if bias is None else (x, w, bias)
    out = make_op(out_data, parents, None, "conv_transpose1d")
    if out._tracked:
        def _bwd(g):
            gg = g[None] if squeeze else g
            if bias is not None:
                accumulate(bias, gg.sum((0, 2)))
            gp = _pad_last(gg, padding, padding)                             # [B, Co, L_full]
            gcol = np.empty((B, K, Co, L), dtype=g.dtype)
            for k in range(K):
                gcol[:, k] = gp[:, :, k:k + span:stride]
            gcolf = gcol.reshape(B, K * Co, L)
            if w._tracked:
                gw = np.matmul(gcolf, data.transpose(0, 2, 1)).sum(0)        # [K*Co, Ci]
                accumulate(w, np.ascontiguousarray(gw.reshape(K, Co, Ci).transpose(2, 1, 0)))
            if x._tracked:
                gx = np.matmul(wmat.T, gcolf)                                # [B, Ci, L]
                accumulate(x, gx[0] if squeeze else gx)
        out._backward = _bwd
    return out
