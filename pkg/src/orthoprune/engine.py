"""Dense tensors with taped reverse-mode differentiation on numpy.

Storage is float32 by default; every reduction (matmul/conv contractions,
statistics, losses) accumulates in float64 before casting back, which keeps
repeated runs bit-identical and keeps low-order bits meaningful. float64
tensors are supported end to end so finite-difference verification can run
at full precision.

A forward pass is recorded on an explicit :class:`GradTape`; the tape can be
consumed by exactly one :func:`backward` call. Gradients accumulate
additively into leaf ``.grad`` buffers and are only cleared by whoever owns
the optimization step. Any operation that produces a NaN or Inf raises
immediately instead of propagating silence.
"""
from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "EngineError",
    "Tensor",
    "GradTape",
    "backward",
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "absolute",
    "sum_all",
    "matmul",
    "dense",
    "transpose",
    "reshape",
    "relu",
    "conv2d",
    "depthwise_conv2d",
    "batchnorm",
    "avg_pool2d",
    "global_avg_pool",
    "gather_channels",
    "expand_channels",
    "zero_channels",
    "softmax_cross_entropy",
    "save_tensors",
    "load_tensors",
    "pack_tensors",
    "unpack_tensors",
    "finite_difference_check",
]


class EngineError(RuntimeError):
    """Contract violation inside the tensor engine."""


_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _SUPPORTED_DTYPES:
        arr = arr.astype(np.float32)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise EngineError(f"{op}: result contains non-finite values")


def _f64(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64, copy=False)


class Tensor:
    """N-d float array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "GradTape | None" = None

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
            raise EngineError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        """The underlying array (a view, not a copy)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__


_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of operations for a single forward pass.

    Each record holds the op name, the input tensors, the output tensor and a
    pullback closure over the saved intermediates. Used as a context manager;
    a tape can be entered once and consumed by one backward pass.
    """

    def __init__(self):
        self.records: list[tuple] = []
        self._tracked: set[int] = set()
        self._consumed = False
        self._entered = False

    def __enter__(self) -> "GradTape":
        if self._entered or self._consumed:
            raise EngineError("GradTape cannot be re-entered; build a new tape")
        self._entered = True
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(op: str, inputs: tuple, out: Tensor, pullback) -> None:
    tape = _active_tape()
    if tape is None:
        return
    if not any(t.requires_grad or id(t) in tape._tracked for t in inputs):
        return
    tape.records.append((op, inputs, out, pullback))
    tape._tracked.add(id(out))
    out._tape = tape


def _accumulate(store: dict, key, grad: np.ndarray) -> None:
    # Pullbacks may hand out aliased arrays (e.g. add returns the incoming
    # gradient twice), so never mutate a buffer we do not own.
    slot = store.get(key)
    if slot is None:
        store[key] = [grad, False]
    elif slot[1]:
        slot[0] += grad
    else:
        store[key] = [slot[0] + grad, True]


def backward(loss: Tensor) -> None:
    """Run the reverse pass for `loss`, adding into every leaf's ``.grad``."""
    tape = loss._tape
    if tape is None or id(loss) not in tape._tracked:
        raise EngineError("backward: loss was not produced under an active GradTape")
    if tape._consumed:
        raise EngineError("backward: tape was already consumed by a previous backward")
    if loss.data.size != 1:
        raise EngineError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape._consumed = True

    flowing: dict[int, list] = {id(loss): [np.ones_like(loss.data), True]}
    leaves: dict[int, Tensor] = {}
    leaf_grads: dict[int, list] = {}

    for op, inputs, out, pullback in reversed(tape.records):
        slot = flowing.pop(id(out), None)
        if slot is None:
            continue
        grads = pullback(slot[0])
        for t, g in zip(inputs, grads):
            if g is None:
                continue
            if t.requires_grad:
                leaves[id(t)] = t
                _accumulate(leaf_grads, id(t), g)
            elif id(t) in tape._tracked:
                _accumulate(flowing, id(t), g)

    for key, t in leaves.items():
        g = leaf_grads[key][0].astype(t.dtype, copy=False)
        if t.grad is None:
            t.grad = np.ascontiguousarray(g).copy() if not leaf_grads[key][1] else g
        else:
            t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise EngineError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise EngineError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    _ensure_finite(out.data, "add")

    def pullback(go):
        return go, go

    _record("add", (a, b), out, pullback)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    _ensure_finite(out.data, "sub")

    def pullback(go):
        return go, -go

    _record("sub", (a, b), out, pullback)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    _ensure_finite(out.data, "mul")
    ad, bd = a.data, b.data

    def pullback(go):
        return go * bd, go * ad

    _record("mul", (a, b), out, pullback)
    return out


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    _ensure_finite(out.data, "mul_scalar")

    def pullback(go):
        return (go * c,)

    _record("mul_scalar", (x,), out, pullback)
    return out


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x|; the subgradient at exactly zero is taken as zero."""
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data)

    def pullback(go):
        return (go * sign,)

    _record("absolute", (x,), out, pullback)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, accumulated in float64, as a scalar tensor."""
    total = np.sum(_f64(x.data))
    out = Tensor(np.asarray(total, dtype=x.dtype))
    _ensure_finite(out.data, "sum_all")
    shape, dtype = x.shape, x.dtype

    def pullback(go):
        return (np.full(shape, float(go), dtype=dtype),)

    _record("sum_all", (x,), out, pullback)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise EngineError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise EngineError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise EngineError("matmul: dtype mismatch")
    out = Tensor(np.matmul(_f64(a.data), _f64(b.data)).astype(a.dtype))
    _ensure_finite(out.data, "matmul")
    ad, bd = a.data, b.data

    def pullback(go):
        go64 = _f64(go)
        ga = np.matmul(go64, _f64(bd).T).astype(ad.dtype)
        gb = np.matmul(_f64(ad).T, go64).astype(bd.dtype)
        return ga, gb

    _record("matmul", (a, b), out, pullback)
    return out


def dense(x: Tensor, w: Tensor) -> Tensor:
    """Fully connected layer: [N, D] @ [D, K] -> [N, K]."""
    return matmul(x, w)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise EngineError(f"transpose: expected 2-d tensor, got {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))

    def pullback(go):
        return (np.ascontiguousarray(go.T),)

    _record("transpose", (x,), out, pullback)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.reshape(shape)))
    old = x.shape

    def pullback(go):
        return (np.ascontiguousarray(go.reshape(old)),)

    _record("reshape", (x,), out, pullback)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def pullback(go):
        return (go * mask,)

    _record("relu", (x,), out, pullback)
    return out


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [N, C, Hp, Wp] -> [N, C, Ho, Wo, kh, kw]
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _conv_geometry(x: Tensor, kh: int, kw: int, stride: int, pad: int, op: str):
    if x.data.ndim != 4:
        raise EngineError(f"{op}: expected 4-d input [N, C, H, W], got {x.shape}")
    if stride < 1 or pad < 0:
        raise EngineError(f"{op}: invalid stride/pad ({stride}, {pad})")
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise EngineError(f"{op}: kernel ({kh}, {kw}) exceeds padded extents ({hp}, {wp})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    return n, c, ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [N, Cin, H, W] with filters [Cout, Cin, kh, kw]."""
    if w.data.ndim != 4:
        raise EngineError(f"conv2d: expected 4-d weight, got {w.shape}")
    cout, cin, kh, kw = w.shape
    n, c, ho, wo = _conv_geometry(x, kh, kw, stride, pad, "conv2d")
    if c != cin:
        raise EngineError(f"conv2d: input has {c} channels, weight expects {cin}")
    if x.dtype != w.dtype:
        raise EngineError("conv2d: dtype mismatch between input and weight")

    xp = _pad2d(x.data, pad)
    col = np.ascontiguousarray(
        _windows(xp, kh, kw, stride).transpose(0, 1, 4, 5, 2, 3)
    ).reshape(n, cin * kh * kw, ho * wo)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out_mat = np.matmul(_f64(w2), _f64(col))
    out = Tensor(out_mat.astype(x.dtype).reshape(n, cout, ho, wo))
    _ensure_finite(out.data, "conv2d")

    xshape, xdtype = xp.shape, x.dtype

    def pullback(go):
        go2 = _f64(go.reshape(n, cout, ho * wo))
        col64 = _f64(col)
        gw = np.matmul(go2, col64.transpose(0, 2, 1)).sum(axis=0)
        gw = gw.astype(w.dtype).reshape(cout, cin, kh, kw)
        gcol = np.matmul(_f64(w2).T, go2).reshape(n, cin, kh, kw, ho, wo)
        gx = np.zeros(xshape, dtype=np.float64)
        for u in range(kh):
            for v in range(kw):
                gx[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += gcol[
                    :, :, u, v
                ]
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        return gx.astype(xdtype), gw

    _record("conv2d", (x, w), out, pullback)
    return out


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel convolution: input [N, C, H, W], weight [C, 1, kh, kw]."""
    if w.data.ndim != 4 or w.shape[1] != 1:
        raise EngineError(f"depthwise_conv2d: expected weight [C, 1, kh, kw], got {w.shape}")
    cmul, _, kh, kw = w.shape
    n, c, ho, wo = _conv_geometry(x, kh, kw, stride, pad, "depthwise_conv2d")
    if c != cmul:
        raise EngineError(f"depthwise_conv2d: input has {c} channels, weight has {cmul}")
    if x.dtype != w.dtype:
        raise EngineError("depthwise_conv2d: dtype mismatch between input and weight")

    xp = _pad2d(x.data, pad)
    win = _windows(xp, kh, kw, stride)
    out64 = np.einsum("ncijuv,cuv->ncij", _f64(win), _f64(w.data[:, 0]), optimize=True)
    out = Tensor(out64.astype(x.dtype))
    _ensure_finite(out.data, "depthwise_conv2d")

    xshape, xdtype = xp.shape, x.dtype
    wd = w.data

    def pullback(go):
        go64 = _f64(go)
        gw = np.einsum("ncijuv,ncij->cuv", _f64(win), go64, optimize=True)
        gw = gw[:, None].astype(wd.dtype)
        gx = np.zeros(xshape, dtype=np.float64)
        for u in range(kh):
            for v in range(kw):
                gx[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                    go64 * _f64(wd[:, 0, u, v])[None, :, None, None]
                )
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        return gx.astype(xdtype), gw

    _record("depthwise_conv2d", (x, w), out, pullback)
    return out


def batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Channelwise batch normalization over [N, C, H, W].

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, factor `momentum`); eval mode uses
    the running buffers and touches nothing.
    """
    if x.data.ndim != 4:
        raise EngineError(f"batchnorm: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    for name, t in (("scale", scale), ("shift", shift)):
        if t.shape != (c,):
            raise EngineError(f"batchnorm: {name} shape {t.shape} does not match {c} channels")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise EngineError("batchnorm: running buffer shape mismatch")

    count = n * h * w
    if training:
        if count == 0:
            raise EngineError("batchnorm: zero-size batch in training mode")
        x64 = _f64(x.data)
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean[...] = ((1.0 - momentum) * _f64(running_mean) + momentum * mean).astype(
            running_mean.dtype
        )
        running_var[...] = ((1.0 - momentum) * _f64(running_var) + momentum * unbiased).astype(
            running_var.dtype
        )
    else:
        mean = _f64(running_mean)
        var = _f64(running_var)

    invstd = 1.0 / np.sqrt(var + eps)
    xhat64 = (_f64(x.data) - mean[None, :, None, None]) * invstd[None, :, None, None]
    out64 = xhat64 * _f64(scale.data)[None, :, None, None] + _f64(shift.data)[None, :, None, None]
    out = Tensor(out64.astype(x.dtype))
    _ensure_finite(out.data, "batchnorm")

    xhat = xhat64.astype(x.dtype)
    scale_now = scale.data.copy()
    xdtype = x.dtype

    def pullback(go):
        go64 = _f64(go)
        xh64 = _f64(xhat)
        gshift = go64.sum(axis=(0, 2, 3)).astype(shift.dtype)
        gscale = (go64 * xh64).sum(axis=(0, 2, 3)).astype(scale.dtype)
        dxhat = go64 * _f64(scale_now)[None, :, None, None]
        if training:
            m = float(count)
            t1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            t2 = (dxhat * xh64).sum(axis=(0, 2, 3), keepdims=True)
            gx = (invstd[None, :, None, None] / m) * (m * dxhat - t1 - xh64 * t2)
        else:
            gx = dxhat * invstd[None, :, None, None]
        return gx.astype(xdtype), gscale, gshift

    _record("batchnorm", (x, scale, shift), out, pullback)
    return out


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling with window = stride = size."""
    if x.data.ndim != 4:
        raise EngineError(f"avg_pool2d: expected 4-d input, got {x.shape}")
    if size < 1:
        raise EngineError(f"avg_pool2d: invalid window {size}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise EngineError(f"avg_pool2d: window {size} exceeds input extents ({h}, {w})")
    trimmed = _f64(x.data[:, :, : ho * size, : wo * size])
    blocks = trimmed.reshape(n, c, ho, size, wo, size)
    out = Tensor(blocks.mean(axis=(3, 5)).astype(x.dtype))
    xshape, xdtype = x.shape, x.dtype

    def pullback(go):
        gx = np.zeros(xshape, dtype=xdtype)
        spread = np.broadcast_to(
            (go / (size * size))[:, :, :, None, :, None], (n, c, ho, size, wo, size)
        )
        gx[:, :, : ho * size, : wo * size] = spread.reshape(n, c, ho * size, wo * size)
        return (gx,)

    _record("avg_pool2d", (x,), out, pullback)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: [N, C, H, W] -> [N, C]."""
    if x.data.ndim != 4:
        raise EngineError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(_f64(x.data).mean(axis=(2, 3)).astype(x.dtype))
    xdtype = x.dtype

    def pullback(go):
        gx = np.empty((n, c, h, w), dtype=xdtype)
        gx[...] = (go / (h * w))[:, :, None, None]
        return (gx,)

    _record("global_avg_pool", (x,), out, pullback)
    return out


def _channel_index(idx, c: int, op: str) -> np.ndarray:
    arr = np.asarray(idx, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= c):
        raise EngineError(f"{op}: channel index out of range for {c} channels")
    if np.unique(arr).size != arr.size:
        raise EngineError(f"{op}: duplicate channel indices")
    return np.sort(arr)


def gather_channels(x: Tensor, idx) -> Tensor:
    """Keep the listed channels of a [N, C, H, W] tensor, in ascending order."""
    if x.data.ndim != 4:
        raise EngineError(f"gather_channels: expected 4-d input, got {x.shape}")
    idx = _channel_index(idx, x.shape[1], "gather_channels")
    out = Tensor(np.ascontiguousarray(x.data[:, idx]))
    xshape, xdtype = x.shape, x.dtype

    def pullback(go):
        gx = np.zeros(xshape, dtype=xdtype)
        gx[:, idx] = go
        return (gx,)

    _record("gather_channels", (x,), out, pullback)
    return out


def expand_channels(x: Tensor, original: int, keep_idx) -> Tensor:
    """Scatter [N, c, H, W] back into `original` channels, zeros elsewhere."""
    if x.data.ndim != 4:
        raise EngineError(f"expand_channels: expected 4-d input, got {x.shape}")
    keep_idx = _channel_index(keep_idx, original, "expand_channels")
    if keep_idx.size != x.shape[1]:
        raise EngineError(
            f"expand_channels: {x.shape[1]} channels but {keep_idx.size} positions"
        )
    n, _, h, w = x.shape
    buf = np.zeros((n, original, h, w), dtype=x.dtype)
    buf[:, keep_idx] = x.data
    out = Tensor(buf)

    def pullback(go):
        return (np.ascontiguousarray(go[:, keep_idx]),)

    _record("expand_channels", (x,), out, pullback)
    return out


def zero_channels(x: Tensor, idx) -> Tensor:
    """Copy of x with the listed channels forced to zero."""
    if x.data.ndim != 4:
        raise EngineError(f"zero_channels: expected 4-d input, got {x.shape}")
    idx = _channel_index(idx, x.shape[1], "zero_channels")
    buf = x.data.copy()
    buf[:, idx] = 0
    out = Tensor(buf)

    def pullback(go):
        gx = go.copy()
        gx[:, idx] = 0
        return (gx,)

    _record("zero_channels", (x,), out, pullback)
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between row-softmax of [N, K] logits and int labels."""
    if logits.data.ndim != 2:
        raise EngineError(f"softmax_cross_entropy: expected 2-d logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise EngineError("softmax_cross_entropy: labels must be 1-d and match the batch")
    if not np.issubdtype(labels.dtype, np.integer):
        raise EngineError("softmax_cross_entropy: labels must be integers")
    n, k = logits.shape
    if n == 0:
        raise EngineError("softmax_cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise EngineError(f"softmax_cross_entropy: label outside [0, {k})")

    z = _f64(logits.data)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype))
    _ensure_finite(out.data, "softmax_cross_entropy")
    prob = ez / sez
    ldtype = logits.dtype

    def pullback(go):
        g = prob.copy()
        g[np.arange(n), labels] -= 1.0
        return ((g * (float(go) / n)).astype(ldtype),)

    _record("softmax_cross_entropy", (logits,), out, pullback)
    return out


# ---------------------------------------------------------------------------
# Tensor checkpoint format.
#
#   magic (8 bytes) | version u8 | count u32 LE
#   per tensor: name_len u16 LE | name utf-8 | rank u8 | extents u64 LE each
#               | payload as little-endian float32
#
# Round trips are bit exact; only float32 tensors are storable.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"OPRNTSR1"
CHECKPOINT_VERSION = 1


def pack_tensors(tensors: dict[str, "Tensor | np.ndarray"]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr.dtype != np.float32:
            raise EngineError(
                f"pack_tensors: '{name}' has dtype {arr.dtype}; checkpoints store float32 only"
            )
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise EngineError(f"pack_tensors: name too long: {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def unpack_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise EngineError("unpack_tensors: bad magic string")
    version, count = struct.unpack_from("<BI", view, 8)
    if version != CHECKPOINT_VERSION:
        raise EngineError(f"unpack_tensors: unsupported version {version}")
    off = 13
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off : off + nlen]).decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", view, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}Q", view, off) if rank else ()
            off += 8 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if rank else 4
            payload = view[off : off + nbytes]
            if len(payload) != nbytes:
                raise EngineError("unpack_tensors: truncated payload")
            off += nbytes
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    except struct.error as exc:
        raise EngineError("unpack_tensors: truncated record") from exc
    if off != len(blob):
        raise EngineError("unpack_tensors: trailing bytes after last record")
    return out


def save_tensors(path, tensors: dict[str, "Tensor | np.ndarray"]) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return unpack_tensors(fh.read())


def finite_difference_check(fn, params: list[Tensor], h: float = 1e-4) -> float:
    """Compare taped gradients of `fn()` against central differences.

    `fn` must rebuild the scalar loss from the current parameter values on
    every call. Returns the worst relative error over all parameter entries;
    entries where both gradients are below 1e-9 in magnitude are treated as
    matching zeros.
    """
    for p in params:
        p.grad = None
    with GradTape():
        loss = fn()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = fn().item()
            flat[i] = keep - h
            down = fn().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            diff = abs(numeric - gflat[i])
            if diff < 1e-9:
                continue
            rel = diff / max(abs(numeric), abs(gflat[i]), 1e-12)
            worst = max(worst, rel)
    return worst
