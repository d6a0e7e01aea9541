"""A small reverse-mode autodiff engine over numpy arrays.

Operations executed inside an active :class:`Tape` are recorded together with
their backward rules; outside a tape they run as plain numpy (inference mode).
Image tensors use the batched ``(N, C, H, W)`` layout throughout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class StatisticsError(ValueError):
    pass


class OptimizerError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Node(NamedTuple):
    out: Tensor
    inputs: tuple
    backward: Callable


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is already topological.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and, if a tape is listening, register its backward rule.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = _t(x), _t(y)
    try:
        out = x.data + y.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record(out, (x, y), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product; size-1 axes broadcast (attention maps onto features)."""
    x, y = _t(x), _t(y)
    try:
        out = x.data * y.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def bw(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return record(out, (x, y), bw)


mul_elementwise = mul


def relu(x: Tensor) -> Tensor:
    x = _t(x)
    out = np.maximum(x.data, 0)
    return record(out, (x,), lambda g: (np.where(out > 0, g, 0),))


def sigmoid(x: Tensor) -> Tensor:
    x = _t(x)
    s = expit(x.data)
    return record(s, (x,), lambda g: (g * s * (1 - s),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    return record(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    x = _t(x)
    n = x.size
    return record(np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = _t(x)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------- channel plumbing

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [_t(x) for x in xs]
    if len({(x.shape[0],) + x.shape[2:] for x in xs}) != 1:
        raise ShapeError("concat_channels needs matching batch and spatial dims")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    out = np.concatenate([x.data for x in xs], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record(out, xs, bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = _t(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return record(x.data[:, start:stop].copy(), (x,), bw)


def channel_mean(x: Tensor) -> Tensor:
    x = _t(x)
    c = x.shape[1]
    return record(x.data.mean(axis=1, keepdims=True), (x,), lambda g: (np.broadcast_to(g / c, x.shape),))


def channel_max(x: Tensor) -> Tensor:
    x = _t(x)
    idx = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g, axis=1)
        return (full,)

    return record(out, (x,), bw)


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _shift_ranges(n_out: int, n_in: int, offset: int):
    """Output span [lo, hi) whose source index (out + offset) lies inside [0, n_in)."""
    lo = max(0, -offset)
    hi = min(n_out, n_in - offset)
    return lo, hi


def _conv_scatter(x, w, bias, padding):
    """Stride-1 conv computed as one GEMM per sample followed by k*k shifted adds.

    Cheaper than im2col when there are fewer output than input channels: the
    intermediate holds k*k*O rather than k*k*C maps per pixel.
    """
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    wr = w.data.transpose(2, 3, 0, 1).reshape(k * k * o, c)
    x3 = x.data.reshape(n, c, h * wd)
    y = np.matmul(wr, x3).reshape(n, k, k, o, h, wd)
    out = np.zeros((n, o, ho, wo), dtype=y.dtype)
    for a in range(k):
        i0, i1 = _shift_ranges(ho, h, a - padding)
        for b in range(k):
            j0, j1 = _shift_ranges(wo, wd, b - padding)
            if i0 < i1 and j0 < j1:
                out[:, :, i0:i1, j0:j1] += y[:, a, b, :, i0 + a - padding : i1 + a - padding, j0 + b - padding : j1 + b - padding]
    del y
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def bw(g):
        # gcols[n, a, b, o, p, q] = g[n, o, p - a + padding, q - b + padding]
        gcols = np.zeros((n, k, k, o, h, wd), dtype=g.dtype)
        for a in range(k):
            i0, i1 = _shift_ranges(ho, h, a - padding)
            for b in range(k):
                j0, j1 = _shift_ranges(wo, wd, b - padding)
                if i0 < i1 and j0 < j1:
                    gcols[:, a, b, :, i0 + a - padding : i1 + a - padding, j0 + b - padding : j1 + b - padding] = g[:, :, i0:i1, j0:j1]
        gcols = gcols.reshape(n, k * k * o, h * wd)
        gx = np.matmul(wr.T, gcols).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gwr = np.matmul(gcols, x3.transpose(0, 2, 1)).sum(axis=0)
            gw = gwr.reshape(k, k, o, c).transpose(2, 3, 0, 1)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if bias is None else (x, w, bias)
    return record(out, inputs, bw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding: (N,C,H,W) x (O,C,k,k) -> (N,O,H',W')."""
    x, w = _t(x), _t(w)
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), w, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernels, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2 or k % 2 == 0:
        raise ShapeError(f"incompatible conv shapes {x.shape} * {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    span_h, span_w = h + 2 * padding - k, wd + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError("output size is not integral for this stride/padding")
    ho, wo = span_h // stride + 1, span_w // stride + 1
    if k > 1 and stride == 1 and o < c:
        return _conv_scatter(x, w, bias, padding)
    w2 = w.data.reshape(o, c * k * k)

    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        xp = x.data
        cols = x.data.reshape(n, c, h * wd)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    del cols

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        # columns are rebuilt rather than kept alive between forward and backward
        cols = xp.reshape(n, c, h * wd) if pointwise else _im2col(xp, k, stride, ho, wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, c, k, k, ho, wo)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for a in range(k):
                    for b in range(k):
                        gxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += gcols[:, :, a, b]
                gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    return record(out, inputs, bw)


# ---------------------------------------------------------------- normalisation

def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    relu: bool = False,
) -> Tensor:
    """Per-channel normalisation of an (N, C, H, W) batch, optionally followed by ReLU.

    In training mode the batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    x = _t(x)
    if x.ndim != 4:
        raise ShapeError("batch_norm expects (N, C, H, W)")
    n, c, h, w = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"normalisation parameters must have shape ({c},)")
    x3 = np.ascontiguousarray(x.data).reshape(n, c, h * w)
    m = n * h * w
    if training:
        if m <= 1:
            raise StatisticsError("batch statistics need more than one value per channel")
        mu, var = _kernels.channel_stats(x3)
        running_mean.data *= 1 - momentum
        running_mean.data += (momentum * mu).astype(running_mean.dtype)
        running_var.data *= 1 - momentum
        running_var.data += (momentum * var * m / (m - 1)).astype(running_var.dtype)
    else:
        mu = running_mean.data.astype(np.float64)
        var = running_var.data.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    gamma = scale.data.astype(np.float64)
    out = np.empty_like(x3)
    _kernels.affine_forward(x3, mu, inv_std, gamma, shift.data.astype(np.float64), relu, out)

    def bw(g):
        g3 = np.ascontiguousarray(g, dtype=x3.dtype).reshape(x3.shape)
        gx = np.empty_like(x3)
        dscale, dshift = _kernels.affine_backward(
            g3, x3, out, mu, inv_std, gamma, relu, training, x.requires_grad, gx
        )
        return (
            gx.reshape(x.shape) if x.requires_grad else None,
            dscale.astype(scale.dtype),
            dshift.astype(shift.dtype),
        )

    return record(out.reshape(x.shape), (x, scale, shift), bw)


def batch_norm_relu(x, scale, shift, running_mean, running_var, training, momentum=0.1, eps=1e-5) -> Tensor:
    return batch_norm(x, scale, shift, running_mean, running_var, training, momentum, eps, relu=True)


# ---------------------------------------------------------------- pooling

def _pool_out(h: int, w: int, k: int, stride: int) -> tuple[int, int]:
    if k < 1 or stride < 1 or k > h or k > w:
        raise ShapeError(f"pool window {k} does not fit {h}x{w}")
    return (h - k) // stride + 1, (w - k) // stride + 1


def avg_pool(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    x = _t(x)
    n, c, h, w = x.shape
    ho, wo = _pool_out(h, w, k, stride)
    if k == stride and h == ho * k and w == wo * k:
        out = x.data.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

        def bw(g):
            gx = np.broadcast_to((g / (k * k))[:, :, :, None, :, None], (n, c, ho, k, wo, k))
            return (gx.reshape(x.shape),)

        return record(out, (x,), bw)

    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            out += x.data[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
    out /= k * k

    def bw(g):
        gx = np.zeros_like(x.data)
        for a in range(k):
            for b in range(k):
                gx[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += g / (k * k)
        return (gx,)

    return record(out, (x,), bw)


def max_pool(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    x = _t(x)
    n, c, h, w = x.shape
    ho, wo = _pool_out(h, w, k, stride)
    taps = [(a, b) for a in range(k) for b in range(k)]
    stack = np.stack(
        [x.data[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] for a, b in taps]
    )
    idx = stack.argmax(axis=0)
    out = np.take_along_axis(stack, idx[None], axis=0)[0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for t, (a, b) in enumerate(taps):
            gx[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += np.where(idx == t, g, 0)
        return (gx,)

    return record(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    x = _t(x)
    n, c, h, w = x.shape
    return record(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape),),
    )


def global_max_pool(x: Tensor) -> Tensor:
    x = _t(x)
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)[..., None]

    def bw(g):
        full = np.zeros_like(flat)
        np.put_along_axis(full, idx, g[..., None], axis=2)
        return (full.reshape(x.shape),)

    return record(np.take_along_axis(flat, idx, axis=2)[..., 0], (x,), bw)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (D_in,) or (N, D_in)."""
    x, weight = _t(x), _t(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("bias length must equal output size")
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        x2, g2 = x.data.reshape(-1, x.shape[-1]), g.reshape(-1, weight.shape[0])
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bw)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise OptimizerError(f"non-finite gradient for {name}")
        if p.grad.shape != p.shape:
            raise ShapeError(f"gradient shape mismatch for {name}")
        grads[name] = p.grad
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps_hat)).astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------- checkpoint I/O

MAGIC = b"ADCCCKPT"
FORMAT_VERSION = 1


def save_tensors(path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str]) -> None:
    """Binary checkpoint: magic, version, count, tensor records, key=value block.

    All integers are little-endian uint32; values are float32 little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        meta = "".join(f"{k}={v}\n" for k, v in metadata.items()).encode("utf-8")
        fh.write(struct.pack("<I", len(meta)) + meta)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an ADCC checkpoint")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
    (mlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    meta = {}
    for line in blob[pos : pos + mlen].decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    return tensors, meta
