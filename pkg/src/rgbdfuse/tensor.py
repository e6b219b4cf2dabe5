"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient. Outside a tape nothing is recorded, which
is how inference runs.

Most primitives accept optional leading batch axes: a ``C x L`` map may also be
passed as ``B x C x L`` and the batch axes broadcast like numpy.

Raw tensor file format (``TNSR1``)::

    b"TNSR1" | rank: u32 LE | shape: rank x u32 LE | data: prod(shape) x f64 LE
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "matmul",
    "softmax_rows",
    "log_softmax",
    "conv1x1",
    "conv2d",
    "global_avg_pool",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "absolute",
    "maximum",
    "minimum",
    "concat",
    "split",
    "reshape",
    "permute",
    "transpose",
    "tsum",
    "mean",
    "scale",
    "gradient_check",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "uniform_init",
]


class Tensor:
    """Immutable n-dimensional array of float64 values.

    ``tag`` is a free-form provenance label (e.g. ``"f_agg"``) that routing
    code and audits use to tell feature maps apart.
    """

    __slots__ = ("data", "requires_grad", "tag", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, tag: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tag = tag

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.tag = None
        return t

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
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        tag = f", tag={self.tag!r}" if self.tag else ""
        return f"Tensor(shape={self.shape}{flag}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, tag: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, tag=tag)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeEntry:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tape:
    """Ordered record of primitive applications.

    Usage::

        with Tape() as tape:
            loss = f(w)
        (dw,) = tape.gradient(loss, [w])
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def is_topological(self) -> bool:
        seen_outputs: set[int] = set()
        produced_later = {id(e.output) for e in self.entries}
        for e in self.entries:
            for t in e.inputs:
                if id(t) in produced_later and id(t) not in seen_outputs:
                    return False
            seen_outputs.add(id(e.output))
        return True

    def gradient(self, output: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``output`` with respect to each of ``sources``.

        Sources the output does not depend on get zero arrays.
        """
        if output.size != 1:
            raise ContractError(f"gradient needs a scalar output, got shape {output.shape}")
        keep = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
        for entry in reversed(self.entries):
            key = id(entry.output)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for inp, ig in zip(entry.inputs, entry.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                k = id(inp)
                grads[k] = grads[k] + ig if k in grads else ig
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros(s.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(s.shape))
        return out


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _emit(out: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    t = Tensor._wrap(out)
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        tape.entries.append(TapeEntry(inputs, t, backward, op))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _emit(out, (a, b), backward, "div")


def scale(a: Tensor, s: float) -> Tensor:
    return _emit(a.data * s, (a,), lambda g: (g * s,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = np.exp(x - out)
    return _emit(out, (a,), lambda g: (g * sig,), "softplus")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _emit(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    if n == 0:
        raise ContractError("mean over an empty axis")
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def global_avg_pool(f: Tensor) -> Tensor:
    """Mean over the trailing position axis: ``(..., C, L) -> (..., C)``."""
    if f.ndim < 2:
        raise DimensionError(f"global_avg_pool expects (..., C, L), got {f.shape}")
    L = f.shape[-1]
    if L == 0:
        raise ContractError("global_avg_pool over zero positions")
    out = f.data.mean(axis=-1)
    return _emit(out, (f,), lambda g: (np.broadcast_to(g[..., None] / L, f.shape),), "global_avg_pool")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        g = np.ascontiguousarray(g)  # broadcast views from reductions have zero strides and skip BLAS
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), backward, "matmul")


def conv1x1(f: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution ``(..., C_in, L) -> (..., C_out, L)``.

    Computed as ``w @ f + bias[:, None]``, i.e. the matmul formulation itself.
    """
    if w.ndim != 2 or f.ndim < 2 or w.shape[1] != f.shape[-2]:
        raise DimensionError(f"conv1x1 channel mismatch: weights {w.shape}, input {f.shape}")
    out = matmul(w, f)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise DimensionError(f"conv1x1 bias shape {bias.shape} != ({w.shape[0]},)")
        out = add(out, reshape(bias, (w.shape[0], 1)))
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding: ``(..., C_in, H, W) -> (..., C_out, H', W')``."""
    if w.ndim != 4 or x.ndim < 3 or w.shape[1] != x.shape[-3] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d mismatch: weights {w.shape}, input {x.shape}")
    c_out, c_in, k, _ = w.shape
    H, W = x.shape[-2:]
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")
    lead = x.shape[:-3]
    pad_width = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    xp = np.pad(x.data, pad_width)
    # cols: (..., C_in, k, k, Ho, Wo)
    cols = np.empty(lead + (c_in, k, k, Ho, Wo))
    for i in range(k):
        for j in range(k):
            cols[..., i, j, :, :] = xp[..., i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols2 = cols.reshape(lead + (c_in * k * k, Ho * Wo))
    wmat = w.data.reshape(c_out, c_in * k * k)
    out = np.matmul(wmat, cols2)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(lead + (c_out, Ho, Wo))

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(lead + (c_out, Ho * Wo))
        gw = np.matmul(g2, np.swapaxes(cols2, -1, -2))
        gw = gw.reshape((-1, c_out, c_in * k * k)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(lead + (c_in, k, k, Ho, Wo))
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[..., i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[..., i, j, :, :]
            gx = gxp[..., padding : padding + H, padding : padding + W]
        gb = None
        if bias is not None:
            gb = g.reshape((-1, c_out, Ho * Wo)).sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit(out, inputs, backward, "conv2d")


def softmax_rows(m: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of ``scale * m`` over the last axis, max-subtracted."""
    if not scale > 0:
        raise ContractError(f"softmax scale must be positive, got {scale}")
    if not np.all(np.isfinite(m.data)):
        raise NumericError("softmax_rows received non-finite input")
    z = m.data * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (scale * out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (m,), backward, "softmax_rows")


def log_softmax(m: Tensor) -> Tensor:
    z = m.data - m.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _emit(out, (m,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# structural


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat shape mismatch along axis {axis}: " + ", ".join(str(t.shape) for t in tensors)
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _emit(out, tuple(tensors), backward, "concat")


def take(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        z = np.zeros(a.shape)
        np.add.at(z, idx, g)
        return (z,)

    return _emit(np.array(out, dtype=np.float64), (a,), backward, "take")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    parts = []
    start = 0
    for s in sizes:
        idx = (slice(None),) * ax + (slice(start, start + s),)
        parts.append(take(a, idx))
        start += s
    return parts


# ---------------------------------------------------------------------------
# finite-difference checking


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error for each coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]")
    base = [np.array(_as_tensor(x).data, dtype=np.float64) for x in inputs]
    leaves = [Tensor(b, requires_grad=True) for b in base]
    with Tape() as tape:
        out = fn(*leaves)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("gradient_check needs fn to return a scalar Tensor")
    analytic = tape.gradient(out, leaves)

    def evaluate(arrays):
        res = fn(*[Tensor._wrap(a.copy()) for a in arrays])
        if res.size != 1:
            raise ContractError("gradient_check needs fn to return a scalar Tensor")
        return float(res.data.reshape(-1)[0])

    worst = 0.0
    for k, arr in enumerate(base):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate(base)
            flat[i] = orig - h
            fm = evaluate(base)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[k].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# init and serialization

_MAGIC = b"TNSR1"


def uniform_init(rng: np.random.Generator, shape, fan_in: int, tag: str | None = None) -> Tensor:
    """Uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)], marked trainable."""
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, tag=tag)


def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(_as_tensor(t).data, dtype="<f8", order="C")
    head = _MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> Tensor:
    if buf[:5] != _MAGIC:
        raise FormatError("missing TNSR1 magic")
    if len(buf) < 9:
        raise FormatError("truncated TNSR1 header")
    (rank,) = struct.unpack_from("<I", buf, 5)
    off = 9 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated TNSR1 shape")
    shape = struct.unpack_from(f"<{rank}I", buf, 9)
    n = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 8 * n:
        raise FormatError(f"TNSR1 payload has {len(buf) - off} bytes, expected {8 * n}")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
    return Tensor(data.reshape(shape))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
