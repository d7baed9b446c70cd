"""Small 64-bit autodiff engine: the exact set of ops the detector needs.

Ops record a backward closure on the active :class:`Tape`.  Outside a tape
nothing is recorded, so inference does not pay for the bookkeeping.
Image-like tensors are laid out ``(rows, cols, channels)``.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConfigurationError, DimensionError, InputError, StateError

MAX_RANK = 4


class Tensor:
    """Dense float64 array with a lazily allocated gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64).reshape(self.data.shape)
        else:
            self.grad += g.reshape(self.data.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.accumulate(g)


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tape:
    """Records ops executed inside a ``with`` block; replays them backwards."""

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward needs a scalar, got {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.accumulate(grad)
        for out, fn in reversed(self.records):
            if out.grad is not None:
                fn(out.grad)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    tapes = _stack()
    out.requires_grad = bool(tapes) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tapes[-1].records.append((out, fn))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        _acc(a, g @ B.T)
        _acc(b, A.T @ g)

    return _record(A @ B, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: _acc(a, g.T))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape {a.shape} -> {shape}") from e
    return _record(out, (a,), lambda g: _acc(a, g.reshape(a.shape)))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _record(a.data + b.data, (a, b), backward)


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """``alpha * x`` for a single-element ``alpha``."""
    if alpha.data.size != 1:
        raise DimensionError(f"scale factor must have one element, got {alpha.shape}")
    s = alpha.data.reshape(-1)[0]
    X = x.data

    def backward(g):
        _acc(alpha, np.array([np.sum(g * X)]))
        _acc(x, s * g)

    return _record(s * X, (x, alpha), backward)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel affine map of an ``(h, w, c_in)`` tensor."""
    if x.data.ndim != 3:
        raise DimensionError(f"conv1x1 expects (h, w, c), got {x.shape}")
    h, w, cin = x.shape
    if weight.shape[0] != cin or bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"conv1x1: input channels {cin}, weight {weight.shape}, bias {bias.shape}"
        )
    X = x.data.reshape(h * w, cin)
    W = weight.data
    out = X @ W + bias.data

    def backward(g):
        G = g.reshape(h * w, -1)
        _acc(weight, X.T @ G)
        _acc(bias, G.sum(axis=0))
        _acc(x, (G @ W.T).reshape(h, w, cin))

    return _record(out.reshape(h, w, -1), (x, weight, bias), backward)


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: _acc(x, g * mask))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _record(s, (x,), lambda g: _acc(x, g * s * (1.0 - s)))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _record(t, (x,), lambda g: _acc(x, g * (1.0 - t * t)))


def tanh_channel(x: Tensor, channel: int) -> Tensor:
    """Apply tanh to one channel (last axis) and pass the rest through."""
    out = x.data.copy()
    t = np.tanh(x.data[..., channel])
    out[..., channel] = t

    def backward(g):
        gx = g.copy()
        gx[..., channel] *= 1.0 - t * t
        _acc(x, gx)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------- normalization


def group_norm(
    x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5
) -> Tensor:
    if x.data.ndim != 3:
        raise DimensionError(f"group_norm expects (h, w, c), got {x.shape}")
    h, w, c = x.shape
    if groups < 1 or c % groups:
        raise ConfigurationError(f"{c} channels cannot be split into {groups} groups")
    if weight.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"group_norm affine params must be ({c},)")
    cg = c // groups
    n = h * w * cg
    X = x.data.reshape(h * w, groups, cg)
    mean = X.mean(axis=(0, 2), keepdims=True)
    xc = X - mean
    var = (xc * xc).mean(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gamma = weight.data.reshape(1, groups, cg)
    out = xhat * gamma + bias.data.reshape(1, groups, cg)

    def backward(g):
        G = g.reshape(h * w, groups, cg)
        _acc(weight, (G * xhat).sum(axis=0).reshape(c))
        _acc(bias, G.sum(axis=0).reshape(c))
        if x.requires_grad:
            dxhat = G * gamma
            s1 = dxhat.sum(axis=(0, 2), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            dx = inv / n * (n * dxhat - s1 - xhat * s2)
            x.accumulate(dx.reshape(h, w, c))

    return _record(out.reshape(h, w, c), (x, weight, bias), backward)


def row_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide every row by its sum, floored at ``eps``; rows must be nonnegative."""
    if a.data.ndim != 2:
        raise DimensionError(f"row_normalize expects a matrix, got {a.shape}")
    A = a.data
    raw = A.sum(axis=1, keepdims=True)
    live = raw > eps
    s = np.where(live, raw, eps)
    out = A / s

    def backward(g):
        # a floored row is a constant divisor, so only the direct term remains
        _acc(a, g / s - live * (g * A).sum(axis=1, keepdims=True) / (s * s))

    return _record(out, (a,), backward)


def sigmoid_row_normalize(logits: Tensor) -> Tensor:
    """``sigmoid(s) / rowsum(sigmoid(s))`` evaluated in log space.

    A softmax over ``log sigmoid(s)``: the largest term of each row is exactly 1
    before normalization, so rows stay stochastic even when every sigmoid underflows.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"sigmoid_row_normalize expects a matrix, got {logits.shape}")
    s = logits.data
    ls = log_expit(s)
    e = np.exp(ls - ls.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        d_log = out * (g - (g * out).sum(axis=1, keepdims=True))
        _acc(logits, d_log * expit(-s))

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------- resampling


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners-false linear interpolation weights, clamped at edges."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def resample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.data.ndim != 3:
        raise DimensionError(f"resample expects (h, w, c), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"resample target must be >= 1, got {out_h}x{out_w}")
    h, w, _ = x.shape
    ry = _interp_matrix(h, out_h)
    rx = _interp_matrix(w, out_w)
    out = np.einsum("oh,hwc,pw->opc", ry, x.data, rx, optimize=True)

    def backward(g):
        _acc(x, np.einsum("oh,opc,pw->hwc", ry, g, rx, optimize=True))

    return _record(out, (x,), backward)


# ---------------------------------------------------------------- indexing / reduction


def gather_pixels(x: Tensor, flat_index: Sequence[int]) -> Tensor:
    """Rows of the pixel-flattened ``(h, w, c)`` tensor, as ``(n, c)``."""
    h, w, c = x.shape
    idx = np.asarray(flat_index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= h * w):
        raise DimensionError(f"pixel index out of range for {h}x{w}")
    out = x.data.reshape(h * w, c)[idx]

    def backward(g):
        gx = np.zeros((h * w, c))
        np.add.at(gx, idx, g)
        _acc(x, gx.reshape(h, w, c))

    return _record(out, (x,), backward)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Scalar ``sum_k w_k * terms_k`` over single-element tensors."""
    vals = [t.data.reshape(-1)[0] for t in terms]
    out = np.array(sum(w * v for w, v in zip(weights, vals)))

    def backward(g):
        gs = g.reshape(-1)[0]
        for t, w in zip(terms, weights):
            _acc(t, np.full(t.shape, w * gs))

    return _record(out, tuple(terms), backward)


# ---------------------------------------------------------------- parameters


@dataclass
class Param:
    name: str
    tensor: Tensor
    decay: bool = False  # participates in L1 regularization


@dataclass
class ParamRegistry:
    params: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value, decay: bool = False) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = Param(name, t, decay)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def copy(self) -> "ParamRegistry":
        out = ParamRegistry()
        for p in self.params.values():
            out.add(p.name, p.tensor.data.copy(), p.decay)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data for n, p in self.params.items()}

    def load_state(self, other: "ParamRegistry") -> None:
        """Copy values from ``other``; names and shapes must match exactly."""
        if other.names() != self.names():
            raise StateError("checkpoint parameter names do not match the model")
        for p in self:
            src = other[p.name].data
            if src.shape != p.tensor.shape:
                raise StateError(f"{p.name}: shape {src.shape} != {p.tensor.shape}")
            p.tensor.data = src.copy()

    def num_values(self) -> int:
        return sum(p.tensor.data.size for p in self.params.values())


class Adam:
    """Adam with an optional L1 penalty folded into the gradients."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, l1: float = 0.0):
        self.betas = betas
        self.eps = eps
        self.l1 = l1
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, registry: ParamRegistry, lr: float) -> None:
        missing = [p.name for p in registry if p.tensor.grad is None]
        if missing:
            raise StateError(f"parameters without gradients: {missing[:5]}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in registry:
            g = p.tensor.grad
            if self.l1 and p.decay:
                g = g + self.l1 * np.sign(p.tensor.data)
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(g)
                self.v[p.name] = np.zeros_like(g)
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr:
                p.tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.tensor.grad = None


def adam_step(registry: ParamRegistry, optimizer: Adam, lr: float) -> None:
    optimizer.step(registry, lr)


def l1_grad(p: np.ndarray, weight: float) -> np.ndarray:
    return weight * np.sign(p)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"IAFACKPT"
FORMAT_VERSION = 1


def save_checkpoint(registry: ParamRegistry, path) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(registry))]
    for p in registry:
        name = p.name.encode("utf-8")
        data = p.tensor.data
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> ParamRegistry:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise InputError(f"{path}: not a parameter checkpoint")
    try:
        return _parse_checkpoint(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise InputError(f"{path}: corrupt checkpoint ({e})") from None


def _parse_checkpoint(buf: bytes) -> ParamRegistry:
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", buf, off)
    off += 8
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported version {version}")
    reg = ParamRegistry()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(buf, dtype="<f8", count=size, offset=off)
        off += 8 * size
        reg.add(name, values.reshape(shape).astype(np.float64))
    if off != len(buf):
        raise ValueError(f"{len(buf) - off} trailing bytes")
    return reg


# ---------------------------------------------------------------- finite differences


def numerical_grad(
    f: Callable[[], float], x: np.ndarray, index: Iterable[int], h: float = 1e-6
) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the flat entries ``index`` of ``x``."""
    flat = x.reshape(-1)
    out = []
    for i in index:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / denom)
