"""Dense tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` only when at least one
input requires a gradient. Outside a tape every op is a plain numpy
computation and returns a detached tensor, which doubles as inference mode::

    with Tape() as tape:
        loss = cross_entropy(model_logits, labels)
    tape.backward(loss)
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

DEFAULT_DTYPE = np.float32

# sqrt(2/pi) and the cubic coefficient of the tanh GELU approximation
GELU_C = 0.7978845608028654
GELU_A = 0.044715

_ACTIVE: list["Tape"] = []
_TAPES: "weakref.WeakValueDictionary[int, Tape]" = weakref.WeakValueDictionary()
_TAPE_IDS = iter(range(1, 1 << 62))


class Tensor:
    """An n-dimensional array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        tape = _tape_by_id(self._tape_id)
        if tape is None:
            raise ContractError("tensor was not recorded on a live tape")
        tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Node:
    parents: tuple
    backward: Optional[Callable]
    leaf: Optional[Tensor] = None


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Nodes are appended as ops execute, so the list is topologically sorted by
    construction. A tape is meant to be used for a single backward pass.
    """

    def __init__(self):
        self.id = next(_TAPE_IDS)
        self.nodes: list[_Node] = []
        self._leaves: list[Tensor] = []
        _TAPES[self.id] = self

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _node_of(self, t: Tensor) -> Optional[int]:
        if not t.requires_grad:
            return None
        if t._tape_id == self.id and t.node_id is not None:
            return t.node_id
        # tensors from elsewhere are leaves of this tape
        t.node_id = len(self.nodes)
        t._tape_id = self.id
        self.nodes.append(_Node((), None, leaf=t))
        self._leaves.append(t)
        return t.node_id

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        ids = tuple(self._node_of(p) for p in parents)
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._tape_id = self.id
        self.nodes.append(_Node(ids, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape_id != self.id or loss.node_id is None:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.leaf is not None:
                leaf = node.leaf
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pid is None or pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
        self.close()

    def close(self) -> None:
        for leaf in self._leaves:
            if leaf._tape_id == self.id:
                leaf.node_id = None
                leaf._tape_id = None
        self._leaves.clear()
        self.nodes.clear()


def _tape_by_id(tid) -> Optional[Tape]:
    return _TAPES.get(tid) if tid is not None else None


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {sa} and {sb} differ beyond leading dims")


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))."""
    xd = x.data
    dt = xd.dtype.type
    x2 = xd * xd
    u = dt(GELU_C) * (xd + dt(GELU_A) * x2 * xd)
    th = np.tanh(u)
    out = dt(0.5) * xd * (dt(1) + th)

    def bw(g):
        du = dt(GELU_C) * (dt(1) + dt(3 * GELU_A) * x2)
        d = dt(0.5) * (dt(1) + th) + dt(0.5) * xd * (dt(1) - th * th) * du
        return (g * d,)

    return _result(out, (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot map {x.shape} ({x.size} elements) to {shape}")
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot map {x.shape} to {shape}") from e
    src = x.shape
    return _result(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
                t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in xs], axis=ax), xs, bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise DimensionError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src_shape, dt = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dt)
        full[idx] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[idx]), (x,), bw)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from e
    src = x.shape
    return _result(out, (x,), lambda g: (_unbroadcast(g, src),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else math.prod(
        x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,)))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Linear algebra and normalization


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            # shared weight matrix: fold batch dims into rows
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e * (1.0 / e.sum(axis=axis, keepdims=True))
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last dimension, then apply ``gamma * xhat + beta``."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} "
                             f"do not match last dim of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, c).sum(axis=0)
        dbeta = g.reshape(-1, c).sum(axis=0)
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# Convolutions


def conv_out_size(n: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of shape [B, C, ho, wo, kh, kw] over a padded NCHW array."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Depth-wise convolution with channel multiplier ``M = kernel.shape[0] // C``.

    Output channel ``c*M + j`` only sees input channel ``c``.
    """
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != 1:
        raise DimensionError(f"depthwise_conv2d: expected x[B,C,H,W] and kernel[C*M,1,kh,kw], "
                             f"got {x.shape} and {kernel.shape}")
    bsz, c, h, w = x.shape
    cm, _, kh, kw = kernel.shape
    if cm % c:
        raise ConfigError(f"depthwise_conv2d: kernel channels {cm} not a multiple of input channels {c}")
    m = cm // c
    if bias is not None and bias.shape != (cm,):
        raise DimensionError(f"depthwise_conv2d: bias {bias.shape} does not match {cm} channels")
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"depthwise_conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    k = kernel.data.reshape(c, m, kh, kw)
    rows, cols = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def tap(u, v):
        return xp[:, :, u:u + rows:stride, v:v + cols:stride]

    out = np.zeros((bsz, c, m, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            out += tap(u, v)[:, :, None] * k[None, :, :, u, v, None, None]
    out = out.reshape(bsz, cm, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    xshape, dt = xp.shape, x.dtype

    def bw(g):
        g5 = g.reshape(bsz, c, m, ho, wo)
        dk = np.empty((c, m, kh, kw), dtype=dt)
        dxp = np.zeros(xshape, dtype=dt)
        for u in range(kh):
            for v in range(kw):
                dk[:, :, u, v] = np.einsum("bcjhw,bchw->cj", g5, tap(u, v))
                dxp[:, :, u:u + rows:stride, v:v + cols:stride] += \
                    (g5 * k[None, :, :, u, v, None, None]).sum(axis=2)
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        grads = [np.ascontiguousarray(dx), dk.reshape(cm, 1, kh, kw)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Dense unpadded convolution, ``kernel[Cout, Cin, kh, kw]``."""
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: incompatible input {x.shape} and kernel {kernel.shape}")
    bsz, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    ho, wo = conv_out_size(h, kh, stride), conv_out_size(w, kw, stride)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {h}x{w} smaller than kernel {kh}x{kw}")
    win = _windows(x.data, kh, kw, stride, ho, wo)
    # [B*ho*wo, Cin*kh*kw] patch matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * ho * wo, -1)
    kmat = kernel.data.reshape(cout, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    xshape, dt = x.shape, x.dtype

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        dk = (gm.T @ cols).reshape(kernel.shape)
        dcols = (gm @ kmat).reshape(bsz, ho, wo, cin, kh, kw)
        dx = np.zeros(xshape, dtype=dt)
        for u in range(kh):
            for v in range(kw):
                dx[:, :, u:u + stride * (ho - 1) + 1:stride, v:v + stride * (wo - 1) + 1:stride] += \
                    dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        grads = [dx, dk]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, bw)


# ---------------------------------------------------------------------------
# Loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"cross_entropy: labels must lie in [0, {k}), got "
                            f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(labels.size)
    n = labels.size
    loss = -logp[rows, labels].sum() / n

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
