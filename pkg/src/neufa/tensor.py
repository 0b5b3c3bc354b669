"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built eagerly: every operation returns a new Tensor that
remembers its parents and a closure computing the local gradients.
``Tensor.backward()`` topologically sorts the ancestors of a scalar loss
and walks them in reverse, accumulating gradients additively across
fan-out.  Heavy operations (convolution, the GRU recurrence, the losses)
are implemented as single fused nodes with hand-written backward passes;
``grad_check`` verifies every one of them against central finite
differences.

Only the broadcasting the model actually needs is supported: adding or
scaling by a 1-D vector over the last axis (bias/gain), plus Python
scalars.  Everything else must match shapes exactly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "tensor",
    "matmul",
    "elementwise",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sin",
    "cos",
    "softmax",
    "scan",
    "conv2d",
    "gru_sequence",
    "loss",
    "mse_loss",
    "mae_loss",
    "cross_entropy_loss",
    "mean_value",
    "sum_value",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "dup_rows",
    "dup_cols",
    "embedding",
    "stack_pad",
    "unstack_pad",
    "sincos_interleave",
    "masked_batch_norm",
    "grad_check",
    "grad_check_params",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _asarray(data) -> np.ndarray:
    # canonical C layout: reductions block by memory order, so identical
    # values in a different layout round differently by an ulp
    return np.asarray(data, dtype=np.float64, order="C")


class Tensor:
    """A dense float64 array participating in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_gbuf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._gbuf: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operators (tensor ∘ tensor elementwise, or tensor ∘ scalar) --------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Propagate gradients from this scalar to every requires_grad ancestor.

        Repeated calls accumulate into ``.grad``; call ``zero_grad`` on the
        leaves (or an optimizer) between steps.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        for node in topo:
            node._gbuf = None
        self._gbuf = np.ones_like(self.data)
        for node in reversed(topo):
            gout = node._gbuf
            if gout is None or node._backward is None:
                continue
            needs = tuple(p.requires_grad for p in node._parents)
            contribs = node._backward(gout, needs)
            for parent, contrib in zip(node._parents, contribs):
                if contrib is None or not parent.requires_grad:
                    continue
                if parent._gbuf is None:
                    parent._gbuf = np.zeros_like(parent.data)
                parent._gbuf += contrib
        for node in topo:
            if node.requires_grad and node._gbuf is not None:
                if node.grad is None:
                    node.grad = node._gbuf
                else:
                    node.grad = node.grad + node._gbuf
            node._gbuf = None


class Parameter(Tensor):
    """A named leaf tensor that always requires gradients."""

    __slots__ = ("name", "init_spec")

    def __init__(self, name: str, data, init_spec: str = "explicit"):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.init_spec = init_spec

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; only nodes that require grad can carry gradient, but
    # constant nodes are kept out of the walk entirely.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Public constructor; copies so later mutation of ``data`` cannot alias."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b where b is a same-shape tensor, a bias vector over the last axis,
    or a scalar."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.isscalar(b):
        bv = float(b)

        def back_scalar(g, needs):
            return (g,)

        return _make(a.data + bv, (a,), back_scalar, "add_scalar")
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        def back_same(g, needs):
            return (g, g)

        return _make(a.data + b.data, (a, b), back_same, "add")
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        def back_bias(g, needs):
            ga = g if needs[0] else None
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if needs[1] else None
            return (ga, gb)

        return _make(a.data + b.data, (a, b), back_bias, "add_bias")
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor, a last-axis gain vector,
    or a scalar."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.isscalar(b):
        bv = float(b)

        def back_scalar(g, needs):
            return (g * bv,)

        return _make(a.data * bv, (a,), back_scalar, "mul_scalar")
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        def back_same(g, needs):
            ga = g * b.data if needs[0] else None
            gb = g * a.data if needs[1] else None
            return (ga, gb)

        return _make(a.data * b.data, (a, b), back_same, "mul")
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        def back_gain(g, needs):
            ga = g * b.data if needs[0] else None
            gb = (g * a.data).reshape(-1, g.shape[-1]).sum(axis=0) if needs[1] else None
            return (ga, gb)

        return _make(a.data * b.data, (a, b), back_gain, "mul_gain")
    raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes do not conform: {a.shape} x {b.shape}")

    def back(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return (ga, gb)

    return _make(a.data @ b.data, (a, b), back, "matmul")


# -- pointwise maps -----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def back(g, needs):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), back, "relu")


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _stable_sigmoid(a.data)

    def back(g, needs):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), back, "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate with non-positive exponents only, so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)

    def back(g, needs):
        return (g * (1.0 - t * t),)

    return _make(t, (a,), back, "tanh")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)

    def back(g, needs):
        return (g * e,)

    return _make(e, (a,), back, "exp")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    clipped = np.clip(a.data, 1e-300, None)

    def back(g, needs):
        return (g / clipped,)

    return _make(np.log(clipped), (a,), back, "log")


def sin(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def back(g, needs):
        return (g * np.cos(a.data),)

    return _make(np.sin(a.data), (a,), back, "sin")


def cos(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def back(g, needs):
        return (g * -np.sin(a.data),)

    return _make(np.cos(a.data), (a,), back, "cos")


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp}


def elementwise(kind: str, a: Tensor) -> Tensor:
    """Dispatch on the activation name; see the individual functions."""
    try:
        return _ELEMENTWISE[kind](a)
    except KeyError:
        raise ConfigurationError(f"unknown elementwise kind {kind!r}") from None


# -- softmax / scan -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g, needs):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), back, "softmax")


def scan(a: Tensor, axis: int = 0, reverse: bool = False) -> Tensor:
    """Inclusive cumulative sum along ``axis``; ``reverse`` flips the axis
    before and after."""
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"scan axis {axis} out of range for shape {a.shape}")
    if reverse:
        out = np.flip(np.cumsum(np.flip(a.data, axis), axis=axis), axis)
    else:
        out = np.cumsum(a.data, axis=axis)

    def back(g, needs):
        # d cumsum / dx is an upper-triangular ones matrix: its transpose is
        # the cumulative sum from the other end.
        if reverse:
            return (np.cumsum(g, axis=axis),)
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(out, (a,), back, "scan_rev" if reverse else "scan")


# -- shape plumbing -----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape

    def back(g, needs):
        return (g.reshape(orig),)

    return _make(a.data.reshape(shape), (a,), back, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    nd = a.data.ndim
    ax = tuple(axes) if axes is not None else tuple(reversed(range(nd)))
    inv = tuple(np.argsort(ax))

    def back(g, needs):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _make(np.ascontiguousarray(np.transpose(a.data, ax)), (a,), back, "transpose")


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g, needs):
        slicer = [slice(None)] * g.ndim
        grads = []
        for k in range(len(parts)):
            slicer[axis] = slice(offsets[k], offsets[k + 1])
            grads.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(grads)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    a = _as_tensor(a)
    slicer = [slice(None)] * a.data.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)

    def back(g, needs):
        buf = np.zeros_like(a.data)
        buf[slicer] = g
        return (buf,)

    return _make(np.ascontiguousarray(a.data[slicer]), (a,), back, "narrow")


def dup_rows(a: Tensor, n: int) -> Tensor:
    """[m x d] -> [m x n x d] by repeating each row n times."""
    a = _as_tensor(a)
    out = np.broadcast_to(a.data[:, None, :], (a.data.shape[0], n, a.data.shape[1])).copy()

    def back(g, needs):
        return (g.sum(axis=1),)

    return _make(out, (a,), back, "dup_rows")


def dup_cols(a: Tensor, n: int) -> Tensor:
    """[m x d] -> [n x m x d] by repeating the whole block n times."""
    a = _as_tensor(a)
    out = np.broadcast_to(a.data[None, :, :], (n, a.data.shape[0], a.data.shape[1])).copy()

    def back(g, needs):
        return (g.sum(axis=0),)

    return _make(out, (a,), back, "dup_cols")


def embedding(weight: Tensor, indices) -> Tensor:
    """Row lookup: out[i] = weight[indices[i]]; gradients scatter-add."""
    idx = np.asarray(indices, dtype=np.int64)

    def back(g, needs):
        buf = np.zeros_like(weight.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(weight.data[idx], (weight,), back, "embedding")


def stack_pad(parts: Sequence[Tensor], total: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Stack [T_i x d] tensors into [B x T x d], zero-padded, plus a [B x T] mask."""
    parts = [_as_tensor(p) for p in parts]
    lengths = [p.data.shape[0] for p in parts]
    T = total if total is not None else max(lengths)
    d = parts[0].data.shape[1]
    out = np.zeros((len(parts), T, d))
    mask = np.zeros((len(parts), T))
    for i, p in enumerate(parts):
        out[i, : lengths[i]] = p.data
        mask[i, : lengths[i]] = 1.0

    def back(g, needs):
        return tuple(
            np.ascontiguousarray(g[i, : lengths[i]]) if needs[i] else None
            for i in range(len(parts))
        )

    return _make(out, parts, back, "stack_pad"), mask


def unstack_pad(batch: Tensor, lengths: Sequence[int]) -> list[Tensor]:
    """Inverse of stack_pad: per-row [T_i x d] views with routing gradients."""
    batch = _as_tensor(batch)
    outs = []
    for i, n in enumerate(lengths):
        def back(g, needs, i=i, n=n):
            buf = np.zeros_like(batch.data)
            buf[i, :n] = g
            return (buf,)

        outs.append(_make(np.ascontiguousarray(batch.data[i, :n]), (batch,), back, "unstack_pad"))
    return outs


def sincos_interleave(angles: Tensor) -> Tensor:
    """[n x k] angles -> [n x 2k] with sin in even and cos in odd columns."""
    angles = _as_tensor(angles)
    n, k = angles.data.shape
    out = np.empty((n, 2 * k))
    out[:, 0::2] = np.sin(angles.data)
    out[:, 1::2] = np.cos(angles.data)

    def back(g, needs):
        return (g[:, 0::2] * np.cos(angles.data) - g[:, 1::2] * np.sin(angles.data),)

    return _make(out, (angles,), back, "sincos_interleave")


# -- reductions / losses ------------------------------------------------------


def _mask_and_count(shape, mask):
    if mask is None:
        return None, float(np.prod(shape))
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), shape)
    return m, float(m.sum())


def sum_value(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def back(g, needs):
        return (np.full_like(a.data, float(g)),)

    return _make(np.asarray(a.data.sum()), (a,), back, "sum")


def mean_value(a: Tensor, mask=None) -> Tensor:
    """Mean of all entries; with a mask, mean over the unmasked ones."""
    a = _as_tensor(a)
    m, count = _mask_and_count(a.data.shape, mask)
    if count == 0:
        raise DimensionError("mean over an empty mask")
    total = (a.data * m).sum() if m is not None else a.data.sum()

    def back(g, needs):
        w = m / count if m is not None else np.full_like(a.data, 1.0 / count)
        return (w * float(g),)

    return _make(np.asarray(total / count), (a,), back, "mean")


def mse_loss(pred: Tensor, target, mask=None) -> Tensor:
    pred = _as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else _asarray(target)
    if t.shape != pred.data.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {t.shape}")
    m, count = _mask_and_count(pred.data.shape, mask)
    diff = pred.data - t
    if m is not None:
        diff = diff * m
    val = np.asarray((diff * diff).sum() / count)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def back(g, needs):
        gp = 2.0 * diff / count * float(g)
        if len(parents) == 2:
            return (gp if needs[0] else None, -gp if needs[1] else None)
        return (gp,)

    return _make(val, parents, back, "mse")


def mae_loss(pred: Tensor, target, mask=None) -> Tensor:
    pred = _as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else _asarray(target)
    if t.shape != pred.data.shape:
        raise DimensionError(f"mae shapes differ: {pred.shape} vs {t.shape}")
    m, count = _mask_and_count(pred.data.shape, mask)
    diff = pred.data - t
    sign = np.sign(diff)
    if m is not None:
        sign = sign * m
        val = np.asarray((np.abs(diff) * m).sum() / count)
    else:
        val = np.asarray(np.abs(diff).sum() / count)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def back(g, needs):
        gp = sign / count * float(g)
        if len(parents) == 2:
            return (gp if needs[0] else None, -gp if needs[1] else None)
        return (gp,)

    return _make(val, parents, back, "mae")


def cross_entropy_loss(pred: Tensor, target_idx, mask=None) -> Tensor:
    """Mean negative log-probability; ``pred`` rows are class distributions."""
    pred = _as_tensor(pred)
    idx = np.asarray(target_idx, dtype=np.int64)
    if pred.data.ndim != 2 or idx.shape != (pred.data.shape[0],):
        raise DimensionError(
            f"cross entropy wants [n x k] distributions and n targets, got {pred.shape} and {idx.shape}"
        )
    rows = np.arange(idx.shape[0])
    picked = np.clip(pred.data[rows, idx], 1e-300, None)
    if mask is None:
        count = float(idx.shape[0])
        weights = np.ones(idx.shape[0])
    else:
        weights = np.asarray(mask, dtype=np.float64)
        count = float(weights.sum())
    val = np.asarray(-(np.log(picked) * weights).sum() / count)

    def back(g, needs):
        buf = np.zeros_like(pred.data)
        buf[rows, idx] = -weights / picked / count * float(g)
        return (buf,)

    return _make(val, (pred,), back, "cross_entropy")


def loss(kind: str, pred: Tensor, target=None, mask=None) -> Tensor:
    """Dispatch over the supported mean-reduced loss kinds."""
    if kind == "mse":
        return mse_loss(pred, target, mask)
    if kind == "mae":
        return mae_loss(pred, target, mask)
    if kind == "cross_entropy":
        return cross_entropy_loss(pred, target, mask)
    if kind == "mean":
        return mean_value(pred, mask)
    raise ConfigurationError(f"unknown loss kind {kind!r}")


# -- convolution --------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # x: [C, H + kh - 1, W + kw - 1] already padded; returns [C*kh*kw, H*W]
    c = x.shape[0]
    h = x.shape[1] - kh + 1
    w = x.shape[2] - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    # windows: [C, H, W, kh, kw] -> [C, kh, kw, H, W] -> flat
    col = windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, h * w)
    return np.ascontiguousarray(col)


def conv2d(x: Tensor, filters: Tensor, bias: Tensor | None = None, same_padding: bool = True) -> Tensor:
    """Cross-correlation of [C_in x H x W] with [C_out x C_in x kh x kw] filters.

    With ``same_padding`` the spatial extents are preserved via zero padding,
    which requires odd kernel extents.  1-D convolution is the kw = 1 case.
    """
    x, filters = _as_tensor(x), _as_tensor(filters)
    if x.data.ndim != 3 or filters.data.ndim != 4:
        raise DimensionError(f"conv2d wants [C,H,W] input and [O,C,kh,kw] filters, got {x.shape}, {filters.shape}")
    c_out, c_in, kh, kw = filters.data.shape
    if x.data.shape[0] != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs filters {filters.shape}")
    if not same_padding:
        raise ConfigurationError("only same-padded convolution is implemented")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"same padding requires odd kernel extents, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    h, w = x.data.shape[1], x.data.shape[2]
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    col = _im2col(xp, kh, kw)
    wflat = filters.data.reshape(c_out, -1)
    out = (wflat @ col).reshape(c_out, h, w)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, filters) if bias is None else (x, filters, bias)

    def back(g, needs):
        gflat = g.reshape(c_out, -1)
        gx = gw = gb = None
        if needs[1]:
            gw = (gflat @ col.T).reshape(filters.data.shape)
        if needs[0]:
            # dX is the correlation of dY with channel-swapped, flipped filters.
            wt = filters.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw)))
            gx = (wt @ _im2col(gp, kh, kw)).reshape(c_in, h, w)
        if len(parents) == 3 and needs[2]:
            gb = gflat.sum(axis=1)
        return (gx, gw, gb)[: len(parents)]

    return _make(out, parents, back, "conv2d")


# -- fused GRU recurrence ------------------------------------------------------


def gru_sequence(
    x: Tensor,
    mask: np.ndarray | None,
    w: Tensor,
    u_zr: Tensor,
    u_n: Tensor,
    b: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Run a masked GRU over [B x T x D] input, returning [B x T x H] outputs.

    Gate order in the fused projections is (update, reset, candidate).  The
    recurrence follows the classic formulation: the candidate state sees the
    reset-gated hidden state, and h_t = (1-z) * h_prev + z * candidate.
    Masked steps carry the state through unchanged and emit zeros, so padded
    batches produce bit-comparable results to per-sequence runs.  Initial
    state is zero.  Backward is hand-rolled truncated-nothing BPTT over the
    cached gate activations.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2 and x.data.ndim != 3:
        raise DimensionError(f"gru_sequence wants [T x D] or [B x T x D], got {x.shape}")
    squeeze = x.data.ndim == 2
    X = x.data[None] if squeeze else x.data
    B, T, D = X.shape
    H = u_n.data.shape[0]
    if w.data.shape != (D, 3 * H):
        raise DimensionError(f"gru input projection expects {(D, 3 * H)}, got {w.data.shape}")
    M = np.ones((B, T)) if mask is None else np.asarray(mask, dtype=np.float64)

    xw = (X.reshape(B * T, D) @ w.data + b.data).reshape(B, T, 3 * H)
    times = range(T - 1, -1, -1) if reverse else range(T)

    h = np.zeros((B, H))
    out = np.zeros((B, T, H))
    hp_c = np.zeros((T, B, H))  # h before the step
    z_c = np.zeros((T, B, H))
    r_c = np.zeros((T, B, H))
    n_c = np.zeros((T, B, H))
    for t in times:
        a = xw[:, t, :]
        zr = _stable_sigmoid(a[:, : 2 * H] + h @ u_zr.data)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(a[:, 2 * H :] + (r * h) @ u_n.data)
        h_new = (1.0 - z) * h + z * n
        m = M[:, t : t + 1]
        hp_c[t], z_c[t], r_c[t], n_c[t] = h, z, r, n
        h = m * h_new + (1.0 - m) * h
        out[:, t, :] = m * h_new

    def back(g, needs):
        G = g[None] if squeeze else g
        dh = np.zeros((B, H))
        d_azr = np.zeros((T, B, 2 * H))
        d_an = np.zeros((T, B, H))
        for t in reversed(list(times)):
            m = M[:, t : t + 1]
            hp, z, r, n = hp_c[t], z_c[t], r_c[t], n_c[t]
            dh_new = m * (dh + G[:, t, :])
            dh_prev = (1.0 - m) * dh
            dz = dh_new * (n - hp)
            dn = dh_new * z
            dh_prev = dh_prev + dh_new * (1.0 - z)
            dan = dn * (1.0 - n * n)
            drh = dan @ u_n.data.T
            dh_prev = dh_prev + drh * r
            dr = drh * hp
            dazr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            dh_prev = dh_prev + dazr @ u_zr.data.T
            d_azr[t], d_an[t] = dazr, dan
            dh = dh_prev
        d_a = np.concatenate([d_azr, d_an], axis=2)  # [T, B, 3H]
        d_a_bt = d_a.transpose(1, 0, 2).reshape(B * T, 3 * H)
        gx = (d_a_bt @ w.data.T).reshape(B, T, D) if needs[0] else None
        if squeeze and gx is not None:
            gx = gx[0]
        gw = X.reshape(B * T, D).T @ d_a_bt if needs[2] else None
        hp_bt = hp_c.transpose(1, 0, 2).reshape(B * T, H)
        gu_zr = hp_bt.T @ d_a_bt[:, : 2 * H] if needs[3] else None
        rh_bt = (r_c * hp_c).transpose(1, 0, 2).reshape(B * T, H)
        gu_n = rh_bt.T @ d_a_bt[:, 2 * H :] if needs[4] else None
        gb = d_a_bt.sum(axis=0) if needs[5] else None
        return (gx, None, gw, gu_zr, gu_n, gb)

    mask_parent = Tensor(M)  # constant; kept for shape bookkeeping only
    result = _make(out[0] if squeeze else out, (x, mask_parent, w, u_zr, u_n, b), back, "gru")
    return result


# -- batch norm ----------------------------------------------------------------


def masked_batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mask: np.ndarray | None = None,
    eps: float = 1e-5,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Normalize [T x C] per channel over the (masked) time axis.

    When ``stats`` is given (inference), the supplied mean/var are treated
    as constants; otherwise statistics come from the unmasked rows and are
    returned alongside the output for running-average upkeep.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"batch norm wants [T x C], got {x.shape}")
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1, 1)
    if stats is not None:
        mean, var = stats
        batch_stats = None
    else:
        if m is None:
            count = float(x.data.shape[0])
            mean = x.data.mean(axis=0)
            var = x.data.var(axis=0)
        else:
            count = float(m.sum())
            mean = (x.data * m).sum(axis=0) / count
            var = (((x.data - mean) ** 2) * m).sum(axis=0) / count
        batch_stats = (mean, var)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * invstd
    if m is not None:
        xhat = xhat * m
    out = xhat * gamma.data + beta.data
    if m is not None:
        # Padded rows emit exact zeros rather than the beta offset.
        out = out * m

    def back(g, needs):
        gm = g * m if m is not None else g
        gxhat = gm * gamma.data
        ggamma = (gm * xhat).sum(axis=0) if needs[1] else None
        gbeta = gm.sum(axis=0) if needs[2] else None
        if not needs[0]:
            return (None, ggamma, gbeta)
        if stats is not None:
            gx = gxhat * invstd
            if m is not None:
                gx = gx * m
            return (gx, ggamma, gbeta)
        n = count
        centered = x.data - mean
        if m is not None:
            centered = centered * m
        dvar = (gxhat * centered).sum(axis=0) * (-0.5) * invstd**3
        dmean = (gxhat * -invstd).sum(axis=0) + dvar * (-2.0 / n) * centered.sum(axis=0)
        gx = gxhat * invstd + dvar * 2.0 * centered / n + dmean / n
        if m is not None:
            gx = gx * m
        return (gx, ggamma, gbeta)

    return _make(out, (x, gamma, beta), back, "batch_norm"), batch_stats


# -- gradient checking ---------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error denominator is max(|analytic|, |numeric|, floor) per
    element; ``f`` must return a scalar Tensor and be deterministic.  Raise
    the floor when some gradients are exactly zero by symmetry: central
    differences only resolve zero down to cancellation noise (~1e-11), which
    a tiny floor would misreport as disagreement.
    """
    x.requires_grad = True
    x.zero_grad()
    y = f(x)
    if y.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    y.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_params(
    f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, floor: float = 1e-8
) -> float:
    """grad_check over many leaves at once, for whole-model verification."""
    worst = 0.0
    for p in params:
        p.zero_grad()
    y = f()
    if y.data.size != 1:
        raise ContractError("grad_check_params requires a scalar-valued function")
    y.backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    for p in params:
        p.zero_grad()
    with no_grad():
        for p in params:
            a = analytic[id(p)]
            flat = p.data.reshape(-1)
            num = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * h)
            num = num.reshape(p.data.shape)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
            worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    return worst
