"""Neural network building blocks over the autodiff engine.

Modules own named parameters (for the optimizer and for checkpoints) and
named buffers (running statistics that persist but receive no gradient).
Parameter names are dotted paths fixed at construction time, so state
serialization is stable across runs.

Initialization: projection matrices use uniform(-a, a) with
a = sqrt(6 / (fan_in + fan_out)); recurrent matrices use the scaled
uniform(-sqrt(3/h), sqrt(3/h)); biases start at zero.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, InputError
from .tensor import Parameter, Tensor

__all__ = [
    "Module",
    "Linear",
    "Conv1d",
    "Conv2d",
    "BatchNorm",
    "BiGRU",
    "Embedding",
    "glorot_uniform",
    "recurrent_uniform",
]


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def recurrent_uniform(rng: np.random.Generator, shape: tuple[int, ...], hidden: int) -> np.ndarray:
    a = np.sqrt(3.0 / hidden)
    return rng.uniform(-a, a, size=shape)


class Module:
    """Base class: tracks parameters, buffers, children, and the train flag."""

    def __init__(self):
        self._params: list[Parameter] = []
        self._buffers: list[tuple[str, np.ndarray]] = []
        self._children: list["Module"] = []
        self.training = True

    def register(self, param: Parameter) -> Parameter:
        self._params.append(param)
        return param

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers.append((name, value))
        return value

    def add_child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> Iterator[Parameter]:
        yield from self._params
        for child in self._children:
            yield from child.parameters()

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self._buffers
        for child in self._children:
            yield from child.buffers()

    def set_training(self, flag: bool) -> None:
        self.training = bool(flag)
        for child in self._children:
            child.set_training(flag)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """y = x W + b with W shaped [d_in x d_out]."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.w = self.register(Parameter(f"{name}.w", glorot_uniform(rng, (d_in, d_out), d_in, d_out), "glorot_uniform"))
        self.b = self.register(Parameter(f"{name}.b", np.zeros(d_out), "zeros"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.d_in:
            raise DimensionError(f"linear expects feature extent {self.d_in}, got {x.shape}")
        if x.data.ndim == 2:
            return T.matmul(x, self.w) + self.b
        flat = T.reshape(x, (-1, self.d_in))
        out = T.matmul(flat, self.w) + self.b
        return T.reshape(out, x.data.shape[:-1] + (self.d_out,))


class Conv1d(Module):
    """Same-padded 1-D convolution over the time axis of [T x C] input."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigurationError(f"same padding requires an odd kernel, got {kernel}")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        fan_in, fan_out = c_in * kernel, c_out * kernel
        self.w = self.register(
            Parameter(f"{name}.w", glorot_uniform(rng, (c_out, c_in, kernel, 1), fan_in, fan_out), "glorot_uniform")
        )
        self.b = self.register(Parameter(f"{name}.b", np.zeros(c_out), "zeros"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.c_in:
            raise DimensionError(f"conv1d expects [T x {self.c_in}], got {x.shape}")
        t = x.data.shape[0]
        as_image = T.reshape(T.transpose(x), (self.c_in, t, 1))
        out = T.conv2d(as_image, self.w, self.b)
        return T.transpose(T.reshape(out, (self.c_out, t)))


class Conv2d(Module):
    """Same-padded 2-D convolution on [C x H x W] maps."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigurationError(f"same padding requires an odd kernel, got {kernel}")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        fan = kernel * kernel
        self.w = self.register(
            Parameter(
                f"{name}.w",
                glorot_uniform(rng, (c_out, c_in, kernel, kernel), c_in * fan, c_out * fan),
                "glorot_uniform",
            )
        )
        self.b = self.register(Parameter(f"{name}.b", np.zeros(c_out), "zeros"))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b)


class BatchNorm(Module):
    """Per-channel normalization of [T x C] activations over the time axis.

    Training mode normalizes with the current sample's statistics and
    updates exponential running averages; eval mode applies the stored
    averages as constants.  The epsilon guards channels with zero variance
    (a single-frame utterance, a constant feature).
    """

    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = self.register(Parameter(f"{name}.gamma", np.ones(channels), "ones"))
        self.beta = self.register(Parameter(f"{name}.beta", np.zeros(channels), "zeros"))
        self.running_mean = self.register_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = self.register_buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.channels:
            raise DimensionError(f"batch norm expects [T x {self.channels}], got {x.shape}")
        if self.training:
            out, stats = T.masked_batch_norm(x, self.gamma, self.beta, mask=mask, eps=self.eps)
            mean, var = stats
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mean
            self.running_var *= 1.0 - m
            self.running_var += m * var
            return out
        out, _ = T.masked_batch_norm(
            x, self.gamma, self.beta, mask=mask, eps=self.eps,
            stats=(self.running_mean, self.running_var),
        )
        return out


class BiGRU(Module):
    """Bidirectional GRU layer whose output width is `width` (half per direction).

    Accepts [T x D] or padded [B x T x D] with a binary [B x T] mask; padded
    steps produce zero outputs and do not disturb the recurrent state, so
    batched and solo runs agree to machine precision.
    """

    def __init__(self, name: str, d_in: int, width: int, rng: np.random.Generator):
        super().__init__()
        if width % 2 != 0:
            raise ConfigurationError(f"bidirectional width must be even, got {width}")
        self.d_in, self.width = d_in, width
        h = width // 2
        self.hidden = h

        def make(direction: str):
            w = Parameter(f"{name}.{direction}.w", glorot_uniform(rng, (d_in, 3 * h), d_in, 3 * h), "glorot_uniform")
            u_zr = Parameter(f"{name}.{direction}.u_zr", recurrent_uniform(rng, (h, 2 * h), h), "recurrent_uniform")
            u_n = Parameter(f"{name}.{direction}.u_n", recurrent_uniform(rng, (h, h), h), "recurrent_uniform")
            b = Parameter(f"{name}.{direction}.b", np.zeros(3 * h), "zeros")
            for p in (w, u_zr, u_n, b):
                self.register(p)
            return w, u_zr, u_n, b

        self.fwd = make("fwd")
        self.bwd = make("bwd")

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if x.data.shape[-1] != self.d_in:
            raise DimensionError(f"bigru expects feature extent {self.d_in}, got {x.shape}")
        f = T.gru_sequence(x, mask, *self.fwd, reverse=False)
        b = T.gru_sequence(x, mask, *self.bwd, reverse=True)
        return T.concat([f, b], axis=x.data.ndim - 1)


class Embedding(Module):
    """Token index -> learned vector lookup."""

    def __init__(self, name: str, vocab_size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.vocab_size, self.dim = vocab_size, dim
        a = np.sqrt(3.0 / dim)
        self.weight = self.register(
            Parameter(f"{name}.weight", rng.uniform(-a, a, size=(vocab_size, dim)), "scaled_uniform")
        )

    def __call__(self, tokens) -> Tensor:
        idx = np.asarray(tokens, dtype=np.int64)
        if idx.size == 0:
            raise InputError("empty token sequence")
        if idx.min() < 0 or idx.max() >= self.vocab_size:
            raise InputError(
                f"token index out of range [0, {self.vocab_size}): {int(idx.min())}..{int(idx.max())}"
            )
        return T.embedding(self.weight, idx)
