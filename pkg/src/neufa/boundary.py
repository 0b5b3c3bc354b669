"""Boundary signals: from attention maps to per-token time stamps.

The detector reads a 6-channel feature matrix built from both attention
directions (raw weights plus forward and backward cumulative sums along
frames) and emits, per token, two monotone trajectories over frames: one
for the left boundary, one for the right.  Monotonicity is structural,
not learned: the last stages are sigmoid -> cumulative sum -> tanh, so
every trajectory is non-decreasing and lives in [0, 1).  A boundary is
decoded as the first frame where its trajectory crosses 0.5.

Time convention: frame f covers [f * shift, (f + 1) * shift) ms, and a
boundary at frame index f converts to f * shift ms.  When encoding, frame
f counts as "before" a boundary at b ms iff (f + 1) * shift <= b.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError
from .layers import Conv2d, Module
from .tensor import Tensor

__all__ = [
    "BoundarySet",
    "build_feature_matrix",
    "BoundaryDetector",
    "boundaries_to_signals",
    "signals_to_boundaries",
    "boundary_loss",
]


@dataclass
class BoundarySet:
    """Per-token left/right boundaries in milliseconds."""

    lefts_ms: np.ndarray
    rights_ms: np.ndarray
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        self.lefts_ms = np.asarray(self.lefts_ms, dtype=np.float64)
        self.rights_ms = np.asarray(self.rights_ms, dtype=np.float64)
        if self.lefts_ms.shape != self.rights_ms.shape or self.lefts_ms.ndim != 1:
            raise DimensionError(
                f"boundary arrays must be matching vectors, got {self.lefts_ms.shape} and {self.rights_ms.shape}"
            )
        if self.frame_shift_ms <= 0:
            raise InputError(f"frame shift must be positive, got {self.frame_shift_ms}")

    @property
    def n_units(self) -> int:
        return self.lefts_ms.shape[0]

    def validate_within(self, n_frames: int) -> None:
        end = n_frames * self.frame_shift_ms
        if np.any(self.lefts_ms < 0) or np.any(self.rights_ms > end + 1e-9):
            raise InputError(f"boundaries outside [0, {end}] ms")
        if np.any(self.rights_ms < self.lefts_ms):
            raise InputError("right boundary precedes left boundary")


def build_feature_matrix(w_tts: Tensor, w_asr: Tensor) -> Tensor:
    """Stack both attention directions with their frame-axis running sums.

    Channels: [W_TTS, cumsum, reverse cumsum, W_ASR^T, cumsum, reverse cumsum],
    output shape [6 x n_text x n_frames].
    """
    n_text, n_frames = w_tts.data.shape
    if w_asr.data.shape != (n_frames, n_text):
        raise DimensionError(
            f"W_ASR shape {w_asr.shape} does not mirror W_TTS shape {w_tts.shape}"
        )
    asr_t = T.transpose(w_asr)
    channels = []
    for w in (w_tts, asr_t):
        channels.append(w)
        channels.append(T.scan(w, axis=1))
        channels.append(T.scan(w, axis=1, reverse=True))
    shape = (1, n_text, n_frames)
    return T.concat([T.reshape(c, shape) for c in channels], axis=0)


class BoundaryDetector(Module):
    """Convolutional reader of the feature matrix.

    Three same-padded square conv layers with relus between, a linear map
    to 2 channels (a 1x1 convolution), then sigmoid -> cumsum over frames
    -> tanh.  Output is [n_text x n_frames x 2] (left, right trajectories).
    """

    def __init__(self, name: str, rng: np.random.Generator, channels: int = 8, kernel: int = 17):
        super().__init__()
        self.channels, self.kernel = channels, kernel
        self.conv1 = self.add_child(Conv2d(f"{name}.conv1", 6, channels, kernel, rng))
        self.conv2 = self.add_child(Conv2d(f"{name}.conv2", channels, channels, kernel, rng))
        self.conv3 = self.add_child(Conv2d(f"{name}.conv3", channels, channels, kernel, rng))
        self.proj = self.add_child(Conv2d(f"{name}.proj", channels, 2, 1, rng))

    def __call__(self, features: Tensor) -> Tensor:
        h = T.relu(self.conv1(features))
        h = T.relu(self.conv2(h))
        h = self.conv3(h)
        z = T.sigmoid(self.proj(h))
        signal = T.tanh(T.scan(z, axis=2))
        return T.transpose(signal, (1, 2, 0))


def boundaries_to_signals(bounds: BoundarySet, n_frames: int) -> np.ndarray:
    """Binary step targets: 0 while a frame ends at or before the boundary.

    Returns [n_units x n_frames x 2] with the left channel at [..., 0].
    """
    bounds.validate_within(n_frames)
    shift = bounds.frame_shift_ms
    frame_ends = (np.arange(n_frames, dtype=np.float64) + 1.0) * shift
    out = np.zeros((bounds.n_units, n_frames, 2))
    for side, values in enumerate((bounds.lefts_ms, bounds.rights_ms)):
        out[:, :, side] = (frame_ends[None, :] > values[:, None]).astype(np.float64)
    return out


def signals_to_boundaries(signals, frame_shift_ms: float = 10.0) -> BoundarySet:
    """First crossing of 0.5 per trajectory; last frame when never crossed."""
    values = signals.data if isinstance(signals, Tensor) else np.asarray(signals, dtype=np.float64)
    if values.ndim != 3 or values.shape[2] != 2:
        raise DimensionError(f"signals must be [n_units x n_frames x 2], got {values.shape}")
    n_units, n_frames, _ = values.shape
    crossed = values > 0.5
    # argmax on booleans gives the first True, or 0 when there is none
    first = np.argmax(crossed, axis=1).astype(np.float64)
    never = ~crossed.any(axis=1)
    first[never] = n_frames - 1
    ms = first * frame_shift_ms
    lefts = ms[:, 0]
    rights = np.maximum(ms[:, 1], lefts)
    return BoundarySet(lefts_ms=lefts, rights_ms=rights, frame_shift_ms=frame_shift_ms)


def boundary_loss(predicted: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error between predicted and target signals."""
    return T.mae_loss(predicted, target)
