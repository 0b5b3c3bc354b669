"""Sinusoidal positional encodings, including cross-modal estimated ones.

Each side of the aligner gets two encoded copies of its features: one
carrying its own index positions, one carrying positions estimated from
the other side.  The estimated positions come from relu-rectified linear
projections cumulatively summed over steps, so they are monotone
non-decreasing by construction and differentiable end to end.  The
relative length losses anchor the final estimated position to the true
length of the other sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .layers import Linear
from .tensor import Tensor

__all__ = [
    "PEFlags",
    "EncodedPair",
    "sinusoidal_pe",
    "estimate_positions",
    "relative_length_loss",
    "apply_positional_encodings",
]


@dataclass(frozen=True)
class PEFlags:
    """Which of the four encoding slots are active (ablation switches).

    A disabled slot falls back to the side's plain-index copy (or the bare
    features if that is disabled too), keeping feature extents unchanged so
    ablated models stay architecture-comparable.
    """

    use_pe_t: bool = True    # text side, index positions
    use_epe_s: bool = True   # text side, estimated speech positions
    use_epe_t: bool = True   # speech side, estimated text positions
    use_pe_s: bool = True    # speech side, index positions


@dataclass
class EncodedPair:
    e_t: Tensor  # [n_text x 2 d_t]
    e_s: Tensor  # [n_frames x 2 d_s]


def _inv_freq(d: int) -> np.ndarray:
    if d % 2 != 0:
        raise ConfigurationError(f"positional encoding width must be even, got {d}")
    i = np.arange(d // 2, dtype=np.float64)
    return np.power(10000.0, -2.0 * i / d)


def sinusoidal_pe(positions, d: int) -> Tensor:
    """Encode positions (integers or fractional estimates) into [n x d].

    Column 2i holds sin(pos / 10000^(2i/d)), column 2i+1 the matching cos.
    A plain array of positions yields a constant; a Tensor of shape [n x 1]
    keeps gradients flowing into the positions.
    """
    freq = _inv_freq(d)
    if isinstance(positions, Tensor):
        if positions.data.ndim != 2 or positions.data.shape[1] != 1:
            raise ConfigurationError(f"tensor positions must be [n x 1], got {positions.shape}")
        angles = T.matmul(positions, Tensor(freq[None, :]))
        return T.sincos_interleave(angles)
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    angles = pos[:, None] * freq[None, :]
    out = np.empty((pos.shape[0], d))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return Tensor(out)


def estimate_positions(encodings: Tensor, proj: Linear) -> Tensor:
    """Monotone position estimates: cumsum of relu(linear(encodings)), [n x 1]."""
    lengths = T.relu(proj(encodings))
    return T.scan(lengths, axis=0)


def relative_length_loss(positions: Tensor, true_length: int) -> Tensor:
    """Squared relative error of the final estimated position: (1 - last/L)^2."""
    n = positions.data.shape[0]
    if n == 0:
        raise ContractError("relative length loss needs at least one position")
    if true_length < 1:
        raise ConfigurationError(f"true_length must be >= 1, got {true_length}")
    last = T.narrow(positions, 0, n - 1, 1)
    return T.mse_loss(last * (1.0 / float(true_length)), np.ones((1, 1)))


def apply_positional_encodings(
    e_t: Tensor,
    e_s: Tensor,
    proj_t: Linear,
    proj_s: Linear,
    flags: PEFlags = PEFlags(),
):
    """Build both PE-augmented copies for each side.

    Returns (EncodedPair, loss_l_t, loss_l_s, pos_t, pos_s) where pos_s are
    speech positions estimated from the text side (via proj_s) and pos_t are
    text positions estimated from the speech side (via proj_t).  A disabled
    estimated slot skips its projection entirely and zeroes its length loss.
    """
    n_text, d_t = e_t.data.shape
    n_frames, d_s = e_s.data.shape

    pe_t = sinusoidal_pe(np.arange(n_text), d_t) if flags.use_pe_t else None
    pe_s = sinusoidal_pe(np.arange(n_frames), d_s) if flags.use_pe_s else None

    zero = Tensor(np.zeros(()))
    pos_s = pos_t = None
    loss_l_s = loss_l_t = zero

    text_index_copy = e_t + pe_t if pe_t is not None else e_t
    if flags.use_epe_s:
        pos_s = estimate_positions(e_t, proj_s)
        text_estimated_copy = e_t + sinusoidal_pe(pos_s, d_t)
        loss_l_s = relative_length_loss(pos_s, n_frames)
    else:
        text_estimated_copy = text_index_copy

    speech_index_copy = e_s + pe_s if pe_s is not None else e_s
    if flags.use_epe_t:
        pos_t = estimate_positions(e_s, proj_t)
        speech_estimated_copy = e_s + sinusoidal_pe(pos_t, d_s)
        loss_l_t = relative_length_loss(pos_t, n_text)
    else:
        speech_estimated_copy = speech_index_copy

    pair = EncodedPair(
        e_t=T.concat([text_index_copy, text_estimated_copy], axis=1),
        e_s=T.concat([speech_estimated_copy, speech_index_copy], axis=1),
    )
    return pair, loss_l_t, loss_l_s, pos_t, pos_s
