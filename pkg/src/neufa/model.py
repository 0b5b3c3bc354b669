"""The full aligner network and its checkpoint format.

Architecture: a text encoder (embedding, three same-padded 1-D convs with
batch norm and relu, one bidirectional GRU) and a speech encoder (three
wide 1-D convs with batch norm and relu, two bidirectional GRUs) feed the
positional-encoding block, whose outputs serve as both keys and values
for bidirectional attention.  The per-frame summaries of text (O1) drive
a speech decoder that reconstructs the input frames; the per-token
summaries of speech (O2) drive a text decoder that re-predicts the input
tokens.  Both decoders are two-layer bidirectional GRU stacks with a
linear head.  The attention maps additionally feed the boundary detector.

Training mixes six losses: token cross entropy, frame reconstruction,
two relative length losses, the diagonal attention penalty, and the
boundary signal error, combined by per-stage weights.

Checkpoints are a single binary file: magic "NFA1", a JSON header (config,
metadata, named shapes), then raw little-endian float64 blocks for every
parameter, buffer, and optimizer array in header order.  Serialization is
canonical (sorted keys, fixed separators), so identical state produces
identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    bidirectional_attend,
    diagonal_attention_loss,
    diagonal_constraint_matrix,
    shared_matrix_additive,
    shared_matrix_multiplicative,
)
from .boundary import BoundaryDetector, boundary_loss, build_feature_matrix
from .data import Batch
from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    DimensionError,
    InputError,
)
from .layers import BatchNorm, BiGRU, Conv1d, Embedding, Linear, Module
from .positional import PEFlags, apply_positional_encodings
from .tensor import Tensor

__all__ = [
    "NeuFAConfig",
    "NeuFAOutput",
    "NeuFA",
    "total_loss",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"NFA1"

LOSS_NAMES = ("loss_t", "loss_s", "loss_l_t", "loss_l_s", "loss_a", "loss_b")

STAGE1_WEIGHTS = (0.1, 1.0, 10.0, 10.0, 1000.0, 0.0)
STAGE2_WEIGHTS = (0.1, 1.0, 10.0, 10.0, 0.0, 100.0)


@dataclass(frozen=True)
class NeuFAConfig:
    vocab_size: int
    d_mel: int
    text_width: int = 64
    speech_width: int = 64
    d_a: int = 32
    attention_form: str = "multiplicative"
    decoder_width: int = 64
    text_kernel: int = 5
    speech_kernel: int = 17
    detector_channels: int = 8
    detector_kernel: int = 17
    loss_weights: tuple = STAGE1_WEIGHTS
    disable_asr: bool = False
    disable_tts: bool = False
    use_pe_t: bool = True
    use_epe_s: bool = True
    use_epe_t: bool = True
    use_pe_s: bool = True
    seed: int = 0

    def __post_init__(self):
        extents = {
            "vocab_size": self.vocab_size,
            "d_mel": self.d_mel,
            "text_width": self.text_width,
            "speech_width": self.speech_width,
            "d_a": self.d_a,
            "decoder_width": self.decoder_width,
            "detector_channels": self.detector_channels,
        }
        for name, value in extents.items():
            if value < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")
        for name in ("text_width", "speech_width", "decoder_width"):
            if getattr(self, name) % 2 != 0:
                raise ConfigurationError(f"{name} must be even for bidirectional layers")
        if len(self.loss_weights) != 6:
            raise ConfigurationError(f"expected 6 loss weights, got {len(self.loss_weights)}")
        if any(w < 0 for w in self.loss_weights):
            raise ConfigurationError(f"loss weights must be non-negative: {self.loss_weights}")
        if self.attention_form not in ("multiplicative", "additive"):
            raise ConfigurationError(f"unknown attention form {self.attention_form!r}")
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))

    @property
    def pe_flags(self) -> PEFlags:
        return PEFlags(
            use_pe_t=self.use_pe_t,
            use_epe_s=self.use_epe_s,
            use_epe_t=self.use_epe_t,
            use_pe_s=self.use_pe_s,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = [float(w) for w in self.loss_weights]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NeuFAConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config fields: {sorted(unknown)}")
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = tuple(float(w) for w in d["loss_weights"])
        return cls(**d)

    def with_weights(self, weights) -> "NeuFAConfig":
        d = self.to_dict()
        d["loss_weights"] = tuple(float(w) for w in weights)
        return NeuFAConfig.from_dict(d)


@dataclass
class NeuFAOutput:
    t_prime: Tensor | None     # [n_text x vocab] distributions (None when ASR is off)
    s_prime: Tensor | None     # [n_frames x d_mel] reconstruction (None when TTS is off)
    w_tts: Tensor              # [n_text x n_frames]
    w_asr: Tensor              # [n_frames x n_text]
    b_prime: Tensor | None     # [n_text x n_frames x 2] boundary signals
    losses: dict = field(default_factory=dict)
    total: Tensor | None = None


def total_loss(losses: dict, weights) -> Tensor:
    """Weighted sum of the six loss terms; missing terms contribute zero."""
    if any(w < 0 for w in weights):
        raise ConfigurationError(f"loss weights must be non-negative: {tuple(weights)}")
    if len(weights) != 6:
        raise ConfigurationError(f"expected 6 loss weights, got {len(weights)}")
    total = None
    for name, w in zip(LOSS_NAMES, weights):
        term = losses.get(name)
        if term is None or w == 0.0:
            continue
        piece = term * float(w)
        total = piece if total is None else total + piece
    return total if total is not None else Tensor(np.zeros(()))


class NeuFA(Module):
    """Aligner network; owns every parameter including the boundary detector.

    All submodules are constructed unconditionally in a fixed order from
    one seeded generator, so ablation flags change data paths and loss
    terms without reshuffling anyone else's initialization.
    """

    def __init__(self, config: NeuFAConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c_t, c_s = config.text_width, config.speech_width

        self.embedding = self.add_child(Embedding("embed", config.vocab_size, c_t, rng))
        self.text_convs = []
        self.text_norms = []
        for i in range(3):
            self.text_convs.append(
                self.add_child(Conv1d(f"enc_t.conv{i}", c_t, c_t, config.text_kernel, rng))
            )
            self.text_norms.append(self.add_child(BatchNorm(f"enc_t.norm{i}", c_t)))
        self.text_gru = self.add_child(BiGRU("enc_t.gru", c_t, c_t, rng))

        self.speech_convs = []
        self.speech_norms = []
        for i in range(3):
            c_in = config.d_mel if i == 0 else c_s
            self.speech_convs.append(
                self.add_child(Conv1d(f"enc_s.conv{i}", c_in, c_s, config.speech_kernel, rng))
            )
            self.speech_norms.append(self.add_child(BatchNorm(f"enc_s.norm{i}", c_s)))
        self.speech_grus = [
            self.add_child(BiGRU("enc_s.gru0", c_s, c_s, rng)),
            self.add_child(BiGRU("enc_s.gru1", c_s, c_s, rng)),
        ]

        # estimated position projections: speech positions from text encodings
        # and text positions from speech encodings
        self.pos_proj_s = self.add_child(Linear("pos.proj_s", c_t, 1, rng))
        self.pos_proj_t = self.add_child(Linear("pos.proj_t", c_s, 1, rng))

        d_k1, d_k2 = 2 * c_t, 2 * c_s
        self.att_f1 = self.add_child(Linear("att.f1", d_k1, config.d_a, rng))
        self.att_f2 = self.add_child(Linear("att.f2", d_k2, config.d_a, rng))
        self.att_fa = self.add_child(Linear("att.fa", config.d_a, 1, rng))

        dw = config.decoder_width
        self.speech_dec = [
            self.add_child(BiGRU("dec_s.gru0", d_k1, dw, rng)),
            self.add_child(BiGRU("dec_s.gru1", dw, dw, rng)),
        ]
        self.speech_head = self.add_child(Linear("dec_s.head", dw, config.d_mel, rng))
        self.text_dec = [
            self.add_child(BiGRU("dec_t.gru0", d_k2, dw, rng)),
            self.add_child(BiGRU("dec_t.gru1", dw, dw, rng)),
        ]
        self.text_head = self.add_child(Linear("dec_t.head", dw, config.vocab_size, rng))

        self.detector = self.add_child(
            BoundaryDetector("detector", rng, config.detector_channels, config.detector_kernel)
        )

    # -- encoder stages --------------------------------------------------------

    def _text_features(self, tokens) -> Tensor:
        h = self.embedding(tokens)
        for conv, norm in zip(self.text_convs, self.text_norms):
            h = T.relu(norm(conv(h)))
        return h

    def _speech_features(self, frames) -> Tensor:
        h = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
        if h.data.ndim != 2 or h.data.shape[0] == 0:
            raise InputError(f"frames must be non-empty [n_frames x d_mel], got {h.shape}")
        if h.data.shape[1] != self.config.d_mel:
            raise DimensionError(f"expected {self.config.d_mel} features per frame, got {h.shape}")
        for conv, norm in zip(self.speech_convs, self.speech_norms):
            h = T.relu(norm(conv(h)))
        return h

    def encode_text(self, tokens) -> Tensor:
        return self.text_gru(self._text_features(tokens))

    def encode_speech(self, frames) -> Tensor:
        h = self._speech_features(frames)
        for gru in self.speech_grus:
            h = gru(h)
        return h

    # -- decoder stages --------------------------------------------------------

    def decode_text(self, o2: Tensor, tokens=None):
        h = o2
        for gru in self.text_dec:
            h = gru(h)
        t_prime = T.softmax(self.text_head(h), axis=1)
        loss_t = None
        if tokens is not None:
            loss_t = T.cross_entropy_loss(t_prime, np.asarray(tokens, dtype=np.int64))
        return t_prime, loss_t

    def decode_speech(self, o1: Tensor, frames=None):
        h = o1
        for gru in self.speech_dec:
            h = gru(h)
        s_prime = self.speech_head(h)
        loss_s = None
        if frames is not None:
            loss_s = T.mse_loss(s_prime, np.asarray(frames, dtype=np.float64))
        return s_prime, loss_s

    def _shared_matrix(self, k1: Tensor, k2: Tensor) -> Tensor:
        if self.config.attention_form == "multiplicative":
            return shared_matrix_multiplicative(k1, k2, self.att_f1, self.att_f2)
        return shared_matrix_additive(k1, k2, self.att_f1, self.att_f2, self.att_fa)

    # -- full passes -----------------------------------------------------------

    def forward(self, tokens, frames, gt_signals=None, compute_boundary=True) -> NeuFAOutput:
        """Single-utterance pass; see forward_batch for the padded-batch path."""
        outputs = self.forward_batch(
            _single_batch(tokens, frames), gt_signals=[gt_signals], compute_boundary=compute_boundary
        )
        return outputs[0]

    def forward_batch(self, batch: Batch, gt_signals=None, compute_boundary=True) -> list[NeuFAOutput]:
        """Run every utterance of a padded batch, sharing the recurrent passes.

        Convolutions and batch norm run per utterance (normalization groups
        are single utterances by design); recurrent layers run once over the
        padded stack with masks, which is numerically equivalent to solo runs.
        Losses are computed per utterance, so the batch total (their mean)
        matches unbatched training.
        """
        cfg = self.config
        n = batch.size
        if n == 0:
            raise InputError("empty batch")
        if gt_signals is None:
            gt_signals = [None] * n

        text_feats = [
            self._text_features(batch.tokens[i, : batch.text_lengths[i]]) for i in range(n)
        ]
        speech_feats = [
            self._speech_features(batch.frames[i, : batch.frame_lengths[i]]) for i in range(n)
        ]

        text_stack, text_mask = T.stack_pad(text_feats)
        text_enc = self.text_gru(text_stack, text_mask)
        e_t_list = T.unstack_pad(text_enc, batch.text_lengths)

        speech_stack, speech_mask = T.stack_pad(speech_feats)
        h = speech_stack
        for gru in self.speech_grus:
            h = gru(h, speech_mask)
        e_s_list = T.unstack_pad(h, batch.frame_lengths)

        per_utt = []
        o1_list, o2_list = [], []
        for i in range(n):
            pair, loss_l_t, loss_l_s, _, _ = apply_positional_encodings(
                e_t_list[i], e_s_list[i], self.pos_proj_t, self.pos_proj_s, cfg.pe_flags
            )
            a = self._shared_matrix(pair.e_t, pair.e_s)
            att = bidirectional_attend(a, pair.e_t, pair.e_s)
            per_utt.append((att, loss_l_t, loss_l_s))
            o1_list.append(att.O1)
            o2_list.append(att.O2)

        s_primes = [None] * n
        loss_s_list = [None] * n
        if not cfg.disable_tts:
            o1_stack, o1_mask = T.stack_pad(o1_list)
            h = o1_stack
            for gru in self.speech_dec:
                h = gru(h, o1_mask)
            for i, piece in enumerate(T.unstack_pad(h, batch.frame_lengths)):
                s_prime = self.speech_head(piece)
                s_primes[i] = s_prime
                loss_s_list[i] = T.mse_loss(
                    s_prime, batch.frames[i, : batch.frame_lengths[i]]
                )

        t_primes = [None] * n
        loss_t_list = [None] * n
        if not cfg.disable_asr:
            o2_stack, o2_mask = T.stack_pad(o2_list)
            h = o2_stack
            for gru in self.text_dec:
                h = gru(h, o2_mask)
            for i, piece in enumerate(T.unstack_pad(h, batch.text_lengths)):
                t_prime = T.softmax(self.text_head(piece), axis=1)
                t_primes[i] = t_prime
                loss_t_list[i] = T.cross_entropy_loss(
                    t_prime, batch.tokens[i, : batch.text_lengths[i]]
                )

        zero = Tensor(np.zeros(()))
        outputs = []
        for i in range(n):
            att, loss_l_t, loss_l_s = per_utt[i]
            n_text, n_frames = att.W12.data.shape
            constraint = diagonal_constraint_matrix(n_text, n_frames)
            loss_a = diagonal_attention_loss(att.W12, att.W21, constraint)

            b_prime = None
            loss_b = zero
            if compute_boundary:
                features = build_feature_matrix(att.W12, att.W21)
                b_prime = self.detector(features)
                if gt_signals[i] is not None:
                    loss_b = boundary_loss(b_prime, gt_signals[i])

            losses = {
                "loss_t": loss_t_list[i] if loss_t_list[i] is not None else zero,
                "loss_s": loss_s_list[i] if loss_s_list[i] is not None else zero,
                "loss_l_t": loss_l_t,
                "loss_l_s": loss_l_s,
                "loss_a": loss_a,
                "loss_b": loss_b,
            }
            weights = list(cfg.loss_weights)
            if cfg.disable_asr:
                weights[0] = 0.0
            if cfg.disable_tts:
                weights[1] = 0.0
            total = total_loss(losses, weights)
            losses["total"] = total
            outputs.append(
                NeuFAOutput(
                    t_prime=t_primes[i],
                    s_prime=s_primes[i],
                    w_tts=att.W12,
                    w_asr=att.W21,
                    b_prime=b_prime,
                    losses=losses,
                    total=total,
                )
            )
        return outputs


def _single_batch(tokens, frames) -> Batch:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    if tokens.shape[1] == 0:
        raise InputError("empty token sequence")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise InputError(f"frames must be non-empty [n_frames x d_mel], got {frames.shape}")
    return Batch(
        utterances=[None],
        tokens=tokens,
        text_mask=np.ones(tokens.shape),
        frames=frames[None],
        frame_mask=np.ones((1, frames.shape[0])),
        text_lengths=[tokens.shape[1]],
        frame_lengths=[frames.shape[0]],
    )


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: NeuFA, path, meta: dict | None = None, extra: dict | None = None) -> None:
    """Serialize config, parameters, buffers, and optimizer arrays to one file."""
    params = list(model.parameters())
    buffers = list(model.buffers())
    extra = dict(sorted((extra or {}).items()))
    header = {
        "magic_version": 1,
        "config": model.config.to_dict(),
        "meta": meta or {},
        "params": [[p.name, list(p.data.shape)] for p in params],
        "buffers": [[name, list(arr.shape)] for name, arr in buffers],
        "extra": [[name, list(np.asarray(arr).shape)] for name, arr in extra.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        for _, arr in buffers:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for _, arr in extra.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, meta, extra)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointFormatError("truncated header")
    (header_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"unparseable header: {exc}") from None
    config = NeuFAConfig.from_dict(header["config"])
    model = NeuFA(config)

    offset = 8 + header_len

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(raw):
            raise CheckpointFormatError("truncated value block")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
        return arr

    params = list(model.parameters())
    recorded = header["params"]
    if [p.name for p in params] != [name for name, _ in recorded]:
        raise CheckpointFormatError("parameter names do not match this configuration")
    for p, (name, shape) in zip(params, recorded):
        if list(p.data.shape) != list(shape):
            raise CheckpointFormatError(f"shape mismatch for {name}")
        p.data = take(shape)
    buffers = list(model.buffers())
    if [b[0] for b in buffers] != [name for name, _ in header["buffers"]]:
        raise CheckpointFormatError("buffer names do not match this configuration")
    for (name, arr), (_, shape) in zip(buffers, header["buffers"]):
        arr[...] = take(shape)
    extra = {name: take(shape) for name, shape in header["extra"]}
    if offset != len(raw):
        raise CheckpointFormatError("trailing bytes after value blocks")
    return model, header["meta"], extra
