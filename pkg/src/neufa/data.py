"""Synthetic aligned corpora: generation, persistence, batching, export.

Real forced-alignment corpora pair audio features with transcripts whose
boundary annotations are approximate.  Here "speech" is synthesized from
per-token prototype vectors plus Gaussian noise, so the generating spans
ARE the ground truth: every boundary is exact, which is what makes tight
end-to-end acceptance thresholds possible on a desk machine.

The corpus file is line-delimited JSON with a version header.  Floats
round-trip exactly (json serializes Python floats via repr, the shortest
form that parses back to the same bits).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boundary import BoundarySet
from .errors import ConfigurationError, CorpusFormatError, InputError

__all__ = [
    "Utterance",
    "SyntheticSpec",
    "Batch",
    "generate_synthetic_corpus",
    "save_corpus",
    "load_corpus",
    "save_alignments",
    "load_alignments",
    "make_batches",
    "export_textgrid",
    "corpora_equal",
]

CORPUS_FORMAT = "corpus"
ALIGNMENTS_FORMAT = "alignments"
CORPUS_VERSION = 1


@dataclass
class Utterance:
    id: str
    tokens: list[int]
    frames: np.ndarray  # [n_frames x d_mel]
    gt_boundaries: BoundarySet
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InputError(f"frames must be [n_frames x d_mel], got shape {self.frames.shape}")
        if len(self.tokens) == 0:
            raise InputError("utterance has no tokens")
        if self.gt_boundaries.n_units != len(self.tokens):
            raise InputError(
                f"{self.gt_boundaries.n_units} boundary pairs for {len(self.tokens)} tokens"
            )
        self.gt_boundaries.validate_within(self.n_frames)
        lefts, rights = self.gt_boundaries.lefts_ms, self.gt_boundaries.rights_ms
        if np.any(lefts[1:] < rights[:-1] - 1e-9):
            raise InputError("token boundary spans overlap")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 20
    d_mel: int = 8
    duration_min: int = 2
    duration_max: int = 8
    noise: float = 0.1
    tokens_min: int = 3
    tokens_max: int = 12
    corpus_size: int = 100
    seed: int = 0
    silence_frames: int = 0  # zero-prototype frames inserted between tokens

    def __post_init__(self):
        if self.duration_min < 1 or self.duration_max < self.duration_min:
            raise ConfigurationError(
                f"bad duration range [{self.duration_min}, {self.duration_max}]"
            )
        if self.noise < 0:
            raise ConfigurationError(f"noise must be >= 0, got {self.noise}")
        if self.tokens_min < 1 or self.tokens_max < self.tokens_min:
            raise ConfigurationError(f"bad token range [{self.tokens_min}, {self.tokens_max}]")
        if self.vocab_size < 1 or self.d_mel < 1 or self.corpus_size < 0:
            raise ConfigurationError("vocab_size, d_mel must be >= 1 and corpus_size >= 0")
        if self.silence_frames < 0:
            raise ConfigurationError(f"silence_frames must be >= 0, got {self.silence_frames}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown corpus spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    utterances: list[Utterance]
    tokens: np.ndarray        # [B x T_text] int64, zero padded
    text_mask: np.ndarray     # [B x T_text] binary
    frames: np.ndarray        # [B x T_frames x d_mel] zero padded
    frame_mask: np.ndarray    # [B x T_frames] binary
    text_lengths: list[int] = field(default_factory=list)
    frame_lengths: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.utterances)


def generate_synthetic_corpus(spec: SyntheticSpec, frame_shift_ms: float = 10.0) -> list[Utterance]:
    """Sample a corpus with exact boundary annotations, deterministic in seed."""
    rng = np.random.default_rng(spec.seed)
    prototypes = rng.normal(size=(spec.vocab_size, spec.d_mel))
    corpus = []
    for u in range(spec.corpus_size):
        n_tok = int(rng.integers(spec.tokens_min, spec.tokens_max + 1))
        tokens = [int(t) for t in rng.integers(0, spec.vocab_size, size=n_tok)]
        durations = rng.integers(spec.duration_min, spec.duration_max + 1, size=n_tok)
        pieces, lefts, rights = [], [], []
        cursor = 0
        for k, (tok, dur) in enumerate(zip(tokens, durations)):
            if k > 0 and spec.silence_frames > 0:
                pieces.append(spec.noise * rng.normal(size=(spec.silence_frames, spec.d_mel)))
                cursor += spec.silence_frames
            emission = prototypes[tok] + spec.noise * rng.normal(size=(int(dur), spec.d_mel))
            pieces.append(emission)
            lefts.append(cursor * frame_shift_ms)
            cursor += int(dur)
            rights.append(cursor * frame_shift_ms)
        corpus.append(
            Utterance(
                id=f"utt-{u:04d}",
                tokens=tokens,
                frames=np.concatenate(pieces, axis=0),
                gt_boundaries=BoundarySet(lefts, rights, frame_shift_ms),
                frame_shift_ms=frame_shift_ms,
            )
        )
    return corpus


def save_corpus(corpus: list[Utterance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": CORPUS_FORMAT, "version": CORPUS_VERSION}) + "\n")
        for utt in corpus:
            record = {
                "id": utt.id,
                "tokens": utt.tokens,
                "frame_shift_ms": utt.frame_shift_ms,
                "frames": utt.frames.tolist(),
                "lefts_ms": utt.gt_boundaries.lefts_ms.tolist(),
                "rights_ms": utt.gt_boundaries.rights_ms.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def load_corpus(path) -> list[Utterance]:
    corpus = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError("missing header line", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"unparseable header: {exc}", line=1) from None
    if not isinstance(header, dict) or header.get("format") != CORPUS_FORMAT:
        raise CorpusFormatError("not a corpus file", line=1)
    if header.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(
            f"unsupported corpus version {header.get('version')!r}", line=1
        )
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            utt = Utterance(
                id=rec["id"],
                tokens=[int(t) for t in rec["tokens"]],
                frames=np.array(rec["frames"], dtype=np.float64),
                gt_boundaries=BoundarySet(
                    rec["lefts_ms"], rec["rights_ms"], rec["frame_shift_ms"]
                ),
                frame_shift_ms=rec["frame_shift_ms"],
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"bad utterance record: {exc}", line=lineno) from None
        corpus.append(utt)
    return corpus


def save_alignments(alignments: dict, path) -> None:
    """Write id -> BoundarySet as JSONL, one record per utterance.

    Floats pass through repr, so load_alignments returns them bit-exactly.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": ALIGNMENTS_FORMAT, "version": CORPUS_VERSION}) + "\n")
        for uid in alignments:
            bounds = alignments[uid]
            record = {
                "id": uid,
                "frame_shift_ms": bounds.frame_shift_ms,
                "lefts_ms": bounds.lefts_ms.tolist(),
                "rights_ms": bounds.rights_ms.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def load_alignments(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError("missing header line", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"unparseable header: {exc}", line=1) from None
    if not isinstance(header, dict) or header.get("format") != ALIGNMENTS_FORMAT:
        raise CorpusFormatError("not an alignments file", line=1)
    if header.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(
            f"unsupported alignments version {header.get('version')!r}", line=1
        )
    alignments = {}
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
            uid = rec["id"]
            bounds = BoundarySet(rec["lefts_ms"], rec["rights_ms"], rec["frame_shift_ms"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"bad alignment record: {exc}", line=lineno) from None
        if uid in alignments:
            raise CorpusFormatError(f"duplicate utterance id {uid!r}", line=lineno)
        alignments[uid] = bounds
    return alignments


def corpora_equal(a: list[Utterance], b: list[Utterance]) -> bool:
    """Bit-exact equality, used to verify the codec round-trip."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if x.id != y.id or x.tokens != y.tokens or x.frame_shift_ms != y.frame_shift_ms:
            return False
        if not np.array_equal(x.frames, y.frames):
            return False
        if not np.array_equal(x.gt_boundaries.lefts_ms, y.gt_boundaries.lefts_ms):
            return False
        if not np.array_equal(x.gt_boundaries.rights_ms, y.gt_boundaries.rights_ms):
            return False
    return True


def make_batches(corpus: list[Utterance], batch_size: int, seed: int) -> list[Batch]:
    """Shuffle, group, and zero-pad with masks.  Purely cosmetic for results:
    masked losses make batching semantically invisible."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(corpus))
    batches = []
    for start in range(0, len(corpus), batch_size):
        group = [corpus[i] for i in order[start : start + batch_size]]
        t_max = max(u.n_tokens for u in group)
        f_max = max(u.n_frames for u in group)
        d_mel = group[0].frames.shape[1]
        tokens = np.zeros((len(group), t_max), dtype=np.int64)
        text_mask = np.zeros((len(group), t_max))
        frames = np.zeros((len(group), f_max, d_mel))
        frame_mask = np.zeros((len(group), f_max))
        for i, u in enumerate(group):
            tokens[i, : u.n_tokens] = u.tokens
            text_mask[i, : u.n_tokens] = 1.0
            frames[i, : u.n_frames] = u.frames
            frame_mask[i, : u.n_frames] = 1.0
        batches.append(
            Batch(
                utterances=group,
                tokens=tokens,
                text_mask=text_mask,
                frames=frames,
                frame_mask=frame_mask,
                text_lengths=[u.n_tokens for u in group],
                frame_lengths=[u.n_frames for u in group],
            )
        )
    return batches


def export_textgrid(utterance: Utterance, bounds: BoundarySet, path) -> None:
    """Write a Praat long-format TextGrid with one interval tier.

    Intervals are tiled left to right: overlapping predictions are clipped
    to the running cursor and zero-width intervals are dropped, so the tier
    is always valid.  Gaps between units get empty-label intervals.
    """
    if bounds.n_units != utterance.n_tokens:
        raise InputError(
            f"{bounds.n_units} boundary pairs for {utterance.n_tokens} tokens"
        )
    if utterance.n_tokens == 0:
        raise InputError("cannot export an empty utterance")
    xmax = utterance.n_frames * utterance.frame_shift_ms / 1000.0
    intervals = []
    cursor = 0.0
    for tok, left_ms, right_ms in zip(utterance.tokens, bounds.lefts_ms, bounds.rights_ms):
        left = min(max(cursor, left_ms / 1000.0), xmax)
        right = min(max(left, right_ms / 1000.0), xmax)
        if left > cursor:
            intervals.append((cursor, left, ""))
        if right > left:
            intervals.append((left, right, str(tok)))
        cursor = max(cursor, right)
    if cursor < xmax:
        intervals.append((cursor, xmax, ""))

    out = []
    out.append('File type = "ooTextFile"')
    out.append('Object class = "TextGrid"')
    out.append("")
    out.append("xmin = 0.000000")
    out.append(f"xmax = {xmax:.6f}")
    out.append("tiers? <exists>")
    out.append("size = 1")
    out.append("item []:")
    out.append("    item [1]:")
    out.append('        class = "IntervalTier"')
    out.append('        name = "tokens"')
    out.append("        xmin = 0.000000")
    out.append(f"        xmax = {xmax:.6f}")
    out.append(f"        intervals: size = {len(intervals)}")
    for k, (left, right, label) in enumerate(intervals, start=1):
        out.append(f"        intervals [{k}]:")
        out.append(f"            xmin = {left:.6f}")
        out.append(f"            xmax = {right:.6f}")
        out.append(f'            text = "{label}"')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")
