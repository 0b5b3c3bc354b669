"""Two-stage training loop, alignment inference, metrics, and ablations.

Stage 1 trains everything except the boundary detector, with a heavy
diagonal-attention weight so the attention maps become monotonic.  Stage 2
keeps the reconstruction losses, drops the diagonal penalty, and turns on
the boundary loss to fit the detector.

Every run is a pure function of (seed, config, corpus): batch order is
derived from (seed, stage, epoch), the optimizer is plain Adam over a
fixed parameter order, and reductions never depend on timing.  Resuming
from a checkpoint therefore reproduces the exact loss trajectory of an
uninterrupted run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .boundary import BoundarySet, boundaries_to_signals, signals_to_boundaries
from .data import Utterance, make_batches
from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    InputError,
    TrainingDivergence,
)
from .model import (
    LOSS_NAMES,
    STAGE1_WEIGHTS,
    STAGE2_WEIGHTS,
    NeuFA,
    NeuFAConfig,
    save_checkpoint,
)
from .tensor import Tensor, no_grad

__all__ = [
    "StageConfig",
    "TrainSchedule",
    "Adam",
    "train_stage",
    "train_run",
    "align_utterance",
    "align_corpus",
    "EvalReport",
    "evaluate",
    "diagonality_score",
    "ABLATION_VARIANTS",
    "apply_variant",
    "run_ablation",
    "split_corpus",
    "render_report",
]

TOLERANCES_MS = (10, 25, 50, 100)


@dataclass(frozen=True)
class StageConfig:
    steps: int
    loss_weights: tuple

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if len(self.loss_weights) != 6 or any(w < 0 for w in self.loss_weights):
            raise ConfigurationError(f"bad stage weights {self.loss_weights}")
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))


@dataclass(frozen=True)
class TrainSchedule:
    stage1: StageConfig = StageConfig(2000, STAGE1_WEIGHTS)
    stage2: StageConfig = StageConfig(2000, STAGE2_WEIGHTS)
    learning_rate: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise ConfigurationError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    def to_dict(self) -> dict:
        return {
            "stage1": {"steps": self.stage1.steps, "loss_weights": list(self.stage1.loss_weights)},
            "stage2": {"steps": self.stage2.steps, "loss_weights": list(self.stage2.loss_weights)},
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        known = {"stage1", "stage2", "learning_rate", "batch_size", "seed", "checkpoint_every"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown schedule fields: {sorted(unknown)}")
        kw = dict(d)
        for key in ("stage1", "stage2"):
            if key in kw:
                stage = dict(kw[key])
                extra = set(stage) - {"steps", "loss_weights"}
                if extra:
                    raise ConfigurationError(f"unknown {key} fields: {sorted(extra)}")
                kw[key] = StageConfig(stage["steps"], tuple(stage["loss_weights"]))
        return cls(**kw)


class Adam(object):
    """Adam over a fixed parameter list; state is serializable by name.

    Parameters whose gradient is None (an unused branch) are treated as
    zero-gradient so the state update stays deterministic and uniform.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be > 0, got {lr}")
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter names")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)

    def state_arrays(self) -> dict:
        state = {"opt.t": np.array(float(self.t))}
        for name in self.m:
            state[f"opt.m.{name}"] = self.m[name]
            state[f"opt.v.{name}"] = self.v[name]
        return state

    def load_state(self, arrays: dict) -> None:
        if "opt.t" not in arrays:
            raise CheckpointFormatError("optimizer state missing opt.t")
        self.t = int(arrays["opt.t"])
        for p in self.params:
            for prefix, store in (("opt.m.", self.m), ("opt.v.", self.v)):
                key = prefix + p.name
                if key not in arrays:
                    raise CheckpointFormatError(f"optimizer state missing {key}")
                if arrays[key].shape != p.data.shape:
                    raise CheckpointFormatError(f"optimizer state shape mismatch for {key}")
                store[p.name][...] = arrays[key]


def _epoch_seed(seed: int, stage_index: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, stage_index, epoch]).generate_state(1)[0])


def _signals_for(batch, cache: dict):
    out = []
    for u in batch.utterances:
        if u.id not in cache:
            cache[u.id] = boundaries_to_signals(u.gt_boundaries, u.n_frames)
        out.append(cache[u.id])
    return out


def train_stage(
    model: NeuFA,
    opt: Adam,
    corpus: list,
    stage: StageConfig,
    schedule: TrainSchedule,
    stage_index: int,
    start_step: int = 0,
    checkpoint_dir=None,
    signals_cache: dict | None = None,
) -> list[dict]:
    """Run one stage from start_step to stage.steps; returns per-step history.

    The batch at global position s is fully determined by (seed, stage,
    corpus): epoch e = s // batches_per_epoch reshuffles with a seed derived
    from (seed, stage_index, e), so resuming at any step replays the same
    stream an uninterrupted run would have seen.
    """
    if len(corpus) == 0:
        raise InputError("empty corpus")
    model.config = model.config.with_weights(stage.loss_weights)
    needs_boundary = stage.loss_weights[5] > 0
    cache = signals_cache if signals_cache is not None else {}
    per_epoch = (len(corpus) + schedule.batch_size - 1) // schedule.batch_size
    history = []
    batches, cur_epoch = None, -1

    for step in range(start_step, stage.steps):
        epoch = step // per_epoch
        if epoch != cur_epoch:
            batches = make_batches(
                corpus, schedule.batch_size, seed=_epoch_seed(schedule.seed, stage_index, epoch)
            )
            cur_epoch = epoch
        batch = batches[step % per_epoch]
        signals = _signals_for(batch, cache) if needs_boundary else None

        outs = model.forward_batch(batch, gt_signals=signals, compute_boundary=needs_boundary)
        total = outs[0].total
        for o in outs[1:]:
            total = total + o.total
        total = total * (1.0 / len(outs))

        row = {"stage": stage_index, "step": step + 1}
        for name in LOSS_NAMES + ("total",):
            value = float(np.mean([float(o.losses[name].data) for o in outs]))
            if not np.isfinite(value):
                raise TrainingDivergence(
                    f"non-finite {name} ({value}) at stage {stage_index} step {step + 1}"
                )
            row[name] = value
        history.append(row)

        model.zero_grad()
        total.backward()
        opt.step()

        if (
            checkpoint_dir is not None
            and schedule.checkpoint_every > 0
            and (step + 1) % schedule.checkpoint_every == 0
        ):
            path = f"{checkpoint_dir}/stage{stage_index}-step{step + 1:06d}.nfa"
            save_checkpoint(
                model, path, meta={"stage": stage_index, "step": step + 1}, extra=opt.state_arrays()
            )
    return history


def train_run(
    config: NeuFAConfig,
    schedule: TrainSchedule,
    corpus: list,
    out_dir=None,
):
    """Full two-stage run; returns (model, optimizer, history).

    With out_dir set, writes the final checkpoint (final.nfa) and the loss
    history (history.json), both rendered canonically so identical runs
    produce identical bytes.
    """
    model = NeuFA(config)
    opt = Adam(model.parameters(), lr=schedule.learning_rate)
    cache: dict = {}
    history = train_stage(
        model, opt, corpus, schedule.stage1, schedule, 1,
        checkpoint_dir=out_dir, signals_cache=cache,
    )
    history += train_stage(
        model, opt, corpus, schedule.stage2, schedule, 2,
        checkpoint_dir=out_dir, signals_cache=cache,
    )
    if out_dir is not None:
        meta = {
            "stage": 2,
            "step": schedule.stage1.steps + schedule.stage2.steps,
            "schedule": schedule.to_dict(),
        }
        save_checkpoint(model, f"{out_dir}/final.nfa", meta=meta, extra=opt.state_arrays())
        with open(f"{out_dir}/history.json", "w") as fh:
            json.dump(history, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return model, opt, history


# -- inference -------------------------------------------------------------------


def align_utterance(model: NeuFA, utterance: Utterance):
    """Predict boundaries for one utterance; returns (BoundarySet, W_TTS, W_ASR).

    Runs in eval mode (frozen normalization statistics) without gradients;
    the attention maps come back as plain arrays for inspection or export.
    """
    was_training = model.training
    model.set_training(False)
    try:
        with no_grad():
            out = model.forward(utterance.tokens, utterance.frames, compute_boundary=True)
    finally:
        model.set_training(was_training)
    bounds = signals_to_boundaries(out.b_prime.data, utterance.frame_shift_ms)
    return bounds, out.w_tts.data, out.w_asr.data


def align_corpus(model: NeuFA, corpus: list) -> dict:
    """Map utterance id -> (BoundarySet, W_TTS, W_ASR), in corpus order."""
    results = {}
    for u in corpus:
        if u.id in results:
            raise InputError(f"duplicate utterance id {u.id!r}")
        results[u.id] = align_utterance(model, u)
    return results


# -- metrics ---------------------------------------------------------------------


@dataclass
class EvalReport:
    mae_ms: float
    median_ms: float
    accuracy: dict            # tolerance ms -> fraction of errors <= tolerance
    n_boundaries: int
    per_utterance: dict = field(default_factory=dict)   # id -> [abs errors, ms]
    diagonality: dict | None = None                     # id -> score
    mean_diagonality: float | None = None

    def to_dict(self) -> dict:
        d = {
            "mae_ms": self.mae_ms,
            "median_ms": self.median_ms,
            "accuracy": {str(k): v for k, v in sorted(self.accuracy.items())},
            "n_boundaries": self.n_boundaries,
            "per_utterance": {k: list(v) for k, v in sorted(self.per_utterance.items())},
        }
        if self.diagonality is not None:
            d["diagonality"] = dict(sorted(self.diagonality.items()))
            d["mean_diagonality"] = self.mean_diagonality
        return d


def evaluate(predictions: dict, references: dict, diagonality: dict | None = None) -> EvalReport:
    """Pool every left and right absolute boundary error (in ms) across all
    utterances; report their mean, midpoint median, and the fraction within
    each tolerance.  Both arguments map utterance id -> BoundarySet."""
    pred_ids, ref_ids = set(predictions), set(references)
    if pred_ids != ref_ids:
        missing = sorted(ref_ids - pred_ids)
        extra = sorted(pred_ids - ref_ids)
        raise InputError(f"utterance id mismatch: missing {missing}, extra {extra}")
    if not predictions:
        raise InputError("nothing to evaluate")

    pooled = []
    per_utterance = {}
    for uid in sorted(predictions):
        p, r = predictions[uid], references[uid]
        if p.n_units != r.n_units:
            raise InputError(
                f"{uid}: predicted {p.n_units} units, reference has {r.n_units}"
            )
        errs = np.concatenate(
            [np.abs(p.lefts_ms - r.lefts_ms), np.abs(p.rights_ms - r.rights_ms)]
        )
        per_utterance[uid] = [float(e) for e in errs]
        pooled.append(errs)
    pooled = np.concatenate(pooled)

    report = EvalReport(
        # fsum is correctly rounded, so the mean is a well-defined float any
        # exact reimplementation reproduces bit for bit
        mae_ms=math.fsum(pooled) / pooled.size,
        median_ms=float(np.median(pooled)),
        accuracy={tau: float(np.mean(pooled <= tau)) for tau in TOLERANCES_MS},
        n_boundaries=int(pooled.size),
        per_utterance=per_utterance,
    )
    if diagonality is not None:
        report.diagonality = {k: float(v) for k, v in diagonality.items()}
        report.mean_diagonality = float(np.mean(list(report.diagonality.values())))
    return report


def diagonality_score(w) -> float:
    """Fraction of attention mass near the relative diagonal, averaged over
    columns.  Positions are half-index fractions; the band is |p - q| <= 0.1
    (with a hair of slack so exact band edges are not lost to rounding)."""
    w = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise InputError(f"expected a 2-D weight matrix, got shape {w.shape}")
    n1, n2 = w.shape
    p = (np.arange(n1) + 0.5)[:, None] / n1
    q = (np.arange(n2) + 0.5)[None, :] / n2
    band = np.abs(p - q) <= 0.1 + 1e-9
    return float(np.mean(np.sum(w * band, axis=0)))


# -- ablations ---------------------------------------------------------------------

ABLATION_VARIANTS = ("epes", "tpes", "spes", "asr", "tts", "dal")


def apply_variant(config: NeuFAConfig, schedule: TrainSchedule, variant: str):
    """Return (config, schedule) with one component removed.

    epes drops both estimated positional encodings, tpes/spes drop one
    side's index encodings, asr/tts drop a decoder branch, and dal zeroes
    the diagonal-attention weight in stage 1.
    """
    d = config.to_dict()
    if variant == "epes":
        d["use_epe_s"] = False
        d["use_epe_t"] = False
    elif variant == "tpes":
        d["use_pe_t"] = False
    elif variant == "spes":
        d["use_pe_s"] = False
    elif variant == "asr":
        d["disable_asr"] = True
    elif variant == "tts":
        d["disable_tts"] = True
    elif variant == "dal":
        w1 = list(schedule.stage1.loss_weights)
        w1[4] = 0.0
        schedule = TrainSchedule(
            stage1=StageConfig(schedule.stage1.steps, tuple(w1)),
            stage2=schedule.stage2,
            learning_rate=schedule.learning_rate,
            batch_size=schedule.batch_size,
            seed=schedule.seed,
            checkpoint_every=schedule.checkpoint_every,
        )
    else:
        raise ConfigurationError(
            f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}"
        )
    return NeuFAConfig.from_dict(d), schedule


def _eval_trained(model: NeuFA, eval_corpus: list) -> EvalReport:
    aligned = align_corpus(model, eval_corpus)
    predictions = {uid: res[0] for uid, res in aligned.items()}
    references = {u.id: u.gt_boundaries for u in eval_corpus}
    scores = {uid: diagonality_score(res[1]) for uid, res in aligned.items()}
    return evaluate(predictions, references, diagonality=scores)


def run_ablation(
    config: NeuFAConfig,
    schedule: TrainSchedule,
    train_corpus: list,
    eval_corpus: list,
    variant: str,
    seeds=(0,),
) -> dict:
    """Train baseline and variant under identical seeds/data; pair the reports."""
    var_config, var_schedule = apply_variant(config, schedule, variant)
    per_seed = []
    for seed in seeds:
        pair = {}
        for label, cfg, sched in (
            ("baseline", config, schedule),
            ("variant", var_config, var_schedule),
        ):
            cfg_d = cfg.to_dict()
            cfg_d["seed"] = seed
            sched_d = sched.to_dict()
            sched_d["seed"] = seed
            model, _, _ = train_run(
                NeuFAConfig.from_dict(cfg_d), TrainSchedule.from_dict(sched_d), train_corpus
            )
            report = _eval_trained(model, eval_corpus)
            pair[label] = report.to_dict()
            pair[f"{label}_diagonality"] = report.mean_diagonality
        pair["seed"] = seed
        per_seed.append(pair)
    return {"variant": variant, "per_seed": per_seed}


# -- report rendering ----------------------------------------------------------------


def split_corpus(corpus: list, n_train: int):
    """Deterministic prefix/suffix split; generation order is already random."""
    if not 0 < n_train <= len(corpus):
        raise InputError(f"cannot take {n_train} training utterances from {len(corpus)}")
    return corpus[:n_train], corpus[n_train:]


def render_report(rows: dict) -> str:
    """Text table of labeled results, one system per row (comparison layout).

    Each value of `rows` is an EvalReport or its to_dict() form.
    """
    lines = [
        "system".ljust(24)
        + "MAE(ms)".rjust(9)
        + "median(ms)".rjust(12)
        + "".join(f"acc@{tau}".rjust(9) for tau in TOLERANCES_MS)
    ]
    for name in rows:
        report = rows[name]
        d = report.to_dict() if isinstance(report, EvalReport) else report
        acc = d["accuracy"]
        lines.append(
            str(name).ljust(24)
            + f"{d['mae_ms']:9.1f}"
            + f"{d['median_ms']:12.1f}"
            + "".join(f"{acc[str(tau)] if str(tau) in acc else acc[tau]:9.3f}" for tau in TOLERANCES_MS)
        )
    return "\n".join(lines) + "\n"
