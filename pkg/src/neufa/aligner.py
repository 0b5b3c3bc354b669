"""Estimator-style front end: fit on utterances, predict boundary sets.

NeuFAAligner follows the scikit-learn contract: constructor arguments are
stored verbatim and validated at fit time, get_params/set_params enable
cloning and grid search, fitted state lives in trailing-underscore
attributes, and score() returns a higher-is-better number (negative mean
absolute boundary error in ms).
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Utterance
from .errors import InputError
from .model import STAGE1_WEIGHTS, STAGE2_WEIGHTS, NeuFAConfig
from .training import (
    StageConfig,
    TrainSchedule,
    align_corpus,
    diagonality_score,
    evaluate,
    train_run,
)

__all__ = ["NeuFAAligner", "check_corpus"]


def check_corpus(X, vocab_size=None, d_mel=None) -> list[Utterance]:
    """Validate a corpus argument: a non-empty sequence of Utterance objects
    with unique ids, one feature width, and (when known) in-vocab tokens."""
    utts = list(X)
    if not utts:
        raise InputError("empty corpus")
    for u in utts:
        if not isinstance(u, Utterance):
            raise InputError(f"expected Utterance objects, got {type(u).__name__}")
    ids = [u.id for u in utts]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise InputError(f"duplicate utterance ids: {dupes}")
    widths = {u.frames.shape[1] for u in utts}
    if len(widths) > 1:
        raise InputError(f"inconsistent frame feature widths: {sorted(widths)}")
    if d_mel is not None and widths != {d_mel}:
        raise InputError(f"expected {d_mel} features per frame, found {sorted(widths)}")
    if vocab_size is not None:
        top = max(max(u.tokens) for u in utts)
        if top >= vocab_size or min(min(u.tokens) for u in utts) < 0:
            raise InputError(f"token ids must lie in [0, {vocab_size}), found up to {top}")
    return utts


class NeuFAAligner(BaseEstimator):
    """Forced aligner with a fit/predict interface.

    fit(X) trains the two-stage model on a list of Utterance objects (their
    ground-truth boundaries supervise stage 2).  predict(X) returns one
    BoundarySet per utterance.  score(X) is -MAE in ms against the
    utterances' own annotations.
    """

    def __init__(
        self,
        vocab_size=20,
        d_mel=8,
        text_width=64,
        speech_width=64,
        d_a=32,
        attention_form="multiplicative",
        decoder_width=64,
        detector_channels=8,
        detector_kernel=17,
        stage1_steps=2000,
        stage2_steps=2000,
        stage1_weights=STAGE1_WEIGHTS,
        stage2_weights=STAGE2_WEIGHTS,
        learning_rate=1e-4,
        batch_size=8,
        seed=0,
        disable_asr=False,
        disable_tts=False,
        use_pe_t=True,
        use_epe_s=True,
        use_epe_t=True,
        use_pe_s=True,
    ):
        self.vocab_size = vocab_size
        self.d_mel = d_mel
        self.text_width = text_width
        self.speech_width = speech_width
        self.d_a = d_a
        self.attention_form = attention_form
        self.decoder_width = decoder_width
        self.detector_channels = detector_channels
        self.detector_kernel = detector_kernel
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.stage1_weights = stage1_weights
        self.stage2_weights = stage2_weights
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.disable_asr = disable_asr
        self.disable_tts = disable_tts
        self.use_pe_t = use_pe_t
        self.use_epe_s = use_epe_s
        self.use_epe_t = use_epe_t
        self.use_pe_s = use_pe_s

    def _config(self) -> NeuFAConfig:
        return NeuFAConfig(
            vocab_size=self.vocab_size,
            d_mel=self.d_mel,
            text_width=self.text_width,
            speech_width=self.speech_width,
            d_a=self.d_a,
            attention_form=self.attention_form,
            decoder_width=self.decoder_width,
            detector_channels=self.detector_channels,
            detector_kernel=self.detector_kernel,
            loss_weights=self.stage1_weights,
            disable_asr=self.disable_asr,
            disable_tts=self.disable_tts,
            use_pe_t=self.use_pe_t,
            use_epe_s=self.use_epe_s,
            use_epe_t=self.use_epe_t,
            use_pe_s=self.use_pe_s,
            seed=self.seed,
        )

    def _schedule(self) -> TrainSchedule:
        return TrainSchedule(
            stage1=StageConfig(self.stage1_steps, self.stage1_weights),
            stage2=StageConfig(self.stage2_steps, self.stage2_weights),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        corpus = check_corpus(X, vocab_size=self.vocab_size, d_mel=self.d_mel)
        model, opt, history = train_run(self._config(), self._schedule(), corpus)
        self.model_ = model
        self.optimizer_ = opt
        self.history_ = history
        self.n_utterances_ = len(corpus)
        return self

    def _fitted_model(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this NeuFAAligner instance is not fitted yet; call fit first"
            )
        return self.model_

    def predict(self, X):
        """One BoundarySet per utterance, in input order."""
        model = self._fitted_model()
        corpus = check_corpus(X, vocab_size=self.vocab_size, d_mel=self.d_mel)
        aligned = align_corpus(model, corpus)
        return [aligned[u.id][0] for u in corpus]

    def predict_attention(self, X):
        """Map utterance id -> (W_TTS, W_ASR) arrays for inspection."""
        model = self._fitted_model()
        corpus = check_corpus(X, vocab_size=self.vocab_size, d_mel=self.d_mel)
        aligned = align_corpus(model, corpus)
        return {u.id: (aligned[u.id][1], aligned[u.id][2]) for u in corpus}

    def score(self, X, y=None) -> float:
        """Negative mean absolute boundary error in ms (higher is better)."""
        return -self.evaluation_report(X).mae_ms

    def evaluation_report(self, X):
        model = self._fitted_model()
        corpus = check_corpus(X, vocab_size=self.vocab_size, d_mel=self.d_mel)
        aligned = align_corpus(model, corpus)
        predictions = {u.id: aligned[u.id][0] for u in corpus}
        references = {u.id: u.gt_boundaries for u in corpus}
        scores = {u.id: diagonality_score(aligned[u.id][1]) for u in corpus}
        return evaluate(predictions, references, diagonality=scores)
