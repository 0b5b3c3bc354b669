"""Neural forced alignment with bidirectional attention.

The package is laid out bottom up: ``tensor`` is a self-contained
reverse-mode autodiff engine, ``layers`` builds standard neural blocks on
top of it, ``attention``/``positional``/``boundary`` implement the model's
specific machinery, ``model`` assembles the full aligner network,
``data`` generates and persists corpora, ``training`` runs the two-stage
schedule, and ``aligner`` wraps everything in an estimator API.
"""

__version__ = "0.1.0"

from .aligner import NeuFAAligner, check_corpus
from .boundary import BoundarySet
from .data import SyntheticSpec, Utterance, generate_synthetic_corpus, load_corpus, save_corpus
from .model import NeuFA, NeuFAConfig, load_checkpoint, save_checkpoint
from .training import EvalReport, TrainSchedule, align_corpus, evaluate, train_run

__all__ = [
    "NeuFAAligner",
    "check_corpus",
    "BoundarySet",
    "SyntheticSpec",
    "Utterance",
    "generate_synthetic_corpus",
    "load_corpus",
    "save_corpus",
    "NeuFA",
    "NeuFAConfig",
    "load_checkpoint",
    "save_checkpoint",
    "EvalReport",
    "TrainSchedule",
    "align_corpus",
    "evaluate",
    "train_run",
    "__version__",
]
