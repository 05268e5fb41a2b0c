"""Collaborative-filtering losses with a learned per-user interest boundary.

Submodules: :mod:`dataset`, :mod:`scorers`, :mod:`losses`,
:mod:`training`, :mod:`evaluation`, :mod:`cli`.
"""
from ._accel import backend, set_backend
from .dataset import DatasetBundle, EvalCandidates, InteractionSet, ingest, prepare_bundle, split_leave_one_out
from .evaluation import evaluate, rank_metrics
from .losses import LossSpec, effective_pair_stats, lnsig, uib_loss
from .scorers import ModelState, init_state, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DatasetBundle", "EvalCandidates", "InteractionSet", "LossSpec", "ModelState", "TrainConfig",
    "backend", "effective_pair_stats", "evaluate", "ingest", "init_state", "lnsig", "load_checkpoint",
    "prepare_bundle", "rank_metrics", "save_checkpoint", "set_backend", "split_leave_one_out", "train",
    "uib_loss",
]
