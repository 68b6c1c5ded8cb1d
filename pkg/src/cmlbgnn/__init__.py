"""Continual meta-learning with Bayesian graph neural networks for few-shot classification."""

from .diffcore import RngStream, Tape, Tensor, grad_check
from .episode import (
    Dataset,
    Episode,
    EpisodeSequence,
    apply_label_budget,
    build_sequence,
    load_dataset,
    make_synthetic_dataset,
    sample_episode,
    save_dataset,
    split_classes,
)
from .model import ModelOptions, ModelParams, forward_batch, forward_sequence, predict_labels, prototype_baseline
from .training import EvalReport, TrainConfig, evaluate, meta_train

__version__ = "0.1.0"
