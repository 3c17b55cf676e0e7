"""Augmentation, optimizers and the joint two-branch training loop."""

from .augment import AugmentConfig, augment
from .check import graph_grad_check
from .loop import (
    METHODS,
    EpochRecord,
    MetricsTable,
    TrainConfig,
    TrainHistory,
    case_loss_and_grads,
    evaluate,
    init_branches,
    predict,
    prepare_case,
    train,
)
from .optim import SGD, Adam, make_optimizer

__all__ = [
    "METHODS", "Adam", "AugmentConfig", "EpochRecord", "MetricsTable", "SGD", "TrainConfig",
    "TrainHistory", "augment", "case_loss_and_grads", "evaluate", "graph_grad_check",
    "init_branches", "make_optimizer", "predict", "prepare_case", "train",
]
