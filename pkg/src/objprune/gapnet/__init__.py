"""Lightweight predictor of object-centric global attention."""
from .model import (
    ForwardCache,
    LossParts,
    fuse_embeddings,
    gap_backward,
    gap_forward,
    gap_forward_batch,
    gap_macs,
    loss_and_grad,
    objective,
    objective_grad,
    sample_loss,
)
from .params import GapConfig, GapParams, init_params
from .train import TrainResult, evaluate, predict, predict_many, topk_recall, train

loss = objective

__all__ = [
    "ForwardCache", "GapConfig", "GapParams", "LossParts", "TrainResult", "evaluate",
    "fuse_embeddings", "gap_backward", "gap_forward", "gap_forward_batch", "gap_macs", "init_params", "loss",
    "loss_and_grad", "objective", "objective_grad", "predict", "predict_many", "sample_loss", "topk_recall", "train",
]
