"""BiFusion gait recognition: skeleton graph network, silhouette parts, fusion and evaluation."""

from __future__ import annotations

__all__ = [
    "errors",
    "rng",
    "autodiff",
    "kernels",
    "params",
    "skeleton_graph",
    "msgg",
    "silhouette",
    "fusion",
    "losses",
    "optim",
    "models",
    "validators",
    "dataset",
    "sampling",
    "synthetic",
    "checkpoint",
    "config",
    "pipeline",
    "training",
    "evaluation",
    "gradcheck",
    "cli",
]
