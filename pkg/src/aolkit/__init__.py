"""Almost-orthogonal Lipschitz (AOL) layers, margin training and L2 certification."""

from aolkit.certification import (DEFAULT_EPS, CertReport, attack_check, certified,
                                  certified_robust_accuracy, margin, margins)
from aolkit.layers import (AolConv, AolFC, ConcatPool, FirstChannels, Flatten, MaxMin, Model,
                           ModelSpec, build_model, forward)
from aolkit.rescale import rescale_kernel, rescale_matrix
from aolkit.tensor import ConvGeometry, Padding, conv2d
from aolkit.training import TrainConfig, margin_loss, sgd_nesterov_step, train

__version__ = "0.1.0"

__all__ = [
    "AolConv", "AolFC", "CertReport", "ConcatPool", "ConvGeometry", "DEFAULT_EPS",
    "FirstChannels", "Flatten", "MaxMin", "Model", "ModelSpec", "Padding", "TrainConfig",
    "attack_check", "build_model", "certified", "certified_robust_accuracy", "conv2d",
    "forward", "margin", "margin_loss", "margins", "rescale_kernel", "rescale_matrix",
    "sgd_nesterov_step", "train",
]
