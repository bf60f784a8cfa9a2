"""MobileNet1D and AM-MobileNet1D for raw-waveform speaker identification."""
from ._kernels import BACKEND
from .layers import (BottleneckSpec, Model, ModelConfig, build_mobilenet1d, count_parameters,
                     depthwise_separable_conv1d, inverted_residual)
from .losses import AmSoftmaxParams, am_softmax_loss, predict_class, softmax_cross_entropy
from .optim import RMSprop, rmsprop_step
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BottleneckSpec", "Model", "ModelConfig", "build_mobilenet1d", "count_parameters",
    "depthwise_separable_conv1d", "inverted_residual", "AmSoftmaxParams", "am_softmax_loss",
    "predict_class", "softmax_cross_entropy", "RMSprop", "rmsprop_step", "Tape", "Tensor",
    "backward", "grad_check",
]
