"""Softmax cross-entropy and Additive Margin Softmax over the classifier head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelError, ParameterError
from .tensor import (Tensor, add_target_offset, cross_entropy, l2_normalize_rows, linear,
                     log_softmax, scale)


@dataclass(frozen=True)
class AmSoftmaxParams:
    scale_s: float = 30.0
    margin_m: float = 0.5
    eps: float = 1e-11

    def __post_init__(self):
        if not self.scale_s > 0:
            raise ParameterError(f"scale_s must be > 0, got {self.scale_s}")
        if not 0.0 <= self.margin_m <= 1.0:
            raise ParameterError(f"margin_m must lie in [0, 1], got {self.margin_m}")
        if self.eps < 0:
            raise ParameterError(f"eps must be >= 0, got {self.eps}")

    @classmethod
    def from_config(cls, config):
        return cls(config.scale_s, config.margin_m, config.loss_eps)


def _check_targets(targets, num_classes):
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    bad = np.flatnonzero((targets < 0) | (targets >= num_classes))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"target {int(targets[i])} at index {i} outside [0, {num_classes})")
    return targets


def softmax_cross_entropy(logits, targets):
    """Mean -log softmax(logits)[target] over the batch."""
    targets = _check_targets(targets, logits.shape[1])
    if targets.shape[0] != logits.shape[0]:
        raise LabelError(f"{targets.shape[0]} targets for a batch of {logits.shape[0]}")
    return cross_entropy(logits, targets)


def cosine_logits(features, W, eps=1e-11):
    """Cosine similarity of every feature row with every class row of W."""
    f_hat = l2_normalize_rows(features, eps)
    w_hat = l2_normalize_rows(W, eps)
    return linear(f_hat, w_hat)


def am_softmax_loss(features, W, targets, params=AmSoftmaxParams()):
    """Additive-margin softmax on cosine logits.

    The target class cosine is reduced by ``margin_m`` and every logit is
    multiplied by ``scale_s`` before the usual cross-entropy.
    """
    if features.shape[0] < 1:
        raise LabelError("am_softmax_loss needs at least one sample")
    targets = _check_targets(targets, W.shape[0])
    if targets.shape[0] != features.shape[0]:
        raise LabelError(f"{targets.shape[0]} targets for a batch of {features.shape[0]}")
    cos = cosine_logits(features, W, params.eps)
    if params.margin_m:
        cos = add_target_offset(cos, targets, -params.margin_m)
    return cross_entropy(scale(cos, params.scale_s), targets)


def model_loss(model, outputs, targets):
    """Training objective for ``model`` given the output of ``model.forward``."""
    cfg = model.config
    if cfg.loss == "am_softmax":
        return am_softmax_loss(outputs, model.classifier_weight, targets,
                               AmSoftmaxParams.from_config(cfg))
    return softmax_cross_entropy(outputs, targets)


def class_scores(outputs, W=None, eps=1e-11):
    """Margin-free decision scores: logits, or cosines when ``W`` is given."""
    data = outputs.data if isinstance(outputs, Tensor) else np.asarray(outputs, dtype=np.float64)
    if W is None:
        return data
    wd = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    f_hat = data / (np.linalg.norm(data, axis=1, keepdims=True) + eps)
    w_hat = wd / (np.linalg.norm(wd, axis=1, keepdims=True) + eps)
    return f_hat @ w_hat.T


def predict_class(outputs, W=None, eps=1e-11):
    """Argmax class per row; ties go to the lowest index."""
    return np.argmax(class_scores(outputs, W, eps), axis=1)


def frame_log_probs(model, outputs):
    """Per-frame class log-probabilities used for utterance pooling.

    AM-Softmax models use softmax over ``scale_s`` times the cosine, margin excluded.
    """
    cfg = model.config
    if cfg.loss == "am_softmax":
        return log_softmax(cfg.scale_s * class_scores(outputs, model.classifier_weight, cfg.loss_eps))
    return log_softmax(class_scores(outputs))
