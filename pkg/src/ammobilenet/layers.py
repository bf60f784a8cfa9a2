"""MobileNet1D building blocks and the backbone builder."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (Tensor, add, batchnorm1d, conv1d, global_avg_pool1d, linear,
                     relu6)

LOSS_KINDS = ("softmax", "am_softmax")


@dataclass(frozen=True)
class BottleneckSpec:
    expansion_t: int
    out_channels_c: int
    repeats_n: int
    first_stride_s: int

    def strides(self):
        return [self.first_stride_s] + [1] * (self.repeats_n - 1)


# MobileNetV2 stage table with every spatial op made 1D.
DEFAULT_BOTTLENECKS = (
    BottleneckSpec(1, 16, 1, 1),
    BottleneckSpec(6, 24, 2, 2),
    BottleneckSpec(6, 32, 3, 2),
    BottleneckSpec(6, 64, 4, 2),
    BottleneckSpec(6, 96, 3, 1),
    BottleneckSpec(6, 160, 3, 2),
    BottleneckSpec(6, 320, 1, 1),
)

# Narrow variant for CPU-scale training; total stride 64. Its preset widens the
# depthwise kernel to 9 so the receptive field spans several pitch periods.
COMPACT_BOTTLENECKS = (
    BottleneckSpec(1, 8, 1, 2),
    BottleneckSpec(4, 12, 1, 2),
    BottleneckSpec(4, 16, 1, 2),
    BottleneckSpec(4, 24, 1, 2),
    BottleneckSpec(4, 32, 1, 2),
)

TOY_BOTTLENECKS = (BottleneckSpec(1, 4, 1, 1),)


@dataclass
class ModelConfig:
    stem_channels: int = 32
    bottlenecks: tuple = DEFAULT_BOTTLENECKS
    head_channels: int = 1280
    kernel_size: int = 3
    num_classes: int = 462
    window_samples: int = 3200
    loss: str = "am_softmax"
    scale_s: float = 30.0
    margin_m: float = 0.5
    loss_eps: float = 1e-11
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    activation: str = "relu6"

    def __post_init__(self):
        self.bottlenecks = tuple(
            b if isinstance(b, BottleneckSpec) else BottleneckSpec(*b) for b in self.bottlenecks)

    @classmethod
    def preset(cls, name, **overrides):
        presets = {
            "default": {},
            "compact": dict(stem_channels=8, bottlenecks=COMPACT_BOTTLENECKS, head_channels=64,
                            kernel_size=9),
            "toy": dict(stem_channels=4, bottlenecks=TOY_BOTTLENECKS, head_channels=8,
                        window_samples=64),
        }
        if name not in presets:
            raise ConfigurationError(f"unknown architecture preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    def validate(self):
        bad = []
        if self.num_classes < 2:
            bad.append("num_classes (must be >= 2)")
        if self.kernel_size < 1:
            bad.append("kernel_size (must be >= 1)")
        if self.window_samples < self.kernel_size:
            bad.append("window_samples (must be >= kernel_size)")
        if self.stem_channels < 1:
            bad.append("stem_channels (must be >= 1)")
        if self.head_channels < 1:
            bad.append("head_channels (must be >= 1)")
        if self.loss not in LOSS_KINDS:
            bad.append(f"loss (must be one of {LOSS_KINDS})")
        if not self.scale_s > 0:
            bad.append("scale_s (must be > 0)")
        if not 0.0 <= self.margin_m <= 1.0:
            bad.append("margin_m (must lie in [0, 1])")
        if not self.loss_eps > 0:
            bad.append("loss_eps (must be > 0)")
        if not self.bn_eps > 0:
            bad.append("bn_eps (must be > 0)")
        if self.activation != "relu6":
            bad.append("activation (only relu6 is implemented)")
        if not self.bottlenecks:
            bad.append("bottlenecks (need at least one stage)")
        for i, b in enumerate(self.bottlenecks):
            if b.expansion_t < 1 or b.out_channels_c < 1 or b.repeats_n < 1:
                bad.append(f"bottlenecks[{i}] (t, c, n must be positive)")
            if b.first_stride_s not in (1, 2):
                bad.append(f"bottlenecks[{i}].first_stride_s (must be 1 or 2)")
        if bad:
            raise ConfigurationError("invalid ModelConfig field(s): " + ", ".join(bad))
        return self

    @property
    def total_stride(self):
        s = 2
        for b in self.bottlenecks:
            s *= b.first_stride_s
        return s

    def to_dict(self):
        d = asdict(self)
        d["bottlenecks"] = [list(asdict(b).values()) for b in self.bottlenecks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["bottlenecks"] = tuple(BottleneckSpec(*b) for b in d["bottlenecks"])
        return cls(**d)


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor

    @classmethod
    def create(cls, channels, prefix):
        return cls(
            Tensor(np.ones(channels), requires_grad=True, name=f"{prefix}.gamma"),
            Tensor(np.zeros(channels), requires_grad=True, name=f"{prefix}.beta"),
            Tensor(np.zeros(channels), name=f"{prefix}.running_mean"),
            Tensor(np.ones(channels), name=f"{prefix}.running_var"),
        )

    def __call__(self, x, mode, momentum=0.1, eps=1e-5):
        return batchnorm1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           mode=mode, momentum=momentum, eps=eps)


@dataclass
class ConvBN:
    weight: Tensor
    bn: BatchNorm
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def conv(self, x):
        return conv1d(x, self.weight, None, stride=self.stride, padding=self.padding, groups=self.groups)


@dataclass
class InvertedResidual:
    expand: Optional[ConvBN]
    depthwise: ConvBN
    project: ConvBN
    in_channels: int
    out_channels: int
    stride: int

    @property
    def use_residual(self):
        return self.stride == 1 and self.in_channels == self.out_channels


def depthwise_separable_conv1d(x, dw_weight, pw_weight, stride=1, padding=0, bn_params=None,
                               mode="eval", momentum=0.1, eps=1e-5, activation=relu6):
    """Depthwise conv -> BN -> ReLU6 -> pointwise conv -> BN -> ReLU6.

    ``bn_params`` is a pair of :class:`BatchNorm` (depthwise, pointwise), or
    None to skip normalization; ``activation=None`` leaves the path linear.
    """
    channels = x.shape[1]
    if dw_weight.shape[:2] != (channels, 1):
        raise DimensionError(
            f"depthwise weight must be [{channels}, 1, K], got {dw_weight.shape}")
    if pw_weight.data.ndim != 3 or pw_weight.shape[1:] != (channels, 1):
        raise DimensionError(
            f"pointwise weight must be [Cout, {channels}, 1], got {pw_weight.shape}")
    bn_dw, bn_pw = bn_params if bn_params is not None else (None, None)
    act = activation or (lambda t: t)
    h = conv1d(x, dw_weight, None, stride=stride, padding=padding, groups=channels)
    if bn_dw is not None:
        h = bn_dw(h, mode, momentum, eps)
    h = conv1d(act(h), pw_weight, None, stride=1, padding=0, groups=1)
    if bn_pw is not None:
        h = bn_pw(h, mode, momentum, eps)
    return act(h)


def inverted_residual(x, block, mode="eval", momentum=0.1, eps=1e-5):
    """Expand (1x1) -> depthwise -> linear projection, plus identity skip when shapes allow."""
    h = x
    if block.expand is not None:
        h = relu6(block.expand.bn(block.expand.conv(h), mode, momentum, eps))
    h = relu6(block.depthwise.bn(block.depthwise.conv(h), mode, momentum, eps))
    h = block.project.bn(block.project.conv(h), mode, momentum, eps)
    if block.use_residual:
        h = add(h, x)
    return h


class Model:
    """MobileNet1D backbone plus classifier head.

    ``params`` and ``buffers`` are ordered name -> Tensor maps; the order is
    the initialization order and the checkpoint order.
    """

    def __init__(self, config):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}
        self.stem: ConvBN
        self.blocks: list[InvertedResidual] = []
        self.head: ConvBN
        self.classifier_weight: Tensor
        self.classifier_bias: Optional[Tensor] = None
        self.label_map: Optional[dict] = None
        self.extra: dict = {}

    # registration helpers used by build_mobilenet1d
    def _add_param(self, name, t):
        t.name = name
        t.requires_grad = True
        self.params[name] = t
        return t

    def _add_bn(self, prefix, channels):
        bn = BatchNorm.create(channels, prefix)
        self._add_param(f"{prefix}.gamma", bn.gamma)
        self._add_param(f"{prefix}.beta", bn.beta)
        self.buffers[f"{prefix}.running_mean"] = bn.running_mean
        self.buffers[f"{prefix}.running_var"] = bn.running_var
        return bn

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @property
    def head_weight(self):
        return self.classifier_weight

    def embed(self, frames, mode="eval", strict_length=True):
        """Pooled feature vector [B, head_channels] for input frames [B, 1, L]."""
        cfg = self.config
        if not isinstance(frames, Tensor):
            frames = Tensor(frames)
        if frames.data.ndim != 3 or frames.shape[1] != 1:
            raise DimensionError(f"frames must be [B, 1, L], got shape {frames.shape}")
        if strict_length and frames.shape[2] != cfg.window_samples:
            raise DimensionError(
                f"frame length axis is {frames.shape[2]}, model expects {cfg.window_samples}")
        mom, eps = cfg.bn_momentum, cfg.bn_eps
        h = relu6(self.stem.bn(self.stem.conv(frames), mode, mom, eps))
        for block in self.blocks:
            h = inverted_residual(h, block, mode, mom, eps)
        h = relu6(self.head.bn(self.head.conv(h), mode, mom, eps))
        return global_avg_pool1d(h)

    def forward(self, frames, mode="eval", strict_length=True):
        """Logits for a softmax model; pooled features for an AM-Softmax model."""
        feats = self.embed(frames, mode, strict_length)
        if self.config.loss == "am_softmax":
            return feats
        return linear(feats, self.classifier_weight, self.classifier_bias)

    __call__ = forward


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_mobilenet1d(config, seed=1234):
    config.validate()
    rng = np.random.default_rng(seed)
    model = Model(config)
    K = config.kernel_size
    pad = K // 2

    def conv_weight(name, cout, cin_per_group, k):
        w = Tensor(_kaiming_uniform(rng, (cout, cin_per_group, k), cin_per_group * k))
        return model._add_param(name, w)

    c = config.stem_channels
    model.stem = ConvBN(conv_weight("stem.conv.weight", c, 1, 3), model._add_bn("stem.bn", c),
                        stride=2, padding=1)
    idx = 0
    for spec in config.bottlenecks:
        for stride in spec.strides():
            p = f"blocks.{idx}"
            hidden = c * spec.expansion_t
            expand = None
            if spec.expansion_t != 1:
                expand = ConvBN(conv_weight(f"{p}.expand.weight", hidden, c, 1),
                                model._add_bn(f"{p}.expand.bn", hidden))
            dw = ConvBN(conv_weight(f"{p}.depthwise.weight", hidden, 1, K),
                        model._add_bn(f"{p}.depthwise.bn", hidden),
                        stride=stride, padding=pad, groups=hidden)
            proj = ConvBN(conv_weight(f"{p}.project.weight", spec.out_channels_c, hidden, 1),
                          model._add_bn(f"{p}.project.bn", spec.out_channels_c))
            model.blocks.append(InvertedResidual(expand, dw, proj, c, spec.out_channels_c, stride))
            c = spec.out_channels_c
            idx += 1
    hc = config.head_channels
    model.head = ConvBN(conv_weight("head.conv.weight", hc, c, 1), model._add_bn("head.bn", hc))
    model.classifier_weight = model._add_param(
        "classifier.weight",
        Tensor(_kaiming_uniform(rng, (config.num_classes, hc), hc)))
    if config.loss == "softmax":
        model.classifier_bias = model._add_param("classifier.bias", Tensor(np.zeros(config.num_classes)))
    return model


def count_parameters(model):
    """Trainable element count; BN running statistics are excluded."""
    return int(sum(p.size for p in model.params.values()))


def stage_lengths(config, length=None):
    """Temporal length after the stem and after every block."""
    L = config.window_samples if length is None else length
    K = config.kernel_size
    lengths = [(L + 2 - 3) // 2 + 1]
    for spec in config.bottlenecks:
        for stride in spec.strides():
            lengths.append((lengths[-1] + 2 * (K // 2) - K) // stride + 1)
    return lengths
