"""Teacher/student backbones, the logit discriminator, and auxiliary heads.

Both backbones are pre-activation residual networks: a stem convolution,
``num_blocks`` stages of residual units (stage i > 0 halves the spatial
size), then norm + relu, global average pooling into the global descriptor,
and a dense classifier producing the logits.  A forward pass returns every
per-stage feature map alongside the descriptor and logits so the
distillation losses can reach inside the pipeline.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    BCE_EPS,
    Parameter,
    ShapeError,
    Tensor,
    batch_norm,
    clamp,
    conv2d,
    dense,
    global_average_pool,
    narrow,
    relu,
    sigmoid,
    softmax,
)


class Module:
    """Minimal composable container for parameters, buffers, and submodules."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        """Attach non-trainable state (e.g. batch-norm running stats)."""
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        for name, p in self._parameters.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (f"{prefix}.{name}" if prefix else name), b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def train(self):
        self._set_training(True)
        return self

    def eval(self):
        self._set_training(False)
        return self

    def _set_training(self, flag):
        object.__setattr__(self, "training", flag)
        for child in self._children.values():
            child._set_training(flag)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list = []
        for m in modules:
            self.append(m)

    def append(self, module):
        self._children[str(len(self._list))] = module
        self._list.append(module)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, idx):
        return self._list[idx]


@contextlib.contextmanager
def frozen(module: Module):
    """Temporarily stop gradient deposits into a module's parameters.

    Gradients still flow *through* the module's ops to upstream tensors.
    """
    params = module.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def name_parameters(module: Module, root: str) -> None:
    """Assign dotted-path names under ``root``; names must be unique."""
    seen = set()
    for name, p in module.named_parameters(root):
        if name in seen:
            raise ValueError(f"duplicate parameter name {name!r}")
        seen.add(name)
        p.name = name


def count_parameters(module: Module) -> int:
    return sum(p.size for p in module.parameters())


# -- layers ---------------------------------------------------------------------


class Conv2d(Module):
    """Convolution with fan-in-scaled Gaussian weights and zero bias."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias=True, *, rng, dtype=np.float64):
        super().__init__()
        k = kernel_size
        std = math.sqrt(2.0 / (in_channels * k * k))
        self.weight = Parameter(rng.normal(0.0, std, size=(out_channels, in_channels, k, k)), dtype=dtype)
        if bias:
            self.bias = Parameter(np.zeros(out_channels), dtype=dtype)
        else:
            self.bias = None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape((1, -1, 1, 1))
        return out


class Dense(Module):
    def __init__(self, in_dim, out_dim, bias=True, *, rng, dtype=np.float64):
        super().__init__()
        std = math.sqrt(1.0 / in_dim)
        self.weight = Parameter(rng.normal(0.0, std, size=(in_dim, out_dim)), dtype=dtype)
        self.bias = Parameter(np.zeros(out_dim), dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Per-channel normalization; batch stats in train mode, running stats in eval."""

    def __init__(self, channels, momentum=0.9, eps=1e-5, *, dtype=np.float64):
        super().__init__()
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class PreactUnit(Module):
    """Pre-activation residual unit: bn-relu-conv3x3-bn-relu-conv3x3 + shortcut."""

    def __init__(self, in_channels, out_channels, stride, *, rng, dtype=np.float64):
        super().__init__()
        self.bn1 = BatchNorm2d(in_channels, dtype=dtype)
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride, padding=1,
                            bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, stride=1, padding=1,
                            bias=False, rng=rng, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv2d(in_channels, out_channels, 1, stride=stride,
                                   bias=False, rng=rng, dtype=dtype)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(x))
        out = self.conv2(relu(self.bn2(self.conv1(h))))
        skip = x if self.shortcut is None else self.shortcut(h)
        return out + skip


# -- backbone -------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneSpec:
    """Shape of a residual backbone: stage widths/depths plus the task size."""

    num_blocks: int
    channels_per_block: tuple
    layers_per_block: tuple
    num_classes: int
    input_shape: tuple  # (channels, H, W)

    def __post_init__(self):
        object.__setattr__(self, "channels_per_block", tuple(int(c) for c in self.channels_per_block))
        object.__setattr__(self, "layers_per_block", tuple(int(l) for l in self.layers_per_block))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if len(self.channels_per_block) != self.num_blocks:
            raise ValueError(
                f"channels_per_block has {len(self.channels_per_block)} entries for {self.num_blocks} blocks"
            )
        if len(self.layers_per_block) != self.num_blocks:
            raise ValueError(
                f"layers_per_block has {len(self.layers_per_block)} entries for {self.num_blocks} blocks"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (channels, H, W), got {self.input_shape}")

    @property
    def descriptor_dim(self) -> int:
        return self.channels_per_block[-1]

    def to_dict(self):
        return {
            "num_blocks": self.num_blocks,
            "channels_per_block": list(self.channels_per_block),
            "layers_per_block": list(self.layers_per_block),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            num_blocks=d["num_blocks"],
            channels_per_block=tuple(d["channels_per_block"]),
            layers_per_block=tuple(d["layers_per_block"]),
            num_classes=d["num_classes"],
            input_shape=tuple(d["input_shape"]),
        )


@dataclass
class BlockFeatures:
    """Everything one forward pass exposes: per-stage maps, descriptor, logits."""

    features: list  # N tensors [B, C_i, H_i, W_i]
    global_descriptor: Tensor  # [B, D], the vector feeding the classifier
    logits: Tensor  # [B, C]


class Backbone(Module):
    def __init__(self, spec: BackboneSpec, *, rng, dtype=np.float64):
        super().__init__()
        c, h, w = spec.input_shape
        min_size = 2 ** (spec.num_blocks - 1)
        if min(h, w) < min_size:
            raise ValueError(
                f"input spatial size {h}x{w} cannot sustain {spec.num_blocks - 1} "
                f"downsampling stages (needs at least {min_size}x{min_size})"
            )
        self.spec = spec
        channels = spec.channels_per_block
        self.stem = Conv2d(c, channels[0], 3, stride=1, padding=1, bias=False, rng=rng, dtype=dtype)
        stages = ModuleList()
        in_ch = channels[0]
        for i, (ch, n_units) in enumerate(zip(channels, spec.layers_per_block)):
            units = ModuleList()
            for u in range(n_units):
                stride = 2 if (i > 0 and u == 0) else 1
                units.append(PreactUnit(in_ch, ch, stride, rng=rng, dtype=dtype))
                in_ch = ch
            stages.append(units)
        self.stages = stages
        self.head_norm = BatchNorm2d(channels[-1], dtype=dtype)
        self.classifier = Dense(channels[-1], spec.num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> BlockFeatures:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"batch shape {tuple(x.shape)} does not match input spec {self.spec.input_shape}"
            )
        h = self.stem(x)
        features = []
        for stage in self.stages:
            for unit in stage:
                h = unit(h)
            features.append(h)
        head = relu(self.head_norm(h))
        descriptor = global_average_pool(head)
        logits = self.classifier(descriptor)
        return BlockFeatures(features=features, global_descriptor=descriptor, logits=logits)


# -- discriminator and auxiliary head ----------------------------------------------


@dataclass
class DiscriminatorOutput:
    """Sigmoid origin score (teacher vs student) plus raw per-class logits."""

    real_score: Tensor  # [B, 1], strictly in (0, 1)
    class_logits: Tensor  # [B, C]


class Discriminator(Module):
    """Three stacked dense layers over backbone logits.

    Hidden widths equal the input width; the final layer is 1+C wide: one
    sigmoid unit scoring teacher-vs-student origin, C raw class logits.
    """

    def __init__(self, input_dim, num_classes, *, rng, dtype=np.float64):
        super().__init__()
        self.fc1 = Dense(input_dim, input_dim, rng=rng, dtype=dtype)
        self.fc2 = Dense(input_dim, input_dim, rng=rng, dtype=dtype)
        self.fc3 = Dense(input_dim, 1 + num_classes, rng=rng, dtype=dtype)
        self.input_dim = input_dim
        self.num_classes = num_classes

    def layer_widths(self):
        return [self.input_dim, self.input_dim, self.input_dim, 1 + self.num_classes]

    def forward(self, logits: Tensor) -> DiscriminatorOutput:
        h = relu(self.fc1(logits))
        h = relu(self.fc2(h))
        out = self.fc3(h)
        # the sigmoid saturates to exactly 0/1 in floating point; keep the
        # score strictly interior so downstream log terms stay finite
        score = clamp(sigmoid(narrow(out, 1, 0, 1)), BCE_EPS, 1.0 - BCE_EPS)
        return DiscriminatorOutput(
            real_score=score,
            class_logits=narrow(out, 1, 1, self.num_classes),
        )


class AuxHead(Module):
    """One dense layer from the concatenated descriptors to class probabilities."""

    def __init__(self, descriptor_dim, num_classes, *, rng, dtype=np.float64):
        super().__init__()
        self.fc = Dense(descriptor_dim, num_classes, rng=rng, dtype=dtype)

    def forward(self, descriptors: Tensor) -> Tensor:
        return self.fc(descriptors)

    def probabilities(self, descriptors: Tensor) -> Tensor:
        return softmax(self.forward(descriptors), axis=1)


# -- builders --------------------------------------------------------------------


def build_backbone(spec: BackboneSpec, seed: int, dtype=np.float64) -> Backbone:
    net = Backbone(spec, rng=np.random.default_rng(seed), dtype=dtype)
    name_parameters(net, "backbone")
    return net


def build_discriminator(num_classes: int, input_dim: int | None = None, seed: int = 0,
                        dtype=np.float64) -> Discriminator:
    if input_dim is None:
        input_dim = num_classes
    if input_dim < 1:
        raise ValueError(f"discriminator input_dim must be >= 1, got {input_dim}")
    net = Discriminator(input_dim, num_classes, rng=np.random.default_rng(seed), dtype=dtype)
    name_parameters(net, "discriminator")
    return net


def build_aux_head(descriptor_dim: int, num_classes: int, seed: int = 0,
                   dtype=np.float64) -> AuxHead:
    net = AuxHead(descriptor_dim, num_classes, rng=np.random.default_rng(seed), dtype=dtype)
    name_parameters(net, "aux")
    return net
