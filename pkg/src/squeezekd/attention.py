"""Task-driven attention squeeze: collapse each block's feature map into a
compact per-channel descriptor guided by the network's global descriptor.

Per block the estimator (1) aligns the global descriptor to the block's
channel count with a 1x1 convolution, (2) adds it to every spatial position
of the feature map, (3) scores positions with a single-channel 1x1
convolution and a softmax over all H*W positions, and (4) average-pools the
attention-weighted map.  An optional linear projection reshapes the result to
a target width so teacher descriptors can match the student's narrower
blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import Conv2d, Dense, Module, ModuleList, name_parameters
from .tensor import ShapeError, Tensor, concat, global_average_pool, reshape, softmax


@dataclass
class SqueezedDescriptors:
    """Per-block descriptors plus their concatenation in block order."""

    per_block: list  # N tensors [B, C_i]
    concatenated: Tensor  # [B, sum(C_i)]


class AttentionEstimator(Module):
    """Attention-based squeeze for one block.

    ``descriptor_dim`` is the width of the global descriptor, ``channels``
    the block's feature channels, and ``out_dim`` the width of the emitted
    descriptor (defaults to ``channels``; a projection is added otherwise).
    """

    def __init__(self, descriptor_dim, channels, out_dim=None, *, rng, dtype=np.float64):
        super().__init__()
        self.align = Conv2d(descriptor_dim, channels, 1, bias=True, rng=rng, dtype=dtype)
        self.score = Conv2d(channels, 1, 1, bias=False, rng=rng, dtype=dtype)
        if out_dim is None or out_dim == channels:
            self.project = None
            self.out_dim = channels
        else:
            self.project = Dense(channels, out_dim, rng=rng, dtype=dtype)
            self.out_dim = out_dim
        self.descriptor_dim = descriptor_dim
        self.channels = channels

    def forward(self, features: Tensor, descriptor: Tensor) -> Tensor:
        return squeeze_block(features, descriptor, self)

    def attention_map(self, features: Tensor, descriptor: Tensor) -> Tensor:
        """The spatial attention distribution [B,1,H,W] (sums to 1 per sample)."""
        fused = _fuse(features, descriptor, self)
        return _spatial_softmax(self.score(fused))


def _fuse(features: Tensor, descriptor: Tensor, est: AttentionEstimator) -> Tensor:
    B, C, H, W = features.shape
    if descriptor.ndim != 2 or descriptor.shape[0] != B:
        raise ShapeError(
            f"descriptor shape {tuple(descriptor.shape)} does not pair with features {tuple(features.shape)}"
        )
    if descriptor.shape[1] != est.descriptor_dim:
        raise ShapeError(
            f"estimator aligns {est.descriptor_dim}-dim descriptors, got {descriptor.shape[1]}"
        )
    if C != est.channels:
        raise ShapeError(
            f"estimator expects {est.channels} feature channels, got {C}"
        )
    aligned = est.align(reshape(descriptor, (B, descriptor.shape[1], 1, 1)))  # [B,C,1,1]
    return features + aligned  # broadcast over every spatial position


def _spatial_softmax(score_map: Tensor) -> Tensor:
    B, _, H, W = score_map.shape
    flat = softmax(reshape(score_map, (B, H * W)), axis=1)
    return reshape(flat, (B, 1, H, W))


def squeeze_block(features: Tensor, descriptor: Tensor, est: AttentionEstimator) -> Tensor:
    """Squeeze one [B,C,H,W] block into a [B, out_dim] descriptor."""
    fused = _fuse(features, descriptor, est)
    attention = _spatial_softmax(est.score(fused))
    pooled = global_average_pool(attention * fused)
    if est.project is not None:
        pooled = est.project(pooled)
    return pooled


def squeeze_all(block_features, estimators) -> SqueezedDescriptors:
    """Apply one estimator per block and concatenate the results in order."""
    feats = block_features.features
    if len(feats) != len(estimators):
        raise ValueError(
            f"{len(feats)} feature blocks but {len(estimators)} estimators"
        )
    per_block = [
        squeeze_block(f, block_features.global_descriptor, est)
        for f, est in zip(feats, estimators)
    ]
    return SqueezedDescriptors(per_block=per_block, concatenated=concat(per_block, axis=1))


def build_estimators(channels, descriptor_dim, out_dims=None, seed: int = 0,
                     dtype=np.float64) -> ModuleList:
    """One estimator per block; ``out_dims`` reshapes descriptor widths
    (used to project teacher blocks down to the student's widths)."""
    channels = tuple(channels)
    if out_dims is None:
        out_dims = channels
    out_dims = tuple(out_dims)
    if len(out_dims) != len(channels):
        raise ValueError(
            f"{len(channels)} blocks but {len(out_dims)} output widths"
        )
    rng = np.random.default_rng(seed)
    estimators = ModuleList(
        AttentionEstimator(descriptor_dim, c, out_dim=o, rng=rng, dtype=dtype)
        for c, o in zip(channels, out_dims)
    )
    name_parameters(estimators, "attn")
    return estimators


def descriptor_width(estimators) -> int:
    return sum(est.out_dim for est in estimators)
