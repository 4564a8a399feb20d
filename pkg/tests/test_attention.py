import numpy as np
import pytest

from squeezekd.attention import (
    AttentionEstimator,
    build_estimators,
    descriptor_width,
    squeeze_all,
    squeeze_block,
)
from squeezekd.nets import BlockFeatures
from squeezekd.tensor import ShapeError, Tensor, gradient_check, l2_norm_sq


def oracle_squeeze(features, descriptor, est):
    """Straight-line recomputation of the squeeze with plain numpy.

    align as 1x1 conv == per-position affine map of the descriptor; softmax
    over flattened spatial positions; mean pool of the attention-weighted map.
    """
    B, C, H, W = features.shape
    w_align = est.align.weight.data.reshape(C, -1)  # [C, D]
    b_align = est.align.bias.data  # [C]
    w_score = est.score.weight.data.reshape(-1)  # [C]

    out = np.zeros((B, est.out_dim))
    for b in range(B):
        aligned = w_align @ descriptor[b] + b_align  # [C]
        fused = features[b] + aligned[:, None, None]  # [C,H,W]
        scores = np.tensordot(w_score, fused, axes=(0, 0)).reshape(-1)  # [H*W]
        scores = scores - scores.max()
        att = np.exp(scores) / np.exp(scores).sum()
        weighted = fused * att.reshape(1, H, W)
        pooled = weighted.mean(axis=(1, 2))  # [C]
        if est.project is not None:
            pooled = pooled @ est.project.weight.data + est.project.bias.data
        out[b] = pooled
    return out


def make_estimator(descriptor_dim=6, channels=4, out_dim=None, seed=0):
    rng = np.random.default_rng(seed)
    return AttentionEstimator(descriptor_dim, channels, out_dim=out_dim, rng=rng)


class TestSqueezeBlock:
    def test_uniform_attention_on_constant_map(self):
        # constant fused map -> uniform softmax -> spatial mean of c/(H*W)
        est = make_estimator(descriptor_dim=3, channels=2, seed=1)
        est.align.bias.data[:] = 0.0
        c = 1.75
        H = W = 4
        features = Tensor(np.full((1, 2, H, W), c))
        descriptor = Tensor(np.zeros((1, 3)))
        out = squeeze_block(features, descriptor, est)
        np.testing.assert_allclose(out.data, c / (H * W), rtol=1e-12)

    def test_concentrated_attention_hand_case(self):
        # one hot position: output ~= fused value at that position / (H*W)
        est = make_estimator(descriptor_dim=2, channels=1, seed=2)
        est.align.bias.data[:] = 0.0
        est.score.weight.data[:] = 1.0
        features = np.zeros((1, 1, 2, 2))
        features[0, 0, 0, 0] = 50.0  # dominates the softmax
        out = squeeze_block(Tensor(features), Tensor(np.zeros((1, 2))), est)
        np.testing.assert_allclose(out.data, [[50.0 / 4.0]], rtol=1e-10)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(3)
        est = make_estimator(descriptor_dim=6, channels=4, seed=4)
        features = rng.normal(size=(3, 4, 5, 5))
        descriptor = rng.normal(size=(3, 6))
        out = squeeze_block(Tensor(features), Tensor(descriptor), est)
        expected = oracle_squeeze(features, descriptor, est)
        assert np.abs(out.data - expected).max() < 1e-10

    def test_projected_matches_oracle(self):
        rng = np.random.default_rng(5)
        est = make_estimator(descriptor_dim=4, channels=6, out_dim=3, seed=6)
        features = rng.normal(size=(2, 6, 3, 4))
        descriptor = rng.normal(size=(2, 4))
        out = squeeze_block(Tensor(features), Tensor(descriptor), est)
        assert out.shape == (2, 3)
        expected = oracle_squeeze(features, descriptor, est)
        assert np.abs(out.data - expected).max() < 1e-10

    def test_channel_mismatch_raises(self):
        est = make_estimator(descriptor_dim=3, channels=2)
        with pytest.raises(ShapeError, match="feature channels"):
            squeeze_block(Tensor(np.zeros((1, 5, 4, 4))), Tensor(np.zeros((1, 3))), est)

    def test_descriptor_width_mismatch_raises(self):
        est = make_estimator(descriptor_dim=3, channels=2)
        with pytest.raises(ShapeError, match="aligns 3-dim"):
            squeeze_block(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 7))), est)

    def test_attention_map_sums_to_one(self):
        rng = np.random.default_rng(7)
        est = make_estimator(descriptor_dim=5, channels=3, seed=8)
        for _ in range(20):
            f = Tensor(rng.normal(scale=3.0, size=(2, 3, 4, 6)))
            d = Tensor(rng.normal(size=(2, 5)))
            m = est.attention_map(f, d)
            assert (m.data >= 0).all()
            assert np.abs(m.data.sum(axis=(1, 2, 3)) - 1.0).max() < 1e-6

    def test_gradients_through_estimator(self):
        rng = np.random.default_rng(9)
        est = make_estimator(descriptor_dim=3, channels=2, seed=10)
        features = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        descriptor = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        params = [est.align.weight, est.align.bias, est.score.weight]
        err = gradient_check(
            lambda: l2_norm_sq(squeeze_block(features, descriptor, est)),
            params + [features, descriptor],
        )
        assert err < 1e-4


class TestSqueezeAll:
    def _features(self, channels, batch=2, seed=0):
        rng = np.random.default_rng(seed)
        feats = [Tensor(rng.normal(size=(batch, c, 4, 4))) for c in channels]
        descriptor = Tensor(rng.normal(size=(batch, channels[-1])))
        logits = Tensor(rng.normal(size=(batch, 2)))
        return BlockFeatures(features=feats, global_descriptor=descriptor, logits=logits)

    def test_concatenated_width(self):
        channels = (8, 16, 32)
        bf = self._features(channels)
        ests = build_estimators(channels, descriptor_dim=32, seed=0)
        out = squeeze_all(bf, ests)
        assert out.concatenated.shape == (2, 56)
        assert descriptor_width(ests) == 56

    def test_zero_inputs_give_zero_output(self):
        channels = (2, 3)
        feats = [Tensor(np.zeros((2, c, 4, 4))) for c in channels]
        bf = BlockFeatures(feats, Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))
        ests = build_estimators(channels, descriptor_dim=3, seed=1)
        for est in ests:
            est.align.bias.data[:] = 0.0
        out = squeeze_all(bf, ests)
        np.testing.assert_allclose(out.concatenated.data, 0.0, atol=1e-15)

    def test_block_order_permutes_segments(self):
        channels = (2, 3)
        bf = self._features(channels, seed=2)
        ests = build_estimators(channels, descriptor_dim=3, seed=3)
        out = squeeze_all(bf, ests)
        swapped_bf = BlockFeatures(
            [bf.features[1], bf.features[0]], bf.global_descriptor, bf.logits
        )
        swapped = squeeze_all(swapped_bf, [ests[1], ests[0]])
        np.testing.assert_array_equal(swapped.concatenated.data[:, :3], out.concatenated.data[:, 2:])
        np.testing.assert_array_equal(swapped.concatenated.data[:, 3:], out.concatenated.data[:, :2])

    def test_estimator_count_mismatch(self):
        bf = self._features((2, 3))
        ests = build_estimators((2,), descriptor_dim=3)
        with pytest.raises(ValueError, match="estimators"):
            squeeze_all(bf, ests)

    def test_teacher_projection_matches_student_widths(self):
        teacher_channels = (8, 16, 32)
        student_channels = (4, 8, 16)
        ests = build_estimators(teacher_channels, descriptor_dim=32,
                                out_dims=student_channels, seed=4)
        bf = self._features(teacher_channels, seed=5)
        out = squeeze_all(bf, ests)
        assert out.concatenated.shape == (2, sum(student_channels))
