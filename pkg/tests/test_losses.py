import numpy as np
import pytest

from squeezekd.attention import SqueezedDescriptors
from squeezekd.losses import (
    ROLE_DISCRIMINATOR,
    ROLE_STUDENT,
    LossBundle,
    LossWeights,
    NonFiniteLossError,
    adversarial_losses,
    backbone_loss,
    intermediate_loss,
    total_loss,
)
from squeezekd.nets import build_discriminator
from squeezekd.tensor import Tensor


def oracle_bce(p, t, eps=1e-7):
    p = np.clip(np.asarray(p, dtype=float), eps, 1 - eps)
    return float(-(t * np.log(p) + (1 - t) * np.log(1 - p)).mean())


def oracle_ce(logits, labels):
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


class TestBackboneLoss:
    def test_identical_logits_zero(self):
        l = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        assert backbone_loss(l, l).item() == 0.0

    def test_hand_value(self):
        out = backbone_loss(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[0.0, 0.0]])))
        assert out.item() == 5.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
        assert backbone_loss(a, b).item() == backbone_loss(b, a).item()

    def test_batch_size_invariance(self):
        row_s = np.array([[1.0, -2.0, 0.5]])
        row_t = np.array([[0.0, 1.0, 1.5]])
        one = backbone_loss(Tensor(row_s), Tensor(row_t)).item()
        many = backbone_loss(Tensor(np.repeat(row_s, 7, 0)), Tensor(np.repeat(row_t, 7, 0))).item()
        assert abs(one - many) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            backbone_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestIntermediateLoss:
    def test_identical_descriptors_zero(self):
        d = Tensor(np.random.default_rng(2).normal(size=(3, 6)))
        assert intermediate_loss(d, d).item() == 0.0

    def test_unit_gap_per_sample(self):
        s = Tensor(np.zeros((4, 5)))
        t_arr = np.zeros((4, 5))
        t_arr[:, 2] = 1.0  # unit vector difference per sample
        assert intermediate_loss(s, Tensor(t_arr)).item() == 1.0

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(3)
        s, t = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        out = intermediate_loss(Tensor(s), Tensor(t)).item()
        expected = float(((s - t) ** 2).sum(axis=1).mean())
        assert abs(out - expected) < 1e-12

    def test_accepts_descriptor_bundles(self):
        rng = np.random.default_rng(4)
        s, t = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        sd = SqueezedDescriptors(per_block=[], concatenated=Tensor(s))
        td = SqueezedDescriptors(per_block=[], concatenated=Tensor(t))
        assert intermediate_loss(sd, td).item() == intermediate_loss(Tensor(s), Tensor(t)).item()

    def test_teacher_side_detached(self):
        s = Tensor(np.ones((2, 3)), requires_grad=True)
        t = Tensor(np.zeros((2, 3)), requires_grad=True)
        intermediate_loss(s, t).backward()
        assert s.grad is not None
        assert t.grad is None

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="widths differ"):
            intermediate_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


class TestAdversarialLosses:
    def _neutral_disc(self, num_classes, batch=4):
        # zeroed final layer: real_score 0.5, uniform class logits
        d = build_discriminator(num_classes=num_classes, seed=0)
        d.fc3.weight.data[:] = 0.0
        d.fc3.bias.data[:] = 0.0
        rng = np.random.default_rng(1)
        l_t = Tensor(rng.normal(size=(batch, num_classes)))
        l_s = Tensor(rng.normal(size=(batch, num_classes)))
        labels = rng.integers(0, num_classes, size=batch)
        return d, l_t, l_s, labels

    def test_neutral_discriminator_analytic_constant(self):
        for c in (2, 5):
            d, l_t, l_s, labels = self._neutral_disc(c)
            weights = LossWeights(mu=0.0)
            loss, parts = adversarial_losses(d, l_t, l_s, labels, weights, ROLE_DISCRIMINATOR)
            expected = 2 * np.log(2) + 2 * np.log(c)
            assert abs(loss.item() - expected) < 1e-9
            assert abs(parts["l_adv_o"] - 2 * np.log(2)) < 1e-9
            assert abs(parts["l_adv_c"] - 2 * np.log(c)) < 1e-9
            assert parts["l_reg"] == 0.0

    def test_perfect_discriminator_limits(self):
        # rig the final layer so teacher scores ~1 and student ~0
        d = build_discriminator(num_classes=2, input_dim=1, seed=2)
        d.fc1.weight.data[:] = np.eye(1)
        d.fc1.bias.data[:] = 0.0
        d.fc2.weight.data[:] = np.eye(1)
        d.fc2.bias.data[:] = 0.0
        d.fc3.weight.data[:] = 0.0
        d.fc3.bias.data[:] = 0.0
        d.fc3.weight.data[0, 0] = 50.0  # real head saturates with its input
        l_t = Tensor(np.full((3, 1), 1.0))   # relu keeps +1 -> score sigmoid(50)
        l_s = Tensor(np.full((3, 1), -1.0))  # relu kills -1 -> score sigmoid(0)... use bias
        d.fc3.bias.data[0] = -25.0           # teacher: 50-25=25 -> ~1; student: -25 -> ~0
        labels = np.zeros(3, dtype=int)
        loss_d, parts_d = adversarial_losses(d, l_t, l_s, labels, LossWeights(mu=0.0), ROLE_DISCRIMINATOR)
        assert parts_d["l_adv_o"] < 1e-6
        loss_s, parts_s = adversarial_losses(d, l_t, l_s, labels, LossWeights(mu=0.0), ROLE_STUDENT)
        assert parts_s["l_adv_o"] > 5.0

    def test_matches_straight_line_recomputation(self):
        rng = np.random.default_rng(5)
        d = build_discriminator(num_classes=3, seed=6)
        l_t = rng.normal(size=(6, 3))
        l_s = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, size=6)
        weights = LossWeights(mu=0.7)
        loss, parts = adversarial_losses(
            d, Tensor(l_t), Tensor(l_s), labels, weights, ROLE_DISCRIMINATOR
        )

        def disc_forward(x):
            h = np.maximum(x @ d.fc1.weight.data + d.fc1.bias.data, 0.0)
            h = np.maximum(h @ d.fc2.weight.data + d.fc2.bias.data, 0.0)
            out = h @ d.fc3.weight.data + d.fc3.bias.data
            return 1.0 / (1.0 + np.exp(-out[:, :1])), out[:, 1:]

        rt, ct = disc_forward(l_t)
        rs, cs = disc_forward(l_s)
        adv_o = oracle_bce(rt, 1.0) + oracle_bce(rs, 0.0)
        penalty = sum(
            float(np.abs(p.data).sum() + (p.data ** 2).sum()) for p in d.parameters()
        )
        reg = 0.7 * (penalty + oracle_bce(rs, 1.0))
        adv_c = oracle_ce(ct, labels) + oracle_ce(cs, labels)
        assert abs(loss.item() - (adv_o + reg + adv_c)) < 1e-10
        assert abs(parts["l_adv_o"] - adv_o) < 1e-10
        assert abs(parts["l_reg"] - reg) < 1e-10
        assert abs(parts["l_adv_c"] - adv_c) < 1e-10

    def test_student_role_matches_recomputation(self):
        rng = np.random.default_rng(7)
        d = build_discriminator(num_classes=4, seed=8)
        l_s = rng.normal(size=(5, 4))
        labels = rng.integers(0, 4, size=5)
        loss, parts = adversarial_losses(
            d, Tensor(np.zeros((5, 4))), Tensor(l_s), labels, LossWeights(), ROLE_STUDENT
        )
        h = np.maximum(l_s @ d.fc1.weight.data + d.fc1.bias.data, 0.0)
        h = np.maximum(h @ d.fc2.weight.data + d.fc2.bias.data, 0.0)
        out = h @ d.fc3.weight.data + d.fc3.bias.data
        rs = 1.0 / (1.0 + np.exp(-out[:, :1]))
        expected = oracle_bce(rs, 1.0) + oracle_ce(out[:, 1:], labels)
        assert abs(loss.item() - expected) < 1e-10
        assert parts["l_reg"] == 0.0

    def test_label_out_of_range(self):
        d, l_t, l_s, _ = self._neutral_disc(3)
        with pytest.raises(ValueError, match="out of range"):
            adversarial_losses(d, l_t, l_s, np.array([0, 1, 3, 2]), LossWeights(), ROLE_STUDENT)

    def test_unknown_role(self):
        d, l_t, l_s, labels = self._neutral_disc(2)
        with pytest.raises(ValueError, match="unknown role"):
            adversarial_losses(d, l_t, l_s, labels, LossWeights(), "warmup")


class TestGradientIsolation:
    def test_discriminator_step_leaves_student_untouched(self):
        rng = np.random.default_rng(9)
        d = build_discriminator(num_classes=2, seed=10)
        w_s = Tensor(rng.normal(size=(3, 2)), requires_grad=True)  # stand-in student weights
        l_s = w_s * 2.0
        l_t = Tensor(rng.normal(size=(3, 2)))
        labels = np.array([0, 1, 0])
        loss, _ = adversarial_losses(d, l_t, l_s, labels, LossWeights(), ROLE_DISCRIMINATOR)
        loss.backward()
        assert w_s.grad is None
        assert all(p.grad is not None for p in d.parameters())

    def test_student_step_leaves_discriminator_untouched(self):
        rng = np.random.default_rng(11)
        d = build_discriminator(num_classes=2, seed=12)
        w_s = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        l_s = w_s * 2.0
        labels = np.array([1, 0, 1])
        loss, _ = adversarial_losses(
            d, Tensor(np.zeros((3, 2))), l_s, labels, LossWeights(), ROLE_STUDENT
        )
        loss.backward()
        assert w_s.grad is not None and np.isfinite(w_s.grad).all()
        assert all(p.grad is None for p in d.parameters())


class TestTotalLoss:
    def test_all_zero(self):
        bundle = total_loss(ROLE_STUDENT, LossWeights())
        assert bundle.total == 0.0

    def test_unit_weights(self):
        bundle = total_loss(ROLE_STUDENT, LossWeights(), l_b=1.0, l_adv_o=2.0, l_is=3.0)
        assert bundle.total == 6.0
        assert bundle.l_adv == 2.0

    def test_weighted_combination(self):
        w = LossWeights(lambda1=2.0, lambda2=0.0, lambda3=1.0)
        bundle = total_loss(ROLE_STUDENT, w, l_b=1.0, l_adv_o=5.0, l_is=3.0)
        assert bundle.total == 5.0

    def test_composition_invariants(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            w = LossWeights(*rng.random(4))
            vals = rng.random(5)
            b = total_loss(ROLE_DISCRIMINATOR, w, l_b=vals[0], l_adv_o=vals[1],
                           l_reg=vals[2], l_adv_c=vals[3], l_is=vals[4])
            assert abs(b.l_adv - (b.l_adv_o + b.l_reg + b.l_adv_c)) <= 1e-6 * max(1.0, abs(b.l_adv))
            composed = w.lambda1 * b.l_b + w.lambda2 * b.l_adv + w.lambda3 * b.l_is
            assert abs(b.total - composed) <= 1e-6 * max(1.0, abs(b.total))

    def test_nan_part_identified(self):
        with pytest.raises(NonFiniteLossError, match="l_is"):
            total_loss(ROLE_STUDENT, LossWeights(), l_is=float("nan"))
        with pytest.raises(NonFiniteLossError, match="l_adv_o"):
            total_loss(ROLE_STUDENT, LossWeights(), l_adv_o=float("inf"))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="lambda2"):
            LossWeights(lambda2=-0.1)

    def test_bundle_round_trips_as_dict(self):
        b = total_loss(ROLE_STUDENT, LossWeights(), l_b=0.5, l_is=0.25)
        assert LossBundle(**b.as_dict()) == b
