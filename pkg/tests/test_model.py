import math

import numpy as np
import pytest
from _fd import central_diff, max_rel_err

from conftest import make_bank
from tailadapt.dataio import EmbeddingSet
from tailadapt.errors import (
    InvalidArgumentError,
    InvalidConfigError,
    InvalidDatasetError,
    ShapeError,
)
from tailadapt.model import (
    AdapterParams,
    EnsemblerParams,
    HeadConfig,
    adapter_forward,
    adapter_forward_batch,
    branch_logits,
    branch_logits_batch,
    ce_loss,
    ensemble_logits,
    ensemble_logits_batch,
    focal_loss,
    init_adapter,
    init_ensembler,
    linear_probe_train,
    stage1_backward,
    stage1_backward_batch,
    stage2_backward,
    stage2_backward_batch,
    zero_shot_logits,
    zero_shot_logits_batch,
)
from tailadapt.optim import SgdHyper


class TestAdapterForward:
    def test_identity_weight_is_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            params = AdapterParams(weight=np.eye(5), gate=float(rng.uniform(-3, 3)))
            feat = rng.standard_normal(5)
            np.testing.assert_array_equal(adapter_forward(params, feat), feat)

    def test_saturated_gate_returns_raw(self):
        rng = np.random.default_rng(1)
        params = AdapterParams(weight=rng.standard_normal((4, 4)), gate=50.0)
        feat = rng.standard_normal(4)
        np.testing.assert_allclose(adapter_forward(params, feat), feat, atol=1e-12)

    def test_zero_weight_midpoint(self):
        params = AdapterParams(weight=np.zeros((2, 2)), gate=0.0)
        np.testing.assert_allclose(adapter_forward(params, [2.0, 4.0]), [1.0, 2.0])

    def test_convex_combination_property(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            dim = 4
            params = AdapterParams(
                weight=rng.standard_normal((dim, dim)), gate=float(rng.uniform(-4, 4))
            )
            feat = rng.standard_normal(dim)
            fused = adapter_forward(params, feat)
            adapted = params.weight @ feat
            # fused must lie on the segment between feat and adapted
            direction = adapted - feat
            offset = fused - feat
            t = offset @ direction / (direction @ direction)
            assert -1e-12 <= t <= 1.0 + 1e-12
            np.testing.assert_allclose(offset, t * direction, atol=1e-9)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        params = AdapterParams(weight=rng.standard_normal((6, 6)), gate=0.7)
        feats = rng.standard_normal((9, 6))
        batched = adapter_forward_batch(params, feats)
        for i in range(9):
            np.testing.assert_allclose(batched[i], adapter_forward(params, feats[i]), atol=1e-14)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            adapter_forward(AdapterParams(weight=np.eye(3)), np.ones(4))


class TestBranchLogits:
    def test_anchor_aligned_feature(self):
        bank = make_bank(4, 6)
        params = AdapterParams(weight=np.eye(6), gate=0.0)
        logits = branch_logits(params, bank, bank.anchors[0].copy(), HeadConfig(tau=1.0))
        np.testing.assert_allclose(logits, [1.0, 0.0, 0.0, 0.0], atol=1e-10)

    def test_temperature_scales_logits(self):
        bank = make_bank(4, 6)
        params = AdapterParams(weight=np.eye(6), gate=0.0)
        feat = bank.anchors[0].copy()
        hot = branch_logits(params, bank, feat, HeadConfig(tau=0.01))
        np.testing.assert_allclose(hot, [100.0, 0.0, 0.0, 0.0], atol=1e-8)

    def test_two_anchor_diagonal(self):
        bank = make_bank(2, 2, orthonormal=False)
        bank.anchors = np.eye(2)
        params = AdapterParams(weight=np.eye(2), gate=0.0)
        logits = branch_logits(params, bank, np.array([1.0, 1.0]), HeadConfig(tau=1.0))
        np.testing.assert_allclose(logits, [1 / math.sqrt(2)] * 2, atol=1e-12)

    def test_argmax_invariant_to_tau(self):
        rng = np.random.default_rng(4)
        bank = make_bank(5, 8)
        for _ in range(50):
            params = AdapterParams(weight=np.eye(8) + 0.1 * rng.standard_normal((8, 8)))
            feat = rng.standard_normal(8)
            winners = {
                int(np.argmax(branch_logits(params, bank, feat, HeadConfig(tau=tau))))
                for tau in (0.01, 0.5, 1.0, 10.0)
            }
            assert len(winners) == 1


class TestZeroShot:
    def test_equals_identity_branch_exactly(self):
        rng = np.random.default_rng(5)
        bank = make_bank(5, 8)
        head = HeadConfig(tau=0.7)
        for _ in range(100):
            params = AdapterParams(weight=np.eye(8), gate=float(rng.uniform(-3, 3)))
            feat = rng.standard_normal(8)
            np.testing.assert_array_equal(
                zero_shot_logits(bank, feat, head), branch_logits(params, bank, feat, head)
            )

    def test_orthogonal_feature_gives_zeros(self):
        bank = make_bank(3, 8)
        # build a vector orthogonal to all three anchors from the orthonormal basis remainder
        rng = np.random.default_rng(6)
        feat = rng.standard_normal(8)
        feat -= bank.anchors.T @ (bank.anchors @ feat)
        logits = zero_shot_logits(bank, feat, HeadConfig(tau=1.0))
        np.testing.assert_allclose(logits, np.zeros(3), atol=1e-10)

    def test_antipodal_feature(self):
        bank = make_bank(3, 8)
        logits = zero_shot_logits(bank, -bank.anchors[0], HeadConfig(tau=1.0))
        assert abs(logits[0] + 1.0) < 1e-12

    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        bank = make_bank(4, 6)
        feats = rng.standard_normal((11, 6))
        batched = zero_shot_logits_batch(bank, feats, HeadConfig(tau=0.3))
        for i in range(11):
            np.testing.assert_allclose(
                batched[i], zero_shot_logits(bank, feats[i], HeadConfig(tau=0.3)), atol=1e-12
            )


class TestLosses:
    def test_ce_confident_prediction(self):
        logits = np.array([30.0, 0.0, 0.0])
        assert ce_loss(logits, 0) < 1e-12

    def test_ce_uniform(self):
        assert abs(ce_loss(np.zeros(4), 2) - math.log(4.0)) < 1e-12

    def test_ce_quarter_probability(self):
        # softmax([ln3, 0]) = [3/4, 1/4]; label 1 has p = 0.25
        assert abs(ce_loss(np.array([math.log(3.0), 0.0]), 1) - math.log(4.0)) < 1e-12

    def test_ce_label_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            ce_loss(np.zeros(3), 3)

    def test_focal_gamma_zero_equals_ce(self):
        rng = np.random.default_rng(8)
        for _ in range(300):
            logits = rng.uniform(-30, 30, size=rng.integers(2, 9))
            label = int(rng.integers(len(logits)))
            assert abs(focal_loss(logits, label, 0.0) - ce_loss(logits, label)) < 1e-12

    def test_focal_certain_prediction(self):
        assert focal_loss(np.array([200.0, 0.0]), 0, 2.0) == 0.0

    def test_focal_half_probability(self):
        # p_t = 0.5, gamma = 2 -> 0.25 * ln 2
        loss = focal_loss(np.array([1.0, 1.0]), 0, 2.0)
        assert abs(loss - 0.25 * math.log(2.0)) < 1e-12

    def test_focal_negative_gamma_rejected(self):
        with pytest.raises(InvalidArgumentError):
            focal_loss(np.zeros(2), 0, -1.0)


class TestEnsembleForward:
    def test_logit_averaging_identity(self):
        rng = np.random.default_rng(9)
        bank = make_bank(4, 6)
        ens = init_ensembler("logit", 4, 6)
        logit = rng.standard_normal(4)
        z = ensemble_logits(ens, np.zeros(6), np.zeros(6), logit, logit, bank, HeadConfig())
        np.testing.assert_allclose(z, logit, atol=1e-14)

    def test_logit_projection(self):
        rng = np.random.default_rng(10)
        bank = make_bank(3, 5)
        ens = EnsemblerParams(
            mode="logit", weight=np.hstack([np.eye(3), np.zeros((3, 3))]), bias=np.zeros(3)
        )
        lw, lr_ = rng.standard_normal(3), rng.standard_normal(3)
        z = ensemble_logits(ens, np.zeros(5), np.zeros(5), lw, lr_, bank, HeadConfig())
        np.testing.assert_allclose(z, lw, atol=1e-14)

    def test_feature_projection_reduces_to_branch(self):
        bank = make_bank(4, 6)
        ens = EnsemblerParams(
            mode="feature", weight=np.hstack([np.eye(6), np.zeros((6, 6))]), bias=np.zeros(6)
        )
        z = ensemble_logits(
            ens, bank.anchors[0].copy(), np.ones(6), np.zeros(4), np.zeros(4),
            bank, HeadConfig(tau=1.0),
        )
        np.testing.assert_allclose(z, [1.0, 0.0, 0.0, 0.0], atol=1e-10)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(11)
        bank = make_bank(3, 4)
        head = HeadConfig(tau=0.5)
        for mode in ("logit", "feature"):
            n = 3 if mode == "logit" else 4
            ens = EnsemblerParams(
                mode=mode,
                weight=0.5 * np.hstack([np.eye(n), np.eye(n)]) + 0.1 * rng.standard_normal((n, 2 * n)),
                bias=0.1 * rng.standard_normal(n),
            )
            fw, fr = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
            lw, lr_ = rng.standard_normal((7, 3)), rng.standard_normal((7, 3))
            batched = ensemble_logits_batch(ens, fw, fr, lw, lr_, bank, head)
            for i in range(7):
                np.testing.assert_allclose(
                    batched[i],
                    ensemble_logits(ens, fw[i], fr[i], lw[i], lr_[i], bank, head),
                    atol=1e-12,
                )

    def test_width_mismatch(self):
        bank = make_bank(3, 4)
        ens = init_ensembler("logit", 3, 4)
        with pytest.raises(ShapeError):
            ensemble_logits(ens, np.zeros(4), np.zeros(4), np.zeros(2), np.zeros(2),
                            bank, HeadConfig())


class TestStage1Backward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        for trial in range(6):
            dim, classes = (4, 3) if trial % 2 == 0 else (6, 5)
            bank = make_bank(classes, dim, rng=rng, orthonormal=False)
            head = HeadConfig(tau=float(rng.uniform(0.3, 2.0)))
            params = AdapterParams(
                weight=np.eye(dim) + 0.4 * rng.standard_normal((dim, dim)),
                gate=float(rng.uniform(-2, 2)),
            )
            feat = rng.standard_normal(dim)
            label = int(rng.integers(classes))
            _, grads = stage1_backward(params, bank, feat, label, head)

            fd_weight = central_diff(
                lambda: ce_loss(branch_logits(params, bank, feat, head), label), params.weight
            )
            gate_box = np.array([params.gate])

            def gate_loss():
                probe = AdapterParams(weight=params.weight, gate=float(gate_box[0]))
                return ce_loss(branch_logits(probe, bank, feat, head), label)

            fd_gate = central_diff(gate_loss, gate_box)
            assert max_rel_err(grads.adapter_weight, fd_weight) < 1e-5
            assert max_rel_err(np.array([grads.adapter_gate]), fd_gate) < 1e-5

    def test_loss_value_matches_forward(self):
        rng = np.random.default_rng(13)
        bank = make_bank(4, 5)
        head = HeadConfig(tau=0.5)
        params = AdapterParams(weight=np.eye(5) + 0.2 * rng.standard_normal((5, 5)), gate=0.3)
        feat = rng.standard_normal(5)
        loss, _ = stage1_backward(params, bank, feat, 2, head)
        assert abs(loss - ce_loss(branch_logits(params, bank, feat, head), 2)) < 1e-12

    def test_near_stationary_at_confident_minimum(self):
        bank = make_bank(4, 6)
        params = AdapterParams(weight=np.eye(6), gate=0.0)
        feat = bank.anchors[0].copy()
        _, grads = stage1_backward(params, bank, feat, 0, HeadConfig(tau=0.05))
        total = math.hypot(float(np.linalg.norm(grads.adapter_weight)), grads.adapter_gate)
        assert total < 1e-6

    def test_saturated_gate_kills_gate_gradient(self):
        rng = np.random.default_rng(14)
        bank = make_bank(3, 4)
        params = AdapterParams(weight=rng.standard_normal((4, 4)), gate=50.0)
        _, grads = stage1_backward(params, bank, rng.standard_normal(4), 1, HeadConfig(tau=0.01))
        assert abs(grads.adapter_gate) < 1e-10

    def test_bundle_has_no_ensembler_grads(self):
        bank = make_bank(3, 4)
        params = AdapterParams(weight=np.eye(4), gate=0.0)
        _, grads = stage1_backward(params, bank, np.ones(4), 0, HeadConfig())
        assert grads.ensembler_weight is None and grads.ensembler_bias is None

    def test_batch_is_mean_of_singles(self):
        rng = np.random.default_rng(15)
        bank = make_bank(4, 5)
        head = HeadConfig(tau=0.7)
        params = AdapterParams(weight=np.eye(5) + 0.3 * rng.standard_normal((5, 5)), gate=-0.4)
        feats = rng.standard_normal((6, 5))
        labels = rng.integers(0, 4, size=6)
        loss_b, grads_b = stage1_backward_batch(params, bank, feats, labels, head)
        singles = [stage1_backward(params, bank, feats[i], int(labels[i]), head) for i in range(6)]
        assert abs(loss_b - np.mean([s[0] for s in singles])) < 1e-12
        np.testing.assert_allclose(
            grads_b.adapter_weight,
            np.mean([s[1].adapter_weight for s in singles], axis=0),
            atol=1e-12,
        )
        assert abs(grads_b.adapter_gate - np.mean([s[1].adapter_gate for s in singles])) < 1e-12


class TestStage2Backward:
    @pytest.mark.parametrize("mode", ["logit", "feature"])
    @pytest.mark.parametrize("gamma", [0.0, 2.0])
    def test_matches_finite_differences(self, mode, gamma):
        rng = np.random.default_rng(16)
        dim, classes = 5, 4
        bank = make_bank(classes, dim, rng=rng, orthonormal=False)
        head = HeadConfig(tau=float(rng.uniform(0.3, 2.0)))
        n = classes if mode == "logit" else dim
        ens = EnsemblerParams(
            mode=mode,
            weight=0.5 * np.hstack([np.eye(n), np.eye(n)]) + 0.2 * rng.standard_normal((n, 2 * n)),
            bias=0.1 * rng.standard_normal(n),
        )
        fw, fr = rng.standard_normal(dim), rng.standard_normal(dim)
        lw, lr_ = rng.standard_normal(classes), rng.standard_normal(classes)
        label = int(rng.integers(classes))
        _, grads = stage2_backward(ens, fw, fr, lw, lr_, bank, label, head, gamma)

        def loss_now():
            z = ensemble_logits(ens, fw, fr, lw, lr_, bank, head)
            return focal_loss(z, label, gamma)

        assert max_rel_err(grads.ensembler_weight, central_diff(loss_now, ens.weight)) < 1e-5
        assert max_rel_err(grads.ensembler_bias, central_diff(loss_now, ens.bias)) < 1e-5

    def test_gamma_zero_equals_ce_gradients(self):
        rng = np.random.default_rng(17)
        bank = make_bank(3, 4)
        head = HeadConfig(tau=0.8)
        for mode in ("logit", "feature"):
            n = 3 if mode == "logit" else 4
            ens = EnsemblerParams(
                mode=mode,
                weight=0.5 * np.hstack([np.eye(n), np.eye(n)]) + 0.1 * rng.standard_normal((n, 2 * n)),
                bias=np.zeros(n),
            )
            fw, fr = rng.standard_normal(4), rng.standard_normal(4)
            lw, lr_ = rng.standard_normal(3), rng.standard_normal(3)
            loss_f, grads_f = stage2_backward(ens, fw, fr, lw, lr_, bank, 1, head, 0.0)
            ce_ref = ce_loss(ensemble_logits(ens, fw, fr, lw, lr_, bank, head), 1)
            assert abs(loss_f - ce_ref) < 1e-12

            def ce_now():
                return ce_loss(ensemble_logits(ens, fw, fr, lw, lr_, bank, head), 1)

            fd_weight = central_diff(ce_now, ens.weight)
            assert np.abs(grads_f.ensembler_weight - fd_weight).max() < 1e-10 * max(
                1.0, np.abs(fd_weight).max()
            ) + 1e-9

    def test_adapter_grads_structurally_absent(self):
        bank = make_bank(3, 4)
        ens = init_ensembler("logit", 3, 4)
        _, grads = stage2_backward(
            ens, np.ones(4), np.ones(4), np.ones(3), np.ones(3), bank, 0, HeadConfig(), 2.0
        )
        assert grads.adapter_weight is None and grads.adapter_gate is None

    def test_batch_is_mean_of_singles(self):
        rng = np.random.default_rng(18)
        bank = make_bank(3, 4)
        head = HeadConfig(tau=0.6)
        ens = init_ensembler("feature", 3, 4)
        fw, fr = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        lw, lr_ = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        labels = rng.integers(0, 3, size=5)
        loss_b, grads_b = stage2_backward_batch(ens, fw, fr, lw, lr_, bank, labels, head, 2.0)
        singles = [
            stage2_backward(ens, fw[i], fr[i], lw[i], lr_[i], bank, int(labels[i]), head, 2.0)
            for i in range(5)
        ]
        assert abs(loss_b - np.mean([s[0] for s in singles])) < 1e-12
        np.testing.assert_allclose(
            grads_b.ensembler_weight,
            np.mean([s[1].ensembler_weight for s in singles], axis=0),
            atol=1e-12,
        )


class TestLinearProbe:
    def separable_set(self):
        rng = np.random.default_rng(19)
        feats = np.vstack(
            [rng.standard_normal((20, 4)) + [6, 0, 0, 0], rng.standard_normal((20, 4)) - [6, 0, 0, 0]]
        )
        labels = np.array([0] * 20 + [1] * 20)
        return EmbeddingSet(features=feats, labels=labels)

    def test_separable_reaches_full_train_accuracy(self):
        train = self.separable_set()
        hyper = SgdHyper(lr0=0.1, momentum=0.9, weight_decay=0.0, total_steps=100)
        weight, bias = linear_probe_train(train, 2, hyper, epochs=100, batch_size=16, seed=0)
        preds = (train.features @ weight.T + bias).argmax(axis=1)
        assert (preds == train.labels).all()

    def test_single_class_rejected(self):
        rng = np.random.default_rng(20)
        degenerate = EmbeddingSet(features=rng.standard_normal((10, 3)), labels=[0] * 10)
        hyper = SgdHyper(lr0=0.1, total_steps=10)
        with pytest.raises(InvalidDatasetError):
            linear_probe_train(degenerate, 2, hyper, epochs=1, batch_size=4, seed=0)

    def test_deterministic(self):
        train = self.separable_set()
        hyper = SgdHyper(lr0=0.1, momentum=0.9, weight_decay=5e-4, total_steps=20)
        w1, b1 = linear_probe_train(train, 2, hyper, epochs=20, batch_size=8, seed=3)
        w2, b2 = linear_probe_train(train, 2, hyper, epochs=20, batch_size=8, seed=3)
        np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(b1, b2)


class TestConfigs:
    def test_tau_bounds(self):
        with pytest.raises(InvalidConfigError):
            HeadConfig(tau=0.0)
        with pytest.raises(InvalidConfigError):
            HeadConfig(tau=11.0)

    def test_init_adapter_near_identity(self):
        adapter = init_adapter(16, np.random.default_rng(0))
        assert adapter.gate == 0.0
        assert np.abs(adapter.weight - np.eye(16)).max() < 0.1

    def test_init_ensembler_shapes(self):
        ens_l = init_ensembler("logit", 7, 16)
        assert ens_l.weight.shape == (7, 14) and ens_l.bias.shape == (7,)
        ens_f = init_ensembler("feature", 7, 16)
        assert ens_f.weight.shape == (16, 32) and ens_f.bias.shape == (16,)
