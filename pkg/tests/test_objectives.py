import numpy as np
import pytest

from conftest import tiny_mlp
from logitlab import tensor as T
from logitlab.attacks import AttackConfig, pgd
from logitlab.data import gaussian_augment
from logitlab.models import forward_logits
from logitlab.objectives import (TrainObjective, alp_penalty, ce_loss,
                                 logit_pair_distance,
                                 clp_penalty, default_inner_attack,
                                 lsq_penalty, training_loss)


class TestCeLoss:
    def test_uniform_logits_give_log_c(self):
        logits = T.Tensor(np.zeros((6, 10)))
        assert ce_loss(logits, np.zeros(6, dtype=int)).item() \
            == pytest.approx(np.log(10), rel=1e-6)

    def test_two_class_closed_form(self):
        # z = (1, 0), true label 0: CE = ln(1 + e^-1)
        logits = T.Tensor(np.array([[1.0, 0.0]]))
        assert ce_loss(logits, np.array([0])).item() \
            == pytest.approx(np.log(1 + np.exp(-1)), rel=1e-6)

    def test_label_range_checked(self):
        with pytest.raises(T.ContractError):
            ce_loss(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((5, 4))
        y = np.array([0, 1, 2, 3, 0])
        zt = T.Tensor(z, requires_grad=True, dtype=np.float64)
        T.backward(ce_loss(zt, y))
        e = np.exp(z - z.max(axis=1, keepdims=True))
        softmax = e / e.sum(axis=1, keepdims=True)
        expected = (softmax - np.eye(4)[y]) / 5
        np.testing.assert_allclose(zt.grad, expected, rtol=1e-10)


class TestPenalties:
    def test_lsq_closed_form(self):
        # every row has squared norm 25; lambda 0.1 -> 2.5
        logits = T.Tensor(np.full((8, 25), 1.0))
        assert lsq_penalty(logits, 0.1).item() == pytest.approx(2.5, rel=1e-6)

    def test_clp_closed_form(self):
        # paired rows differ by 1 in two coordinates: distance^2 = 2
        a = T.Tensor(np.zeros((4, 5)))
        b = np.zeros((4, 5)); b[:, 0] = 1.0; b[:, 3] = 1.0
        assert clp_penalty(a, T.Tensor(b), 0.5).item() \
            == pytest.approx(1.0, rel=1e-6)

    def test_alp_is_same_form_as_clp(self):
        rng = np.random.default_rng(1)
        a = T.Tensor(rng.standard_normal((3, 4)))
        b = T.Tensor(rng.standard_normal((3, 4)))
        assert alp_penalty(a, b, 2.0).item() \
            == pytest.approx(clp_penalty(a, b, 2.0).item(), rel=1e-7)

    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 3.0])
    def test_lambda_linearity(self, lam):
        rng = np.random.default_rng(2)
        z = T.Tensor(rng.standard_normal((6, 4)))
        unit = lsq_penalty(z, 1.0).item()
        assert lsq_penalty(z, lam).item() == pytest.approx(lam * unit,
                                                           abs=1e-9)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            lsq_penalty(T.Tensor(np.zeros((2, 2))), -1.0)

    def test_clp_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            clp_penalty(T.Tensor(np.zeros((2, 3))),
                        T.Tensor(np.zeros((3, 3))), 1.0)


class TestObjectiveConfig:
    def test_kind_validation(self):
        with pytest.raises(ValueError):
            TrainObjective(kind="dropout")
        with pytest.raises(ValueError):
            TrainObjective(lam=-1.0)
        with pytest.raises(ValueError):
            TrainObjective(adv_fraction=0.3)

    def test_inner_attack_autofilled_when_needed(self):
        assert TrainObjective(kind="plain").inner_attack is None
        assert TrainObjective(kind="alp", lam=1.0).inner_attack \
            == default_inner_attack()
        assert TrainObjective(adv_fraction=1.0).inner_attack \
            == default_inner_attack()

    def test_default_inner_attack_parameters(self):
        cfg = default_inner_attack()
        assert cfg.epsilon == pytest.approx(0.3)
        assert cfg.step == pytest.approx(0.01)
        assert (cfg.iters, cfg.restarts, cfg.random_init) == (40, 1, True)


class TestTrainingLoss:
    def batch(self, model, n=8, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.1, 0.9, size=(n,) + model.input_shape
                        ).astype(np.float32)
        y = rng.integers(0, model.n_classes, size=n).astype(np.int64)
        return x, y

    def test_plain_equals_ce_of_forward(self):
        model = tiny_mlp()
        x, y = self.batch(model)
        loss = training_loss(model, x, y, TrainObjective(kind="plain"))
        direct = ce_loss(forward_logits(model, x), y)
        assert loss.item() == pytest.approx(direct.item(), rel=1e-6)

    def test_lsq_adds_penalty_on_clean_logits(self):
        model = tiny_mlp()
        x, y = self.batch(model)
        lam = 0.5
        loss = training_loss(model, x, y, TrainObjective(kind="lsq", lam=lam))
        logits = forward_logits(model, x)
        expected = ce_loss(logits, y).item() + lsq_penalty(logits, lam).item()
        assert loss.item() == pytest.approx(expected, rel=1e-6)

    def test_clp_pairs_shuffled_halves(self):
        model = tiny_mlp()
        x, y = self.batch(model)
        lam, seed = 0.7, 42
        loss = training_loss(model, x, y, TrainObjective(kind="clp", lam=lam),
                             epoch_seed=seed)
        z = forward_logits(model, x).data
        order = np.random.default_rng(seed).permutation(len(y))
        half = len(y) // 2
        diff = z[order[:half]] - z[order[half:2 * half]]
        expected = ce_loss(forward_logits(model, x), y).item() \
            + lam * (diff ** 2).sum(axis=1).mean()
        assert loss.item() == pytest.approx(expected, rel=1e-5)

    def test_alp_penalizes_clean_adv_distance(self):
        model = tiny_mlp()
        x, y = self.batch(model)
        inner = AttackConfig(epsilon=0.1, step=0.05, iters=3, restarts=1,
                             random_init=True)
        obj = TrainObjective(kind="alp", lam=1.0, adv_fraction=1.0,
                             inner_attack=inner)
        loss = training_loss(model, x, y, obj, epoch_seed=5)
        x_adv = pgd(model, x, y, inner, restart_index=5).x_adv
        zc = forward_logits(model, x)
        za = forward_logits(model, x_adv)
        expected = ce_loss(za, y).item() + alp_penalty(zc, za, 1.0).item()
        assert loss.item() == pytest.approx(expected, rel=1e-5)

    def test_half_adversarial_mix_is_equal_weight(self):
        model = tiny_mlp()
        x, y = self.batch(model, n=10)
        inner = AttackConfig(epsilon=0.1, step=0.05, iters=2, restarts=1,
                             random_init=True)
        obj = TrainObjective(adv_fraction=0.5, inner_attack=inner)
        seed = 11
        loss = training_loss(model, x, y, obj, epoch_seed=seed)
        order = np.random.default_rng(seed).permutation(len(y))
        clean_idx, adv_idx = order[:5], order[5:]
        x_adv = pgd(model, x[adv_idx], y[adv_idx], inner, restart_index=seed,
                    example_ids=adv_idx).x_adv
        expected = 0.5 * (
            ce_loss(forward_logits(model, x[clean_idx]), y[clean_idx]).item()
            + ce_loss(forward_logits(model, x_adv), y[adv_idx]).item())
        assert loss.item() == pytest.approx(expected, rel=1e-5)

    def test_zero_iteration_inner_attack_reduces_to_clean(self):
        model = tiny_mlp()
        x, y = self.batch(model)
        inner = AttackConfig(epsilon=0.3, step=0.1, iters=0, restarts=1,
                             random_init=False)
        obj = TrainObjective(adv_fraction=1.0, inner_attack=inner)
        loss = training_loss(model, x, y, obj, epoch_seed=0)
        assert loss.item() == pytest.approx(
            training_loss(model, x, y, TrainObjective()).item(), rel=1e-6)

    def test_crafting_is_detached_from_parameters(self):
        """Perturbing the differentiable parameter copies must not move the
        crafted adversarial points, so the parameter gradient treats them
        as constants."""
        model = tiny_mlp()
        x, y = self.batch(model)
        inner = AttackConfig(epsilon=0.2, step=0.1, iters=2, restarts=1,
                             random_init=True)
        obj = TrainObjective(kind="alp", lam=1.0, adv_fraction=1.0,
                             inner_attack=inner)
        params = model.param_tensors(requires_grad=True)
        loss = training_loss(model, x, y, obj, param_tensors=params,
                             epoch_seed=3)
        T.backward(loss)
        grads = {n: p.grad.copy() for n, p in params.items()}
        for g in grads.values():
            assert np.isfinite(g).all()
        # same seeds, perturbed tensor copies: crafted points are identical
        shifted = model.param_tensors(requires_grad=True)
        for p in shifted.values():
            p.data = p.data + 1e-3
        x_ref = pgd(model, x, y, inner, restart_index=3).x_adv
        loss2 = training_loss(model, x, y, obj, param_tensors=shifted,
                              epoch_seed=3)
        x_again = pgd(model, x, y, inner, restart_index=3).x_adv
        np.testing.assert_array_equal(x_ref, x_again)
        assert loss2.item() != pytest.approx(loss.item())

    def test_noise_augmentation_applied_before_forward(self):
        model = tiny_mlp()
        x, y = self.batch(model)
        sigma, seed = 0.25, 9
        obj = TrainObjective(kind="lsq", lam=0.5, noise_sigma=sigma)
        loss = training_loss(model, x, y, obj, epoch_seed=seed,
                             noise_rng=np.random.default_rng(seed))
        xn = gaussian_augment(x, sigma, np.random.default_rng(seed))
        logits = forward_logits(model, xn)
        expected = ce_loss(logits, y).item() + lsq_penalty(logits, 0.5).item()
        assert loss.item() == pytest.approx(expected, rel=1e-5)

    def test_parameter_gradients_flow_for_every_kind(self):
        model = tiny_mlp()
        x, y = self.batch(model)
        inner = AttackConfig(epsilon=0.1, step=0.05, iters=1, restarts=1,
                             random_init=True)
        for obj in (TrainObjective(),
                    TrainObjective(kind="lsq", lam=0.5),
                    TrainObjective(kind="clp", lam=0.5),
                    TrainObjective(kind="alp", lam=1.0, adv_fraction=1.0,
                                   inner_attack=inner),
                    TrainObjective(adv_fraction=0.5, inner_attack=inner)):
            params = model.param_tensors(requires_grad=True)
            T.backward(training_loss(model, x, y, obj, param_tensors=params,
                                     epoch_seed=1))
            for name, p in params.items():
                assert p.grad is not None and np.isfinite(p.grad).all(), name


class TestLogitPairDistance:
    def test_deterministic_and_matches_manual_computation(self):
        model = tiny_mlp()
        rng = np.random.default_rng(7)
        x = rng.uniform(0.2, 0.8, size=(6, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 4, size=6)
        cfg = AttackConfig(epsilon=0.1, step=0.05, iters=3, restarts=1,
                           random_init=True)
        d1 = logit_pair_distance(model, x, y, cfg, seed=5)
        d2 = logit_pair_distance(model, x, y, cfg, seed=5)
        assert d1 == d2 and d1 > 0
        x_adv = pgd(model, x, y, cfg, restart_index=5).x_adv
        manual = np.mean(np.linalg.norm(
            forward_logits(model, x).data - forward_logits(model, x_adv).data,
            axis=1))
        assert d1 == pytest.approx(manual, rel=1e-6)
