import math

import numpy as np
import pytest

from config import CcdConfig, CcdWeights
from utils import autodiff as ad
from utils.ccd_losses import (Preconditioner, bregman_div, fisher_preconditioner, ikc_loss, kl_divergence, lkc_loss,
                              lkc_weight, preconditioner_from_gradients, teacher_gradients, total_loss, ukc_loss,
                              ukc_weight)
from utils.denoiser import freeze_snapshot, init_denoiser
from utils.diffusion import reverse_mean
from utils.errors import LossError, NonFiniteLossError


class FlatTeacher:
    """Teacher whose prediction ignores its input."""

    null_label = 0

    def predict_noise(self, x_t, t, labels, params=None):
        return ad.Tensor(np.ones(np.shape(x_t.data if isinstance(x_t, ad.Tensor) else x_t)))


@pytest.fixture
def teacher(small_arch):
    return freeze_snapshot(init_denoiser(small_arch, seed=1))


@pytest.fixture
def pairs():
    rng = np.random.default_rng(11)
    return {
        "replay": (rng.standard_normal((6, 2)), rng.integers(0, 4, 6)),
        "current": (rng.standard_normal((6, 2)), rng.integers(0, 4, 6)),
        "t": rng.integers(1, 11, 6),
    }


class TestPreconditioner:
    @pytest.mark.parametrize("diag_only", [True, False])
    def test_zero_gradient_gives_damping(self, diag_only):
        precond = preconditioner_from_gradients(np.zeros((4, 3)), diag_only=diag_only, damping=1e-3)
        np.testing.assert_allclose(precond.as_matrix(), 1e-3 * np.eye(3))

    def test_single_sample_outer_product(self):
        precond = preconditioner_from_gradients(np.array([[1.0, 0.0]]), diag_only=False, damping=0.01)
        np.testing.assert_allclose(precond.as_matrix(), [[1.01, 0.0], [0.0, 0.01]])

    def test_full_is_symmetric_positive_definite(self, rng):
        precond = preconditioner_from_gradients(rng.standard_normal((20, 5)), diag_only=False, damping=1e-3)
        matrix = precond.as_matrix()
        np.testing.assert_allclose(matrix, matrix.T, atol=1e-9)
        assert np.linalg.eigvalsh(matrix).min() >= 1e-3 - 1e-12

    def test_diagonal_is_mean_square(self, rng):
        g = rng.standard_normal((10, 3))
        precond = preconditioner_from_gradients(g, damping=1e-3)
        np.testing.assert_allclose(precond.values, np.mean(g ** 2, axis=0) + 1e-3)

    def test_full_rejected_above_dimension_limit(self):
        with pytest.raises(LossError):
            preconditioner_from_gradients(np.ones((2, 65)), diag_only=False)

    def test_empty_batch(self):
        with pytest.raises(LossError):
            preconditioner_from_gradients(np.zeros((0, 2)))

    def test_flat_teacher_gives_damping(self):
        precond = fisher_preconditioner(FlatTeacher(), np.ones((3, 2)), np.zeros(3, dtype=int), 2)
        np.testing.assert_allclose(precond.values, [1e-3, 1e-3])

    def test_teacher_gradient_matches_finite_differences(self, teacher, pairs):
        x, y = pairs["replay"]
        t = pairs["t"]
        _, g = teacher_gradients(teacher, x, y, t)

        def surrogate(leaf):
            return 0.5 * ad.sum_(ad.sq_l2(teacher.predict_noise(leaf, t, y), axis=-1))

        assert ad.grad_check(surrogate, x) < 1e-4
        leaf = ad.Tensor(x, requires_grad=True)
        (expected,) = ad.grad(surrogate(leaf), [leaf])
        np.testing.assert_allclose(g, expected)

    def test_teacher_gradients_inside_no_grad(self, teacher, pairs):
        x, y = pairs["replay"]
        with ad.no_grad():
            _, g = teacher_gradients(teacher, x, y, pairs["t"])
        assert np.any(g != 0)


class TestBregman:
    def test_equal_inputs(self, rng):
        u = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(bregman_div(u, u, Preconditioner.identity(3)).data, np.zeros(4))

    def test_identity_hand_value(self):
        assert bregman_div([3.0, 4.0], [0.0, 0.0], Preconditioner.identity(2)).item() == pytest.approx(12.5)

    def test_scaling_metric_scales_divergence(self, rng):
        u, v = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        precond = preconditioner_from_gradients(rng.standard_normal((8, 3)), diag_only=False)
        base = bregman_div(u, v, precond).data
        np.testing.assert_allclose(bregman_div(u, v, precond.scaled(2.5)).data, 2.5 * base)
        assert np.all(base > 0)

    def test_diagonal_matches_full_form(self, rng):
        u, v = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        diag = preconditioner_from_gradients(rng.standard_normal((8, 3)))
        full = Preconditioner(diag.as_matrix(), diag.damping, diag_only=False)
        np.testing.assert_allclose(bregman_div(u, v, diag).data, bregman_div(u, v, full).data)

    def test_dimension_mismatch(self):
        with pytest.raises(LossError):
            bregman_div(np.ones(3), np.ones(3), Preconditioner.identity(2))
        with pytest.raises(LossError):
            bregman_div(np.ones(3), np.ones(2), Preconditioner.identity(3))


class TestIkc:
    def test_same_model_same_inputs_is_zero(self, small_model, pairs):
        snapshot = freeze_snapshot(small_model)
        batch = pairs["replay"]
        loss = ikc_loss(snapshot, small_model, batch, batch, pairs["t"])
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_identity_mode_is_half_mse(self, teacher, small_model, pairs):
        (xr, yr), (xc, yc), t = pairs["replay"], pairs["current"], pairs["t"]
        loss = ikc_loss(teacher, small_model, (xr, yr), (xc, yc), t, CcdConfig(preconditioner="identity"))
        diff = teacher.predict_noise(xr, t, yr).data - small_model.predict_noise(xc, t, yc).data
        assert loss.item() == pytest.approx(0.5 * np.mean(np.sum(diff ** 2, axis=1)), abs=1e-12)

    def test_student_on_replay_averages(self, teacher, small_model, pairs):
        (xr, yr), (xc, yc), t = pairs["replay"], pairs["current"], pairs["t"]
        cfg = CcdConfig(preconditioner="identity")
        cross = ikc_loss(teacher, small_model, (xr, yr), (xc, yc), t, cfg).item()
        own = ikc_loss(teacher, small_model, (xr, yr), (xr, yr), t, cfg).item()
        both = ikc_loss(teacher, small_model, (xr, yr), (xc, yc), t,
                        CcdConfig(preconditioner="identity", ikc_student_on_replay=True)).item()
        assert both == pytest.approx(0.5 * (cross + own))

    def test_unequal_batches(self, teacher, small_model, pairs):
        xc, yc = pairs["current"]
        with pytest.raises(LossError):
            ikc_loss(teacher, small_model, pairs["replay"], (xc[:3], yc[:3]), pairs["t"])

    def test_student_gradient(self, teacher, small_model, pairs):
        for name in ("out.W", "block0.W2", "label.E"):
            def f(p, name=name):
                params = small_model.tensors(requires_grad=False)
                params[name] = p
                return ikc_loss(teacher, small_model, pairs["replay"], pairs["current"], pairs["t"], params=params)

            assert ad.grad_check(f, small_model.params[name]) < 1e-4, name

    def test_teacher_receives_no_gradient(self, teacher, small_model, pairs):
        params = small_model.tensors()
        ikc_loss(teacher, small_model, pairs["replay"], pairs["current"], pairs["t"], params=params).backward()
        assert all(tensor.grad is None for tensor in teacher._tensors.values())
        assert params["out.W"].grad is not None

    def test_teacher_parameters_change_value(self, small_arch, small_model, pairs):
        a = ikc_loss(freeze_snapshot(init_denoiser(small_arch, 1)), small_model, pairs["replay"], pairs["current"],
                     pairs["t"])
        b = ikc_loss(freeze_snapshot(init_denoiser(small_arch, 2)), small_model, pairs["replay"], pairs["current"],
                     pairs["t"])
        assert a.item() != b.item()


class TestUkc:
    def test_weight_balance_point(self):
        assert ukc_weight(np.sqrt(0.5)) == pytest.approx(1.0)

    def test_weight_hand_value(self):
        assert ukc_weight(np.sqrt(0.8)) == pytest.approx(4.0)

    def test_weight_clamped(self):
        assert ukc_weight(1.0) == 100.0
        assert ukc_weight(np.sqrt(0.999), w_max=10.0) == 10.0

    def test_weight_singular_without_clamp(self):
        with pytest.raises(LossError):
            ukc_weight(1.0, w_max=None)

    def test_identical_models_and_inputs(self, small_model, pairs, schedule):
        x, _ = pairs["current"]
        loss = ukc_loss(freeze_snapshot(small_model), small_model, x, x, pairs["t"], schedule)
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_matches_direct_computation(self, teacher, small_model, pairs, schedule):
        (xr, _), (xc, _), t = pairs["replay"], pairs["current"], pairs["t"]
        loss = ukc_loss(teacher, small_model, xc, xr, t, schedule)
        diff = reverse_mean(small_model, xc, t, schedule).data - reverse_mean(teacher, xr, t, schedule).data
        expected = np.mean(ukc_weight(schedule.alpha_bar[t]) * np.sum(diff ** 2, axis=1))
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_student_gradient(self, teacher, small_model, pairs, schedule):
        def f(p):
            params = small_model.tensors(requires_grad=False)
            params["block0.W1"] = p
            return ukc_loss(teacher, small_model, pairs["current"][0], pairs["replay"][0], pairs["t"], schedule,
                            params=params)

        assert ad.grad_check(f, small_model.params["block0.W1"]) < 1e-4

    def test_shape_mismatch(self, teacher, small_model, schedule):
        with pytest.raises(LossError):
            ukc_loss(teacher, small_model, np.ones((3, 2)), np.ones((2, 2)), 1, schedule)


class TestLkc:
    def test_kl_hand_value(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0))

    def test_kl_identical(self):
        p = np.array([[0.2, 0.3, 0.5]])
        np.testing.assert_allclose(kl_divergence(p, p), [0.0], atol=1e-15)

    def test_kl_zero_probability_is_floored(self):
        assert np.isfinite(kl_divergence([0.5, 0.5], [1.0, 0.0]))

    def test_weight(self):
        assert lkc_weight(0.6, 0.8) == pytest.approx(0.75)
        assert lkc_weight(1.0, 0.0) == 50.0
        with pytest.raises(LossError):
            lkc_weight(1.0, 0.0, w_max=None)

    def test_identical_heads_and_inputs(self, small_model, pairs, schedule):
        x, _ = pairs["current"]
        loss = lkc_loss(freeze_snapshot(small_model), small_model, x, x, pairs["t"], schedule)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_weighted_kl(self, teacher, small_model, pairs, schedule):
        (xr, _), (xc, _), t = pairs["replay"], pairs["current"], pairs["t"]
        loss = lkc_loss(teacher, small_model, xr, xc, t, schedule)
        kl = kl_divergence(teacher.label_logits(xr), small_model.label_logits(xc))
        expected = np.mean(lkc_weight(schedule.alpha_bar[t], schedule.beta_bar[t]) * kl)
        assert loss.item() == pytest.approx(expected, rel=1e-9)

    def test_head_gradient(self, teacher, small_model, pairs, schedule):
        def f(p):
            params = small_model.tensors(requires_grad=False)
            params["head.W"] = p
            return lkc_loss(teacher, small_model, pairs["replay"][0], pairs["current"][0], pairs["t"], schedule,
                            params=params)

        assert ad.grad_check(f, small_model.params["head.W"]) < 1e-4

    def test_batch_size_mismatch(self, teacher, small_model, schedule):
        with pytest.raises(LossError):
            lkc_loss(teacher, small_model, np.ones((3, 2)), np.ones((2, 2)), 1, schedule)


class TestTotal:
    def test_zero_weights_return_base(self):
        base = ad.Tensor(np.array(1.25), requires_grad=True)
        total = total_loss(base, ad.Tensor(3.0), ad.Tensor(4.0), ad.Tensor(5.0), CcdWeights(0.0, 0.0, 0.0))
        assert total is base

    def test_hand_value(self):
        total = total_loss(ad.Tensor(2.0), ad.Tensor(1.0), ad.Tensor(1.0), ad.Tensor(1.0), CcdWeights(1e-5, 1e-5, 1e-5))
        assert total.item() == pytest.approx(2.00003, abs=1e-12)

    def test_monotone_in_terms(self):
        weights = CcdWeights(0.1, 0.2, 0.3)
        low = total_loss(ad.Tensor(1.0), ad.Tensor(1.0), ad.Tensor(1.0), ad.Tensor(1.0), weights).item()
        for position in range(3):
            terms = [ad.Tensor(1.0)] * 3
            terms[position] = ad.Tensor(2.0)
            assert total_loss(ad.Tensor(1.0), *terms, weights=weights).item() > low

    def test_missing_terms_skipped(self):
        assert total_loss(ad.Tensor(2.0), weights=CcdWeights(1.0, 1.0, 1.0)).item() == 2.0

    @pytest.mark.parametrize("term", ["ikc", "ukc", "lkc"])
    def test_non_finite_term_is_named(self, term):
        terms = {name: ad.Tensor(1.0) for name in ("ikc", "ukc", "lkc")}
        terms[term] = ad.Tensor(float("nan"))
        with pytest.raises(NonFiniteLossError) as info:
            total_loss(ad.Tensor(1.0), weights=CcdWeights(), **terms)
        assert info.value.term == term

    def test_non_finite_base(self):
        with pytest.raises(NonFiniteLossError) as info:
            total_loss(ad.Tensor(float("inf")))
        assert info.value.term == "base"

    def test_negative_term_rejected(self):
        with pytest.raises(LossError):
            total_loss(ad.Tensor(1.0), ikc=ad.Tensor(-0.5))
