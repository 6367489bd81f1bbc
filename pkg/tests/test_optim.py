import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from marsrec.model import Geometry, init_params
from marsrec.objective import Gradients
from marsrec.optim import (OptimConfig, calibrated_rsgd_step, calibration_multiplier,
                           compare_gradients, enforce_ball, finite_difference_gradient,
                           projected_sgd_step, retract, spherical_sgd_step, tangent_project)

EUC, SPH = Geometry.EUCLIDEAN, Geometry.SPHERICAL
vec = arrays(float, 6, elements=st.floats(-10, 10))


def unit(v):
    return v / np.linalg.norm(v)


class TestTangent:
    def test_example(self):
        np.testing.assert_allclose(tangent_project(np.array([1.0, 0]), np.array([3.0, 4])), [0, 4])

    def test_parallel_vanishes(self):
        x = unit(np.array([1.0, 2, 3]))
        np.testing.assert_allclose(tangent_project(x, 2.5 * x), 0, atol=1e-15)

    def test_orthogonal_unchanged(self):
        x, g = np.array([1.0, 0, 0]), np.array([0.0, 2, -1])
        np.testing.assert_array_equal(tangent_project(x, g), g)

    @settings(max_examples=100, deadline=None)
    @given(vec, vec)
    def test_orthogonality(self, x, g):
        if np.linalg.norm(x) < 1e-3:
            return
        x = unit(x)
        assert abs(tangent_project(x, g) @ x) < 1e-10 * max(1.0, np.linalg.norm(g))


class TestRetract:
    def test_zero_step(self):
        x = unit(np.array([0.3, -0.4, 1.0]))
        np.testing.assert_allclose(retract(x, np.zeros(3)), x, atol=1e-15)

    def test_example(self):
        np.testing.assert_allclose(retract(np.array([1.0, 0]), np.array([0.0, 1])),
                                   np.array([1.0, 1]) / math.sqrt(2), atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(vec, vec)
    def test_unit_output(self, x, z):
        if np.linalg.norm(x) < 1e-3:
            return
        x = unit(x)
        assert abs(np.linalg.norm(retract(x, tangent_project(x, z))) - 1) < 1e-12


class TestCalibratedStep:
    def test_example(self):
        lr = 0.3
        out = calibrated_rsgd_step(np.array([1.0, 0]), np.array([0.0, 1]), OptimConfig(lr))
        np.testing.assert_allclose(out, np.array([1.0, -lr]) / math.sqrt(1 + lr * lr), atol=1e-15)

    def test_zero_gradient(self):
        x = unit(np.array([1.0, 2, 2]))
        np.testing.assert_array_equal(calibrated_rsgd_step(x, np.zeros(3), OptimConfig(0.5)), x)

    def test_radial_gradient_is_noop(self):
        x = unit(np.array([1.0, 2, 2]))
        np.testing.assert_allclose(calibrated_rsgd_step(x, 3.0 * x, OptimConfig(0.5)), x, atol=1e-15)

    def test_nonfinite_gradient(self):
        with pytest.raises(FloatingPointError):
            calibrated_rsgd_step(np.array([1.0, 0]), np.array([np.nan, 0]), OptimConfig(0.1))

    def test_zero_lr_identity(self):
        x = unit(np.array([0.2, 0.5, -1]))
        np.testing.assert_array_equal(calibrated_rsgd_step(x, np.array([1.0, 2, 3]), OptimConfig(0.0)),
                                      x / np.linalg.norm(x))

    def test_uncalibrated_is_plain_riemannian(self):
        x, g = unit(np.array([1.0, 1, 0])), np.array([2.0, -1, 0.5])
        out = calibrated_rsgd_step(x, g, OptimConfig(0.2, calibrate=False))
        np.testing.assert_allclose(out, retract(x, -0.2 * tangent_project(x, g)), atol=1e-15)

    def test_row_stack_matches_single(self, rng):
        xs = rng.normal(size=(5, 4))
        xs /= np.linalg.norm(xs, axis=1, keepdims=True)
        gs = rng.normal(size=(5, 4))
        gs[2] = 0.0
        cfg = OptimConfig(0.7)
        out = calibrated_rsgd_step(xs, gs, cfg)
        for i in range(5):
            np.testing.assert_allclose(out[i], calibrated_rsgd_step(xs[i], gs[i], cfg), atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(vec, vec)
    def test_multiplier_range(self, x, g):
        if np.linalg.norm(x) < 1e-3:
            return
        m = calibration_multiplier(unit(x), g)
        assert 0.0 <= m <= 2.0

    def test_multiplier_grows_with_cosine(self):
        # same tangent component, increasing radial share of the gradient
        x = np.array([1.0, 0, 0])
        mults = [calibration_multiplier(x, np.array([r, 1.0, 0])) for r in (-2, -0.5, 0, 0.5, 2)]
        assert np.all(np.diff(mults) > 0)
        steps = [np.linalg.norm(calibrated_rsgd_step(x, np.array([r, 1.0, 0]), OptimConfig(0.01)) - x)
                 for r in (-2, -0.5, 0, 0.5, 2)]
        assert np.all(np.diff(steps) > 0)


def random_grads(params, rng, users, items):
    g = Gradients.zeros_like(params)
    g.user_emb[users] = rng.normal(size=(len(users), params.dim))
    g.item_emb[items] = rng.normal(size=(len(items), params.dim))
    g.user_proj[:] = rng.normal(0, 0.1, size=g.user_proj.shape)
    g.item_proj[:] = rng.normal(0, 0.1, size=g.item_proj.shape)
    g.facet_logits[users] = rng.normal(size=(len(users), params.n_facets))
    g.touched_users, g.touched_items = np.asarray(users), np.asarray(items)
    return g


class TestProjectedStep:
    def test_zero_gradients_feasible_identity(self):
        params = init_params(5, 6, 3, 2, EUC, seed=0)
        enforce_ball(params.user_emb, params.user_proj)
        enforce_ball(params.item_emb, params.item_proj)
        before = params.copy()
        projected_sgd_step(params, Gradients.zeros_like(params), OptimConfig(0.1))
        for a, b in zip(params.arrays(), before.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_row_with_norm_two_is_halved(self):
        params = init_params(1, 1, 2, 2, EUC)
        params.user_proj[:] = np.eye(2)
        params.user_emb[0] = [2.0, 0.0]
        projected_sgd_step(params, Gradients.zeros_like(params), OptimConfig(0.1))
        np.testing.assert_allclose(params.user_emb[0], [1.0, 0.0])

    def test_ball_after_random_steps(self, rng):
        params = init_params(8, 9, 4, 3, EUC, seed=1)
        cfg = OptimConfig(0.5)
        for _ in range(50):
            g = random_grads(params, rng, rng.choice(8, 3, replace=False), rng.choice(9, 4, replace=False))
            projected_sgd_step(params, g, cfg)
            for emb, proj in ((params.user_emb, params.user_proj), (params.item_emb, params.item_proj)):
                norms = np.linalg.norm(np.einsum("nd,kde->nke", emb, proj), axis=-1)
                assert norms.max() <= 1 + 1e-9

    def test_zero_lr_identity_on_feasible(self, rng):
        params = init_params(4, 4, 3, 2, EUC, seed=2)
        enforce_ball(params.user_emb, params.user_proj)
        enforce_ball(params.item_emb, params.item_proj)
        before = params.copy()
        projected_sgd_step(params, random_grads(params, rng, [0, 1], [2]), OptimConfig(0.0))
        for a, b in zip(params.arrays(), before.arrays()):
            np.testing.assert_array_equal(a, b)


class TestSphericalStep:
    def test_untouched_rows_bit_identical(self, rng):
        params = init_params(6, 7, 4, 2, SPH, seed=0)
        before = params.copy()
        spherical_sgd_step(params, random_grads(params, rng, [1, 4], [0, 6]), OptimConfig(0.3, geometry=SPH))
        np.testing.assert_array_equal(params.user_emb[[0, 2, 3, 5]], before.user_emb[[0, 2, 3, 5]])
        np.testing.assert_array_equal(params.item_emb[1:6], before.item_emb[1:6])
        assert not np.array_equal(params.user_emb[1], before.user_emb[1])

    def test_rows_stay_unit(self, rng):
        params = init_params(6, 7, 4, 2, SPH, seed=0)
        cfg = OptimConfig(0.5, geometry=SPH)
        for _ in range(200):
            spherical_sgd_step(params, random_grads(params, rng, rng.choice(6, 3, replace=False),
                                                    rng.choice(7, 3, replace=False)), cfg)
        np.testing.assert_allclose(np.linalg.norm(params.user_emb, axis=1), 1, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(params.item_emb, axis=1), 1, atol=1e-9)

    def test_projections_take_euclidean_step(self, rng):
        params = init_params(3, 3, 2, 2, SPH, seed=0)
        before = params.copy()
        g = random_grads(params, rng, [0], [1])
        spherical_sgd_step(params, g, OptimConfig(0.25, geometry=SPH))
        np.testing.assert_allclose(params.user_proj, before.user_proj - 0.25 * g.user_proj)
        np.testing.assert_allclose(params.facet_logits, before.facet_logits - 0.25 * g.facet_logits)


class TestFiniteDifference:
    def test_quadratic(self, rng):
        params = init_params(3, 4, 2, 2, EUC, seed=0)
        fd = finite_difference_gradient(lambda p: sum(float(np.sum(a * a)) for a in p.arrays()),
                                        params)
        for a, g in zip(params.arrays(), fd.arrays()):
            np.testing.assert_allclose(g, 2 * a, atol=1e-8)

    def test_restores_params(self):
        params = init_params(2, 2, 2, 1, EUC, seed=0)
        before = params.copy()
        finite_difference_gradient(lambda p: float(np.sum(np.sin(p.user_emb))), params)
        for a, b in zip(params.arrays(), before.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_second_order_convergence(self):
        params = init_params(2, 2, 3, 1, EUC, seed=0)
        f = lambda p: float(np.sum(np.sin(3 * p.user_emb)))
        exact = 3 * np.cos(3 * params.user_emb)
        e1 = np.abs(finite_difference_gradient(f, params, h=1e-2).user_emb - exact).max()
        e2 = np.abs(finite_difference_gradient(f, params, h=5e-3).user_emb - exact).max()
        assert 3.0 < e1 / e2 < 5.0

    def test_invalid_h(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda p: 0.0, init_params(1, 1, 1, 1, EUC), h=0)

    def test_compare_flags_corruption(self):
        params = init_params(2, 3, 2, 2, EUC, seed=0)
        a = finite_difference_gradient(lambda p: float(np.sum(p.item_emb ** 3)), params)
        b = a.__class__(*(x.copy() for x in a.arrays()))
        b.item_emb.reshape(-1)[4] += 1e-3
        report = compare_gradients(b, a)
        assert report["item_emb"][1] == 4 and not report["item_emb"][2]
        assert report["user_emb"][2]


def test_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(-0.1)
    assert OptimConfig(0.1, geometry="spherical").geometry is SPH
