import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sharpqos import hyperball as hb


def t(*xs):
    return torch.tensor(xs, dtype=torch.float64)


def random_tangent(rng, rows, d, max_norm):
    v = rng.standard_normal((rows, d))
    v *= rng.uniform(0, max_norm, (rows, 1)) / np.linalg.norm(v, axis=1, keepdims=True)
    return torch.from_numpy(v)


def inside(x, c):
    c = torch.as_tensor(c, dtype=torch.float64)
    return bool((c * (x * x).sum(-1) < 1).all())


class TestCurvature:
    def test_default_init_is_one(self):
        assert float(hb.Curvature(1.0)().detach()) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("c", [1e-3, 0.5, 2.0, 7.5])
    def test_raw_inverse(self, c):
        assert float(hb.curvature(hb.raw_for_curvature(c))) == pytest.approx(c, rel=1e-12)

    @pytest.mark.parametrize("raw", [-50.0, -5.0, 0.0, 30.0])
    def test_positive_for_any_raw(self, raw):
        assert float(hb.curvature(torch.tensor(raw, dtype=torch.float64))) > 0


class TestExpLog:
    def test_origin_maps_to_origin(self):
        z = torch.zeros(3, 4, dtype=torch.float64)
        assert torch.equal(hb.exp0(z, 1.0), z)
        assert torch.equal(hb.log0(z, 1.0), z)

    def test_exp_scalar_value(self):
        np.testing.assert_allclose(hb.exp0(t(0.5, 0.0), 1.0).numpy(), [0.46211716, 0.0], atol=1e-8)

    def test_log_scalar_value(self):
        np.testing.assert_allclose(hb.log0(t(0.46211716, 0.0), 1.0).numpy(), [0.5, 0.0], atol=1e-8)

    def test_exp_stays_inside_for_huge_vectors(self):
        rng = np.random.default_rng(0)
        for c in (0.1, 1.0, 3.0):
            out = hb.exp0(random_tangent(rng, 1000, 8, 50.0), c)
            assert inside(out, c)

    def test_round_trip_relative_error(self):
        rng = np.random.default_rng(1)
        v = random_tangent(rng, 1000, 16, 5.0)
        back = hb.log0(hb.exp0(v, 1.0), 1.0)
        rel = (back - v).norm(dim=-1) / v.norm(dim=-1)
        assert float(rel.max()) < 1e-8

    def test_log_clamps_points_outside_the_ball(self):
        out = hb.log0(t(2.0, 0.0), 1.0)
        assert torch.isfinite(out).all()
        assert float(out[0]) > 5

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            hb.exp0(t(float("nan"), 0.0), 1.0)
        with pytest.raises(ValueError):
            hb.log0(t(float("inf"), 0.0), 1.0)

    def test_per_row_curvature_column(self):
        v = t(0.3, 0.4).repeat(2, 1)
        c = t(1.0, 4.0).reshape(2, 1)
        out = hb.exp0(v, c)
        np.testing.assert_allclose(out[0].numpy(), hb.exp0(v[0], 1.0).numpy(), rtol=1e-15)
        np.testing.assert_allclose(out[1].numpy(), hb.exp0(v[1], 4.0).numpy(), rtol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(0.05, 4.0))
    def test_round_trip_property(self, coords, c):
        v = torch.tensor(coords, dtype=torch.float64)
        if float(v.norm()) * math.sqrt(c) > 5 or float(v.norm()) < 1e-6:
            return
        back = hb.log0(hb.exp0(v, c), c)
        assert float((back - v).norm() / v.norm()) < 1e-8


class TestMobiusAdd:
    def test_collinear_value(self):
        np.testing.assert_allclose(hb.mobius_add(t(0.3, 0.0), t(0.4, 0.0), 1.0).numpy(), [0.625, 0.0],
                                   atol=1e-15)

    def test_identities_exact(self):
        rng = np.random.default_rng(2)
        x = hb.exp0(random_tangent(rng, 1000, 8, 5.0), 1.0)
        zero = torch.zeros_like(x)
        assert torch.equal(hb.mobius_add(zero, x, 1.0), x)
        assert torch.equal(hb.mobius_add(x, zero, 1.0), x)

    def test_left_inverse(self):
        rng = np.random.default_rng(3)
        for c in (0.3, 1.0, 2.0):
            x = hb.exp0(random_tangent(rng, 1000, 8, 5.0 / math.sqrt(c)), c)
            assert float(hb.mobius_add(-x, x, c).abs().max()) < 1e-12

    def test_output_inside_ball(self):
        rng = np.random.default_rng(4)
        x = hb.exp0(random_tangent(rng, 500, 4, 20.0), 1.0)
        y = hb.exp0(random_tangent(rng, 500, 4, 20.0), 1.0)
        assert inside(hb.mobius_add(x, y, 1.0), 1.0)

    def test_against_textbook_formula(self):
        rng = np.random.default_rng(5)
        x = hb.exp0(random_tangent(rng, 50, 5, 2.0), 0.7).numpy()
        y = hb.exp0(random_tangent(rng, 50, 5, 2.0), 0.7).numpy()
        c = 0.7
        xy = (x * y).sum(1, keepdims=True)
        x2 = (x * x).sum(1, keepdims=True)
        y2 = (y * y).sum(1, keepdims=True)
        expected = ((1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y) / (1 + 2 * c * xy + c * c * x2 * y2)
        out = hb.mobius_add(torch.from_numpy(x), torch.from_numpy(y), c).numpy()
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-15)


class TestMatvecAndActivation:
    def test_identity_matrix(self):
        x = hb.exp0(t(0.2, -0.7, 0.1), 1.0)
        np.testing.assert_allclose(hb.mobius_matvec(torch.eye(3, dtype=torch.float64), x, 1.0).numpy(),
                                   x.numpy(), atol=1e-10)

    def test_zero_matrix(self):
        x = hb.exp0(t(0.2, -0.7, 0.1), 1.0)
        assert float(hb.mobius_matvec(torch.zeros(3, 3, dtype=torch.float64), x, 1.0).abs().max()) == 0

    def test_doubling(self):
        W = 2 * torch.eye(2, dtype=torch.float64)
        np.testing.assert_allclose(hb.mobius_matvec(W, t(0.46211716, 0.0), 1.0).numpy(),
                                   [0.76159416, 0.0], atol=1e-8)

    def test_width_mismatch(self):
        with pytest.raises(ValueError, match="width"):
            hb.mobius_matvec(torch.eye(3, dtype=torch.float64), t(0.1, 0.1), 1.0)

    def test_relu_identity_region(self):
        x = hb.exp0(t(0.3, 0.2, 0.0), 1.0)
        np.testing.assert_allclose(hb.wrapped_activation(x, 1.0).numpy(), x.numpy(), atol=1e-10)

    def test_relu_negative_goes_to_origin(self):
        np.testing.assert_allclose(hb.wrapped_activation(t(-0.46211716, 0.0), 1.0).numpy(), [0.0, 0.0],
                                   atol=1e-15)

    def test_conformal_factor_at_origin(self):
        assert float(hb.conformal_factor(t(0.0, 0.0), 1.0)) == 2.0


class TestGradients:
    """Input, weight and curvature gradients against central differences."""

    @staticmethod
    def check(fn, *inputs):
        assert torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-5)

    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.v = (0.8 * torch.randn(4, 3, generator=g, dtype=torch.float64)).requires_grad_()
        self.w = (0.8 * torch.randn(4, 3, generator=g, dtype=torch.float64)).requires_grad_()
        self.W = torch.randn(3, 3, generator=g, dtype=torch.float64).requires_grad_()
        self.raw = hb.raw_for_curvature(0.8).clone().requires_grad_()

    def test_exp_log(self):
        self.check(lambda v, r: hb.exp0(v, hb.curvature(r)), self.v, self.raw)
        self.check(lambda v, r: hb.log0(0.3 * torch.tanh(v), hb.curvature(r)), self.v, self.raw)

    def test_mobius_add(self):
        self.check(lambda a, b, r: hb.mobius_add(hb.exp0(a, 0.8), hb.exp0(b, 0.8), hb.curvature(r)),
                   self.v, self.w, self.raw)

    def test_matvec_and_activation(self):
        self.check(lambda W, v, r: hb.mobius_matvec(W, hb.exp0(v, 0.8), hb.curvature(r)),
                   self.W, self.v, self.raw)
        self.check(lambda v, r: hb.wrapped_activation(hb.exp0(v, 0.8), hb.curvature(r), torch.tanh),
                   self.v, self.raw)
