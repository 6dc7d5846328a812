import numpy as np
import pytest

from fpn_oamp.fixed_point import (SAFEGUARD_MARGIN, contraction_apply, contraction_limit, fixed_point_solve,
                                  fixed_point_solve_batch, iterate_to_fixed_point, le_apply, le_gain,
                                  lipschitz_estimate, safeguard_normalize)
from fpn_oamp.nle import init_params, nle_forward
from oracles import TINY, random_theta, tiny_operator, tiny_sample


@pytest.fixture(scope="module")
def op():
    return tiny_operator(0)


class TestLinearStep:
    def test_noiseless_fixed(self, op):
        h, _ = tiny_sample(0, op)
        assert np.allclose(le_apply(op, h, op.M @ h), h, atol=1e-12)

    def test_zero_start(self, op):
        y = np.random.default_rng(0).normal(size=op.rows)
        assert np.allclose(le_apply(op, np.zeros(op.cols), y), op.W @ y)

    def test_affine(self, op):
        rng = np.random.default_rng(1)
        h1, h2, y = rng.normal(size=op.cols), rng.normal(size=op.cols), rng.normal(size=op.rows)
        expected = (np.eye(op.cols) - op.W @ op.M) @ (h1 - h2)
        assert np.allclose(le_apply(op, h1, y) - le_apply(op, h2, y), expected, atol=1e-12)

    def test_batched_rows(self, op):
        rng = np.random.default_rng(2)
        H, Y = rng.normal(size=(3, op.cols)), rng.normal(size=(3, op.rows))
        assert np.allclose(le_apply(op, H, Y)[1], le_apply(op, H[1], Y[1]))

    def test_mismatch(self, op):
        with pytest.raises(ValueError):
            le_apply(op, np.zeros(op.cols + 1), np.zeros(op.rows))

    def test_identity_nle(self, op):
        theta = init_params(np.random.default_rng(0), TINY, 4, 1)
        rng = np.random.default_rng(3)
        h, y = rng.normal(size=op.cols), rng.normal(size=op.rows)
        assert np.allclose(contraction_apply(theta, op, h, y), le_apply(op, h, y))


class TestIteration:
    def test_affine_contraction(self):
        b = np.array([1.0, -2.0, 0.5])
        res = iterate_to_fixed_point(lambda h: 0.5 * h + b, np.zeros(3), epsilon=1e-9, max_iters=100)
        assert res.converged
        assert np.allclose(res.h_star, 2 * b, atol=1e-8)
        ratios = np.array(res.residual_trace[1:]) / np.array(res.residual_trace[:-1])
        assert np.allclose(ratios, 0.5, atol=1e-12)

    def test_loose_epsilon_one_application(self):
        calls = []
        res = iterate_to_fixed_point(lambda h: calls.append(1) or h + 1e-3, np.zeros(2), epsilon=1.0)
        assert res.iterations == 1 and len(calls) == 1 and res.converged

    def test_cap_flags_not_raises(self):
        res = iterate_to_fixed_point(lambda h: h + 1.0, np.zeros(2), epsilon=1e-3, max_iters=7)
        assert not res.converged and res.iterations == 7

    def test_invalid_epsilon(self):
        with pytest.raises(ValueError):
            iterate_to_fixed_point(lambda h: h, np.zeros(1), epsilon=0.0)

    def test_batch_matches_single(self, op):
        theta = random_theta(0)
        Y = np.stack([tiny_sample(i, op)[1] for i in range(4)])
        batch = fixed_point_solve_batch(theta, op, Y, 1e-8, 200)
        for i in range(4):
            single = fixed_point_solve(theta, op, Y[i], 1e-8, 200)
            assert batch.iterations[i] == single.iterations
            assert np.allclose(batch.h_star[i], single.h_star, atol=1e-12)
            assert np.allclose(batch.residuals[i, :single.iterations], single.residual_trace)
            assert np.all(np.isnan(batch.residuals[i, single.iterations:]))

    def test_fixed_point_property(self, op):
        theta = random_theta(1)
        _, y = tiny_sample(5, op)
        res = fixed_point_solve(theta, op, y, 1e-10, 500)
        assert res.converged
        assert np.linalg.norm(contraction_apply(theta, op, res.h_star, y) - res.h_star) <= 1e-10

    def test_callback(self, op):
        seen = []
        fixed_point_solve_batch(random_theta(0), op, np.zeros((2, op.rows)) + 0.1, 1e-6, 5,
                                callback=lambda t, H: seen.append(t))
        assert seen == list(range(1, len(seen) + 1)) and len(seen) >= 1


class TestLipschitz:
    def test_identity(self):
        h = np.random.default_rng(0).normal(size=(16, 8))
        assert lipschitz_estimate(lambda u: u, h).lipschitz_estimate == pytest.approx(1.0, abs=1e-10)

    def test_identity_network(self):
        theta = init_params(np.random.default_rng(0), TINY, 4, 1)
        h = np.random.default_rng(1).normal(size=(16, 8))
        assert lipschitz_estimate(theta, h).lipschitz_estimate == pytest.approx(1.0, abs=1e-10)

    def test_linear_probe(self):
        h = np.random.default_rng(0).normal(size=(64, 8))
        assert lipschitz_estimate(lambda u: 0.7 * u, h).lipschitz_estimate == pytest.approx(0.7, abs=0.01)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            lipschitz_estimate(lambda u: u, np.zeros((0, 8)))
        with pytest.raises(ValueError):
            lipschitz_estimate(lambda u: u, np.ones((2, 8)), perturbation_scale=0.0)

    def test_safeguard_brings_gain_below_one(self):
        theta = random_theta(2, skip=1.5, head_scale=1.0)
        h = np.random.default_rng(3).normal(size=(32, 8))
        before = lipschitz_estimate(theta, h, rng=np.random.default_rng(4)).lipschitz_estimate
        assert before > 1.0
        fixed = safeguard_normalize(theta, before)
        after = lipschitz_estimate(fixed, h, rng=np.random.default_rng(4)).lipschitz_estimate
        assert after <= 1.0 + 1e-3
        assert after == pytest.approx(1 - SAFEGUARD_MARGIN, rel=1e-9)
        assert np.array_equal(fixed["head2.b"], theta["head2.b"])
        assert np.array_equal(fixed["block0.conv1.w"], theta["block0.conv1.w"])

    def test_safeguard_scales_map_exactly(self):
        theta = random_theta(5, skip=1.2)
        u = np.random.default_rng(0).normal(size=(3, 8))
        c = (1 - SAFEGUARD_MARGIN) / 2.0
        fixed = safeguard_normalize(theta, 2.0)
        b = theta["head2.b"]
        # map becomes c * (g(u) - bias) + bias
        bias = np.repeat(b, 4)[None]
        assert np.allclose(nle_forward(fixed, u) - bias, c * (nle_forward(theta, u) - bias), atol=1e-12)

    def test_safeguard_noop(self):
        theta = random_theta(0)
        assert safeguard_normalize(theta, 0.9) is theta

    def test_safeguard_custom_limit(self):
        theta = random_theta(2, skip=1.5, head_scale=1.0)
        h = np.random.default_rng(3).normal(size=(32, 8))
        before = lipschitz_estimate(theta, h, rng=np.random.default_rng(4)).lipschitz_estimate
        after = lipschitz_estimate(safeguard_normalize(theta, before, 0.4), h,
                                   rng=np.random.default_rng(4)).lipschitz_estimate
        assert after == pytest.approx(0.4 * (1 - SAFEGUARD_MARGIN), rel=1e-9)


class TestContractionLimit:
    # eta = S_bar / Q scales the row space of M by 1 - eta; the null space keeps gain 1 unless Q = S_bar
    @pytest.mark.parametrize("Q,gain,limit", [(1, 3.0, 1 / 3), (2, 1.0, 1.0), (3, 1.0, 1.0), (4, 0.0, 1.0)])
    def test_limit_from_eta(self, Q, gain, limit):
        o = tiny_operator(Q, Q)
        assert le_gain(o) == pytest.approx(gain, abs=1e-8)
        assert contraction_limit(o) == pytest.approx(limit, abs=1e-8)

    def test_composition_contracts_under_limit(self):
        o = tiny_operator(0, 1)
        c = 0.9 * contraction_limit(o)
        rng = np.random.default_rng(0)
        y = rng.normal(size=o.rows)
        for _ in range(20):
            a, b = rng.normal(size=(2, o.cols))
            ratio = np.linalg.norm(c * le_apply(o, a, y) - c * le_apply(o, b, y)) / np.linalg.norm(a - b)
            assert ratio < 1.0
