import math

import numpy as np
import pytest

from privrelease.core import Dataset, RandomStream, ScalingMatrix
from privrelease.densities import Gaussian1D, Logistic1D, ProductMechanism, StudentT1D
from privrelease.mechanisms import (
    LAMBDA_CAP,
    GaussianMechanism,
    LaplaceMechanism,
    matched_laplace_baseline,
    obfuscate,
    optimal_iid_mechanism,
    p_lambda_objective,
    sample_iid,
)
from privrelease.privacy import crb_bounds


def random_pi(rng, p):
    A = rng.normal(size=(p, p))
    return ScalingMatrix(A @ A.T + 0.5 * np.eye(p))


def optimum(lam, scaling):
    return 2 * math.sqrt(lam) * np.trace(scaling.inv_sqrt())


class TestOptimalMechanism:
    def test_identity(self):
        np.testing.assert_allclose(optimal_iid_mechanism(1.0, ScalingMatrix.identity(2)).covariance, np.eye(2), atol=1e-14)

    def test_diagonal_example(self):
        mech = optimal_iid_mechanism(4.0, ScalingMatrix.diagonal([4.0, 1.0]))
        np.testing.assert_allclose(mech.covariance, np.diag([0.25, 0.5]), atol=1e-14)

    def test_small_lambda_floor(self):
        s = ScalingMatrix.identity(2)
        mech = optimal_iid_mechanism(1e-4, s)
        np.testing.assert_allclose(mech.covariance, 100 * np.eye(2), rtol=1e-12)
        assert crb_bounds(mech.fisher_information(), s).crb_floor == pytest.approx(200.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_information_identity(self, seed):
        rng = np.random.default_rng(seed)
        s, lam = random_pi(rng, 3), float(10 ** rng.uniform(-3, 3))
        mech = optimal_iid_mechanism(lam, s)
        np.testing.assert_allclose(mech.fisher_information().matrix, math.sqrt(lam) * s.sqrt(), atol=1e-10 * math.sqrt(lam))
        np.testing.assert_allclose(mech.covariance @ (math.sqrt(lam) * s.sqrt()), np.eye(3), atol=1e-10)

    def test_density_matches_closed_form(self):
        s = ScalingMatrix.diagonal([2.0, 0.5])
        lam = 0.8
        mech = optimal_iid_mechanism(lam, s)
        n = np.random.default_rng(1).normal(size=(20, 2))
        cov = s.inv_sqrt() / math.sqrt(lam)
        expected = np.linalg.det(2 * math.pi * cov) ** -0.5 * np.exp(
            -0.5 * math.sqrt(lam) * np.einsum("ij,jk,ik->i", n, s.sqrt(), n)
        )
        np.testing.assert_allclose(mech.pdf(n), expected, rtol=1e-12)

    @pytest.mark.parametrize("lam", [0.0, -1.0, math.inf, math.nan])
    def test_lambda_domain(self, lam):
        with pytest.raises(ValueError):
            optimal_iid_mechanism(lam, ScalingMatrix.identity(1))

    def test_lambda_cap(self):
        assert optimal_iid_mechanism(1e20, ScalingMatrix.identity(1)).lam == LAMBDA_CAP


class TestSampling:
    def test_covariance_converges(self):
        x = sample_iid(optimal_iid_mechanism(1.0, ScalingMatrix.identity(2)), 100_000, RandomStream(3))
        assert np.abs(np.cov(x.T) - np.eye(2)).max() < 0.03

    def test_correlated_covariance_within_relative_band(self):
        mech = GaussianMechanism([[2.0, 0.6], [0.6, 1.0]])
        N = 100_000
        emp = np.cov(sample_iid(mech, N, RandomStream(4)).T)
        scale = np.sqrt(np.outer(np.diag(mech.covariance), np.diag(mech.covariance)))
        assert np.all(np.abs(emp - mech.covariance) <= 5 * math.sqrt(2 / N) * scale)

    def test_laplace_variance(self):
        x = sample_iid(LaplaceMechanism([1.0, 2.0]), 100_000, RandomStream(5))
        np.testing.assert_allclose(x.var(axis=0), [2.0, 8.0], rtol=0.05)

    @pytest.mark.parametrize("mech", [GaussianMechanism(np.eye(3)), LaplaceMechanism([1.0, 1.0, 3.0])])
    def test_deterministic(self, mech):
        a = sample_iid(mech, 50, RandomStream(7, 2))
        b = sample_iid(mech, 50, RandomStream(7, 2))
        c = sample_iid(mech, 50, RandomStream(7, 3))
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_count_domain(self):
        with pytest.raises(ValueError):
            sample_iid(GaussianMechanism(np.eye(1)), 0, RandomStream(0))


class TestObjective:
    def test_identity_value(self):
        s = ScalingMatrix.identity(2)
        assert p_lambda_objective(optimal_iid_mechanism(1.0, s), 1.0, s) == pytest.approx(4.0, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_general_closed_form(self, seed):
        rng = np.random.default_rng(seed + 10)
        s, lam = random_pi(rng, 4), float(10 ** rng.uniform(-4, 2))
        mech = optimal_iid_mechanism(lam, s)
        fisher_term = np.trace(s.inverse() @ mech.fisher_information().matrix)
        variance_term = lam * np.trace(mech.covariance)
        # each trace equals sqrt(lam) Tr(Pi^-1/2) on its own
        assert fisher_term == pytest.approx(math.sqrt(lam) * np.trace(s.inv_sqrt()), rel=1e-10)
        assert variance_term == pytest.approx(fisher_term, rel=1e-10)
        assert p_lambda_objective(mech, lam, s) == pytest.approx(optimum(lam, s), rel=1e-10)

    def test_logistic_matched_variance_is_worse(self):
        s = ScalingMatrix.identity(2)
        # unit-variance logistic: scale = sqrt(3)/pi
        dens = ProductMechanism([Logistic1D(math.sqrt(3) / math.pi)] * 2)
        np.testing.assert_allclose(np.diag(dens.second_moment()), 1.0, atol=1e-8)
        assert p_lambda_objective(dens, 1.0, s) >= 4.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            p_lambda_objective(GaussianMechanism(np.eye(2)), 1.0, ScalingMatrix.identity(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_battery_never_beats_the_optimum(self, seed):
        rng = np.random.default_rng(100 + seed)
        theta = rng.uniform(0.2, 5.0, size=2)
        s = ScalingMatrix.diagonal(theta)
        lam = float(10 ** rng.uniform(-2, 2))
        best = optimum(lam, s)
        stds = np.sqrt(np.diag(optimal_iid_mechanism(lam, s).covariance))
        battery = [
            ProductMechanism([Logistic1D(sd * math.sqrt(3) / math.pi) for sd in stds]),
            ProductMechanism([StudentT1D(5, sd * math.sqrt(3 / 5)) for sd in stds]),
            ProductMechanism([StudentT1D(10, sd * math.sqrt(8 / 10)) for sd in stds]),
            ProductMechanism([Gaussian1D(sd * f) for sd, f in zip(stds, rng.uniform(0.5, 1.5, size=2))]),
        ]
        for dens in battery:
            assert p_lambda_objective(dens, lam, s) >= best - 1e-6
        # the optimum itself through the quadrature path
        exact = ProductMechanism([Gaussian1D(sd) for sd in stds])
        assert p_lambda_objective(exact, lam, s) == pytest.approx(best, rel=1e-6)

    def test_random_gaussian_competitors(self):
        rng = np.random.default_rng(8)
        s, lam = random_pi(rng, 3), 0.3
        best = optimum(lam, s)
        for _ in range(20):
            C = optimal_iid_mechanism(lam, s).covariance
            B = np.eye(3) + 0.3 * rng.normal(size=(3, 3))
            assert p_lambda_objective(GaussianMechanism(B @ C @ B.T), lam, s) >= best - 1e-9


class TestLaplaceBaseline:
    def test_identity(self):
        s = ScalingMatrix.identity(2)
        lap = matched_laplace_baseline(optimal_iid_mechanism(1.0, s))
        np.testing.assert_allclose(lap.scales, [1.0, 1.0])
        assert crb_bounds(lap.fisher_information(), s).crb_floor == pytest.approx(2.0)

    def test_small_lambda(self):
        s = ScalingMatrix.identity(2)
        lap = matched_laplace_baseline(optimal_iid_mechanism(1e-4, s))
        np.testing.assert_allclose(lap.scales, [10.0, 10.0], rtol=1e-12)
        assert crb_bounds(lap.fisher_information(), s).crb_floor == pytest.approx(200.0)

    def test_diagonal(self):
        s = ScalingMatrix.diagonal([4.0, 1.0])
        gauss = optimal_iid_mechanism(4.0, s)
        lap = matched_laplace_baseline(gauss, s)
        np.testing.assert_allclose(lap.scales**2, [0.25, 0.5], rtol=1e-12)
        assert crb_bounds(lap.fisher_information(), s).crb_floor == pytest.approx(1.5, rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_floors_match_for_diagonal_scaling(self, seed):
        rng = np.random.default_rng(seed)
        s = ScalingMatrix.diagonal(rng.uniform(0.1, 10, size=4))
        gauss = optimal_iid_mechanism(float(10 ** rng.uniform(-4, 4)), s)
        g = crb_bounds(gauss.fisher_information(), s).crb_floor
        l = crb_bounds(matched_laplace_baseline(gauss, s).fisher_information(), s).crb_floor
        assert abs(l - g) <= 1e-9 * g

    def test_nondiagonal_falls_back_and_flags(self):
        s = ScalingMatrix([[2.0, 0.5], [0.5, 1.0]])
        gauss = optimal_iid_mechanism(1.0, s)
        lap = matched_laplace_baseline(gauss, s)
        assert "trace-matched" in lap.flags and lap.scales[0] == lap.scales[1]
        info = lap.fisher_information()
        assert "trace-matched" in info.flags and "analytic-limit" in info.flags
        g = crb_bounds(gauss.fisher_information(), s).crb_floor
        assert crb_bounds(info, s).crb_floor == pytest.approx(g, rel=1e-12)


class TestObfuscate:
    def test_huge_lambda_changes_nothing(self, blobs):
        # at the cap the per-coordinate noise std is 1e12 ** -0.25 = 1e-3
        out = obfuscate(blobs, optimal_iid_mechanism(1e12, ScalingMatrix.identity(2)), RandomStream(0))
        diff = out.features - blobs.features
        assert np.abs(diff).max() <= 6e-3
        assert diff.std() == pytest.approx(1e-3, rel=0.15)

    def test_average_release_recovers_the_row(self):
        row = np.array([[1.5, -2.0]])
        data = Dataset(row, [1.0])
        mech = optimal_iid_mechanism(0.25, ScalingMatrix.identity(2))
        releases = np.array([obfuscate(data, mech, RandomStream(1, k)).features[0] for k in range(10_000)])
        se = np.sqrt(np.diag(mech.covariance) / 10_000)
        assert np.all(np.abs(releases.mean(axis=0) - row[0]) <= 4 * se)

    @pytest.mark.parametrize("mech", [optimal_iid_mechanism(1.0, ScalingMatrix.identity(2)), LaplaceMechanism([1.0, 2.0])])
    def test_labels_and_input_untouched(self, blobs, mech):
        before = blobs.features.copy()
        out = obfuscate(blobs, mech, RandomStream(2))
        assert out.labels.tobytes() == blobs.labels.tobytes()
        assert np.array_equal(blobs.features, before)
        assert not np.array_equal(out.features, before)

    def test_dimension_mismatch(self, blobs):
        with pytest.raises(ValueError):
            obfuscate(blobs, GaussianMechanism(np.eye(3)), RandomStream(0))

    def test_gaussian_and_laplace_share_uniforms(self):
        s = ScalingMatrix.identity(2)
        g = optimal_iid_mechanism(1.0, s)
        a = g.sample(500, RandomStream(9))
        b = matched_laplace_baseline(g).sample(500, RandomStream(9))
        # both are monotone transforms of the same uniforms, so signs agree
        assert np.array_equal(np.sign(a), np.sign(b))
