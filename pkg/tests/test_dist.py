import math
from statistics import NormalDist

import numpy as np
import pytest

from mixcast.dist import (
    BaseKind, MixtureSample, SufficientStats, base_cdf, base_log_pdf,
    component_variance, gaussian_avg_loglik, gaussian_mle_variance,
    mixture_cdf, mixture_log_pdf, mixture_marginal_log_pdf, mixture_variance,
    sharpness,
)

G = BaseKind.GAUSSIAN
L = BaseKind.LAPLACE


def stats(mean, log_scale):
    return SufficientStats(np.atleast_1d(np.asarray(mean, dtype=float)),
                           np.atleast_1d(np.asarray(log_scale, dtype=float)))


def random_mixture(rng, k=None, horizons=1):
    k = k or int(rng.integers(1, 11))
    draws = [stats(rng.normal(size=horizons), rng.uniform(-2.0, 1.0, size=horizons))
             for _ in range(k)]
    return MixtureSample(draws)


class TestBaseLogPdf:
    def test_unit_height_gaussian(self):
        # variance 1/(2pi) gives density 1 at the mean
        assert base_log_pdf(G, 0.0, 0.0, math.log(1 / (2 * math.pi))) == pytest.approx(0.0, abs=1e-15)

    def test_one_sigma_offset(self):
        sigma2 = 1.7
        got = base_log_pdf(G, math.sqrt(sigma2), 0.0, math.log(sigma2))
        assert got == pytest.approx(-0.5 * math.log(2 * math.pi * sigma2) - 0.5)

    def test_laplace_unit_height(self):
        # 1/(2b) = 1 at b = 1/2
        assert base_log_pdf(L, 1.0, 1.0, math.log(0.5)) == pytest.approx(0.0, abs=1e-15)


class TestBaseCdf:
    def test_median_is_half(self):
        for kind in (G, L):
            assert base_cdf(kind, 2.0, 2.0, 0.3) == pytest.approx(0.5)

    def test_upper_limit(self):
        for kind in (G, L):
            assert base_cdf(kind, 1e12, 0.0, 0.0) == pytest.approx(1.0)

    def test_gaussian_975_quantile(self):
        # frozen two-sided 5% normal quantile
        sigma = 1.3
        got = base_cdf(G, 1.959964 * sigma, 0.0, math.log(sigma ** 2))
        assert got == pytest.approx(0.975, abs=1e-6)

    def test_matches_normal_dist(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            mu, ls, y = rng.normal(), rng.uniform(-2, 2), rng.normal(scale=3)
            expected = NormalDist(mu, math.exp(0.5 * ls)).cdf(y)
            assert base_cdf(G, y, mu, ls) == pytest.approx(expected, abs=1e-12)


class TestMixtureLogPdf:
    def test_single_draw_reduces_to_base(self):
        d = stats([0.5, -1.0], [0.1, -0.3])
        y = np.array([0.2, 0.4])
        expected = float(np.sum(base_log_pdf(G, y, d.mean, d.log_scale)))
        assert mixture_log_pdf(MixtureSample([d]), y) == pytest.approx(expected, abs=1e-15)

    def test_duplicate_draws_unchanged(self):
        d = stats([0.5], [0.2])
        y = np.array([1.0])
        single = mixture_log_pdf(MixtureSample([d]), y)
        double = mixture_log_pdf(MixtureSample([d, stats([0.5], [0.2])]), y)
        assert double == pytest.approx(single, abs=1e-14)

    def test_two_component_hand_value(self):
        # N(0,1) and N(4,1) evaluated at 0: log(0.5 * (phi(0) + phi(4)))
        sample = MixtureSample([stats([0.0], [0.0]), stats([4.0], [0.0])])
        phi0 = math.exp(-0.0) / math.sqrt(2 * math.pi)
        phi4 = math.exp(-8.0) / math.sqrt(2 * math.pi)
        expected = math.log(0.5 * (phi0 + phi4))
        assert mixture_log_pdf(sample, np.array([0.0])) == pytest.approx(expected, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            sample = random_mixture(rng, horizons=3)
            y = rng.normal(size=3)
            base = mixture_log_pdf(sample, y)
            perm = rng.permutation(sample.k)
            shuffled = MixtureSample([sample.draws[i] for i in perm])
            assert mixture_log_pdf(shuffled, y) == pytest.approx(base, abs=1e-12)

    def test_length_mismatch_rejected(self):
        sample = MixtureSample([stats([0.0], [0.0])])
        with pytest.raises(ValueError):
            mixture_log_pdf(sample, np.zeros(3))

    def test_empty_mixture_rejected(self):
        with pytest.raises(ValueError):
            MixtureSample([])

    def test_density_integrates_to_one(self):
        # T=1 mixtures: trapezoid integral of exp(log pdf) over +/-10 scales
        rng = np.random.default_rng(2)
        for kind in (G, L):
            for _ in range(10):
                sample = random_mixture(rng)
                means = sample.means()[:, 0]
                scales = np.sqrt(component_variance(kind, sample.log_scales()[:, 0]))
                lo = means.min() - 10 * scales.max()
                hi = means.max() + 10 * scales.max()
                grid = np.linspace(lo, hi, 4001)
                pdf = np.exp([mixture_log_pdf(sample, np.array([g]), kind) for g in grid])
                integral = np.trapezoid(pdf, grid)
                assert integral == pytest.approx(1.0, abs=1e-3)


class TestMixtureCdf:
    def test_single_draw_is_base_cdf(self):
        d = stats([0.3, 1.0], [0.2, 0.1])
        sample = MixtureSample([d])
        assert mixture_cdf(sample, 2, 0.7) == pytest.approx(
            float(base_cdf(G, 0.7, 1.0, 0.1)))

    def test_symmetric_midpoint(self):
        sample = MixtureSample([stats([-1.0], [0.4]), stats([3.0], [0.4])])
        assert mixture_cdf(sample, 1, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_two_component_hand_value(self):
        sample = MixtureSample([stats([0.0], [0.0]), stats([2.0], [0.0])])
        expected = 0.5 * (0.5 + NormalDist().cdf(-2.0))
        got = mixture_cdf(sample, 1, 0.0)
        assert got == pytest.approx(expected, abs=1e-6)
        assert got == pytest.approx(0.26138, abs=5e-5)

    def test_monotone_with_correct_limits(self):
        rng = np.random.default_rng(3)
        for kind in (G, L):
            sample = random_mixture(rng, horizons=2)
            for h in (1, 2):
                grid = np.linspace(-50.0, 50.0, 301)
                vals = np.array([mixture_cdf(sample, h, g, kind) for g in grid])
                assert np.all(np.diff(vals) >= -1e-12)
                assert mixture_cdf(sample, h, -1e10, kind) < 1e-9
                assert mixture_cdf(sample, h, 1e10, kind) > 1 - 1e-9

    def test_horizon_out_of_range(self):
        sample = MixtureSample([stats([0.0], [0.0])])
        for h in (0, 2):
            with pytest.raises(ValueError):
                mixture_cdf(sample, h, 0.0)

    def test_cdf_derivative_matches_marginal_pdf(self):
        rng = np.random.default_rng(4)
        h_step = 1e-5
        for kind in (G, L):
            for _ in range(10):
                sample = random_mixture(rng, horizons=2)
                y = rng.normal()
                fd = (mixture_cdf(sample, 2, y + h_step, kind)
                      - mixture_cdf(sample, 2, y - h_step, kind)) / (2 * h_step)
                pdf = math.exp(mixture_marginal_log_pdf(sample, 2, y, kind))
                assert fd == pytest.approx(pdf, abs=1e-6, rel=1e-5)


class TestGaussianMaximumLikelihood:
    def test_zero_residuals(self):
        assert gaussian_mle_variance(np.zeros((3, 4))) == 0.0

    def test_plus_minus_one(self):
        assert gaussian_mle_variance(np.array([[1.0, -1.0]])) == 1.0

    def test_hand_value(self):
        assert gaussian_mle_variance(np.array([[1.0, 2.0], [3.0, 4.0]])) == 7.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            gaussian_mle_variance(np.zeros((0, 2)))

    def test_unit_density_anchor(self):
        assert gaussian_avg_loglik(1.0 / (2.0 * math.pi), 12) == pytest.approx(-6.0, abs=1e-12)

    def test_degenerate_horizon(self):
        assert gaussian_avg_loglik(0.5, 0) == 0.0

    def test_invalid_variance(self):
        with pytest.raises(ValueError):
            gaussian_avg_loglik(0.0, 3)

    def test_matches_brute_force_density_average(self):
        # closed form == direct average of isotropic Gaussian log densities
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            t = int(rng.integers(1, 8))
            resid = rng.normal(scale=rng.uniform(0.5, 3.0), size=(n, t))
            sigma2 = gaussian_mle_variance(resid)
            closed = gaussian_avg_loglik(sigma2, t)
            per_sample = (-0.5 * t * math.log(2 * math.pi * sigma2)
                          - 0.5 * (resid ** 2).sum(axis=1) / sigma2)
            assert closed == pytest.approx(per_sample.mean(), abs=1e-10)


class TestSharpness:
    def test_single_draw_is_component_variance(self):
        sample = MixtureSample([stats([0.0], [math.log(2.5)])])
        assert mixture_variance(sample, 1) == pytest.approx(2.5)

    def test_identical_components(self):
        d = stats([1.0], [math.log(0.7)])
        sample = MixtureSample([d, stats([1.0], [math.log(0.7)])])
        assert mixture_variance(sample, 1) == pytest.approx(0.7)

    def test_two_components_law_of_total_variance(self):
        v, a = 0.8, 1.5
        sample = MixtureSample([stats([a], [math.log(v)]), stats([-a], [math.log(v)])])
        assert mixture_variance(sample, 1) == pytest.approx(v + a * a)

    def test_laplace_component_variance(self):
        b = 0.6
        sample = MixtureSample([stats([0.0], [math.log(b)])])
        assert mixture_variance(sample, 1, L) == pytest.approx(2 * b * b)

    def test_sharpness_is_mean_over_samples(self):
        s1 = MixtureSample([stats([0.0], [math.log(1.0)])])
        s2 = MixtureSample([stats([0.0], [math.log(3.0)])])
        assert sharpness([s1, s2], 1) == pytest.approx(2.0)
        assert sharpness([s1], 1) >= 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sharpness([], 1)

    def test_monte_carlo_oracle(self):
        # sample from the mixture and compare empirical variance
        rng = np.random.default_rng(6)
        sample = MixtureSample([stats([1.0], [math.log(0.5)]),
                                stats([-2.0], [math.log(1.5)])])
        comp = rng.integers(0, 2, size=200_000)
        mus = np.where(comp == 0, 1.0, -2.0)
        sds = np.where(comp == 0, math.sqrt(0.5), math.sqrt(1.5))
        draws = rng.normal(mus, sds)
        assert mixture_variance(sample, 1) == pytest.approx(draws.var(), rel=0.02)
