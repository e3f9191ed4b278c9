import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from flownull.metrics import cpsnr, gain_curve, gain_theory, moment_distance, psnr, ssim
from flownull.oracle import GaussianOracle, SingularCovarianceError, oracle_posterior, oracle_sample
from flownull.toy import ToyProblem, unvec


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


class TestPSNR:
    def test_identical_is_inf(self):
        x = np.random.default_rng(0).random((8, 8))
        assert psnr(x, x) == np.inf

    def test_forty_db(self):
        D = 64
        truth = np.ones((8, 8))
        delta = np.zeros(D)
        delta[0] = np.sqrt(D * 1e-4)
        assert psnr(truth + delta.reshape(8, 8), truth) == pytest.approx(40.0, abs=1e-9)

    @pytest.mark.parametrize("alpha", [0.01, 3.0, 250.0])
    def test_scale_invariant(self, alpha):
        rng = np.random.default_rng(1)
        t, e = rng.random((8, 8)), rng.random((8, 8))
        assert psnr(alpha * e, alpha * t) == pytest.approx(psnr(e, t), rel=1e-10)

    def test_zero_truth_rejected(self):
        with pytest.raises(ValueError):
            psnr(np.ones((2, 2)), np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.ones((2, 2)), np.ones((2, 3)))


class TestCPSNR:
    def test_identical_is_inf(self):
        x = crandn(np.random.default_rng(0), 4, 4)
        assert cpsnr(x, x) == np.inf

    def test_phase_error_contrast(self):
        truth = crandn(np.random.default_rng(1), 8, 8)
        est = np.exp(0.3j) * truth
        assert np.isfinite(cpsnr(est, truth))
        # magnitudes agree up to roundoff, so the magnitude PSNR is infinite or enormous
        assert psnr(est, truth) > 250

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), noise=st.floats(1e-3, 10))
    def test_cpsnr_below_magnitude_psnr(self, seed, noise):
        rng = np.random.default_rng(seed)
        truth = crandn(rng, 6, 6)
        est = truth + noise * crandn(rng, 6, 6)
        assert cpsnr(est, truth) <= psnr(est, truth) + 1e-9


class TestSSIM:
    def test_identical(self):
        x = np.random.default_rng(0).random((16, 16))
        assert ssim(x, x) == pytest.approx(1.0)

    def test_noise_lowers(self):
        rng = np.random.default_rng(1)
        x = rng.random((16, 16))
        assert ssim(x + rng.normal(0, 0.5, x.shape), x) < 1.0

    def test_constant_images(self):
        a = np.full((10, 10), 0.7)
        assert ssim(a, a) == pytest.approx(1.0)

    def test_window_too_large(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.ones((5, 5)), np.ones((5, 5)))

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_matches_skimage(self, seed):
        rng = np.random.default_rng(seed)
        t = rng.random((32, 24))
        e = np.clip(t + rng.normal(0, 0.2, t.shape), 0, None)
        ref = structural_similarity(e, t, win_size=7, data_range=t.max(), gaussian_weights=False,
                                    use_sample_covariance=True)
        assert ssim(e, t) == pytest.approx(ref, abs=1e-10)

    def test_symmetric_with_fixed_range(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert ssim(a, b, data_range=1.0) == pytest.approx(ssim(b, a, data_range=1.0), abs=1e-14)


class TestGainTheory:
    def test_p1(self):
        assert gain_theory(1) == 0.0

    def test_limit(self):
        assert gain_theory(np.inf) == pytest.approx(3.0103, abs=1e-4)

    def test_p8(self):
        assert gain_theory(8) == pytest.approx(10 * np.log10(16 / 9))
        assert gain_theory(8) == pytest.approx(2.499, abs=5e-4)

    def test_monotone_bounded(self):
        g = gain_theory(np.arange(1, 2000))
        assert np.all(np.diff(g) > 0) and np.all(g < 10 * np.log10(2))

    def test_invalid(self):
        with pytest.raises(ValueError):
            gain_theory(0)


class TestOracle:
    @pytest.mark.parametrize("s2", [0.01, 0.5, 2.0])
    def test_scalar_conjugate(self, s2):
        o = GaussianOracle([0.0], [[1.0]], [[1.0]], s2)
        mean, cov = oracle_posterior(o, np.array([1.7]))
        assert mean[0] == pytest.approx(1.7 / (1 + s2))
        assert cov[0, 0] == pytest.approx(s2 / (1 + s2))

    def test_zero_noise_invertible(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        o = GaussianOracle(np.zeros(3), np.eye(3), A, 0.0)
        y = rng.standard_normal(3)
        mean, cov = o.posterior(y)
        np.testing.assert_allclose(mean, np.linalg.solve(A, y), atol=1e-10)
        assert np.max(np.abs(cov)) < 1e-10
        with pytest.raises(SingularCovarianceError):
            o.sample(y, 3, rng)

    def test_monte_carlo_mean(self):
        toy = ToyProblem.build(0)
        _, m = toy.draw(1, seed=5)
        mean, cov = toy.oracle.posterior(m[0])
        n = 100_000
        s = oracle_sample(toy.oracle, m[0], n, seed=1)
        sd = np.sqrt(np.diag(cov))
        assert np.all(np.abs(s.mean(axis=0) - mean) < 3 * sd / np.sqrt(n) + 1e-12)

    def test_covariance_psd_symmetric(self):
        toy = ToyProblem.build(2)
        _, cov = toy.oracle.posterior(np.zeros(4))
        np.testing.assert_array_equal(cov, cov.T)
        assert np.min(np.linalg.eigvalsh(cov)) > 0

    def test_entropy_and_log_density(self):
        o = GaussianOracle(np.zeros(2), np.diag([1.0, 4.0]), np.eye(2), 1.0)
        _, cov = o.posterior(np.zeros(2))
        assert o.entropy() == pytest.approx(0.5 * np.log(np.linalg.det(2 * np.pi * np.e * cov)))
        x = np.array([[0.2, -0.4]])
        ref = -0.5 * x[0] @ np.linalg.solve(cov, x[0]) - 0.5 * np.log(np.linalg.det(2 * np.pi * cov))
        assert o.log_density(x, np.zeros(2))[0] == pytest.approx(ref)

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            GaussianOracle(np.zeros(2), np.eye(3), np.eye(2), 1.0)


def oracle_draw(toy):
    def draw(rng, n):
        x, m = toy.oracle.simulate(1, rng)
        return unvec(x[0]), unvec(toy.oracle.sample(m[0], n, rng))
    return draw


class TestGainCurve:
    def test_p1_exactly_zero(self):
        gc = gain_curve(oracle_draw(ToyProblem.build(0)), [1, 2, 4], trials=5)
        assert gc.empirical_db[0] == 0.0
        assert gc.theory_db == [gain_theory(p) for p in [1, 2, 4]]

    def test_oracle_matches_theory(self):
        gc = gain_curve(oracle_draw(ToyProblem.build(0)), [1, 2, 4, 8, 16, 32], trials=200, seed=1)
        assert gc.max_deviation() < 0.2

    def test_mse_ratio_law(self):
        """E1/EP = 2P/(P+1) for exact posterior draws, up to Monte-Carlo error."""
        gc = gain_curve(oracle_draw(ToyProblem.build(1)), [1, 4, 16], trials=400, seed=2)
        ratio = np.array(gc.mse[0]) / np.array(gc.mse)
        np.testing.assert_allclose(ratio, [1, 8 / 5, 32 / 17], rtol=0.05)

    def test_requires_ascending(self):
        with pytest.raises(ValueError):
            gain_curve(oracle_draw(ToyProblem.build(0)), [4, 2], trials=1)


def test_moment_distance_zero_for_matching_moments():
    rng = np.random.default_rng(0)
    s = rng.standard_normal((50, 3))
    d = moment_distance(s, s.mean(0), np.cov(s, rowvar=False))
    assert d["mean"] < 1e-12 and d["cov"] < 1e-12
