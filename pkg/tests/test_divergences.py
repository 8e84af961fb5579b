import math

import numpy as np
import pytest

from fewbayes import autodiff as ad
from fewbayes.autodiff import Tensor
from fewbayes.divergences import KernelConfig, gaussian_kl, median_heuristic, mmd2, rbf_kernel
from fewbayes.errors import ContractError, DomainError, ShapeError
from fewbayes.model import GaussianPosterior

SIGMA_ONE = KernelConfig(bandwidth=1.0)


def posterior(mu, sigma2, requires_grad=False):
    return GaussianPosterior(
        mu=Tensor(mu, requires_grad=requires_grad),
        sigma2=Tensor(sigma2, requires_grad=requires_grad),
    )


class TestRbfKernel:
    def test_zero_distance(self):
        assert rbf_kernel([1.0, -2.0], [1.0, -2.0], sigma=0.7) == 1.0

    def test_hand_value(self):
        assert rbf_kernel([0.0], [2.0], sigma=1.0) == pytest.approx(math.exp(-2.0), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = rng.normal(size=4), rng.normal(size=4)
            assert rbf_kernel(a, b, 1.3) == pytest.approx(rbf_kernel(b, a, 1.3), abs=1e-15)

    def test_non_positive_sigma_rejected(self):
        with pytest.raises(DomainError):
            rbf_kernel([0.0], [1.0], sigma=0.0)


class TestMedianHeuristic:
    def test_single_pair(self):
        assert median_heuristic(np.array([[0.0]]), np.array([[2.0]])) == 2.0

    def test_degenerate_points_floor(self):
        same = np.zeros((3, 2))
        assert median_heuristic(same, same) == 1e-6

    def test_three_points(self):
        # pairwise distances {1, 3, 2} -> median 2
        assert median_heuristic(np.array([[0.0], [1.0]]), np.array([[3.0]])) == 2.0

    def test_too_few_points(self):
        with pytest.raises(ContractError):
            median_heuristic(np.zeros((1, 2)), np.zeros((0, 2)))


class TestMmd2Values:
    def test_identical_samples_biased_zero(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert mmd2(x, x.copy(), SIGMA_ONE, "biased").item() <= 1e-12

    def test_two_point_hand_value(self):
        got = mmd2(np.array([[0.0]]), np.array([[2.0]]), SIGMA_ONE, "biased").item()
        assert got == pytest.approx(2.0 - 2.0 * math.exp(-2.0), abs=1e-9)

    def test_unbiased_near_zero_for_same_distribution(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2000, 1))
        y = rng.normal(size=(2000, 1))
        assert abs(mmd2(x, y, SIGMA_ONE, "unbiased").item()) < 0.01

    def test_biased_nonnegative_and_zero_iff_coincide(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.normal(size=(4, 2))
            y = rng.normal(size=(4, 2))
            assert mmd2(x, y, SIGMA_ONE, "biased").item() >= 0.0
            assert mmd2(x, y, SIGMA_ONE, "biased").item() > 1e-8  # distinct clouds
        x = rng.normal(size=(4, 2))
        shuffled = x[::-1].copy()  # same multiset, different order
        assert mmd2(x, shuffled, SIGMA_ONE, "biased").item() <= 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        x, y = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        forward = mmd2(x, y, SIGMA_ONE, "biased").item()
        backward = mmd2(y, x, SIGMA_ONE, "biased").item()
        assert abs(forward - backward) < 1e-12

    def test_median_bandwidth_route(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(8, 2)), rng.normal(size=(8, 2)) + 1.0
        sigma = median_heuristic(x, y)
        auto = mmd2(x, y, KernelConfig(bandwidth="median"), "biased").item()
        explicit = mmd2(x, y, KernelConfig(bandwidth=sigma), "biased").item()
        assert auto == explicit

    def test_sample_count_contracts(self):
        one = np.zeros((1, 2))
        two = np.zeros((2, 2))
        with pytest.raises(ContractError):
            mmd2(one, two, SIGMA_ONE, "unbiased")
        with pytest.raises(ContractError):
            mmd2(np.zeros((0, 2)), two, SIGMA_ONE, "biased")
        with pytest.raises(ContractError):
            mmd2(two, two, SIGMA_ONE, "trimmed")

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            mmd2(np.zeros((2, 2)), np.zeros((2, 3)), SIGMA_ONE)


class TestMmd2AgainstKernelSums:
    def test_matches_direct_double_sum(self):
        # Independent oracle: brute-force kernel sums via rbf_kernel.
        rng = np.random.default_rng(21)
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
        sigma = 1.4
        kxx = np.mean([[rbf_kernel(a, b, sigma) for b in x] for a in x])
        kyy = np.mean([[rbf_kernel(a, b, sigma) for b in y] for a in y])
        kxy = np.mean([[rbf_kernel(a, b, sigma) for b in y] for a in x])
        expected = kxx + kyy - 2 * kxy
        got = mmd2(x, y, KernelConfig(bandwidth=sigma), "biased").item()
        assert got == pytest.approx(expected, abs=1e-12)

    def test_unbiased_matches_offdiagonal_sums(self):
        rng = np.random.default_rng(22)
        x, y = rng.normal(size=(4, 2)), rng.normal(size=(6, 2))
        sigma = 0.9
        n, m = len(x), len(y)
        kxx = sum(rbf_kernel(x[i], x[j], sigma) for i in range(n) for j in range(n) if i != j)
        kyy = sum(rbf_kernel(y[i], y[j], sigma) for i in range(m) for j in range(m) if i != j)
        kxy = np.mean([[rbf_kernel(a, b, sigma) for b in y] for a in x])
        expected = kxx / (n * (n - 1)) + kyy / (m * (m - 1)) - 2 * kxy
        got = mmd2(x, y, KernelConfig(bandwidth=sigma), "unbiased").item()
        assert got == pytest.approx(expected, abs=1e-12)


class TestGaussianKl:
    def test_identical_posteriors(self):
        q = posterior([[0.3, -1.0]], [[0.5, 2.0]])
        assert gaussian_kl(q, q).item() <= 1e-12

    def test_unit_shift(self):
        q1 = posterior([[1.0]], [[1.0]])
        q2 = posterior([[0.0]], [[1.0]])
        assert gaussian_kl(q1, q2).item() == pytest.approx(0.5, abs=1e-12)

    def test_variance_ratio(self):
        q1 = posterior([[0.0]], [[4.0]])
        q2 = posterior([[0.0]], [[1.0]])
        expected = 0.5 * (math.log(1.0 / 4.0) + 4.0 - 1.0)
        assert gaussian_kl(q1, q2).item() == pytest.approx(expected, abs=1e-12)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(13)
        base_mu = rng.normal(size=(2, 3))
        base_s2 = rng.uniform(0.5, 2.0, size=(2, 3))
        for _ in range(20):
            q1 = posterior(base_mu + rng.normal(scale=0.1, size=(2, 3)), base_s2)
            q2 = posterior(base_mu, base_s2)
            kl = gaussian_kl(q1, q2).item()
            assert kl >= 0.0
            assert kl > 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gaussian_kl(posterior([[0.0]], [[1.0]]), posterior([[0.0, 1.0]], [[1.0, 1.0]]))

    def test_monte_carlo_log_ratio_oracle(self):
        # 1e5 draws from q1; E[log q1 - log q2] must sit within 2%.
        rng = np.random.default_rng(17)
        for _ in range(5):
            mu1 = rng.uniform(-1, 1, size=(2, 3))
            mu2 = mu1 + rng.uniform(0.4, 1.0, size=(2, 3)) * rng.choice([-1, 1], size=(2, 3))
            s1 = rng.uniform(0.5, 2.0, size=(2, 3))
            s2 = rng.uniform(0.5, 2.0, size=(2, 3))
            closed = gaussian_kl(posterior(mu1, s1), posterior(mu2, s2)).item()
            draws = mu1 + np.sqrt(s1) * rng.standard_normal(size=(100_000, 2, 3))
            log_q1 = -0.5 * (np.log(2 * np.pi * s1) + (draws - mu1) ** 2 / s1)
            log_q2 = -0.5 * (np.log(2 * np.pi * s2) + (draws - mu2) ** 2 / s2)
            estimate = (log_q1 - log_q2).sum(axis=(1, 2)).mean()
            assert estimate == pytest.approx(closed, rel=0.02)


class TestGradients:
    def test_mmd2_passes_finite_differences(self):
        rng = np.random.default_rng(31)
        x = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        y = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        for kind in ("biased", "unbiased"):
            err = ad.finite_diff_check(lambda p, k=kind: mmd2(p[0], p[1], SIGMA_ONE, k), [x, y])
            assert err < 1e-4

    def test_gaussian_kl_passes_finite_differences(self):
        rng = np.random.default_rng(32)
        mu1 = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        mu2 = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        raw1 = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)), requires_grad=True)
        raw2 = Tensor(rng.uniform(0.5, 1.5, size=(2, 3)), requires_grad=True)

        def f(params):
            q1 = GaussianPosterior(params[0], ad.softplus(params[2]))
            q2 = GaussianPosterior(params[1], ad.softplus(params[3]))
            return gaussian_kl(q1, q2)

        assert ad.finite_diff_check(f, [mu1, mu2, raw1, raw2]) < 1e-4
