"""Divergences between posteriors: closed-form Gaussian KL and kernel MMD^2.

Both are differentiable through the autodiff engine so they can serve as
loss terms. The RBF bandwidth may be fixed or chosen by the median
heuristic; the heuristic value is treated as a constant for differentiation
(no gradient flows through the bandwidth).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, DomainError, ShapeError

ESTIMATOR_KINDS = ("biased", "unbiased")
MIN_BANDWIDTH = 1e-6


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel setup: an explicit bandwidth or the "median" sentinel."""

    bandwidth: float | str = "median"

    def __post_init__(self):
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ContractError(f"bandwidth must be positive or 'median', got {self.bandwidth!r}")
        elif self.bandwidth <= 0.0:
            raise DomainError(f"bandwidth must be positive, got {self.bandwidth}")


def rbf_kernel(a, b, sigma: float) -> float:
    """Gaussian kernel exp(-||a - b||^2 / (2 sigma^2)) between two vectors."""
    if sigma <= 0.0:
        raise DomainError(f"rbf_kernel: sigma must be positive, got {sigma}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"rbf_kernel: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return float(np.exp(-np.dot(d, d) / (2.0 * sigma * sigma)))


def median_heuristic(x, y) -> float:
    """Median pairwise Euclidean distance of the pooled samples.

    Floored at 1e-6 so degenerate point clouds still give a usable
    bandwidth. Operates on raw values; never differentiated.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    pooled = np.vstack([x, y])
    n = pooled.shape[0]
    if n < 2:
        raise ContractError(f"median_heuristic: need at least 2 pooled samples, got {n}")
    sq = np.sum(pooled * pooled, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T
    iu = np.triu_indices(n, k=1)
    dists = np.sqrt(np.maximum(d2[iu], 0.0))
    return max(float(np.median(dists)), MIN_BANDWIDTH)


def _pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    # ||a_i - b_j||^2 = |a_i|^2 + |b_j|^2 - 2 a_i . b_j, clamped at 0.
    a2 = ad.sum_reduce(ad.mul(a, a), axis=-1, keepdims=True)
    b2 = ad.sum_reduce(ad.mul(b, b), axis=-1, keepdims=True)
    cross = ad.scalar_mul(ad.matmul(a, ad.transpose(b)), -2.0)
    with_rows = ad.transpose(ad.broadcast_add_row(ad.transpose(cross), ad.transpose(a2)))
    return ad.relu(ad.broadcast_add_row(with_rows, ad.transpose(b2)))


def _gram(a: Tensor, b: Tensor, sigma: float) -> Tensor:
    return ad.exp(ad.scalar_mul(_pairwise_sq_dists(a, b), -0.5 / (sigma * sigma)))


def _offdiag_mean(k: Tensor) -> Tensor:
    n = k.data.shape[0]
    mask = Tensor(1.0 - np.eye(n))
    total = ad.sum_reduce(ad.mul(k, mask))
    return ad.scalar_mul(total, 1.0 / (n * (n - 1)))


def mmd2(x, y, kernel: KernelConfig = KernelConfig(), kind: str = "biased") -> Tensor:
    """Squared maximum mean discrepancy between two sample sets.

    Args:
        x: (n, d) samples from the first distribution (Tensor or array).
        y: (m, d) samples from the second distribution.
        kernel: RBF bandwidth choice; "median" pools x and y.
        kind: "biased" V-statistic (>= 0, includes diagonal terms) or
            "unbiased" U-statistic (diagonal excluded, may be negative).

    Returns:
        A scalar tensor, differentiable w.r.t. x and y when they carry
        gradients. The bandwidth never does.
    """
    if kind not in ESTIMATOR_KINDS:
        raise ContractError(f"mmd2: kind must be one of {ESTIMATOR_KINDS}, got {kind!r}")
    x, y = as_tensor(x), as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or x.data.shape[1] != y.data.shape[1]:
        raise ShapeError(f"mmd2: expected (n, d) and (m, d), got {x.data.shape} and {y.data.shape}")
    n, m = x.data.shape[0], y.data.shape[0]
    minimum = 1 if kind == "biased" else 2
    if n < minimum or m < minimum:
        raise ContractError(f"mmd2 ({kind}): need at least {minimum} samples per side, got {n} and {m}")

    if kernel.bandwidth == "median":
        sigma = median_heuristic(x.data, y.data)
    else:
        sigma = float(kernel.bandwidth)

    kxy = ad.mean_reduce(_gram(x, y, sigma))
    if kind == "biased":
        kxx = ad.mean_reduce(_gram(x, x, sigma))
        kyy = ad.mean_reduce(_gram(y, y, sigma))
        raw = ad.sub(ad.add(kxx, kyy), ad.scalar_mul(kxy, 2.0))
        # V-statistic is a squared RKHS norm; clamp absorbs rounding noise.
        return ad.relu(raw)
    kxx = _offdiag_mean(_gram(x, x, sigma))
    kyy = _offdiag_mean(_gram(y, y, sigma))
    return ad.sub(ad.add(kxx, kyy), ad.scalar_mul(kxy, 2.0))


def gaussian_kl(q1, q2) -> Tensor:
    """KL(q1 || q2) between diagonal Gaussians, summed over all entries.

    q1 and q2 carry same-shape ``mu`` and ``sigma2`` tensors (rows are
    classes). Closed form per entry:
    0.5 * [log(s2/s1) + (s1 + (m1 - m2)^2) / s2 - 1].
    """
    if q1.mu.data.shape != q2.mu.data.shape or q1.sigma2.data.shape != q2.sigma2.data.shape:
        raise ShapeError(
            f"gaussian_kl: posterior shapes differ: {q1.mu.data.shape} vs {q2.mu.data.shape}"
        )
    log_ratio = ad.sub(ad.log(q2.sigma2), ad.log(q1.sigma2))
    diff = ad.sub(q1.mu, q2.mu)
    quad = ad.mul(ad.add(q1.sigma2, ad.mul(diff, diff)), ad.recip_pos(q2.sigma2))
    per_entry = ad.sub(ad.add(log_ratio, quad), ad.full_like(quad, 1.0))
    # Clamp absorbs the ~1e-16 rounding that the exp/log reciprocal leaves
    # when the two posteriors coincide.
    return ad.relu(ad.scalar_mul(ad.sum_reduce(per_entry), 0.5))
