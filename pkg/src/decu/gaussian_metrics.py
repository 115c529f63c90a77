"""Diagonal Gaussians and closed-form premetrics between them."""

import enum
import math
from dataclasses import dataclass

import numpy as np


class UndefinedForDegenerate(ValueError):
    """A premetric or entropy was asked for on a zero-variance Gaussian."""


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiagonalGaussian:
    """Gaussian with diagonal covariance; all-zero variance is a legal point mass."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        var = np.array(self.variance, dtype=np.float64)
        if var.ndim == 0:
            var = np.full(mean.shape, float(var))
        var = var.reshape(-1)
        if mean.size < 1:
            raise ValueError("dimension must be >= 1")
        if mean.shape != var.shape:
            raise DimensionMismatch(f"mean has {mean.size} dims, variance has {var.size}")
        if not np.all(var >= 0.0):
            raise ValueError("variances must be >= 0")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @classmethod
    def point(cls, mean):
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.zeros_like(mean))

    @property
    def dim(self):
        return self.mean.size

    @property
    def is_degenerate(self):
        return bool(np.any(self.variance == 0.0))

    def __eq__(self, other):
        if not isinstance(other, DiagonalGaussian):
            return NotImplemented
        return (np.array_equal(self.mean, other.mean)
                and np.array_equal(self.variance, other.variance))

    __hash__ = None


class Premetric(enum.Enum):
    W2_SQUARED = "w2"
    KL = "kl"
    BHATTACHARYYA = "bhattacharyya"

    def __call__(self, p, q):
        return _DISPATCH[self](p, q)


def _check_dims(p, q):
    if p.dim != q.dim:
        raise DimensionMismatch(f"dimension mismatch: {p.dim} vs {q.dim}")


def _require_positive(*dists):
    for g in dists:
        if np.any(g.variance <= 0.0):
            raise UndefinedForDegenerate("undefined for zero-variance Gaussians")


def w2_squared(p, q):
    """Squared 2-Wasserstein distance between diagonal Gaussians.

    For diagonal covariances the trace term is sum_k (sqrt(var_p) - sqrt(var_q))^2,
    so point masses reduce to the squared Euclidean distance of the means.
    """
    _check_dims(p, q)
    dm = p.mean - q.mean
    ds = np.sqrt(p.variance) - np.sqrt(q.variance)
    return float(np.sum(dm * dm)) + float(np.sum(ds * ds))


def kl_divergence(p, q):
    """KL(p || q) for diagonal Gaussians with strictly positive variances."""
    _check_dims(p, q)
    _require_positive(p, q)
    ratio = p.variance / q.variance
    dm = q.mean - p.mean
    val = 0.5 * float(np.sum(ratio + dm * dm / q.variance - 1.0 - np.log(ratio)))
    return max(val, 0.0)


def bhattacharyya(p, q):
    _check_dims(p, q)
    _require_positive(p, q)
    avg = 0.5 * (p.variance + q.variance)
    dm = p.mean - q.mean
    quad = 0.125 * float(np.sum(dm * dm / avg))
    logdet = 0.5 * float(np.sum(np.log(avg) - 0.5 * (np.log(p.variance) + np.log(q.variance))))
    return max(quad + logdet, 0.0)


def gaussian_entropy(p):
    """Differential entropy in nats: sum_k 0.5 * ln(2 pi e var_k)."""
    _require_positive(p)
    return float(np.sum(0.5 * np.log(2.0 * math.pi * math.e * p.variance)))


_DISPATCH = {
    Premetric.W2_SQUARED: w2_squared,
    Premetric.KL: kl_divergence,
    Premetric.BHATTACHARYYA: bhattacharyya,
}
