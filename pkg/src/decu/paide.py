"""Pairwise-distance estimation of epistemic uncertainty for Gaussian ensembles.

The estimator is

    I_hat = -sum_i pi_i ln sum_j pi_j exp(-D(p_i || p_j))

for a premetric D. It lies in [0, H(pi)] (so in [0, ln M] for uniform weights),
is 0 when all components coincide and saturates at ln M as the components
separate. ``mc_mutual_information`` is an independent sampling estimate of the
same mutual information, used as an oracle.
"""

import math
from dataclasses import dataclass

import numpy as np

from decu import kernels
from decu.gaussian_metrics import (
    DiagonalGaussian,
    DimensionMismatch,
    Premetric,
    UndefinedForDegenerate,
    gaussian_entropy,
)
from decu.rng import SeededStream, derive_key


class EmptyEnsemble(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EnsemblePrediction:
    components: tuple
    weights: np.ndarray

    def __init__(self, components, weights=None):
        comps = tuple(components)
        if not comps:
            raise EmptyEnsemble("ensemble needs at least one component")
        d = comps[0].dim
        if any(c.dim != d for c in comps):
            raise DimensionMismatch("all components must share a dimension")
        if weights is None:
            w = np.full(len(comps), 1.0 / len(comps))
        else:
            w = np.array(weights, dtype=np.float64).reshape(-1)
            if w.shape != (len(comps),):
                raise ValueError("one weight per component required")
            if np.any(w < 0.0) or abs(float(np.sum(w)) - 1.0) > 1e-12:
                raise ValueError("weights must be non-negative and sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_means(cls, means, weights=None):
        """Zero-variance components, one per row of ``means``."""
        return cls([DiagonalGaussian.point(m) for m in np.atleast_2d(means)], weights)

    def __len__(self):
        return len(self.components)

    @property
    def means(self):
        return np.stack([c.mean for c in self.components])

    @property
    def variances(self):
        return np.stack([c.variance for c in self.components])


def distance_matrix(pred, metric=Premetric.W2_SQUARED):
    """M x M matrix ``D[i, j] = D(p_i || p_j)`` with an exactly zero diagonal.

    The diagonal is never evaluated, so KL on a single component is fine.
    """
    metric = Premetric(metric)
    if metric is Premetric.W2_SQUARED:
        return kernels.pairwise_w2(pred.means, np.sqrt(pred.variances))
    m = len(pred)
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            if i != j:
                out[i, j] = metric(pred.components[i], pred.components[j])
    return out


def paide_from_distances(dist, weights):
    dist = np.asarray(dist, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise EmptyEnsemble("ensemble needs at least one component")
    if dist.shape != (w.size, w.size):
        raise ValueError("distance matrix must be M x M")
    return kernels.paide_from_distances(dist, w)


def paide(pred, metric=Premetric.W2_SQUARED):
    """Pairwise-distance estimate of I(y; theta) for an ensemble prediction."""
    return paide_from_distances(distance_matrix(pred, metric), pred.weights)


def paide_points(points, weights=None):
    """Vectorised W2 estimator for stacks of zero-variance ensembles.

    ``points`` is (..., M, d); returns an array of shape ``points.shape[:-2]``.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim < 2:
        raise ValueError("points must be at least (M, d)")
    m, d = points.shape[-2:]
    if m == 0:
        raise EmptyEnsemble("ensemble needs at least one component")
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64)
    lead = points.shape[:-2]
    flat = points.reshape((-1, m, d))
    return kernels.paide_point_batch(flat, w).reshape(lead)


def mc_mutual_information(pred, n_samples, seed, return_stderr=False):
    """Monte-Carlo estimate of H(mixture) - sum_j pi_j H(p_j).

    Sample ``k`` uses raw words ``k*(2d+1) ... (k+1)*(2d+1)-1`` of the stream
    keyed by ``seed``: one uniform to pick the component, then 2d words for d
    Box-Muller normals. The result depends only on (pred, n_samples, seed).
    """
    n_samples = int(n_samples)
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    variances = pred.variances
    if np.any(variances <= 0.0):
        raise UndefinedForDegenerate("mixture entropy needs strictly positive variances")
    means = pred.means
    w = pred.weights
    m, d = means.shape

    stream = SeededStream(derive_key(seed, "mc-mutual-information"))
    u = stream.uniform((n_samples, 2 * d + 1))
    cdf = np.cumsum(w)
    comp = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), m - 1)
    z = np.sqrt(-2.0 * np.log(u[:, 1::2])) * np.cos(2.0 * math.pi * u[:, 2::2])
    y = means[comp] + np.sqrt(variances[comp]) * z

    with np.errstate(divide="ignore"):
        logw = np.log(w)
    logp = kernels.mixture_logpdf(y, means, variances, logw)
    h_mix = -float(np.mean(logp))
    h_cond = sum(float(wj) * gaussian_entropy(c) for wj, c in zip(w, pred.components))
    est = h_mix - h_cond
    if return_stderr:
        stderr = float(np.std(logp, ddof=1)) / math.sqrt(n_samples) if n_samples > 1 else math.inf
        return est, stderr
    return est
