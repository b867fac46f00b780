"""
reconstruction.py
-----------------
Gaussian reconstruction model P(x_hat | y = k) with diagonal covariance:
log-density, EM re-estimation from responsibilities, and farthest-point
initialization.
"""

import logging

import numpy as np

from backend.core.errors import DimensionMismatchError
from backend.core.models import ReconstructionParams

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
EMPTY_CLUSTER_MASS = 1e-12


def log_gaussian(xhat, k: int, theta: ReconstructionParams) -> float:
    """log N(x_hat | mu_k, diag(sigma2_k))."""
    xhat = np.asarray(xhat, dtype=np.float64)
    if xhat.shape != (theta.d_x,):
        raise DimensionMismatchError(f'x_hat has shape {xhat.shape}, model expects ({theta.d_x},)')
    var = theta.variances[k]
    return float(np.sum(-0.5 * (LOG_2PI + np.log(var)) - (xhat - theta.means[k]) ** 2 / (2.0 * var)))


def log_gaussian_table(Xhat, theta: ReconstructionParams) -> np.ndarray:
    """N x K table of log_gaussian(x_hat_i, k)."""
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if Xhat.shape[1] != theta.d_x:
        raise DimensionMismatchError(f'x_hat has {Xhat.shape[1]} columns, model expects {theta.d_x}')
    var = theta.variances                                        # K x D
    log_norm = -0.5 * np.sum(LOG_2PI + np.log(var), axis=1)      # K
    diff = Xhat[:, None, :] - theta.means[None, :, :]            # N x K x D
    return log_norm[None, :] - 0.5 * np.sum(diff ** 2 / var[None, :, :], axis=2)


def global_variance(Xhat, variance_floor: float) -> np.ndarray:
    return np.maximum(np.var(np.asarray(Xhat, dtype=np.float64), axis=0), variance_floor)


def em_update(Q, Xhat, variance_floor: float) -> ReconstructionParams:
    """
    M-step: responsibility-weighted means and diagonal variances.

    A cluster whose total responsibility falls below 1e-12 is revived at the
    point with the lowest maximum responsibility (lowest index on ties),
    with the global per-dimension variance.

    Args:
        Q: N x K row-stochastic responsibilities
        Xhat: N x D_x reconstruction targets
        variance_floor: Lower bound for every variance entry

    Returns:
        ReconstructionParams
    """
    Q = np.asarray(Q, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if Q.shape[0] != Xhat.shape[0]:
        raise DimensionMismatchError(f'Q has {Q.shape[0]} rows, x_hat has {Xhat.shape[0]}')

    mass = Q.sum(axis=0)                                         # K
    K, D = Q.shape[1], Xhat.shape[1]
    means = np.zeros((K, D))
    variances = np.zeros((K, D))

    live = mass >= EMPTY_CLUSTER_MASS
    if np.any(live):
        weights = Q[:, live] / mass[live]
        means[live] = weights.T @ Xhat
        sq = (Xhat[:, None, :] - means[live][None, :, :]) ** 2      # N x live x D
        variances[live] = np.einsum('nk,nkd->kd', weights, sq)

    dead = np.flatnonzero(~live)
    if dead.size:
        order = np.argsort(Q.max(axis=1), kind='stable')
        fallback = global_variance(Xhat, variance_floor)
        for slot, k in enumerate(dead):
            point = order[slot % len(order)]
            logger.warning(f'Cluster {k} lost all responsibility; reviving at proposal {point}')
            means[k] = Xhat[point]
            variances[k] = fallback

    return ReconstructionParams(means=means, variances=np.maximum(variances, variance_floor))


def farthest_point_init(Xhat, K: int, variance_floor: float, seed: int) -> ReconstructionParams:
    """
    Greedy max-min seeding: the first mean is a seeded random point, each
    next one the point farthest from those chosen (lowest index on ties).
    Every cluster starts with the global per-dimension variance.
    """
    Xhat = np.asarray(Xhat, dtype=np.float64)
    n = Xhat.shape[0]
    if n < K:
        raise DimensionMismatchError(f'need at least K={K} points, got {n}')
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    nearest = np.sum((Xhat - Xhat[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, np.sum((Xhat - Xhat[nxt]) ** 2, axis=1))

    variances = np.tile(global_variance(Xhat, variance_floor), (K, 1))
    return ReconstructionParams(means=Xhat[chosen].copy(), variances=variances)
