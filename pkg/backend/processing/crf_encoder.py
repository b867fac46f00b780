"""
crf_encoder.py
--------------
Fully connected CRF encoder over all proposals of a dataset:
- energy of a hard assignment
- dual-chain mean field (Q with reconstruction, Qp encoder only)
- mean-field gradients of log Z - log Z'
- mean-field free-energy estimates of log Z and log Z'

Pairwise potential for y_i = y_j = k (i < j):
    omega_po[k] * S_obj(i, j) - b_po[k] + omega_ph[k] * S_int(i, j) - b_ph[k]
Pairs with different clusters contribute nothing.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from backend.core.errors import DimensionMismatchError, NumericalError
from backend.core.models import EncoderParams, MeanFieldState, ProposalFeatures, ReconstructionParams
from backend.processing.reconstruction import log_gaussian_table

logger = logging.getLogger(__name__)

Q_FLOOR = 1e-300
PROJECTION_STEPS = 100


def _off_diagonal(S) -> np.ndarray:
    S = np.array(S, dtype=np.float64)
    np.fill_diagonal(S, 0.0)
    return S


def _check_tables(features: ProposalFeatures, S_obj, S_int):
    n = features.N
    if np.shape(S_obj) != (n, n) or np.shape(S_int) != (n, n):
        raise DimensionMismatchError(
            f'similarity tables must be {n}x{n}, got {np.shape(S_obj)} and {np.shape(S_int)}'
        )


def pair_coupling(params: EncoderParams, S_obj, S_int, k: int) -> np.ndarray:
    """N x N effective pairwise coefficient for cluster k, zero diagonal."""
    omega_o, b_o = params.lambda_p_obj[k]
    omega_h, b_h = params.lambda_p_int[k]
    W = omega_o * np.asarray(S_obj) + omega_h * np.asarray(S_int) - (b_o + b_h)
    W = np.array(W, dtype=np.float64)
    np.fill_diagonal(W, 0.0)
    return W


def energy(params: EncoderParams, assignment, features: ProposalFeatures, S_obj, S_int) -> float:
    """
    Phi(X, Y) for a hard assignment: unary terms plus each same-cluster
    unordered pair counted once.
    """
    _check_tables(features, S_obj, S_int)
    y = np.asarray(assignment, dtype=int)
    if y.shape != (features.N,):
        raise DimensionMismatchError(f'assignment has shape {y.shape}, expected ({features.N},)')
    if np.any(y < 0) or np.any(y >= params.K):
        raise DimensionMismatchError(f'cluster index out of range [0, {params.K})')

    U = params.unary(features)
    total = float(U[np.arange(features.N), y].sum())
    for k in range(params.K):
        members = np.flatnonzero(y == k)
        if len(members) < 2:
            continue
        W = pair_coupling(params, np.asarray(S_obj)[np.ix_(members, members)],
                          np.asarray(S_int)[np.ix_(members, members)], k)
        total += float(np.triu(W, 1).sum())
    return total


def pairwise_field(params: EncoderParams, Q, S_obj_off, S_int_off) -> np.ndarray:
    """Q_hat[i, k] = sum_{j != i} W_k(i, j) Q[j, k] for off-diagonal similarity tables."""
    omega_o, b_o = params.lambda_p_obj[:, 0], params.lambda_p_obj[:, 1]
    omega_h, b_h = params.lambda_p_int[:, 0], params.lambda_p_int[:, 1]
    others = Q.sum(axis=0)[None, :] - Q
    return (S_obj_off @ Q) * omega_o + (S_int_off @ Q) * omega_h - others * (b_o + b_h)


@dataclass(frozen=True)
class CouplingLimit:
    """
    Cap on the pairwise weights that keeps every mean-field sweep a contraction.

    Softmax is 1/2-Lipschitz in the max-entry norm, so one synchronous sweep
    moves two tables apart by at most 0.5 * max_k ||W_k||_inf times their
    largest entry difference. With nonnegative weights,

        ||W_k||_inf <= omega_po * obj_row_sum + omega_ph * int_row_sum + (b_po + b_ph) * others

    and holding that below 2 * contraction bounds the factor by contraction.
    Coefficients follow one cluster's (omega_po, b_po, omega_ph, b_ph).
    """

    obj_row_sum: float
    int_row_sum: float
    others: int
    contraction: float

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.obj_row_sum, self.others, self.int_row_sum, self.others], dtype=np.float64)

    @property
    def budget(self) -> float:
        return 2.0 * self.contraction

    def contraction_bound(self, params: EncoderParams) -> np.ndarray:
        """Per-cluster upper bound on the sweep's contraction factor."""
        blocks = np.hstack([params.lambda_p_obj, params.lambda_p_int])
        return 0.5 * (blocks @ self.coefficients)

    def project(self, target, rates, lower) -> np.ndarray:
        """
        Closest feasible pairwise blocks in the metric sum_j (y_j - target_j)^2 / rates_j.

        Feasible means entries >= lower and blocks @ coefficients <= budget.
        Per cluster the solution is max(lower, target - mu * rates * coefficients)
        for the smallest mu >= 0 meeting the budget, found by bisection.

        Args:
            target: K x 4 unconstrained blocks
            rates: K x 4 positive per-coordinate step sizes
            lower: length-4 lower bounds

        Returns:
            np.ndarray: K x 4 projected blocks
        """
        a = self.coefficients
        target = np.asarray(target, dtype=np.float64)
        rates = np.asarray(rates, dtype=np.float64)
        lower = np.asarray(lower, dtype=np.float64)
        out = np.maximum(target, lower)
        for k in range(out.shape[0]):
            if out[k] @ a <= self.budget:
                continue
            if lower @ a >= self.budget:
                logger.warning(f'Pairwise lower bounds alone exceed the coupling budget (cluster {k})')
                out[k] = np.where(a > 0, lower, out[k])
                continue
            slope = rates[k] * a
            with np.errstate(divide='ignore', invalid='ignore'):
                reach = np.where(slope > 0, (target[k] - lower) / slope, 0.0)
            lo, hi = 0.0, max(float(np.max(reach)), 0.0)
            for _ in range(PROJECTION_STEPS):
                mid = 0.5 * (lo + hi)
                if np.maximum(lower, target[k] - mid * slope) @ a > self.budget:
                    lo = mid
                else:
                    hi = mid
            # hi always satisfies the budget
            out[k] = np.maximum(lower, target[k] - hi * slope)
        return out


def coupling_limit(S_obj, S_int, contraction: float) -> CouplingLimit:
    """Coupling cap for one pair of similarity tables (max absolute off-diagonal row sums)."""
    S_obj_off = _off_diagonal(S_obj)
    S_int_off = _off_diagonal(S_int)
    n = S_obj_off.shape[0]
    return CouplingLimit(
        obj_row_sum=float(np.max(np.abs(S_obj_off).sum(axis=1))) if n else 0.0,
        int_row_sum=float(np.max(np.abs(S_int_off).sum(axis=1))) if n else 0.0,
        others=max(n - 1, 0),
        contraction=float(contraction),
    )


def _normalize(logits, label):
    bad = ~np.all(np.isfinite(logits), axis=1)
    if np.any(bad):
        node = int(np.flatnonzero(bad)[0])
        raise NumericalError(f'non-finite {label} logits at node {node}', node=node)
    return softmax(logits, axis=1)


def mean_field(params: EncoderParams, theta: ReconstructionParams, features: ProposalFeatures,
               S_obj, S_int, mf_max_sweeps: int = 20, mf_tol: float = 1e-4) -> MeanFieldState:
    """
    Mean field for the two chains.

    Q starts at softmax(unary + log_gaussian) and Qp at softmax(unary); each
    synchronous sweep recomputes every row from the previous sweep's table.
    Stops once both tables move less than mf_tol (L-inf) or after
    mf_max_sweeps sweeps.

    Returns:
        MeanFieldState: final tables, sweep count and per-sweep max change
    """
    if features.N < 1:
        raise DimensionMismatchError('mean field needs at least one proposal')
    _check_tables(features, S_obj, S_int)

    U = params.unary(features)
    G = log_gaussian_table(features.xhat, theta)
    S_obj_off = _off_diagonal(S_obj)
    S_int_off = _off_diagonal(S_int)

    Q = _normalize(U + G, 'Q')
    Qp = _normalize(U, "Q'")

    history = []
    sweeps = 0
    delta = 0.0
    for sweeps in range(1, mf_max_sweeps + 1):
        Q_new = _normalize(U + pairwise_field(params, Q, S_obj_off, S_int_off) + G, 'Q')
        Qp_new = _normalize(U + pairwise_field(params, Qp, S_obj_off, S_int_off), "Q'")
        delta = float(max(np.max(np.abs(Q_new - Q)), np.max(np.abs(Qp_new - Qp))))
        history.append(delta)
        Q, Qp = Q_new, Qp_new
        if delta < mf_tol:
            break

    return MeanFieldState(Q=Q, Qp=Qp, S_obj=S_obj, S_int=S_int,
                          sweeps=sweeps, max_delta=delta, delta_history=tuple(history))


def _pair_sum(q, S_off) -> float:
    """sum_{i<j} S(i, j) q_i q_j."""
    return 0.5 * float(q @ S_off @ q)


def _pair_count(q) -> float:
    """sum_{i<j} q_i q_j."""
    return 0.5 * float(q.sum() ** 2 - np.sum(q ** 2))


def gradients(state: MeanFieldState, features: ProposalFeatures,
              S_obj=None, S_int=None) -> EncoderParams:
    """
    Mean-field gradient of log Z - log Z' with respect to every lambda
    coordinate, returned in EncoderParams layout.

    Unary blocks: sum_i x'_i (Q_i(k) - Qp_i(k)) over augmented features.
    Pairwise weights: sum_{i<j} S(i, j) (Q_i(k) Q_j(k) - Qp_i(k) Qp_j(k)).
    Pairwise biases: the same with S replaced by -1.
    """
    S_obj = state.S_obj if S_obj is None else S_obj
    S_int = state.S_int if S_int is None else S_int
    _check_tables(features, S_obj, S_int)

    diff = state.Q - state.Qp
    grad_uo = diff.T @ features.F_aug
    grad_uh = diff.T @ features.H_aug

    S_obj_off = _off_diagonal(S_obj)
    S_int_off = _off_diagonal(S_int)
    grad_po = np.zeros((state.K, 2))
    grad_ph = np.zeros((state.K, 2))
    for k in range(state.K):
        q, qp = state.Q[:, k], state.Qp[:, k]
        grad_po[k, 0] = _pair_sum(q, S_obj_off) - _pair_sum(qp, S_obj_off)
        grad_ph[k, 0] = _pair_sum(q, S_int_off) - _pair_sum(qp, S_int_off)
        bias = -(_pair_count(q) - _pair_count(qp))
        grad_po[k, 1] = bias
        grad_ph[k, 1] = bias

    return EncoderParams(grad_uo, grad_uh, grad_po, grad_ph)


def _expected_energy(params, Q, U, S_obj_off, S_int_off) -> float:
    total = float(np.sum(Q * U))
    for k in range(params.K):
        q = Q[:, k]
        omega_o, b_o = params.lambda_p_obj[k]
        omega_h, b_h = params.lambda_p_int[k]
        total += (omega_o * _pair_sum(q, S_obj_off) + omega_h * _pair_sum(q, S_int_off)
                  - (b_o + b_h) * _pair_count(q))
    return total


def _entropy(Q) -> float:
    return float(-np.sum(Q * np.log(np.maximum(Q, Q_FLOOR))))


def free_energy(state: MeanFieldState, params: EncoderParams, theta: ReconstructionParams,
                features: ProposalFeatures, S_obj=None, S_int=None) -> Tuple[float, float]:
    """
    Mean-field lower bounds:
        log Z  >= E_Q[Phi + log P(x_hat | y)] + H(Q)
        log Z' >= E_Qp[Phi] + H(Qp)
    """
    S_obj = state.S_obj if S_obj is None else S_obj
    S_int = state.S_int if S_int is None else S_int
    _check_tables(features, S_obj, S_int)

    U = params.unary(features)
    G = log_gaussian_table(features.xhat, theta)
    S_obj_off = _off_diagonal(S_obj)
    S_int_off = _off_diagonal(S_int)

    log_z = (_expected_energy(params, state.Q, U, S_obj_off, S_int_off)
             + float(np.sum(state.Q * G)) + _entropy(state.Q))
    log_z_prime = _expected_energy(params, state.Qp, U, S_obj_off, S_int_off) + _entropy(state.Qp)
    return log_z, log_z_prime


def node_log_partition(params: EncoderParams, theta: Optional[ReconstructionParams],
                       features: ProposalFeatures) -> np.ndarray:
    """Per-node log-sum-exp of unary (+ log_gaussian); exact log Z when nodes decouple."""
    scores = params.unary(features)
    if theta is not None:
        scores = scores + log_gaussian_table(features.xhat, theta)
    return logsumexp(scores, axis=1)
