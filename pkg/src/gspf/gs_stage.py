"""Group-MCP selection of candidate change points on the differenced sequence.

Every time index ``t`` owns a disjoint block of ``d`` observation rows, so the
penalized least-squares problem separates into one K-dimensional problem per
group. Each group design ``B*_t = b(x)^T L^-1`` is orthonormalized by a thin
QR factorization ``Q R``; in the coordinates ``theta_t = R alpha_t`` the
objective

    1/2 ||y - sum_t Q theta_t||^2 + sum_{t >= 2} rho(||theta_t||; lambda, gamma)

is minimized exactly by firm thresholding of ``z_t = Q^T y_t``. Group 1 holds
the initial level and is fitted without penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular, LinAlgError

from .core import ChangePointSet, DataError, DifferencedSequence, NumericalError
from .fpca import BasisSystem


class NegativeArgument(DataError):
    pass


class CholeskyFailure(NumericalError):
    pass


class SingularGroupGram(NumericalError):
    pass


@dataclass(frozen=True, eq=False)
class PenaltyMatrix:
    """``r = eta * G'' + lambda * G + jitter * I`` and its upper Cholesky factor."""

    r: np.ndarray
    chol_upper: np.ndarray
    lam: float
    eta: float
    jitter: float


@dataclass(frozen=True, eq=False)
class CoefficientBlocks:
    alpha: np.ndarray  # (T, K) transformed coefficients
    a: np.ndarray  # (T, K) original coefficients, a_t = L^-1 alpha_t
    group_norms: np.ndarray  # (T,) ||alpha_t||_2


@dataclass(frozen=True, eq=False)
class GsResult:
    blocks: CoefficientBlocks
    candidates: ChangePointSet
    objective: float
    lam: float
    eta: float
    gamma: float
    theta: np.ndarray  # (T, K) solution in orthonormal group coordinates
    ls_coords: np.ndarray  # (T, K) group least-squares coefficients z_t = Q^T y_t


def mcp_penalty(u: float, lam: float, gamma: float) -> float:
    """Minimax concave penalty ``lam * int_0^u (1 - x / (gamma * lam))_+ dx``."""
    if u < 0:
        raise NegativeArgument(f"MCP argument must be nonnegative, got {u}")
    if u <= gamma * lam:
        return lam * u - u * u / (2.0 * gamma)
    return gamma * lam * lam / 2.0


def _mcp_vec(u: np.ndarray, lam: float, gamma: float) -> np.ndarray:
    return np.where(u <= gamma * lam, lam * u - u * u / (2.0 * gamma), gamma * lam * lam / 2.0)


def _firm_scale(norms: np.ndarray, lam: float, gamma: float) -> np.ndarray:
    """Multiplier applied to each ``z`` by the group firm-threshold rule."""
    scale = np.ones_like(norms)
    zero = norms <= lam
    mid = ~zero & (norms <= gamma * lam)
    scale[zero] = 0.0
    scale[mid] = gamma / (gamma - 1.0) * (1.0 - lam / norms[mid])
    return scale


def group_firm_threshold(z, lam: float, gamma: float) -> np.ndarray:
    """Minimizer of ``1/2 ||z - theta||^2 + rho(||theta||; lam, gamma)``."""
    if not gamma > 1:
        raise DataError("gamma must exceed 1")
    z = np.asarray(z, dtype=float)
    norm = np.array([np.linalg.norm(z)])
    return _firm_scale(norm, lam, gamma)[0] * z


def penalty_from_grams(G: np.ndarray, G2: np.ndarray, lam: float, eta: float) -> PenaltyMatrix:
    """Assemble ``eta * G2 + lam * G`` and factor it, escalating a diagonal jitter."""
    if not lam > 0:
        raise DataError("lambda must be positive")
    if eta < 0:
        raise DataError("eta must be nonnegative")
    G = np.atleast_2d(np.asarray(G, dtype=float))
    G2 = np.atleast_2d(np.asarray(G2, dtype=float))
    base = eta * G2 + lam * G
    base = (base + base.T) / 2
    K = base.shape[0]
    unit = abs(np.trace(base)) / K * 1e-12
    if unit == 0:
        unit = 1e-12
    for step in range(7):
        jitter = unit * 10.0**step
        r = base + jitter * np.eye(K)
        try:
            upper = cholesky(r, lower=False)
        except LinAlgError:
            continue
        return PenaltyMatrix(r, upper, float(lam), float(eta), jitter)
    raise CholeskyFailure("penalty matrix is not positive definite after 6 jitter escalations")


def build_penalty_matrix(basis: BasisSystem, lam: float, eta: float) -> PenaltyMatrix:
    return penalty_from_grams(basis.gram(), basis.second_deriv_gram(), lam, eta)


def group_design(basis: BasisSystem, pen: PenaltyMatrix) -> np.ndarray:
    """The d x K block ``b(x)^T L^-1`` shared by every time index."""
    # X L = b^T  <=>  L^T X^T = b
    return solve_triangular(pen.chol_upper, basis.basis_matrix, trans="T", lower=False).T


def orthonormalize(design: np.ndarray) -> tuple:
    q, r = np.linalg.qr(design)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= 1e-12 * max(diag.max(), 1e-300):
        raise SingularGroupGram("group design is rank deficient")
    return q, r


def gs_fit(dseq: DifferencedSequence, basis: BasisSystem, lam: float, eta: float, gamma: float = 3.0) -> GsResult:
    """Solve the group-MCP problem and report candidate change points."""
    if not gamma > 1:
        raise DataError("gamma must exceed 1")
    y = dseq.values
    pen = build_penalty_matrix(basis, lam, eta)
    q, r = orthonormalize(group_design(basis, pen))

    z = y @ q
    norms = np.linalg.norm(z, axis=1)
    scale = _firm_scale(norms, lam, gamma)
    scale[0] = 1.0
    theta = z * scale[:, None]

    alpha = solve_triangular(r, theta.T, lower=False).T
    a = solve_triangular(pen.chol_upper, alpha.T, lower=False).T
    group_norms = np.linalg.norm(alpha, axis=1)
    group_norms[theta.any(axis=1) == 0] = 0.0

    resid = y - theta @ q.T
    theta_norms = np.linalg.norm(theta[1:], axis=1)
    objective = 0.5 * float(np.sum(resid * resid)) + float(_mcp_vec(theta_norms, lam, gamma).sum())

    cand = ChangePointSet(tuple(int(t) + 1 for t in np.flatnonzero(group_norms[1:] > 0) + 1))
    return GsResult(
        blocks=CoefficientBlocks(alpha, a, group_norms),
        candidates=cand,
        objective=objective,
        lam=float(lam),
        eta=float(eta),
        gamma=float(gamma),
        theta=theta,
        ls_coords=z,
    )


def stationarity_gap(result: GsResult, dseq: DifferencedSequence, basis: BasisSystem) -> tuple:
    """Largest KKT violations of a solution, recomputed from the data.

    Returns ``(grad, zero_excess)``: the maximum gradient norm over nonzero
    groups (smooth part plus the exact MCP gradient) and the maximum of
    ``||z_t|| - lambda`` over groups set to zero.
    """
    pen = build_penalty_matrix(basis, result.lam, result.eta)
    x = group_design(basis, pen)
    q, r = np.linalg.qr(x)
    theta = result.blocks.alpha @ r.T
    z = dseq.values @ q
    lam, gamma = result.lam, result.gamma
    grad = 0.0
    zero_excess = -np.inf
    for t in range(theta.shape[0]):
        g = theta[t] - z[t]
        nrm = np.linalg.norm(theta[t])
        if t == 0:
            grad = max(grad, float(np.linalg.norm(g)))
        elif nrm > 0:
            g = g + max(lam - nrm / gamma, 0.0) * theta[t] / nrm
            grad = max(grad, float(np.linalg.norm(g)))
        else:
            zero_excess = max(zero_excess, float(np.linalg.norm(z[t]) - lam))
    return grad, zero_excess


def median_group_norm(dseq: DifferencedSequence, basis: BasisSystem) -> float:
    """Median over ``t >= 2`` of ``||Q^T y_t||``, the scale of the default lambda grid."""
    q, _ = np.linalg.qr(basis.basis_matrix.T)
    norms = np.linalg.norm(dseq.values[1:] @ q, axis=1)
    return float(np.median(norms))
