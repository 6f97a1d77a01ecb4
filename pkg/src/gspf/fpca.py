"""Functional principal component basis on a discretized grid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DataError, FunctionalSequence, Grid, NumericalError, trapezoid_weights


class DegenerateSample(DataError):
    pass


class NotPSD(NumericalError):
    pass


class GridTooSmall(DataError):
    pass


@dataclass(frozen=True, eq=False)
class BasisSystem:
    """K basis functions evaluated on the grid.

    Attributes
    ----------
    basis_matrix : (K, d) array
        Row ``k`` is ``b_k`` on the grid; rows are orthonormal under the
        quadrature inner product ``sum_j w_j b_k(x_j) b_l(x_j)``.
    second_deriv_matrix : (K, d) array
        Row ``k`` is ``b_k''`` on the grid.
    eigenvalues : (K,) array
        Covariance-operator eigenvalues, descending.
    fve : float
        Fraction of variance explained by the K retained components.
    quad_weights : (d,) array
        Trapezoidal weights used for every L2 inner product.
    """

    basis_matrix: np.ndarray
    second_deriv_matrix: np.ndarray
    eigenvalues: np.ndarray
    fve: float
    quad_weights: np.ndarray

    @property
    def K(self) -> int:
        return self.basis_matrix.shape[0]

    def gram(self) -> np.ndarray:
        """Quadrature Gram matrix of the basis (identity for FPCA output)."""
        b = self.basis_matrix
        return (b * self.quad_weights) @ b.T

    def second_deriv_gram(self) -> np.ndarray:
        b2 = self.second_deriv_matrix
        return (b2 * self.quad_weights) @ b2.T


def estimate_mean(seq: FunctionalSequence | np.ndarray) -> np.ndarray:
    values = seq.values if isinstance(seq, FunctionalSequence) else np.asarray(seq, dtype=float)
    return values.mean(axis=0)


def estimate_covariance(seq: FunctionalSequence | np.ndarray) -> np.ndarray:
    """Sample covariance of the curves (divisor ``T - 1``)."""
    values = seq.values if isinstance(seq, FunctionalSequence) else np.asarray(seq, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2:
        raise DegenerateSample("covariance needs at least two curves")
    centered = values - values.mean(axis=0)
    cov = centered.T @ centered / (values.shape[0] - 1)
    return (cov + cov.T) / 2


def second_derivatives(basis_matrix: np.ndarray, grid: Grid | np.ndarray) -> np.ndarray:
    """Three-point finite-difference second derivatives of each row.

    Interior points use the non-uniform stencil; both endpoints copy the
    value of their nearest interior neighbour.
    """
    x = grid.points if isinstance(grid, Grid) else np.asarray(grid, dtype=float)
    b = np.atleast_2d(np.asarray(basis_matrix, dtype=float))
    if x.size < 3:
        raise GridTooSmall("second derivatives need at least 3 grid points")
    if b.shape[1] != x.size:
        raise DataError("basis matrix width does not match the grid")
    h_left = x[1:-1] - x[:-2]
    h_right = x[2:] - x[1:-1]
    denom = h_left * h_right * (h_left + h_right)
    out = np.empty_like(b)
    out[:, 1:-1] = 2.0 * (h_left * b[:, 2:] - (h_left + h_right) * b[:, 1:-1] + h_right * b[:, :-2]) / denom
    out[:, 0] = out[:, 1]
    out[:, -1] = out[:, -2]
    return out


def fpca_basis(cov: np.ndarray, grid: Grid, fve_threshold: float = 0.99) -> BasisSystem:
    """Eigenfunctions of the discretized covariance operator.

    The operator ``(C f)(x_i) = sum_j C_ij w_j f(x_j)`` is symmetrized as
    ``W^1/2 C W^1/2``; its eigenvectors ``v`` map to quadrature-orthonormal
    eigenfunctions ``W^-1/2 v``. K is the smallest count whose cumulative
    eigenvalue share reaches ``fve_threshold``.
    """
    cov = np.asarray(cov, dtype=float)
    d = grid.d
    if cov.shape != (d, d):
        raise DataError(f"covariance must be {d}x{d}, got {cov.shape}")
    if not 0 < fve_threshold <= 1:
        raise DataError("fve_threshold must lie in (0, 1]")
    w = trapezoid_weights(grid.points)
    sw = np.sqrt(w)
    op = (cov * sw[:, None]) * sw[None, :]
    op = (op + op.T) / 2
    evals, evecs = np.linalg.eigh(op)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    trace = float(np.trace(op))
    scale = max(abs(trace), float(np.abs(evals).max(initial=0.0)))
    if evals[-1] < -1e-8 * scale:
        raise NotPSD(f"covariance has eigenvalue {evals[-1]:.3e} below tolerance")
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()

    if total <= 0:
        # zero covariance: a single constant function keeps shapes well defined
        phi = np.full((1, d), 1.0 / np.sqrt(w.sum()))
        return BasisSystem(phi, second_derivatives(phi, grid), np.zeros(1), 1.0, w)

    cum = np.cumsum(evals) / total
    K = int(np.searchsorted(cum, fve_threshold - 1e-12) + 1)
    K = min(max(K, 1), d)
    phi = evecs[:, :K].T / sw[None, :]
    # sign convention: the largest-magnitude entry of each eigenvector is positive
    pivots = np.argmax(np.abs(evecs[:, :K]), axis=0)
    signs = np.sign(evecs[pivots, np.arange(K)])
    signs[signs == 0] = 1.0
    phi *= signs[:, None]
    return BasisSystem(
        basis_matrix=phi,
        second_deriv_matrix=second_derivatives(phi, grid),
        eigenvalues=evals[:K].copy(),
        fve=float(cum[K - 1]),
        quad_weights=w,
    )


def measurement_error_variance(cov: np.ndarray, grid: Grid | np.ndarray) -> float:
    """Variance of pointwise white noise hidden on the covariance diagonal.

    The diagonal is predicted at each grid point by linear extrapolation of
    the covariance at lags one and two (from both sides where available);
    the mean excess of the observed diagonal is the estimate, floored at 0.
    Smooth covariances give a nonpositive excess and hence 0.
    """
    cov = np.asarray(cov, dtype=float)
    x = grid.points if isinstance(grid, Grid) else np.asarray(grid, dtype=float)
    d = x.size
    if d < 3:
        raise GridTooSmall("need at least 3 grid points")
    excess = []
    for j in range(d):
        preds = []
        for step in (1, -1):
            j1, j2 = j + step, j + 2 * step
            if 0 <= j2 < d:
                h1, h2 = abs(x[j1] - x[j]), abs(x[j2] - x[j])
                preds.append(cov[j, j1] + (cov[j, j1] - cov[j, j2]) * h1 / (h2 - h1))
        # points without two neighbours on either side (the middle of d = 3) are skipped
        if preds:
            excess.append(cov[j, j] - np.mean(preds))
    return max(float(np.mean(excess)), 0.0)


def remove_measurement_error(cov: np.ndarray, sigma2: float, n: Optional[int] = None) -> np.ndarray:
    """Strip white noise of variance ``sigma2`` from a sample covariance.

    Without ``n`` this is ``cov - sigma2 I``. With the sample size ``n`` the
    whole white-noise eigenvalue bulk is removed, i.e. the level subtracted is
    its upper edge ``sigma2 (1 + sqrt(d / n))^2``. The result is projected
    back onto the positive semidefinite cone.
    """
    cov = np.asarray(cov, dtype=float)
    if sigma2 <= 0:
        return cov
    level = sigma2 if n is None else sigma2 * (1.0 + np.sqrt(cov.shape[0] / max(int(n), 1))) ** 2
    evals, evecs = np.linalg.eigh(cov - level * np.eye(cov.shape[0]))
    out = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
    return (out + out.T) / 2


def basis_from_sequence(
    seq: FunctionalSequence, fve_threshold: float = 0.99, measurement_error: bool = True
) -> BasisSystem:
    """FPCA basis from the pooled covariance of the raw curves.

    With ``measurement_error`` (default) the white-noise share of the
    diagonal is removed first, so pointwise iid noise does not inflate K.
    """
    cov = estimate_covariance(seq)
    if measurement_error:
        cov = remove_measurement_error(cov, measurement_error_variance(cov, seq.grid), seq.T - 1)
    return fpca_basis(cov, seq.grid, fve_threshold)
