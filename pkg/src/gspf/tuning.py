"""BIC grid search over the sparsity level, smoothness weight and link parameter."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DataError, DetectorConfig, DifferencedSequence, FunctionalSequence, difference, segment_bounds
from .fpca import BasisSystem
from .gs_stage import gs_fit, median_group_norm
from .pf_stage import LevelRefit, pilot_noise_covariance
from .refine import refine


class DegenerateRefit(DataError):
    pass


DEFAULT_LAMBDA_EXPONENTS = np.linspace(-2.0, 1.0, 31)


@dataclass(frozen=True)
class TuningRecord:
    lam: float
    eta: float
    kappa: int
    bic: float
    n_candidates: int
    n_representatives: int
    representatives: tuple = ()
    degenerate: bool = False


def refit_rss(
    seq: FunctionalSequence, representatives, basis: BasisSystem, sigma: np.ndarray, local: bool = False
) -> float:
    """Generalized RSS of the unpenalized full-model refit, whitened by ``sigma``.

    The refit is the partial-F full model: an intercept on the increments
    (a linear drift in levels), a free initial curve and one basis block per
    representative. See ``LevelRefit`` for the closed form and the optional
    ``local`` reweighting.
    """
    return LevelRefit(seq, basis.basis_matrix, sigma, local=local).rss(representatives)


def bic_score(
    seq: FunctionalSequence,
    representatives,
    basis: BasisSystem,
    sigma: Optional[np.ndarray] = None,
    refit: Optional[LevelRefit] = None,
) -> float:
    """``n log(RSS / n) + df log(n)`` with ``n = T d`` and ``df = 1 + (K + 1) |reps|``.

    Each representative costs its ``K`` jump coefficients plus its location.

    RSS comes from ``refit`` when given; otherwise from a locally weighted
    ``LevelRefit`` whitened by ``sigma`` (default: the change-robust pilot
    estimate from the increments). A perfect refit returns ``-inf``.
    """
    reps = list(representatives)
    n = seq.T * seq.d
    df = 1 + (basis.K + 1) * len(reps)
    if df >= n:
        raise DegenerateRefit(f"refit has {df} parameters for {n} observations")
    if refit is None:
        if sigma is None:
            sigma = pilot_noise_covariance(difference(seq)).sigma_hat
        refit = LevelRefit(seq, basis.basis_matrix, sigma, local=True)
    rss = refit.rss(reps)
    if rss <= 1e-300:
        return -np.inf
    return n * np.log(rss / n) + df * np.log(n)


def default_lambda_grid(dseq: DifferencedSequence, basis: BasisSystem) -> tuple:
    scale = median_group_norm(dseq, basis)
    if not scale > 0:
        scale = 1.0
    return tuple(float(v) for v in scale * 10.0**DEFAULT_LAMBDA_EXPONENTS)


def _sort_key(rec: TuningRecord) -> tuple:
    # smaller BIC, then larger lambda, larger kappa, smaller eta
    return (rec.bic, -rec.lam, -rec.kappa, rec.eta)


def grid_search(seq: FunctionalSequence, basis: BasisSystem, config: DetectorConfig = DetectorConfig()) -> tuple:
    """Evaluate every ``(lambda, eta, kappa)`` triple and return ``(best, records)``.

    Each triple runs group selection, merging and CUSUM election, then
    scores the elected representatives by BIC.
    """
    dseq = difference(seq)
    refit = LevelRefit(seq, basis.basis_matrix, pilot_noise_covariance(dseq).sigma_hat, local=True)
    lam_grid = config.lambda_grid if config.lambda_grid is not None else default_lambda_grid(dseq, basis)
    fits = {}
    elected = {}
    scores = {}
    records = []
    for lam, eta, kappa in itertools.product(lam_grid, config.eta_grid, config.kappa_grid):
        if (lam, eta) not in fits:
            fits[(lam, eta)] = gs_fit(dseq, basis, lam, eta, config.gamma).candidates
        cands = fits[(lam, eta)]
        key = (cands.indices, kappa)
        if key not in elected:
            elected[key] = refine(cands, seq, kappa)[1]
        reps = elected[key]
        if reps.indices not in scores:
            scores[reps.indices] = bic_score(seq, reps, basis, refit=refit)
        bic = scores[reps.indices]
        records.append(
            TuningRecord(
                lam=float(lam),
                eta=float(eta),
                kappa=int(kappa),
                bic=float(bic),
                n_candidates=len(cands),
                n_representatives=len(reps),
                representatives=reps.indices,
                degenerate=bool(np.isneginf(bic)),
            )
        )
    best = min(records, key=_sort_key)
    return best, records
