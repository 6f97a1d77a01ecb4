"""End-to-end two-stage detection: group selection, election, partial F filtering."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import ChangePointSet, DetectorConfig, FunctionalSequence, difference
from .fpca import BasisSystem, basis_from_sequence
from .gs_stage import GsResult, gs_fit
from .pf_stage import NoiseCovariance, TestResult, adjust_results, pf_filter, run_pf_stage
from .refine import refine
from .tuning import TuningRecord, grid_search

SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class Detection:
    """Everything one detector run produced, in reportable form."""

    change_points: ChangePointSet
    candidates: ChangePointSet
    representatives: ChangePointSet
    tests: tuple
    best: TuningRecord
    config: DetectorConfig
    basis: BasisSystem
    gs: GsResult
    noise: Optional[NoiseCovariance]
    timing_ms: int = 0
    tuning: tuple = field(default=(), repr=False)

    def change_points_at(self, alpha: float) -> ChangePointSet:
        """Final change points for a different FDR level (tests are reused)."""
        if not self.tests:
            return ChangePointSet()
        results = adjust_results(self.tests, alpha)
        return pf_filter(self.representatives, results, alpha)

    def report(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "change_points": self.change_points.tolist(),
            "candidates": self.candidates.tolist(),
            "representatives": self.representatives.tolist(),
            "tests": [
                {
                    "representative": t.representative,
                    "f_stat": t.f_stat,
                    "df1": t.df1,
                    "df2": t.df2,
                    "p_raw": t.p_raw,
                    "p_adjusted": t.p_adjusted,
                    "retained": t.retained,
                }
                for t in self.tests
            ],
            "params": {
                "lambda": self.best.lam,
                "eta": self.best.eta,
                "kappa": self.best.kappa,
                "gamma": self.config.gamma,
                "alpha": self.config.fdr_alpha,
                "K": self.basis.K,
                "fve": self.basis.fve,
                "fve_threshold": self.config.fve_threshold,
                "lambda_grid": [r for r in sorted({rec.lam for rec in self.tuning})],
                "eta_grid": list(self.config.eta_grid),
                "kappa_grid": list(self.config.kappa_grid),
            },
            "timing_ms": self.timing_ms,
        }


def detect(seq: FunctionalSequence, config: DetectorConfig = DetectorConfig()) -> Detection:
    """Run the full detector on one functional sequence."""
    start = time.perf_counter()
    basis = basis_from_sequence(seq, config.fve_threshold)
    best, records = grid_search(seq, basis, config)
    dseq = difference(seq)
    gs = gs_fit(dseq, basis, best.lam, best.eta, config.gamma)
    _, reps = refine(gs.candidates, seq, best.kappa)
    if len(reps):
        cps, results, noise = run_pf_stage(seq, dseq, basis.basis_matrix, reps, config.fdr_alpha)
    else:
        cps, results, noise = ChangePointSet(), [], None
    elapsed = int(round((time.perf_counter() - start) * 1000))
    return Detection(
        change_points=cps,
        candidates=gs.candidates,
        representatives=reps,
        tests=tuple(results),
        best=best,
        config=config,
        basis=basis,
        gs=gs,
        noise=noise,
        timing_ms=elapsed,
        tuning=tuple(records),
    )
