"""Synthetic functional sequences with known change points."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import special

from .core import ChangePointSet, DataError, FunctionalSequence, Grid, NumericalError

FAMILIES = ("constant", "symmetric", "asymmetric", "sbar", "benchmark")
SCENARIOS = (0, 1, 5)
SEGMENT_MIN, SEGMENT_MAX = 100, 200
SBAR_BURN_IN = 50

SeedLike = Union[int, np.random.Generator, None]


class BesselOverflow(NumericalError):
    pass


class InvalidFamilyNoisePair(DataError):
    pass


@dataclass(frozen=True)
class MaternParams:
    sigma: float = 0.1
    r: float = 0.1
    nu: float = 1.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.r > 0 and self.nu > 0):
            raise DataError("Matern parameters must be positive")


@dataclass(frozen=True)
class SimulationSpec:
    """One synthetic dataset: family, number of changes, noise law, grid size, seed.

    ``noise`` is ``"gp"``, ``"tp"`` or ``"iid_normal"``; ``None`` picks the
    family's default (``gp`` for the Matern families, ``iid_normal`` otherwise).
    """

    family: str = "symmetric"
    scenario: int = 1
    noise: Optional[str] = None
    d: int = 30
    seed: int = 0
    tp_df: int = 3
    matern: MaternParams = field(default_factory=MaternParams)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.scenario not in SCENARIOS:
            raise DataError(f"scenario must be one of {SCENARIOS}")
        if self.d < 3:
            raise DataError("d must be at least 3")
        if self.tp_df < 1:
            raise DataError("tp_df must be at least 1")
        noise = self.noise
        if noise is None:
            noise = "gp" if self.family in ("constant", "symmetric", "asymmetric") else "iid_normal"
            object.__setattr__(self, "noise", noise)
        if noise not in ("gp", "tp", "iid_normal"):
            raise DataError(f"unknown noise {noise!r}")
        gp_like = noise in ("gp", "tp")
        if self.family in ("sbar", "benchmark") and gp_like:
            raise InvalidFamilyNoisePair(f"{self.family} uses iid normal errors")
        if self.family in ("constant", "symmetric", "asymmetric") and not gp_like:
            raise InvalidFamilyNoisePair(f"{self.family} uses GP or t-process errors")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    seq: FunctionalSequence
    truth: ChangePointSet
    segment_lengths: tuple = ()


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def matern_cov(grid: Grid | np.ndarray, params: MaternParams = MaternParams()) -> np.ndarray:
    """Matern covariance on the grid with a tiny relative diagonal jitter.

    ``C(x, x') = s^2 sqrt(pi) r^(2 nu) / (2^(nu-1) Gamma(nu + 1/2)) * u^nu K_nu(u)``
    with ``u = |x - x'| / r``. The zero-distance value uses the limit
    ``u^nu K_nu(u) -> 2^(nu-1) Gamma(nu)``.
    """
    x = grid.points if isinstance(grid, Grid) else np.asarray(grid, dtype=float)
    s2, r, nu = params.sigma**2, params.r, params.nu
    with np.errstate(over="ignore", invalid="ignore"):
        log_pref = np.log(s2) + 0.5 * np.log(np.pi) + 2 * nu * np.log(r) - (nu - 1) * np.log(2) - special.gammaln(nu + 0.5)
        diag = np.exp(np.log(s2) + 0.5 * np.log(np.pi) + 2 * nu * np.log(r) + special.gammaln(nu) - special.gammaln(nu + 0.5))
        u = np.abs(x[:, None] - x[None, :]) / r
        off = u > 0
        cov = np.full(u.shape, diag)
        uu = u[off]
        vals = np.exp(log_pref + nu * np.log(uu)) * special.kv(nu, uu)
    if not np.all(np.isfinite(vals)) or not np.isfinite(diag):
        raise BesselOverflow(f"Bessel evaluation overflowed for nu={nu}")
    cov[off] = vals
    cov = (cov + cov.T) / 2
    cov[np.diag_indices_from(cov)] += 1e-10 * diag
    return cov


def _cov_factor(cov: np.ndarray) -> Optional[np.ndarray]:
    cov = np.asarray(cov, dtype=float)
    scale = np.trace(cov) / cov.shape[0]
    if scale <= 0:
        return None
    return np.linalg.cholesky(cov + 1e-10 * scale * np.eye(cov.shape[0]))


def sample_gp(mean: np.ndarray, cov: np.ndarray, seed: SeedLike = None) -> np.ndarray:
    """One Gaussian draw ``mean + L z`` with ``L L^T = cov``."""
    mean = np.asarray(mean, dtype=float)
    rng = _rng(seed)
    z = rng.standard_normal(mean.size)
    factor = _cov_factor(cov)
    if factor is None:
        return mean.copy()
    return mean + factor @ z


def sample_tp(mean: np.ndarray, cov: np.ndarray, df: float, seed: SeedLike = None) -> np.ndarray:
    """Multivariate-t draw as a Gaussian scale mixture ``mean + L z sqrt(df / chi2_df)``."""
    if df < 1:
        raise DataError("degrees of freedom must be at least 1")
    mean = np.asarray(mean, dtype=float)
    rng = _rng(seed)
    z = rng.standard_normal(mean.size)
    w = rng.chisquare(df)
    factor = _cov_factor(cov)
    if factor is None:
        return mean.copy()
    return mean + (factor @ z) * np.sqrt(df / w)


# Mean functions by family; index i is regime i + 1.
def _symmetric_means(x: np.ndarray) -> list:
    m2 = -1 - 100 * (x - 0.1) * (x - 0.3) * (x - 0.5) * (x - 0.9)
    return [
        5 * x**2 - np.exp(1 - 20 * x),
        m2,
        m2 - 2 * np.abs(np.sin(1 + 10 * np.pi * x)),
        1 + 3 * x**2 - 5 * x**3 - np.sin(1 + 10 * np.pi * x),
        3 * x**2 - 5 * x**3,
    ]


def _constant_means(x: np.ndarray) -> list:
    return [np.full_like(x, c) for c in (0.0, 5.0, 7.0, 11.0, 8.0)]


def _benchmark_means(x: np.ndarray, a: float = 1.0) -> list:
    return [np.zeros_like(x), 3 * x, 6 - 2 * x**2, np.exp(a * x), 7 * x**3]


# (phi_1, phi_2, intercept) per regime
SBAR_REGIMES = [(0.9, 0.0, 0.0), (1.32, -0.81, 2.0), (-0.5, 0.1, 1.0), (0.9, 0.0, 0.0), (1.32, -0.81, 2.0)]


def regime_sequence(scenario: int) -> list:
    """Regime index (0-based) of each of the ``scenario + 1`` segments, cycling through five."""
    return [i % 5 for i in range(scenario + 1)]


def segment_lengths(scenario: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(SEGMENT_MIN, SEGMENT_MAX + 1, size=scenario + 1)


def _sbar_segment(state: np.ndarray, regime: int, n: int, rng: np.random.Generator) -> tuple:
    phi1, phi2, c = SBAR_REGIMES[regime]
    d = state.shape[1]
    prev2, prev1 = state[0].copy(), state[1].copy()
    out = np.empty((n, d))
    innov = rng.standard_normal((SBAR_BURN_IN + n, d))
    for s in range(SBAR_BURN_IN + n):
        cur = phi1 * prev1 + phi2 * prev2 + c + innov[s]
        prev2, prev1 = prev1, cur
        if s >= SBAR_BURN_IN:
            out[s - SBAR_BURN_IN] = cur
    return out, np.vstack([prev2, prev1])


def generate(spec: SimulationSpec) -> LabeledDataset:
    """Draw one labeled dataset; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    grid = Grid.equispaced(spec.d)
    x = grid.points
    lengths = segment_lengths(spec.scenario, rng)
    regimes = regime_sequence(spec.scenario)
    T = int(lengths.sum())

    if spec.family == "sbar":
        state = np.zeros((2, spec.d))
        parts = []
        for reg, n in zip(regimes, lengths):
            seg, state = _sbar_segment(state, reg, int(n), rng)
            parts.append(seg)
        values = np.vstack(parts)
    else:
        if spec.family == "constant":
            means = _constant_means(x)
        elif spec.family == "benchmark":
            means = _benchmark_means(x)
        else:
            means = _symmetric_means(x)
        mu = np.vstack([np.tile(means[reg], (n, 1)) for reg, n in zip(regimes, lengths)])
        if spec.noise == "iid_normal":
            noise = rng.standard_normal((T, spec.d))
        else:
            factor = _cov_factor(matern_cov(grid, spec.matern))
            noise = rng.standard_normal((T, spec.d)) @ factor.T
            if spec.noise == "tp":
                noise *= np.sqrt(spec.tp_df / rng.chisquare(spec.tp_df, size=T))[:, None]
        values = mu + noise
        if spec.family == "asymmetric":
            values = np.logaddexp(0.0, values)

    truth = ChangePointSet(tuple(int(c) + 1 for c in np.cumsum(lengths)[:-1]))
    return LabeledDataset(FunctionalSequence(values, grid), truth, tuple(int(n) for n in lengths))


def truth_json(dataset: LabeledDataset, spec: SimulationSpec) -> str:
    return json.dumps({"change_points": dataset.truth.tolist(), "spec": spec.to_dict()}, indent=2, sort_keys=True)
