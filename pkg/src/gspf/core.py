"""Domain types, validation and the differencing reparameterization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


class GspfError(Exception):
    """Base class for every error raised by this package."""


class DataError(GspfError, ValueError):
    """Input data violates a contract (malformed, inconsistent, out of range)."""


class NumericalError(GspfError, ArithmeticError):
    """A numerical routine could not produce a trustworthy answer."""


class NonFiniteEntry(DataError):
    pass


class RaggedRows(DataError):
    pass


class GridMismatch(DataError):
    pass


class InvalidGrid(DataError):
    pass


class OutOfRange(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Shared evaluation points ``0 <= x_1 < ... < x_d <= 1``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1:
            raise InvalidGrid("grid must be a one-dimensional vector")
        if pts.size < 3:
            raise InvalidGrid(f"grid needs at least 3 points, got {pts.size}")
        if not np.all(np.isfinite(pts)):
            raise NonFiniteEntry("grid contains non-finite values")
        if pts[0] < 0.0 or pts[-1] > 1.0:
            raise InvalidGrid("grid points must lie in [0, 1]")
        if np.any(np.diff(pts) <= 0):
            raise InvalidGrid("grid must be strictly increasing")
        object.__setattr__(self, "points", _readonly(pts))

    @property
    def d(self) -> int:
        return self.points.size

    @classmethod
    def equispaced(cls, d: int) -> "Grid":
        """Interior points ``j / (d + 1)`` for ``j = 1..d``."""
        return cls(np.arange(1, d + 1) / (d + 1.0))


@dataclass(frozen=True, eq=False)
class FunctionalSequence:
    """T curves observed on a shared grid; row ``t`` is curve ``f_t``."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise RaggedRows("values must be a T x d matrix")
        if v.shape[0] < 2:
            raise DataError(f"need at least 2 curves, got {v.shape[0]}")
        if v.shape[1] != self.grid.d:
            raise GridMismatch(f"grid has {self.grid.d} points but curves have {v.shape[1]}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteEntry("curve values contain NaN or infinity")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class DifferencedSequence:
    """Row 1 holds ``f_1``; row ``t >= 2`` holds ``f_t - f_{t-1}``."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def cumulate(self) -> np.ndarray:
        """Undo the differencing (cumulative row sums)."""
        return np.cumsum(self.values, axis=0)


@dataclass(frozen=True)
class ChangePointSet:
    """Sorted, unique, 1-based change-point indices, each ``>= 2``.

    Index 1 carries the initial level of the sequence and is never a change.
    """

    indices: tuple = ()

    def __post_init__(self):
        idx = sorted({int(i) for i in self.indices})
        if idx and idx[0] < 2:
            raise OutOfRange(f"change-point indices must be >= 2, got {idx[0]}")
        object.__setattr__(self, "indices", tuple(idx))

    def __iter__(self):
        return iter(self.indices)

    def __len__(self):
        return len(self.indices)

    def __contains__(self, item):
        return item in self.indices

    def check_within(self, T: int) -> "ChangePointSet":
        if self.indices and self.indices[-1] > T:
            raise IndexOutOfRange(f"change point {self.indices[-1]} exceeds T={T}")
        return self

    def tolist(self) -> list:
        return list(self.indices)


@dataclass(frozen=True)
class DetectorConfig:
    """Hyperparameters of the two-stage detector.

    ``lambda_grid=None`` requests the data-scaled default grid, resolved at
    search time from the median group least-squares norm.
    """

    lambda_grid: Optional[tuple] = None
    eta_grid: tuple = (0.0, 1e-4, 1e-2, 1.0)
    kappa_grid: tuple = (1, 2, 5, 10)
    gamma: float = 3.0
    fdr_alpha: float = 0.01
    fve_threshold: float = 0.99

    def __post_init__(self):
        if self.lambda_grid is not None:
            lam = tuple(float(x) for x in self.lambda_grid)
            if not lam:
                raise DataError("lambda_grid must be nonempty")
            if any(not np.isfinite(x) or x <= 0 for x in lam):
                raise DataError("lambda_grid values must be positive")
            object.__setattr__(self, "lambda_grid", lam)
        eta = tuple(float(x) for x in self.eta_grid)
        if not eta or any(not np.isfinite(x) or x < 0 for x in eta):
            raise DataError("eta_grid must be nonempty and nonnegative")
        kap = tuple(int(x) for x in self.kappa_grid)
        if not kap or any(x < 0 for x in kap):
            raise DataError("kappa_grid must be nonempty and nonnegative")
        object.__setattr__(self, "eta_grid", eta)
        object.__setattr__(self, "kappa_grid", kap)
        if not self.gamma > 1:
            raise DataError("gamma must exceed 1")
        if not 0 < self.fdr_alpha < 1:
            raise DataError("fdr_alpha must lie in (0, 1)")
        if not 0 < self.fve_threshold <= 1:
            raise DataError("fve_threshold must lie in (0, 1]")


def difference(seq: FunctionalSequence) -> DifferencedSequence:
    """Reparameterize levels as increments: ``y_1 = f_1``, ``y_t = f_t - f_{t-1}``."""
    f = seq.values
    y = np.empty_like(f)
    y[0] = f[0]
    np.subtract(f[1:], f[:-1], out=y[1:])
    return DifferencedSequence(y, seq.grid)


def validate_csv_matrix(
    raw: Sequence[Sequence[float]] | np.ndarray,
    grid: Optional[Iterable[float]] = None,
) -> FunctionalSequence:
    """Turn a parsed CSV matrix (rows = time) into a FunctionalSequence.

    Raises
    ------
    RaggedRows
        Rows of unequal length.
    NonFiniteEntry
        NaN or infinite entries.
    GridMismatch
        ``grid`` length differs from the number of columns.
    """
    if isinstance(raw, np.ndarray):
        if raw.ndim != 2:
            raise RaggedRows("expected a two-dimensional matrix")
        mat = raw.astype(float)
    else:
        rows = [list(r) for r in raw]
        if not rows:
            raise RaggedRows("matrix has no rows")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise RaggedRows(f"rows have differing lengths {sorted(widths)}")
        try:
            mat = np.array(rows, dtype=float)
        except (TypeError, ValueError) as exc:
            raise NonFiniteEntry(f"non-numeric entry: {exc}") from None
    if not np.all(np.isfinite(mat)):
        raise NonFiniteEntry("matrix contains NaN or infinity")
    d = mat.shape[1]
    if grid is None:
        g = Grid.equispaced(d)
    else:
        pts = np.asarray(list(grid), dtype=float)
        if pts.size != d:
            raise GridMismatch(f"grid has {pts.size} points but matrix has {d} columns")
        g = Grid(pts)
    return FunctionalSequence(mat, g)


def trapezoid_weights(points: np.ndarray) -> np.ndarray:
    """Trapezoidal quadrature weights on a strictly increasing grid."""
    x = np.asarray(points, dtype=float)
    w = np.empty_like(x)
    gaps = np.diff(x)
    w[0] = gaps[0] / 2
    w[-1] = gaps[-1] / 2
    w[1:-1] = (gaps[:-1] + gaps[1:]) / 2
    return w


def segment_bounds(change_points: Iterable[int], T: int) -> list:
    """1-based inclusive ``(start, end)`` pairs of the segments cut by ``change_points``."""
    starts = [1] + [int(c) for c in change_points]
    ends = [s - 1 for s in starts[1:]] + [T]
    return list(zip(starts, ends))
