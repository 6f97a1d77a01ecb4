"""Link-parameter merging of candidate change points and CUSUM election."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .core import ChangePointSet, DataError, FunctionalSequence, trapezoid_weights


class WindowTooSmall(DataError):
    pass


@dataclass(frozen=True)
class CandidateCluster:
    """A maximal run of candidates with gaps ``<= kappa``.

    ``window`` is the 1-based inclusive range ``(lo, hi)`` of curves used to
    elect the cluster's representative.
    """

    members: tuple
    window: tuple


def merge_candidates(candidates: ChangePointSet | Iterable[int], kappa: int, T: Optional[int] = None) -> list:
    """Partition candidates into clusters whose consecutive gaps are at most ``kappa``.

    Windows reach halfway to the neighbouring clusters, or to the sequence
    ends (1 and ``T``; ``T`` defaults to the last candidate).
    """
    if kappa < 0:
        raise DataError("kappa must be nonnegative")
    idx = sorted({int(c) for c in candidates})
    if not idx:
        return []
    runs = [[idx[0]]]
    for c in idx[1:]:
        if c - runs[-1][-1] <= kappa:
            runs[-1].append(c)
        else:
            runs.append([c])
    end = idx[-1] if T is None else int(T)
    clusters = []
    for i, run in enumerate(runs):
        lo = 1 if i == 0 else (runs[i - 1][-1] + run[0]) // 2
        hi = end if i == len(runs) - 1 else -((-(run[-1] + runs[i + 1][0])) // 2)
        clusters.append(CandidateCluster(tuple(run), (lo, max(hi, run[-1]))))
    return clusters


def _weights(seq: FunctionalSequence) -> np.ndarray:
    return trapezoid_weights(seq.grid.points)


def cusum_profile(seq: FunctionalSequence, window: tuple, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """CUSUM statistic for every split ``k = lo .. hi-1`` of the window."""
    lo, hi = window
    n = hi - lo + 1
    if n < 2:
        raise WindowTooSmall(f"window {window} holds fewer than two curves")
    if lo < 1 or hi > seq.T:
        raise DataError(f"window {window} outside 1..{seq.T}")
    w = _weights(seq) if weights is None else weights
    g = seq.values[lo - 1 : hi]
    partial = np.cumsum(g, axis=0)[:-1]
    frac = np.arange(1, n)[:, None] / n
    dev = partial - frac * partial[-1:] - frac * g[-1:]
    return np.sqrt(np.einsum("kj,kj,j->k", dev, dev, w)) / np.sqrt(n)


def cusum_statistic(seq: FunctionalSequence, window: tuple, k: int, weights: Optional[np.ndarray] = None) -> float:
    """``(1/sqrt(n)) || S_k - (k - lo + 1)/n * S_hi ||`` over the window ``(lo, hi)``."""
    lo, hi = window
    if not lo <= k < hi:
        raise DataError(f"split {k} outside [{lo}, {hi})")
    return float(cusum_profile(seq, window, weights)[k - lo])


def elect_representative(cluster: CandidateCluster, seq: FunctionalSequence, weights: Optional[np.ndarray] = None) -> int:
    """The first index after the CUSUM-maximizing split inside the cluster's span."""
    members = cluster.members
    if not members:
        raise DataError("cannot elect from an empty cluster")
    if len(members) == 1:
        return members[0]
    lo, hi = cluster.window
    prof = cusum_profile(seq, (lo, hi), weights)
    k_lo = max(members[0] - 1, lo)
    k_hi = min(members[-1], hi - 1)
    seg = prof[k_lo - lo : k_hi - lo + 1]
    k = k_lo + int(np.argmax(seg))
    return int(min(max(k + 1, 2), seq.T))


def refine(candidates: ChangePointSet, seq: FunctionalSequence, kappa: int) -> tuple:
    """Merge candidates and elect one representative per cluster.

    Returns ``(clusters, representatives)``.
    """
    clusters = merge_candidates(candidates, kappa, seq.T)
    w = _weights(seq)
    reps = ChangePointSet(tuple(elect_representative(c, seq, w) for c in clusters))
    return clusters, reps
