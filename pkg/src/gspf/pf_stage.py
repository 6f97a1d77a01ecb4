"""Partial F-test filtering of change-point representatives with BH adjustment.

The differenced noise ``xi_1 = eps_1``, ``xi_t = eps_t - eps_{t-1}`` has the
block-tridiagonal covariance ``Sigma_xi = D (I_T x Sigma) D^T`` where ``D`` is
the block differencing operator. Its lower Cholesky factor is ``D (I_T x C)``
with ``Sigma = C C^T``, so whitening reduces to a cumulative sum over time
followed by a triangular solve with ``C`` at every time point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import special
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from .core import (
    ChangePointSet,
    DataError,
    DifferencedSequence,
    FunctionalSequence,
    NumericalError,
    OutOfRange,
    segment_bounds,
)


class TooFewCurves(DataError):
    pass


class SingularCovariance(NumericalError):
    pass


class RankDeficientDesign(NumericalError):
    pass


SHRINKAGE_WEIGHTS = (0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0)
MAX_CONDITION = 1e8
DENSE_LIMIT = 4000


@dataclass(frozen=True, eq=False)
class NoiseCovariance:
    sigma_hat: np.ndarray
    shrinkage_weight: float


@dataclass(frozen=True)
class TestResult:
    representative: int
    f_stat: float
    df1: int
    df2: int
    p_raw: float
    p_adjusted: float = float("nan")
    retained: bool = False
    skipped: bool = False

    __test__ = False  # not a pytest class


def _merge_short_segments(bounds: list) -> list:
    merged = [list(b) for b in bounds]
    i = 0
    while len(merged) > 1 and i < len(merged):
        s, e = merged[i]
        if e - s + 1 >= 2:
            i += 1
            continue
        if i + 1 < len(merged):
            merged[i + 1][0] = s
        else:
            merged[i - 1][1] = e
        del merged[i]
    return [tuple(b) for b in merged]


def _condition(mat: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(mat)
    if ev[0] <= 0:
        return np.inf
    return float(ev[-1] / ev[0])


def estimate_noise_covariance(
    seq: FunctionalSequence, representatives: ChangePointSet | Iterable[int] = ()
) -> NoiseCovariance:
    """Pooled within-segment covariance, shrunk toward ``(trace/d) I`` if ill conditioned.

    Segments shorter than two curves are merged into a neighbour for this
    estimate only.
    """
    reps = ChangePointSet(tuple(representatives)).check_within(seq.T)
    bounds = _merge_short_segments(segment_bounds(reps, seq.T))
    n_dof = seq.T - len(bounds)
    if n_dof < 2:
        raise TooFewCurves(f"only {n_dof} residual degrees of freedom for the noise covariance")
    f = seq.values
    resid = np.empty_like(f)
    for s, e in bounds:
        block = f[s - 1 : e]
        resid[s - 1 : e] = block - block.mean(axis=0)
    return _shrink(resid.T @ resid / n_dof)


def _shrink(sigma: np.ndarray) -> NoiseCovariance:
    sigma = (sigma + sigma.T) / 2
    d = sigma.shape[0]
    target = np.trace(sigma) / d
    if target <= 0:
        return NoiseCovariance(1e-12 * np.eye(d), 1.0)
    for wgt in SHRINKAGE_WEIGHTS:
        cand = (1 - wgt) * sigma + wgt * target * np.eye(d)
        if _condition(cand) <= MAX_CONDITION:
            return NoiseCovariance(cand, wgt)
    return NoiseCovariance(target * np.eye(d), 1.0)


def pilot_noise_covariance(dseq: DifferencedSequence, n_iter: int = 3, level: float = 0.999) -> NoiseCovariance:
    """Change-robust noise covariance from the increments ``y_2..y_T``.

    Increments have covariance ``2 Sigma`` away from change points. Rows
    whose Mahalanobis distance exceeds the chi-square ``level`` quantile are
    trimmed and the estimate is refitted, so a few large jumps do not leak
    into it. Only the shape matters to its users; the mild downward bias of
    trimming is irrelevant.
    """
    from scipy.stats import chi2

    y = dseq.values[1:]
    if y.shape[0] < 2:
        raise TooFewCurves("need at least three curves for a pilot covariance")
    d = y.shape[1]
    cutoff = chi2.ppf(level, d)
    keep = np.ones(y.shape[0], dtype=bool)
    est = None
    for _ in range(n_iter):
        est = _shrink(y[keep].T @ y[keep] / (2.0 * keep.sum()))
        c = cholesky(2.0 * est.sigma_hat, lower=True)
        m = np.sum(solve_triangular(c, y.T, lower=True) ** 2, axis=0)
        new_keep = m <= cutoff
        if new_keep.sum() < max(2, y.shape[0] // 2) or np.array_equal(new_keep, keep):
            break
        keep = new_keep
    return est


class SigmaXi:
    """Implicit ``Td x Td`` covariance of the differenced noise.

    Diagonal blocks are ``Sigma`` (t = 1) and ``2 Sigma`` (t >= 2); the
    first off-diagonal blocks are ``-Sigma``.
    """

    def __init__(self, sigma: np.ndarray, T: int):
        self.sigma = np.asarray(sigma, dtype=float)
        self.T = int(T)
        self.d = self.sigma.shape[0]
        self._whitener = None

    @property
    def shape(self) -> tuple:
        n = self.T * self.d
        return (n, n)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Apply the operator to a ``Td`` vector (or ``Td x p`` matrix)."""
        v = np.asarray(v, dtype=float)
        blocks = v.reshape(self.T, self.d, -1)
        sv = np.einsum("ij,tjp->tip", self.sigma, blocks)
        out = sv.copy()
        out[1:] *= 2.0
        out[1:] -= sv[:-1]
        out[:-1] -= sv[1:]
        return out.reshape(v.shape)

    def todense(self) -> np.ndarray:
        n = self.T * self.d
        if n > DENSE_LIMIT:
            raise MemoryError(f"refusing to materialize a {n}x{n} operator")
        out = np.zeros((n, n))
        d = self.d
        for t in range(self.T):
            out[t * d : (t + 1) * d, t * d : (t + 1) * d] = self.sigma * (1.0 if t == 0 else 2.0)
            if t > 0:
                out[t * d : (t + 1) * d, (t - 1) * d : t * d] = -self.sigma
                out[(t - 1) * d : t * d, t * d : (t + 1) * d] = -self.sigma
        return out

    def whitener(self) -> np.ndarray:
        """Per-time-point whitening matrix ``W`` applied after the cumulative sum.

        ``W = C^-1`` when ``Sigma`` is positive definite; otherwise rows of
        ``Lambda^-1/2 U^T`` for eigenvalues above ``1e-10 * lambda_max``.
        """
        if self._whitener is not None:
            return self._whitener
        try:
            c = cholesky(self.sigma, lower=True)
            w = solve_triangular(c, np.eye(self.d), lower=True)
        except LinAlgError:
            evals, evecs = np.linalg.eigh((self.sigma + self.sigma.T) / 2)
            top = evals.max(initial=0.0)
            keep = evals > 1e-10 * top if top > 0 else np.zeros_like(evals, dtype=bool)
            if not keep.any():
                raise SingularCovariance("noise covariance has rank zero") from None
            w = evecs[:, keep].T / np.sqrt(evals[keep])[:, None]
        self._whitener = w
        return w


def build_sigma_xi_blocks(sigma: np.ndarray, T: int) -> SigmaXi:
    return SigmaXi(sigma, T)


def whiten(y: np.ndarray, design: np.ndarray, sigma_xi: SigmaXi) -> tuple:
    """Forward substitution against the block-bidiagonal factor of ``Sigma_xi``.

    Returns ``(y_tilde, design_tilde)`` with ``T * rank(Sigma)`` rows.
    """
    w = sigma_xi.whitener()
    T, d = sigma_xi.T, sigma_xi.d

    def apply(m):
        m = np.asarray(m, dtype=float)
        vec = m.ndim == 1
        blocks = np.cumsum(m.reshape(T, d, -1), axis=0)
        out = np.einsum("ij,tjp->tip", w, blocks).reshape(T * w.shape[0], -1)
        return out[:, 0] if vec else out

    return apply(y), apply(design)


def f_survival(f: float, df1: float, df2: float) -> float:
    """Upper-tail probability of the central F distribution."""
    if f <= 0:
        return 1.0
    return float(special.betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f)))


def build_design(T: int, d: int, basis_matrix: np.ndarray, representatives: Sequence[int]) -> tuple:
    """Design of the full model on the differenced data.

    Columns: intercept, ``d`` free columns for the initial curve (row 1),
    then one ``K``-column block ``b(x)^T`` per representative placed in that
    representative's rows. Returns ``(design, blocks)`` where ``blocks[i]``
    lists the columns of representative ``i``.
    """
    K = basis_matrix.shape[0]
    reps = list(representatives)
    p = 1 + d + K * len(reps)
    X = np.zeros((T * d, p))
    X[:, 0] = 1.0
    X[:d, 1 : 1 + d] = np.eye(d)
    blocks = []
    for i, tau in enumerate(reps):
        cols = list(range(1 + d + K * i, 1 + d + K * (i + 1)))
        X[(tau - 1) * d : tau * d, cols] = basis_matrix.T
        blocks.append(cols)
    return X, blocks


@dataclass(frozen=True, eq=False)
class FullFit:
    """QR factorization of a whitened full design, shared by all partial tests."""

    coef: np.ndarray
    rss: float
    r: np.ndarray
    n: int
    p: int
    tss: float = np.inf  # uncentered total sum of squares of the whitened response


def fit_full(y_w: np.ndarray, x_w: np.ndarray) -> FullFit:
    n, p = x_w.shape
    q, r = np.linalg.qr(x_w)
    diag = np.abs(np.diag(r))
    if diag.min(initial=np.inf) <= 1e-10 * max(diag.max(initial=0.0), 1e-300):
        raise RankDeficientDesign("whitened design is rank deficient")
    qty = q.T @ y_w
    coef = solve_triangular(r, qty, lower=False)
    resid = y_w - x_w @ coef
    rss = float(resid @ resid)
    return FullFit(coef, rss, r, n, p, float(y_w @ y_w))


def partial_f_from_fit(fit: FullFit, cols: Sequence[int]) -> tuple:
    """``(F, df1, df2)`` for dropping ``cols`` from the fitted full model.

    The drop in fit is the Wald form ``c^T V^-1 c`` with ``c`` the tested
    coefficients and ``V`` the matching block of ``(X^T X)^-1``.
    """
    cols = list(cols)
    df1 = len(cols)
    df2 = fit.n - fit.p
    if df2 <= 0:
        return np.nan, df1, df2
    rinv = solve_triangular(fit.r, np.eye(fit.p), lower=False)
    sub = rinv[cols]
    v = sub @ sub.T
    c = fit.coef[cols]
    delta = float(c @ np.linalg.solve(v, c))
    f = _f_ratio(delta, fit.rss, fit.tss, df1, df2)
    return f, df1, df2


def _f_ratio(delta: float, rss: float, tss: float, df1: int, df2: int) -> float:
    # residuals at round-off level relative to the data mean an exact fit
    tiny = 1e-20 * tss
    if rss <= tiny:
        return 0.0 if delta <= max(tiny, 1e-300) else np.inf
    return max(delta / df1 / (rss / df2), 0.0)


def partial_f_test(
    y: np.ndarray,
    full_design: np.ndarray,
    tested_group_columns: Sequence[int],
    sigma_xi: SigmaXi,
    representative: int = 0,
) -> TestResult:
    """Whiten, fit the full model and test the listed columns jointly."""
    y_w, x_w = whiten(y, full_design, sigma_xi)
    fit = fit_full(y_w, x_w)
    return _result_from_fit(fit, tested_group_columns, representative)


def _result_from_fit(fit: FullFit, cols, representative: int) -> TestResult:
    f, df1, df2 = partial_f_from_fit(fit, cols)
    if df2 <= 0:
        warnings.warn(f"non-positive residual degrees of freedom ({df2}); test skipped", RuntimeWarning)
        return TestResult(int(representative), 0.0, df1, df2, 1.0, skipped=True)
    return TestResult(int(representative), float(f), df1, df2, f_survival(f, df1, df2))


def test_representatives(
    dseq: DifferencedSequence,
    basis_matrix: np.ndarray,
    representatives: ChangePointSet,
    sigma: np.ndarray,
) -> list:
    """One partial F-test per representative against the model holding all of them."""
    reps = list(representatives)
    if not reps:
        return []
    T, d = dseq.values.shape
    X, blocks = build_design(T, d, basis_matrix, reps)
    y_w, x_w = whiten(dseq.values.reshape(-1), X, build_sigma_xi_blocks(sigma, T))
    fit = fit_full(y_w, x_w)
    return [_result_from_fit(fit, cols, tau) for tau, cols in zip(reps, blocks)]


test_representatives.__test__ = False  # keep pytest from collecting it


def _trimmed_increments(ds: np.ndarray, level: float, n_iter: int) -> np.ndarray:
    from scipy.stats import chi2

    keep = np.ones(ds.shape[0], dtype=bool)
    cutoff = chi2.ppf(level, ds.shape[1])
    for _ in range(n_iter):
        s = ds[keep].T @ ds[keep] / max(int(keep.sum()), 1)
        m = np.einsum("uk,kl,ul->u", ds, np.linalg.pinv(s), ds)
        new_keep = m <= cutoff
        if new_keep.sum() < max(2, ds.shape[0] // 2) or np.array_equal(new_keep, keep):
            break
        keep = new_keep
    return keep


def local_span_precisions(
    coords: np.ndarray, half_width: int, level: float = 0.999, n_iter: int = 3
) -> np.ndarray:
    """Time-local noise precision of ``T x K`` level coordinates.

    Increments within ``half_width`` of each time point estimate ``2 Sigma_t``
    after trimming those beyond the chi-square ``level`` quantile (jumps).
    Points whose window holds too few increments use the global estimate.
    Returns a ``T x K x K`` array.
    """
    coords = np.asarray(coords, dtype=float)
    T, K = coords.shape
    if T < 3:
        return np.broadcast_to(np.eye(K), (T, K, K)).copy()
    ds = np.diff(coords, axis=0)
    keep = _trimmed_increments(ds, level, n_iter)
    kept = ds * keep[:, None]
    glob = kept.T @ kept / (2.0 * max(int(keep.sum()), 1))
    scale = np.trace(glob) / K
    if not scale > 0:
        return np.broadcast_to(np.eye(K), (T, K, K)).copy()
    outer = np.einsum("uk,ul->ukl", kept, ds)
    csum = np.concatenate([np.zeros((1, K, K)), np.cumsum(outer, axis=0)])
    ccnt = np.concatenate([[0], np.cumsum(keep)])
    # increment u joins curves u and u + 1 (0-based); window covers increments t-h .. t+h-1
    t = np.arange(T)
    lo = np.clip(t - half_width, 0, T - 1)
    hi = np.clip(t + half_width, 0, T - 1)
    cnt = ccnt[hi] - ccnt[lo]
    cov = 0.5 * (csum[hi] - csum[lo]) / np.maximum(cnt, 1)[:, None, None]
    thin = cnt < max(2 * K, 10)
    cov[thin] = glob
    cov += 1e-10 * scale * np.eye(K)
    return np.linalg.inv(cov)


def default_half_width(K: int) -> int:
    return max(25, 5 * int(K))


class LevelRefit:
    """Closed-form GLS refits of the full change-point model in level space.

    The full model of the differenced data (intercept, free initial curve,
    one basis block per representative) is, in levels, a linear drift plus a
    piecewise-constant mean whose jumps lie in the span of ``b(x)``. After
    whitening by ``sigma`` the span coordinates get segment means and the
    orthogonal complement one global mean. With ``local`` weighting the span
    coordinates are further reweighted by time-local precisions, which
    guards against noise whose covariance differs between regimes.
    """

    def __init__(
        self,
        seq: FunctionalSequence,
        basis_matrix: np.ndarray,
        sigma: np.ndarray,
        local: bool = True,
        half_width: Optional[int] = None,
    ):
        basis_matrix = np.atleast_2d(np.asarray(basis_matrix, dtype=float))
        self.T, self.d = seq.T, seq.d
        self.K = basis_matrix.shape[0]
        w = SigmaXi(sigma, self.T).whitener()
        q, r = np.linalg.qr(w @ basis_matrix.T)
        diag = np.abs(np.diag(r))
        if diag.size < self.K or diag.min(initial=np.inf) <= 1e-10 * max(diag.max(initial=0.0), 1e-300):
            raise RankDeficientDesign("whitened basis is rank deficient")
        self.n = self.T * w.shape[0]
        self._q = q
        fw = seq.values @ w.T
        self._f = self._split(fw)
        self._tss = float(np.sum(fw * fw))
        drift = np.arange(1, self.T + 1, dtype=float)[:, None] * (w @ np.ones(self.d))[None, :]
        self._g = self._split(drift)
        if local:
            h = default_half_width(self.K) if half_width is None else int(half_width)
            self.precision = local_span_precisions(self._f[0], h)
        else:
            self.precision = np.broadcast_to(np.eye(self.K), (self.T, self.K, self.K))
        self._pu = np.einsum("tkl,tl->tk", self.precision, self._f[0])
        self._pg = np.einsum("tkl,tl->tk", self.precision, self._g[0])

    def _split(self, m: np.ndarray) -> tuple:
        u = m @ self._q
        v = m - u @ self._q.T
        return u, v - v.mean(axis=0)

    def _residual(self, u: np.ndarray, pu: np.ndarray, bounds: list) -> np.ndarray:
        out = u.copy()
        for s, e in bounds:
            sl = slice(s - 1, e)
            beta = np.linalg.solve(self.precision[sl].sum(axis=0), pu[sl].sum(axis=0))
            out[sl] -= beta
        return out

    def _inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.einsum("tk,tkl,tl->", a, self.precision, b))

    def rss(self, representatives: Iterable[int]) -> float:
        """Weighted residual sum of squares of the full model."""
        bounds = segment_bounds(sorted(int(r) for r in representatives), self.T)
        fu = self._residual(self._f[0], self._pu, bounds)
        gu = self._residual(self._g[0], self._pg, bounds)
        fv, gv = self._f[1], self._g[1]
        rss = self._inner(fu, fu) + float(np.sum(fv * fv))
        gg = self._inner(gu, gu) + float(np.sum(gv * gv))
        if gg > 1e-12 * max(rss, 1e-300):
            fg = self._inner(fu, gu) + float(np.sum(fv * gv))
            rss -= fg * fg / gg
        return max(rss, 0.0)

    def n_params(self, n_representatives: int) -> int:
        return 1 + self.d + self.K * int(n_representatives)

    def partial_f(self, representatives: Iterable[int]) -> list:
        """One partial F-test per representative against the model holding all of them."""
        reps = sorted(int(r) for r in representatives)
        if not reps:
            return []
        df1 = self.K
        df2 = self.n - self.n_params(len(reps))
        full = self.rss(reps)
        out = []
        for i, tau in enumerate(reps):
            if df2 <= 0:
                warnings.warn(f"non-positive residual degrees of freedom ({df2}); test skipped", RuntimeWarning)
                out.append(TestResult(tau, 0.0, df1, df2, 1.0, skipped=True))
                continue
            delta = max(self.rss(reps[:i] + reps[i + 1 :]) - full, 0.0)
            f = _f_ratio(delta, full, self._tss, df1, df2)
            out.append(TestResult(tau, float(f), df1, df2, f_survival(f, df1, df2)))
        return out


def bh_adjust(p_values: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise OutOfRange("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    # p * m / k can round below p
    adj_sorted = np.maximum(adj_sorted, p[order])
    out = np.empty(m)
    out[order] = adj_sorted
    return out


def pf_filter(representatives: ChangePointSet, results: Sequence[TestResult], alpha: float) -> ChangePointSet:
    """Keep the representatives whose adjusted p-value is at most ``alpha``."""
    reps = list(representatives)
    if len(reps) != len(results):
        raise DataError("need exactly one test result per representative")
    keep = [r.representative for r in results if r.p_adjusted <= alpha]
    return ChangePointSet(tuple(keep))


def adjust_results(results: Sequence[TestResult], alpha: float) -> list:
    """Attach BH-adjusted p-values and retention flags."""
    if not results:
        return []
    adj = bh_adjust([r.p_raw for r in results])
    out = []
    for r, pa in zip(results, adj):
        pa = float(pa)
        out.append(
            TestResult(r.representative, r.f_stat, r.df1, r.df2, r.p_raw, pa, pa <= alpha, r.skipped)
        )
    return out


def run_pf_stage(
    seq: FunctionalSequence,
    dseq: DifferencedSequence,
    basis_matrix: np.ndarray,
    representatives: ChangePointSet,
    alpha: float,
    sigma: Optional[NoiseCovariance] = None,
    local: bool = True,
) -> tuple:
    """Estimate the noise covariance, test every representative and filter.

    ``local`` reweights the basis coordinates by time-local noise precisions
    (see ``LevelRefit``); without it the exact GLS route of
    ``test_representatives`` is used. Returns ``(change_points, results, noise_covariance)``.
    """
    if sigma is None:
        sigma = estimate_noise_covariance(seq, representatives)
    if local:
        raw = LevelRefit(seq, basis_matrix, sigma.sigma_hat, local=True).partial_f(representatives)
    else:
        raw = test_representatives(dseq, basis_matrix, representatives, sigma.sigma_hat)
    results = adjust_results(raw, alpha)
    return pf_filter(representatives, results, alpha), results, sigma
