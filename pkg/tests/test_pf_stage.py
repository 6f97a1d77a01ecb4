import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import kstest

from gspf.core import ChangePointSet, DifferencedSequence, Grid, difference
from gspf.pf_stage import (
    LevelRefit,
    RankDeficientDesign,
    TestResult,
    adjust_results,
    bh_adjust,
    build_design,
    build_sigma_xi_blocks,
    estimate_noise_covariance,
    f_survival,
    fit_full,
    local_span_precisions,
    partial_f_test,
    pf_filter,
    pilot_noise_covariance,
    run_pf_stage,
    test_representatives as run_tests,
    whiten,
)

from conftest import make_seq
from oracles import anova_f


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.5 * np.eye(d)


def random_basis(rng, d, K):
    q, _ = np.linalg.qr(rng.normal(size=(d, K)))
    return q.T


# noise covariance


def test_noise_covariance_noiseless_piecewise_constant():
    values = np.vstack([np.zeros((10, 4)), np.ones((10, 4))])
    est = estimate_noise_covariance(make_seq(values), (11,))
    np.testing.assert_allclose(est.sigma_hat, 1e-12 * np.eye(4))
    assert est.shrinkage_weight == 1.0


def test_noise_covariance_iid_concentration():
    misses = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        est = estimate_noise_covariance(make_seq(rng.normal(size=(500, 5))))
        misses += np.abs(est.sigma_hat - np.eye(5)).max() >= 0.2
    assert misses <= 1


def test_noise_covariance_ignores_supplied_step(rng):
    noise = rng.normal(size=(60, 4))
    step = noise.copy()
    step[30:] += 1e4
    a = estimate_noise_covariance(make_seq(noise), (31,)).sigma_hat
    b = estimate_noise_covariance(make_seq(step), (31,)).sigma_hat
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_pilot_covariance_resists_jumps(rng):
    values = rng.normal(size=(400, 4))
    for tau in (80, 160, 240, 320):
        values[tau:] += 30.0
    est = pilot_noise_covariance(difference(make_seq(values))).sigma_hat
    assert np.abs(est - np.eye(4)).max() < 0.3


# covariance of the differenced noise


def test_sigma_xi_scalar_dense():
    dense = build_sigma_xi_blocks(np.array([[1.0]]), 3).todense()
    np.testing.assert_array_equal(dense, [[1, -1, 0], [-1, 2, -1], [0, -1, 2]])


def test_sigma_xi_zero():
    op = build_sigma_xi_blocks(np.zeros((2, 2)), 4)
    np.testing.assert_array_equal(op.todense(), 0.0)
    np.testing.assert_array_equal(op.matvec(np.arange(8.0)), 0.0)


def test_sigma_xi_matvec_matches_dense(rng):
    op = build_sigma_xi_blocks(random_spd(rng, 3), 7)
    v = rng.normal(size=21)
    np.testing.assert_allclose(op.matvec(v), op.todense() @ v, atol=1e-12)


def test_sigma_xi_monte_carlo():
    rng = np.random.default_rng(7)
    d, T, reps = 2, 200, 2000
    sigma = np.array([[1.0, 0.4], [0.4, 0.5]])
    eps = rng.normal(size=(reps, T, d)) @ np.linalg.cholesky(sigma).T
    xi = np.diff(eps, axis=1, prepend=0.0)
    dense = build_sigma_xi_blocks(sigma, T).todense().reshape(T, d, T, d)

    def mc_block(t, s):
        return np.einsum("ri,rj->ij", xi[:, t], xi[:, s]) / reps

    # blocks sharing a position in the band are pooled over time; one 400 x 400
    # element-wise maximum would mostly measure Monte-Carlo noise
    pooled = {
        "first": mc_block(0, 0),
        "diag": np.mean([mc_block(t, t) for t in range(1, T)], axis=0),
        "lag1": np.mean([mc_block(t, t - 1) for t in range(1, T)], axis=0),
        "lag2": np.mean([mc_block(t, t - 2) for t in range(2, T)], axis=0),
    }
    exact = {"first": dense[0, :, 0], "diag": dense[5, :, 5], "lag1": dense[5, :, 4], "lag2": dense[5, :, 3]}
    for key in pooled:
        assert np.abs(pooled[key] - exact[key]).max() < 0.1, key
    np.testing.assert_array_equal(exact["lag2"], 0.0)


def test_whitening_gram_is_inverse_covariance(rng):
    d, T = 3, 6
    op = build_sigma_xi_blocks(random_spd(rng, d), T)
    X = rng.normal(size=(T * d, 4))
    y = rng.normal(size=T * d)
    y_w, X_w = whiten(y, X, op)
    P = np.linalg.inv(op.todense())
    np.testing.assert_allclose(X_w.T @ X_w, X.T @ P @ X, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(X_w.T @ y_w, X.T @ P @ y, rtol=1e-9, atol=1e-9)


# F statistic and p-values


def test_f_zero_block_zero_noise():
    T, d = 6, 2
    b = np.array([[1.0, 0.0]])
    X, blocks = build_design(T, d, b, [4])
    y = np.full(T * d, 3.0)
    res = partial_f_test(y, X, blocks[0], build_sigma_xi_blocks(np.eye(d), T), representative=4)
    assert res.f_stat == 0.0
    assert res.p_raw == 1.0


@pytest.mark.parametrize("df", [1, 2, 5, 30, 333])
def test_f_survival_at_one_with_equal_df(df):
    assert f_survival(1.0, df, df) == pytest.approx(0.5, abs=1e-12)


@given(st.floats(1e-3, 50.0), st.integers(1, 40), st.integers(1, 400))
def test_f_survival_matches_mpmath(f, df1, df2):
    mpmath.mp.dps = 40
    x = mpmath.mpf(df2) / (df2 + df1 * mpmath.mpf(f))
    ref = float(mpmath.betainc(mpmath.mpf(df2) / 2, mpmath.mpf(df1) / 2, 0, x, regularized=True))
    assert f_survival(f, df1, df2) == pytest.approx(ref, rel=1e-10, abs=1e-300)


def _anova_case(seed, T=6, d=2, K=1, n_reps=1):
    rng = np.random.default_rng(seed)
    sigma = random_spd(rng, d)
    b = random_basis(rng, d, K)
    reps = sorted(rng.choice(np.arange(2, T + 1), size=n_reps, replace=False).tolist())
    X, blocks = build_design(T, d, b, reps)
    y = rng.normal(size=T * d)
    return y, X, blocks, build_sigma_xi_blocks(sigma, T), reps


def test_f_matches_anova_oracle_example():
    y, X, blocks, op, reps = _anova_case(11)
    res = partial_f_test(y, X, blocks[0], op)
    f_ref, _, _ = anova_f(y, X, blocks[0], op.todense())
    assert res.f_stat == pytest.approx(f_ref, rel=1e-8, abs=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_f_matches_anova_oracle_multi(seed):
    y, X, blocks, op, reps = _anova_case(seed, T=8, d=3, K=2, n_reps=2)
    for cols in blocks:
        res = partial_f_test(y, X, cols, op)
        f_ref, rss_full, rss_red = anova_f(y, X, cols, op.todense())
        assert res.f_stat == pytest.approx(f_ref, rel=1e-8, abs=1e-8)


def test_ssr_identity(rng):
    y, X, blocks, op, reps = _anova_case(5, T=8, d=3, K=2, n_reps=2)
    y_w, X_w = whiten(y, X, op)
    keep = [c for c in range(X.shape[1]) if c not in blocks[0]]

    def parts(M):
        fitted = M @ np.linalg.lstsq(M, y_w, rcond=None)[0]
        r = y_w - fitted
        return float(fitted @ fitted), float(r @ r)

    ssr_f, rss_f = parts(X_w)
    ssr_r, rss_r = parts(X_w[:, keep])
    assert ssr_f - ssr_r == pytest.approx(rss_r - rss_f, abs=1e-8)


@given(st.integers(0, 10_000), st.floats(-100.0, 100.0))
def test_f_invariant_to_constant_shift(seed, c):
    rng = np.random.default_rng(seed)
    d, T = 3, 12
    grid = Grid.equispaced(d)
    y = rng.normal(size=(T, d))
    b = random_basis(rng, d, 2)
    sigma = random_spd(rng, d)
    reps = ChangePointSet((5, 9))
    base = run_tests(DifferencedSequence(y, grid), b, reps, sigma)
    shifted = run_tests(DifferencedSequence(y + c, grid), b, reps, sigma)
    for r0, r1 in zip(base, shifted):
        assert abs(r0.f_stat - r1.f_stat) < 1e-8


def test_nonpositive_df2_skips():
    # T = 2, d = 3, K = 2: six observations and six parameters
    T, d = 2, 3
    rng = np.random.default_rng(0)
    b = random_basis(rng, d, 2)
    y = rng.normal(size=(T, d))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = run_tests(DifferencedSequence(y, Grid.equispaced(d)), b, ChangePointSet((2,)), np.eye(d))
    assert out[0].skipped and out[0].p_raw == 1.0 and out[0].df2 == 0
    assert any("degrees of freedom" in str(w.message) for w in caught)


def _null_p_values(local):
    d, T = 3, 60
    grid = Grid.equispaced(d)
    b = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, -1.0]])
    reps = ChangePointSet((T // 2 + 1,))
    out = []
    for seed in range(500):
        seq = make_seq(np.random.default_rng(seed).normal(size=(T, d)), grid.points)
        _, results, _ = run_pf_stage(seq, difference(seq), b, reps, 0.05, local=local)
        out.append(results[0].p_raw)
    return out


@pytest.mark.parametrize("local", [True, False])
def test_null_p_values_uniform(local):
    assert kstest(_null_p_values(local), "uniform").pvalue > 0.01


# the two refit routes agree without local weighting


@given(st.integers(0, 10_000))
def test_level_refit_matches_qr_route(seed):
    rng = np.random.default_rng(seed)
    d, T, K = 4, 30, 2
    seq = make_seq(rng.normal(size=(T, d)).cumsum(axis=0) * 0.1 + rng.normal(size=(T, d)))
    b = random_basis(rng, d, K)
    sigma = random_spd(rng, d)
    reps = ChangePointSet(tuple(sorted(rng.choice(np.arange(2, T + 1), size=3, replace=False).tolist())))
    dseq = difference(seq)
    X, _ = build_design(T, d, b, list(reps))
    y_w, X_w = whiten(dseq.values.reshape(-1), X, build_sigma_xi_blocks(sigma, T))
    refit = LevelRefit(seq, b, sigma, local=False)
    assert refit.rss(reps) == pytest.approx(fit_full(y_w, X_w).rss, rel=1e-8)
    for a, r in zip(refit.partial_f(reps), run_tests(dseq, b, reps, sigma)):
        assert a.f_stat == pytest.approx(r.f_stat, rel=1e-7, abs=1e-9)
        assert a.df2 == r.df2


def test_level_refit_rank_deficient_basis(rng):
    seq = make_seq(rng.normal(size=(20, 4)))
    b = np.array([[1.0, 0, 0, 0], [2.0, 0, 0, 0]])
    with pytest.raises(RankDeficientDesign):
        LevelRefit(seq, b, np.eye(4))


def test_local_precisions_track_regime_variance():
    rng = np.random.default_rng(3)
    T, K = 400, 2
    coords = np.vstack([3.0 * rng.normal(size=(200, K)), 0.3 * rng.normal(size=(200, K))]).cumsum(axis=0)
    prec = local_span_precisions(coords, 25)
    assert prec.shape == (T, K, K)
    assert np.all(np.linalg.eigvalsh(prec) > 0)
    assert prec[300, 0, 0] > 20 * prec[50, 0, 0]


# multiple testing


def test_bh_hand_example():
    adj = bh_adjust([0.001, 0.02, 0.04, 0.5])
    np.testing.assert_allclose(adj, [0.004, 0.04, 0.04 * 4 / 3, 0.5], rtol=1e-15)
    assert np.sum(adj <= 0.05) == 2


def test_bh_single_and_zero():
    np.testing.assert_array_equal(bh_adjust([0.37]), [0.37])
    np.testing.assert_array_equal(bh_adjust([0.0, 0.0, 0.0]), 0.0)


def _step_up(p, alpha):
    p = np.asarray(p)
    m = p.size
    order = np.argsort(p, kind="stable")
    ok = np.flatnonzero(p[order] <= alpha * np.arange(1, m + 1) / m)
    keep = np.zeros(m, dtype=bool)
    if ok.size:
        keep[order[: ok[-1] + 1]] = True
    return keep


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40), st.sampled_from([1e-4, 0.01, 0.05, 0.2]))
def test_bh_monotone_and_matches_step_up(p, alpha):
    adj = bh_adjust(p)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= 0)
    assert np.all(adj >= np.asarray(p))
    assert np.all(adj <= 1.0)
    np.testing.assert_array_equal(adj <= alpha, _step_up(p, alpha))


def test_bh_twice_is_not_identity():
    # repeated adjustment keeps inflating: 0.25 -> 0.5 -> 1
    np.testing.assert_allclose(bh_adjust(bh_adjust([1.0, 0.25])), [1.0, 1.0])


def _results(p_adj):
    return [TestResult(10 * (i + 1), 1.0, 1, 10, p, p) for i, p in enumerate(p_adj)]


def test_filter_all_rejected():
    reps = ChangePointSet((10, 20, 30))
    assert len(pf_filter(reps, _results([1.0, 1.0, 1.0]), 0.05)) == 0


def test_filter_bh_continuation():
    reps = ChangePointSet((10, 20, 30, 40))
    kept = pf_filter(reps, _results([0.004, 0.04, 0.0533, 0.5]), 0.05)
    assert kept.indices == (10, 20)


def test_filter_alpha_one():
    reps = ChangePointSet((10, 20, 30))
    assert pf_filter(reps, _results([0.9, 1.0, 0.2]), 1.0) == reps


def test_adjust_results_flags():
    raw = [TestResult(r, 1.0, 1, 10, p) for r, p in zip((10, 20, 30, 40), (0.001, 0.02, 0.04, 0.5))]
    out = adjust_results(raw, 0.05)
    assert [r.retained for r in out] == [True, True, False, False]
