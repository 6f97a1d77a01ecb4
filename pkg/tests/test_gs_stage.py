import numpy as np
import pytest
from hypothesis import given, strategies as st

from gspf.core import DifferencedSequence, Grid, trapezoid_weights
from gspf.fpca import BasisSystem, fpca_basis, second_derivatives
from gspf.gs_stage import (
    NegativeArgument,
    build_penalty_matrix,
    group_design,
    group_firm_threshold,
    gs_fit,
    mcp_penalty,
    penalty_from_grams,
    stationarity_gap,
)

from oracles import brute_force_group, scalar_firm


def constant_basis(d):
    grid = Grid.equispaced(d)
    w = trapezoid_weights(grid.points)
    phi = np.full((1, d), 1 / np.sqrt(w.sum()))
    return grid, BasisSystem(phi, second_derivatives(phi, grid), np.ones(1), 1.0, w)


def random_problem(seed, T, d, K):
    rng = np.random.default_rng(seed)
    grid = Grid.equispaced(d)
    a = rng.normal(size=(d, d + 1))
    basis = fpca_basis(a @ a.T, grid, 1.0)
    basis = BasisSystem(basis.basis_matrix[:K], basis.second_deriv_matrix[:K], basis.eigenvalues[:K], 1.0, basis.quad_weights)
    y = rng.normal(scale=2.0, size=(T, d))
    return DifferencedSequence(y, grid), basis, rng


def test_mcp_values():
    assert mcp_penalty(0.0, 0.7, 2.5) == 0.0
    assert mcp_penalty(3.0, 1.0, 3.0) == pytest.approx(1.5)
    assert mcp_penalty(1.0, 1.0, 3.0) == pytest.approx(5 / 6)
    assert mcp_penalty(10.0, 1.0, 3.0) == pytest.approx(1.5)


def test_mcp_rejects_negative():
    with pytest.raises(NegativeArgument):
        mcp_penalty(-0.1, 1.0, 3.0)


def test_penalty_scalar():
    pen = penalty_from_grams([[4.0]], [[9.0]], 1.0, 2.0)
    np.testing.assert_allclose(pen.r, [[22.0]], rtol=1e-10)
    np.testing.assert_allclose(pen.chol_upper, [[np.sqrt(22.0)]], rtol=1e-10)


def test_penalty_identity():
    pen = penalty_from_grams(np.eye(3), np.zeros((3, 3)), 1.0, 0.0)
    np.testing.assert_allclose(pen.r, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(pen.chol_upper, np.eye(3), atol=1e-10)


def test_penalty_linear_basis_ignores_eta():
    grid = Grid.equispaced(15)
    w = trapezoid_weights(grid.points)
    b = np.vstack([np.ones(15), grid.points - 0.5])
    # orthonormalize under the quadrature inner product
    q, _ = np.linalg.qr((b * np.sqrt(w)).T)
    phi = (q / np.sqrt(w)[:, None]).T
    basis = BasisSystem(phi, second_derivatives(phi, grid), np.ones(2), 1.0, w)
    for eta in (0.0, 5.0, 100.0):
        np.testing.assert_allclose(build_penalty_matrix(basis, 2.0, eta).r, 2.0 * np.eye(2), atol=1e-6)


def test_firm_threshold_below():
    z = np.array([0.3, 0.4])
    np.testing.assert_array_equal(group_firm_threshold(z, 1.0, 3.0), 0.0)


def test_firm_threshold_middle():
    z = np.array([1.2, 1.6])
    np.testing.assert_allclose(group_firm_threshold(z, 1.0, 3.0), 0.75 * z)


def test_firm_threshold_above():
    z = np.array([3.0, 4.0])
    np.testing.assert_array_equal(group_firm_threshold(z, 1.0, 3.0), z)


@given(
    st.lists(st.floats(-8, 8), min_size=1, max_size=4),
    st.floats(0.05, 3.0),
    st.floats(1.1, 6.0),
)
def test_firm_threshold_matches_scalar_search(z, lam, gamma):
    z = np.array(z)
    n = np.linalg.norm(z)
    u = scalar_firm(n, lam, gamma)
    expected = z * (u / n) if n > 0 else z * 0
    np.testing.assert_allclose(group_firm_threshold(z, lam, gamma), expected, atol=1e-6)


def test_gs_fit_zero_data():
    grid = Grid.equispaced(4)
    _, basis, _ = random_problem(0, 5, 4, 2)
    y = np.zeros((5, 4))
    y[0] = 1.0
    res = gs_fit(DifferencedSequence(y, grid), basis, 0.5, 0.0)
    assert len(res.candidates) == 0
    np.testing.assert_array_equal(res.blocks.group_norms[1:], 0.0)


def test_gs_fit_small_example():
    grid, basis = constant_basis(3)
    y = np.array([[1.0, 1.0, 1.0], [10.0, 10.0, 10.0], [0.0, 0.0, 0.0]])
    res = gs_fit(DifferencedSequence(y, grid), basis, 1.0, 0.0, 3.0)
    assert res.candidates.indices == (2,)


@pytest.mark.parametrize("seed", range(5))
def test_gs_fit_matches_brute_force(seed):
    dseq, basis, rng = random_problem(100 + seed, 4, 3, 2)
    lam, eta, gamma = rng.uniform(0.5, 3.0), rng.choice([0.0, 1e-2, 1.0]), 3.0
    res = gs_fit(dseq, basis, lam, eta, gamma)
    X = group_design(basis, build_penalty_matrix(basis, lam, eta))
    total = 0.0
    for t in range(dseq.T):
        total += brute_force_group(dseq.values[t], X, lam, gamma, penalized=t > 0, seed=seed)[0]
    assert abs(res.objective - total) < 1e-8


@given(st.integers(0, 10_000), st.floats(0.1, 5.0), st.sampled_from([0.0, 1e-4, 1e-2, 1.0]))
def test_kkt_holds(seed, lam, eta):
    dseq, basis, _ = random_problem(seed, 8, 5, 3)
    res = gs_fit(dseq, basis, lam, eta, 3.0)
    grad, zero_excess = stationarity_gap(res, dseq, basis)
    assert grad < 1e-6
    assert zero_excess <= 1e-8


@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(0.2, 3.0), st.sampled_from([0.0, 1e-2, 1.0]))
def test_scaling_covariance(seed, c, lam, eta):
    dseq, basis, _ = random_problem(seed, 10, 5, 2)
    base = gs_fit(dseq, basis, lam, eta).candidates
    scaled = gs_fit(DifferencedSequence(c * dseq.values, dseq.grid), basis, c * lam, eta).candidates
    assert base == scaled


@given(st.integers(0, 10_000), st.sampled_from([0.0, 1e-2, 1.0]))
def test_monotone_sparsity(seed, eta):
    dseq, basis, _ = random_problem(seed, 15, 5, 2)
    sizes = [len(gs_fit(dseq, basis, lam, eta).candidates) for lam in np.geomspace(0.05, 20, 12)]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


@given(st.integers(0, 10_000), st.floats(0.1, 3.0), st.sampled_from([0.0, 1e-2, 1.0]))
def test_coefficient_round_trip(seed, lam, eta):
    dseq, basis, _ = random_problem(seed, 8, 5, 3)
    res = gs_fit(dseq, basis, lam, eta)
    R = build_penalty_matrix(basis, lam, eta).r
    a = res.blocks.a
    r_norms = np.sqrt(np.einsum("tk,kl,tl->t", a, R, a))
    np.testing.assert_allclose(np.linalg.norm(res.blocks.alpha, axis=1), r_norms, atol=1e-8)


def test_first_row_never_candidate():
    dseq, basis, _ = random_problem(1, 6, 4, 2)
    y = dseq.values.copy()
    y[0] = 100.0
    res = gs_fit(DifferencedSequence(y, dseq.grid), basis, 1e3, 0.0)
    assert len(res.candidates) == 0
    assert res.blocks.group_norms[0] > 0
