import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ensemble_sampling.errors import ConvergenceError, DecompositionError, InvalidArgumentError, RankError
from ensemble_sampling.linalg import (CovarianceState, chol_solve, g_optimal_design, leverages,
                                      round_design, sherman_morrison_update)


def _unit_rows(g, K, d):
    X = g.standard_normal((K, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def test_rank_one_update_basis():
    s = CovarianceState.identity(4, 1.0)
    sherman_morrison_update(s, np.eye(4)[0])
    assert np.allclose(s.A_inv, np.diag([0.5, 1, 1, 1]), atol=1e-15)
    sherman_morrison_update(s, np.eye(4)[0])
    assert np.allclose(s.A_inv, np.diag([1 / 3, 1, 1, 1]), atol=1e-15)


def test_rank_one_updates_match_direct_inverse(rng):
    s = CovarianceState.identity(5, 1.0)
    for _ in range(20):
        sherman_morrison_update(s, rng.uniform(-0.4, 0.4, 5))
    assert np.linalg.norm(s.A_inv - np.linalg.inv(s.A)) < 1e-8
    assert s.logdet == pytest.approx(np.linalg.slogdet(s.A)[1], abs=1e-10)


def test_rank_one_update_rejects_bad_input():
    s = CovarianceState.identity(3)
    with pytest.raises(InvalidArgumentError):
        s.update(np.array([np.inf, 0, 0]))
    with pytest.raises(InvalidArgumentError):
        s.update(np.zeros(4))


def test_revalidation_runs_every_thousand_updates(rng):
    s = CovarianceState.identity(3, 2.0)
    s.A_inv += 1e-6  # simulated drift
    for _ in range(1000):
        s.update(_unit_rows(rng, 1, 3)[0] * 0.5)
    assert s.n_refreshes == 1
    assert s.inverse_error() < 1e-8
    assert np.array_equal(s.A_inv, s.A_inv.T)


@given(seed=st.integers(0, 2**32), n=st.integers(1, 60), lam=st.floats(0.1, 10))
def test_maintained_inverse_property(seed, n, lam):
    g = np.random.default_rng(seed)
    s = CovarianceState.identity(4, lam)
    for x in _unit_rows(g, n, 4) * g.uniform(0, 1, (n, 1)):
        s.update(x)
    assert np.linalg.norm(s.A @ s.A_inv - np.eye(4)) < 1e-8
    assert np.linalg.eigvalsh(s.A).min() >= lam - 1e-9


def test_chol_solve_examples(rng):
    b = rng.standard_normal(6)
    assert np.allclose(chol_solve(np.eye(6), b), b)
    assert np.allclose(chol_solve(2 * np.eye(3), np.eye(3)[0]), [0.5, 0, 0])
    M = rng.standard_normal((8, 8))
    A = M @ M.T + 0.5 * np.eye(8)
    b = rng.standard_normal(8)
    x = chol_solve(A, b)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10


def test_chol_solve_rejects_indefinite():
    with pytest.raises(DecompositionError):
        chol_solve(np.diag([1.0, -1.0]), np.ones(2))


def test_design_on_orthonormal_arms_is_uniform():
    design = g_optimal_design(np.eye(6))
    assert np.allclose(design.weights, 1 / 6)
    assert design.value == pytest.approx(6, abs=1e-12)


def _grid_optimum(X, step=1e-3):
    # brute force min over the 2-simplex of max leverage, for 3 arms in R^2
    n = int(round(1 / step))
    a = np.arange(n + 1)[:, None] * step
    b = np.arange(n + 1)[None, :] * step
    c = 1 - a - b
    ok = c >= -1e-12
    w = [a, b, np.clip(c, 0, None)]
    V = sum(wi[..., None, None] * np.outer(x, x) for wi, x in zip(w, X))
    det = V[..., 0, 0] * V[..., 1, 1] - V[..., 0, 1] ** 2
    good = ok & (det > 1e-12)
    inv = np.stack([V[..., 1, 1], -V[..., 0, 1], -V[..., 0, 1], V[..., 0, 0]], -1).reshape(V.shape)
    inv = inv / np.where(good, det, 1)[..., None, None]
    lev = np.stack([np.einsum("i,...ij,j->...", x, inv, x) for x in X], -1).max(-1)
    return float(lev[good].min())


def test_design_three_arms_in_plane_matches_grid_search():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1 / np.sqrt(2), 1 / np.sqrt(2)]])
    tol = 0.01
    design = g_optimal_design(X, tol=tol)
    oracle = _grid_optimum(X)
    assert oracle == pytest.approx(2.0, abs=1e-3)
    assert oracle - 1e-9 <= design.value <= 2 * (1 + tol)


def test_design_duplicated_arms():
    X = np.array([[1.0, 0], [1.0, 0], [0, 1.0], [0, 1.0]])
    design = g_optimal_design(X, tol=0.01)
    assert 2 - 1e-9 <= design.value <= 2 * 1.01


def test_design_rank_deficient():
    with pytest.raises(RankError):
        g_optimal_design(np.array([[1.0, 0, 0], [0, 1.0, 0], [0.5, 0.5, 0]]))


def test_design_iteration_cap_carries_best_iterate(rng):
    X = _unit_rows(rng, 40, 8)
    with pytest.raises(ConvergenceError) as info:
        g_optimal_design(X, tol=1e-9, max_iters=3)
    best = info.value.best
    assert best is not None
    assert best.weights.sum() == pytest.approx(1.0, abs=1e-10)
    assert best.value >= 8 - 1e-9


@given(seed=st.integers(0, 2**32), K=st.integers(6, 40), d=st.integers(2, 6))
def test_kiefer_wolfowitz_certificate(seed, K, d):
    X = _unit_rows(np.random.default_rng(seed), K, d) * np.random.default_rng(seed + 1).uniform(0.2, 1, (K, 1))
    tol = 0.02
    design = g_optimal_design(X, tol=tol)
    w = design.weights
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-10)
    lev = leverages(X, w)
    assert d - 1e-8 <= lev.max() <= d * (1 + tol) + 1e-9
    assert np.linalg.eigvalsh((X * w[:, None]).T @ X).min() > 0


def test_design_permutation_invariant(rng):
    X = _unit_rows(rng, 20, 4)
    perm = rng.permutation(20)
    v1 = g_optimal_design(X, tol=0.01).value
    v2 = g_optimal_design(X[perm], tol=0.01).value
    assert abs(v1 - v2) <= 4 * 0.01 + 1e-12


@pytest.mark.parametrize("tau,zeta,expected", [
    (4, [0.5, 0.5], [2, 2]),
    (10, [0.7, 0.3], [7, 3]),
    (5, [1.0], [5]),
])
def test_round_design_hand_traced(tau, zeta, expected):
    assert round_design(tau, np.array(zeta)).tolist() == expected


def test_round_design_rejects_small_budget():
    with pytest.raises(InvalidArgumentError):
        round_design(2, np.array([0.3, 0.3, 0.4]))


def test_round_design_rejects_bad_eps():
    with pytest.raises(InvalidArgumentError):
        round_design(10, np.array([0.5, 0.5]), eps=1.0)


@given(seed=st.integers(0, 2**32), p=st.integers(1, 30), extra=st.integers(0, 400),
       d=st.one_of(st.none(), st.integers(1, 8)))
def test_round_design_budget_property(seed, p, extra, d):
    zeta = np.random.default_rng(seed).dirichlet(np.ones(p))
    zeta = np.clip(zeta, 1e-9, None)
    tau = p + extra
    counts = round_design(tau, zeta, d=d)
    assert counts.sum() == tau
    assert counts.min() >= 1
    if d is not None:
        # the final clamp never changes the budget
        assert round_design(tau, zeta).sum() == counts.sum()


def test_round_design_clamp_lifts_small_counts():
    zeta = np.array([0.97, 0.01, 0.01, 0.01])
    counts = round_design(200, zeta, eps=0.5, d=2)
    floor = int(np.ceil((2 * 3 / 2 + 1) / 0.5 / 4))
    assert counts.sum() == 200
    assert counts[1:].min() >= floor


def test_round_design_small_budget_compositions():
    seen = set()
    for w in itertools.product([0.1, 0.3, 0.6], repeat=3):
        z = np.array(w) / sum(w)
        seen.add(tuple(round_design(6, z)))
    assert all(sum(c) == 6 for c in seen)
