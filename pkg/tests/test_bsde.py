import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathgame.bsde import (BudgetExceeded, ComparisonHypothesisError, build_tree, check_comparison, implicit_step,
                           objective_J, objective_J_lsmc, semigroup_pi, solve_bsde_lsmc, solve_bsde_tree,
                           tree_increments)
from pathgame.catalog import make_instance
from pathgame.dynamics import BrownianBatch, GameCoefficients, NumericalFailure, simulate_sde
from pathgame.paths import CadlagPath, Path


def scalar(drift=0.0, sigma=1.0, driver=None, terminal=None, **kw):
    return GameCoefficients(lambda t, X, U, V: np.full((X.shape[0], 1), float(drift)),
                            lambda t, X, U, V: np.full((X.shape[0], 1, 1), float(sigma)),
                            driver or (lambda t, X, y, q, U, V: np.zeros(X.shape[0])),
                            terminal or (lambda t, X: X[:, -1, 0]), **kw)


ZERO = CadlagPath.constant([0.0], 0.0, 1.0)
X0 = Path.constant([0.0], 0.0)


def test_increments_match_gaussian_moments():
    for b in (2, 3, 5):
        incr, probs = tree_increments(b, 1, 0.25)
        assert probs.sum() == pytest.approx(1.0)
        assert probs @ incr[:, 0] == pytest.approx(0.0, abs=1e-15)
        assert probs @ incr[:, 0] ** 2 == pytest.approx(0.25, rel=1e-12)
    incr, probs = tree_increments(2, 2, 0.5)
    assert incr.shape == (4, 2)
    np.testing.assert_allclose(np.einsum("b,bi,bj->ij", probs, incr, incr), 0.5 * np.eye(2), atol=1e-15)


def test_tree_examples():
    c = scalar()
    tree0 = build_tree(c, X0, ZERO, ZERO, 0, 1.0)
    assert tree0.states[0].shape == (1, 1, 1)
    flat = build_tree(scalar(sigma=0.0, drift=0.3), X0, ZERO, ZERO, 3, 1.0)
    assert np.all(flat.states[-1][:, -1, 0] == flat.states[-1][0, -1, 0])
    tree = build_tree(c, X0, ZERO, ZERO, 2, 1.0)
    s = np.sqrt(0.5)
    np.testing.assert_allclose(np.sort(tree.states[2][:, -1, 0]), [-2 * s, 0.0, 0.0, 2 * s], atol=1e-15)
    assert tree.probs.tolist() == [0.5, 0.5]


def test_tree_budget():
    with pytest.raises(BudgetExceeded):
        build_tree(scalar(), X0, ZERO, ZERO, 12, 1.0, node_budget=2 ** 10)


def _leaf_expectation(tree, values):
    # independent enumeration of leaf probabilities
    B, n = tree.branching, tree.n_steps
    probs = np.array([np.prod(tree.probs[list(idx)]) for idx in itertools.product(range(B), repeat=n)])
    return float(probs @ values)


def test_zero_driver_gives_tree_expectation():
    c = make_instance("martingale", {"sigma": 0.8})
    tree = build_tree(c, Path.constant([0.3], 0.0), ZERO, ZERO, 4, 1.0, branching=3)
    m = c.terminal(tree.times, tree.states[-1])
    assert solve_bsde_tree(tree, c).value == pytest.approx(_leaf_expectation(tree, m), abs=1e-14)


def test_unit_driver_integrates_time():
    c = scalar(driver=lambda t, X, y, q, U, V: np.ones(X.shape[0]), terminal=lambda t, X: np.zeros(X.shape[0]))
    tree = build_tree(c, Path.constant([0.0], 0.25), ZERO, ZERO, 3, 1.0)
    assert solve_bsde_tree(tree, c).value == pytest.approx(0.75, abs=1e-14)


def test_linear_driver_discrete_exponential():
    rate = 0.5
    c = scalar(driver=lambda t, X, y, q, U, V: -rate * y, terminal=lambda t, X: np.ones(X.shape[0]),
               lipschitz=rate)
    for n in (2, 4, 8):
        tree = build_tree(c, X0, ZERO, ZERO, n, 1.0)
        assert solve_bsde_tree(tree, c).value == pytest.approx((1 + rate / n) ** -n, rel=1e-13)
    assert abs((1 + rate / 8) ** -8 - np.exp(-rate)) < rate ** 2 / 8


def test_contraction_guard():
    c = scalar(driver=lambda t, X, y, q, U, V: -3 * y, lipschitz=3.0)
    tree = build_tree(c, X0, ZERO, ZERO, 2, 1.0)
    with pytest.raises(NumericalFailure, match="contraction"):
        solve_bsde_tree(tree, c)


def test_backward_identity_at_every_node():
    c = make_instance("delay")
    tree = build_tree(c, Path.constant([0.2], 0.0), CadlagPath([0.0, 0.5], [[0.3], [-0.4]], 1.0), ZERO, 3, 1.0)
    sol = solve_bsde_tree(tree, c)
    for k in range(3):
        child = sol.y[k + 1].reshape(-1, 2)
        drv = c.driver(tree.level_times(k), tree.states[k], sol.y[k], sol.q[k], tree.u[k], tree.v[k])
        np.testing.assert_allclose(sol.y[k], child @ tree.probs + drv * tree.dt, atol=1e-12)


def test_implicit_step_rows_independent_of_batch():
    c = make_instance("delay", {"rho": 0.8})
    tree = build_tree(c, Path.constant([0.2], 0.0), ZERO, ZERO, 3, 1.0)
    k = 2
    tt, X, U, V = tree.level_times(k), tree.states[k], tree.u[k], tree.v[k]
    yc = c.terminal(tree.times, tree.states[3]).reshape(-1, 2)
    y_all, q_all = implicit_step(c, tt, X, U, V, yc, tree.increments, tree.probs, tree.dt)
    for i in range(X.shape[0]):
        y1, q1 = implicit_step(c, tt, X[i:i + 1], U[i:i + 1], V[i:i + 1], yc[i:i + 1], tree.increments,
                               tree.probs, tree.dt)
        assert y1[0] == y_all[i] and np.array_equal(q1[0], q_all[i])


def test_semigroup_examples():
    c = make_instance("delay")
    tree = build_tree(c, Path.constant([0.1], 0.0), ZERO, ZERO, 3, 1.0)
    m = c.terminal(tree.times, tree.states[-1])
    full = semigroup_pi(tree, c, 0, 3, m)[0]
    assert full == objective_J(c, Path.constant([0.1], 0.0), ZERO, ZERO, 1.0, 3)
    nested = semigroup_pi(tree, c, 0, 1, semigroup_pi(tree, c, 1, 3, m))[0]
    assert nested == pytest.approx(full, abs=1e-12)
    zero = scalar(sigma=0.7)
    tz = build_tree(zero, X0, ZERO, ZERO, 2, 1.0)
    b = np.cos(tz.states[-1][:, -1, 0])
    assert semigroup_pi(tz, zero, 0, 2, b)[0] == pytest.approx(_leaf_expectation(tz, b), abs=1e-15)


def test_objective_examples():
    c0 = scalar(terminal=lambda t, X: np.zeros(X.shape[0]))
    assert objective_J(c0, X0, ZERO, ZERO, 1.0, 3) == 0.0
    c = make_instance("delay")
    aT = Path([0.0, 0.5, 1.0], [[0.1], [0.4], [-0.2]])
    assert objective_J(c, aT, ZERO, ZERO, 1.0, 3) == c.terminal_at(aT)


def test_objective_matches_pathwise_enumeration():
    # driver free of (y, q): J is the expected pathwise cost, enumerated leaf by leaf
    c = make_instance("separated_hamiltonian")
    u = CadlagPath([0.0, 1 / 3], [[0.5], [-0.5]], 1.0)
    tree = build_tree(c, Path.constant([0.2], 0.0), u, ZERO, 3, 1.0)
    cost = c.terminal(tree.times, tree.states[-1])
    n_leaves = cost.size
    for k in range(3):
        reps = n_leaves // tree.states[k].shape[0]
        l = c.driver(tree.level_times(k), tree.states[k], np.zeros(tree.states[k].shape[0]),
                     np.zeros((tree.states[k].shape[0], 1)), tree.u[k], tree.v[k])
        cost = cost + np.repeat(l, reps) * tree.dt
    assert objective_J(c, Path.constant([0.2], 0.0), u, ZERO, 1.0, 3) == pytest.approx(
        _leaf_expectation(tree, cost), abs=1e-14)


def test_value_bound_stable_under_refinement():
    c = make_instance("delay")
    a0 = Path.constant([0.5], 0.0)
    ratios = []
    for n in (2, 4, 8):
        sol = solve_bsde_tree(build_tree(c, a0, ZERO, ZERO, n, 1.0), c)
        ratios.append(max(float(np.max(y ** 2)) for y in sol.y) / (1 + 0.25))
    assert max(ratios) / min(ratios) < 2.0


# -- comparison --------------------------------------------------------------------------

def test_comparison_examples():
    c = make_instance("delay")
    tree = build_tree(c, Path.constant([0.0], 0.0), ZERO, ZERO, 2, 1.0)
    m = c.terminal(tree.times, tree.states[-1])
    same = check_comparison(tree, c, c.driver, c.driver, m, m)
    assert same.holds and same.root_gap == 0.0
    up = check_comparison(tree, c, c.driver, c.driver, m + 1, m)
    assert up.holds and up.root_gap > 0
    with pytest.raises(ComparisonHypothesisError):
        check_comparison(tree, c, c.driver, c.driver, m - 1, m)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(-0.9, 0.9), st.floats(-1, 1), st.integers(0, 1000))
def test_comparison_random_ordered(shift, eta, rho, seed):
    c = make_instance("delay", {"eta": eta, "rho": rho})
    rng = np.random.default_rng(seed)
    tree = build_tree(c, Path.constant([rng.uniform(-1, 1)], 0.0), ZERO, ZERO, 3, 1.0)
    m2 = c.terminal(tree.times, tree.states[-1])
    m1 = m2 + rng.uniform(0, 1, m2.shape) * shift

    def d1(t, X, y, q, U, V):
        return c.driver(t, X, y, q, U, V) + shift

    assert check_comparison(tree, c, d1, c.driver, m1, m2, seed=seed).violations == 0


# -- regression solver ------------------------------------------------------------------

def test_lsmc_constant_terminal():
    c = scalar(terminal=lambda t, X: np.full(X.shape[0], 2.5))
    sim = simulate_sde(c, X0, ZERO, ZERO, BrownianBatch(500, 8, 0.0, 1.0, 1, 0))
    sol = solve_bsde_lsmc(sim, c)
    for y in sol.y:
        np.testing.assert_allclose(y, 2.5, atol=1e-12)


def test_lsmc_unit_driver():
    c = scalar(driver=lambda t, X, y, q, U, V: np.ones(X.shape[0]), terminal=lambda t, X: np.zeros(X.shape[0]))
    sol = objective_J_lsmc(c, X0, ZERO, ZERO, BrownianBatch(500, 8, 0.0, 1.0, 1, 0))
    assert sol.value == pytest.approx(1.0, abs=1e-12)


def test_lsmc_matches_tree_oracle():
    c = make_instance("martingale", {"sigma": 0.8})
    a0 = Path.constant([0.4], 0.0)
    tree_val = objective_J(c, a0, ZERO, ZERO, 1.0, 4, branching=5)
    sol = objective_J_lsmc(c, a0, ZERO, ZERO, BrownianBatch(20000, 4, 0.0, 1.0, 1, 1))
    assert abs(sol.value - tree_val) <= 3 * sol.stderr
    assert tree_val == pytest.approx(np.sin(0.4) * np.exp(-0.32), abs=1e-6)


def test_lsmc_nonlinear_driver_against_tree():
    c = make_instance("delay", {"rho": 0.5, "eta": 0.3})
    a0 = Path.constant([0.1], 0.0)
    tree_val = objective_J(c, a0, ZERO, ZERO, 1.0, 6, branching=2)
    sol = objective_J_lsmc(c, a0, ZERO, ZERO, BrownianBatch(20000, 8, 0.0, 1.0, 1, 2))
    # different discretizations of the same BSDE: agreement at the O(dt) level
    assert sol.value == pytest.approx(tree_val, abs=0.05)


def test_lsmc_path_count_guard():
    c = make_instance("delay")
    sim = simulate_sde(c, X0, ZERO, ZERO, BrownianBatch(20, 4, 0.0, 1.0, 1, 0))
    with pytest.raises(ValueError, match="paths"):
        solve_bsde_lsmc(sim, c)


def test_solution_csv_deterministic():
    c = make_instance("delay")
    tree = build_tree(c, X0, ZERO, ZERO, 2, 1.0)
    a, b = solve_bsde_tree(tree, c), solve_bsde_tree(tree, c)
    assert a.to_csv(tree.times) == b.to_csv(tree.times)
    assert a.to_csv(tree.times).splitlines()[0] == "node_id,time,y,q_0"
