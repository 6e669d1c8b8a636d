import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathgame.catalog import make_instance, running_integral_functional, terminal_square_functional, \
    terminal_value_functional
from pathgame.dynamics import BrownianBatch, GameCoefficients, NumericalFailure, simulate_sde
from pathgame.functional import (PathFunctional, batch_derivatives, check_predictable_dependence, derivatives,
                                 holder_seminorm_estimate, horizontal_derivative, verify_functional_ito,
                                 vertical_gradient, vertical_hessian)
from pathgame.paths import CadlagPath, HolderBall, Path, sample_holder_ball, vertical_control_sub


def fn(f, smooth="C12"):
    return PathFunctional(lambda a, z, w: f(a), smooth)


def integral(a):
    return float(np.trapezoid(a.values[:, 0], a.grid))


RAMP = Path([0.0, 1.0], [[0.0], [1.0]])


# -- horizontal -------------------------------------------------------------------

def test_horizontal_examples():
    assert horizontal_derivative(fn(lambda a: a.t_end), RAMP) == pytest.approx(1.0, abs=1e-9)
    assert horizontal_derivative(fn(lambda a: a.terminal[0]), RAMP) == 0.0
    # d/dt of the running integral is the terminal value (= 1 on the ramp)
    assert horizontal_derivative(fn(integral), RAMP) == pytest.approx(1.0, abs=1e-6)


def test_horizontal_respects_horizon():
    with pytest.raises(ValueError, match="horizon"):
        horizontal_derivative(fn(lambda a: a.t_end), RAMP, horizon=1.0)


# -- vertical ---------------------------------------------------------------------

def test_vertical_gradient_examples():
    assert vertical_gradient(fn(lambda a: a.terminal[0]), RAMP)[0] == pytest.approx(1.0, abs=1e-10)
    assert vertical_gradient(fn(integral), RAMP)[0] == pytest.approx(0.0, abs=1e-6)
    p = Path([0.0, 1.0], [[1.0], [3.0]])
    assert vertical_gradient(fn(lambda a: a.terminal[0] ** 2), p)[0] == pytest.approx(6.0, abs=1e-8)


def test_vertical_hessian_examples():
    p = Path([0.0, 1.0], [[0.0, 1.0], [2.0, -1.0]])
    lin = vertical_hessian(fn(lambda a: 3 * a.terminal[0] - a.terminal[1]), p)
    np.testing.assert_allclose(lin, 0.0, atol=1e-6)
    sq = vertical_hessian(fn(lambda a: float(a.terminal @ a.terminal)), p)
    np.testing.assert_allclose(sq, 2 * np.eye(2), atol=1e-6)
    cube = vertical_hessian(fn(lambda a: a.terminal[0] ** 3), Path([0.0, 1.0], [[0.0], [2.0]]))
    assert cube[0, 0] == pytest.approx(12.0, abs=1e-6)


def test_hessian_symmetric_and_matches_gradient_of_gradient():
    f = fn(lambda a: np.sin(a.terminal[0]) * np.exp(0.3 * a.terminal[1]) + integral(a))
    p = Path([0.0, 0.5, 1.0], [[0.1, 0.2], [0.3, -0.2], [0.7, 0.4]])
    H = vertical_hessian(f, p)
    assert np.array_equal(H, H.T)
    x, y = p.terminal
    exact = np.array([[-np.sin(x) * np.exp(0.3 * y), 0.3 * np.cos(x) * np.exp(0.3 * y)],
                      [0.3 * np.cos(x) * np.exp(0.3 * y), 0.09 * np.sin(x) * np.exp(0.3 * y)]])
    np.testing.assert_allclose(H, exact, atol=1e-5)


def test_derivatives_report_finite_failure():
    bad = fn(lambda a: np.inf if a.terminal[0] > 0.5 else 0.0)
    with pytest.raises(NumericalFailure):
        derivatives(bad, Path([0.0, 1.0], [[0.0], [0.5]]))


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(0.1, 0.9), st.floats(-2, 2))
def test_cylinder_functionals_match_classical_partials(x, t, c):
    # g(t, x) = c t x^2 + sin(x): classical partials are the oracle
    f = fn(lambda a: c * a.t_end * a.terminal[0] ** 2 + np.sin(a.terminal[0]))
    p = Path([0.0, t], [[0.0], [x]])
    d = derivatives(f, p, horizon=1.0)
    assert d.dt == pytest.approx(c * x ** 2, abs=1e-6)
    assert d.dx[0] == pytest.approx(2 * c * t * x + np.cos(x), abs=1e-6)
    assert d.dxx[0, 0] == pytest.approx(2 * c * t - np.sin(x), abs=1e-4)


def test_batch_derivatives_agree_with_scalar():
    rng = np.random.default_rng(0)
    times = np.linspace(0, 0.5, 6)
    X = rng.normal(size=(4, 6, 1))
    for f in (terminal_square_functional(), running_integral_functional()):
        dt, dx, dxx = batch_derivatives(f, times, X, horizon=1.0)
        for i in range(4):
            d = derivatives(f, Path(times, X[i]), horizon=1.0)
            assert dt[i] == pytest.approx(d.dt, abs=1e-7)
            assert dx[i, 0] == pytest.approx(d.dx[0], abs=1e-7)
            assert dxx[i, 0, 0] == pytest.approx(d.dxx[0, 0], abs=1e-5)


# -- predictable dependence -----------------------------------------------------------

def _controls():
    z = CadlagPath([0.0, 0.2, 0.4, 0.6, 0.8], [[0.1], [0.5], [-0.3], [0.2], [0.9]], 1.0)
    return z, CadlagPath.constant([0.0], 0.0, 1.0)


def test_predictable_dependence_examples():
    z, w = _controls()
    ok, dev = check_predictable_dependence(fn(lambda a: a.terminal[0]), (RAMP, z, w))
    assert ok and dev == 0.0
    ok, dev = check_predictable_dependence(PathFunctional(lambda a, z, w: z.terminal[0], "C12"), (RAMP, z, w))
    assert not ok and dev > 0
    delta = 0.1

    def lagged_integral(a, z, w):
        s = np.linspace(0, a.t_end - delta, 401)
        return float(np.trapezoid(z.at(s)[:, 0], s))

    ok, dev = check_predictable_dependence(PathFunctional(lagged_integral, "C12"), (RAMP, z, w))
    assert ok and dev == 0.0


def test_vertical_gradient_ignores_control_bumps_for_predictable_functionals():
    z, w = _controls()

    def f(a, z, w):
        s = np.linspace(0, 0.5, 11)
        return a.terminal[0] ** 2 + float(np.sum(z.at(s)))

    g1 = vertical_gradient(PathFunctional(f, "C12"), (RAMP, z, w))
    g2 = vertical_gradient(PathFunctional(f, "C12"), (RAMP, vertical_control_sub(z, [3.0]), w))
    np.testing.assert_allclose(g1, g2, atol=1e-12)


# -- Hoelder seminorm -------------------------------------------------------------------

def test_seminorm_examples():
    ball = HolderBall(0.5, 1.0, 1.0)
    assert holder_seminorm_estimate(fn(lambda a: 3.0), 1.0, ball, 10, seed=0) == 0.0
    f = fn(lambda a: a.terminal[0])
    est = holder_seminorm_estimate(f, 1.0, ball, 30, seed=0)
    assert 0 < est <= 1.0 + 1e-12
    scaled = holder_seminorm_estimate(f.scaled(-2.5), 1.0, ball, 30, seed=0)
    assert scaled == pytest.approx(2.5 * est, rel=1e-12)


# -- Ito formula -------------------------------------------------------------------------

def brownian():
    return GameCoefficients(lambda t, X, U, V: np.zeros((X.shape[0], 1)),
                            lambda t, X, U, V: np.ones((X.shape[0], 1, 1)),
                            lambda t, X, y, q, U, V: np.zeros(X.shape[0]),
                            lambda t, X: X[:, -1, 0], name="bm")


def test_ito_identity_exact():
    rep = verify_functional_ito(terminal_value_functional(), brownian(), Path.constant([0.0], 0.0), 64, 32, seed=1)
    assert rep.max_err < 1e-10


def test_ito_square_and_integral_converge():
    c = brownian()
    a0 = Path.constant([0.5], 0.0)
    for f in (terminal_square_functional(), running_integral_functional()):
        errs = [verify_functional_ito(f, c, a0, 128, n, seed=2).max_err for n in (16, 64, 256)]
        assert errs[0] > errs[1] > errs[2]


def test_ito_report_json_roundtrip():
    rep = verify_functional_ito(terminal_square_functional(), brownian(), Path.constant([0.0], 0.0), 16, 8, seed=0)
    d = json.loads(rep.to_json())
    assert d["n_steps"] == 8 and d["max_err"] == rep.max_err


def test_ito_square_error_matches_quadratic_variation_oracle():
    # for x^2 the pathwise discrepancy is |sum dX^2 - sum sigma^2 dt|, computed directly from the simulation
    c = make_instance("delay")
    a0 = Path.constant([0.2], 0.0)
    rep = verify_functional_ito(terminal_square_functional(), c, a0, 32, 16, seed=3)
    bb = BrownianBatch(32, 16, 0.0, 1.0, 1, 3)
    zero = CadlagPath.constant([0.0], 0.0, 1.0)
    sim = simulate_sde(c, a0, zero, zero, bb)
    X = sim.states[:, :, 0]
    sig = np.stack([c.diffusion(sim.times[: j + 1], sim.states[:, : j + 1], sim.u[:, : j + 1],
                                sim.v[:, : j + 1])[:, 0, 0] for j in range(16)], axis=1)
    oracle = np.abs(np.sum(np.diff(X, axis=1) ** 2, axis=1) - np.sum(sig ** 2, axis=1) * bb.dt)
    np.testing.assert_allclose(rep.per_path_errors, oracle, atol=1e-6)


def test_ito_rejects_non_smooth():
    with pytest.raises(ValueError):
        verify_functional_ito(PathFunctional(lambda a, z, w: 0.0), brownian(), Path.constant([0.0], 0.0), 4, 4, 0)


def test_square_error_bounded_by_path_sample():
    ball = HolderBall(0.4, 1.0, 1.0)
    p = sample_holder_ball(ball, 0.5, 5, seed=0)
    d = derivatives(terminal_square_functional(), p, horizon=1.0)
    assert d.dx[0] == pytest.approx(2 * p.terminal[0], abs=1e-8)

