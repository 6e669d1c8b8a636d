"""Built-in game instances and test functionals.

Each entry is a factory ``make(**params) -> GameCoefficients`` with a
parameter schema of defaults.  All coefficient code is vectorized over rows
and row-independent (no cross-row reductions), which keeps tree values
independent of batching.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import GameCoefficients
from .functional import PathFunctional
from .paths import Path
from .riccati import LQParams, RiccatiSolution, solve_riccati


def _zeros(X):
    return np.zeros(X.shape[0])


def _lagged(times, X, lag):
    """x at time t - lag by linear interpolation (x_0 before the start)."""
    s = max(float(times[-1]) - lag, float(times[0]))
    j = int(np.searchsorted(times, s, side="right")) - 1
    j = min(j, times.size - 1)
    if j == times.size - 1:
        return X[:, j]
    w = (s - times[j]) / (times[j + 1] - times[j])
    return (1 - w) * X[:, j] + w * X[:, j + 1]


def _path_integral(times, X):
    if times.size < 2:
        return np.zeros(X.shape[0:1] + X.shape[2:])
    return np.trapezoid(X, times, axis=1)


def _control_integral(times, U):
    """Integral of the piecewise-constant control over [0, t) (terminal value excluded)."""
    if times.size < 2:
        return np.zeros((U.shape[0], U.shape[2]))
    return np.einsum("ijk,j->ik", U[:, :-1], np.diff(times))


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

def make_lq(A=0.0, B1=1.0, B2=1.0, Q=0.5, R1=1.0, R2=2.0, G=1.0, sigma=0.5, horizon=1.0) -> GameCoefficients:
    """Markovian linear-quadratic game (unbounded coefficients)."""
    p = LQParams.from_dict(dict(A=A, B1=B1, B2=B2, Q=Q, R1=R1, R2=R2, G=G, sigma=sigma, horizon=horizon))
    n, m, l, pdim = p.n, p.B1.shape[1], p.B2.shape[1], p.S.shape[1]

    def drift(times, X, U, V):
        x, u, v = X[:, -1], U[:, -1], V[:, -1]
        return np.einsum("ij,nj->ni", p.A, x) + np.einsum("ij,nj->ni", p.B1, u) + np.einsum("ij,nj->ni", p.B2, v)

    def diffusion(times, X, U, V):
        return np.broadcast_to(p.S, (X.shape[0], n, pdim))

    def driver(times, X, y, q, U, V):
        x, u, v = X[:, -1], U[:, -1], V[:, -1]
        return (np.einsum("ni,ij,nj->n", x, p.Q, x) + np.einsum("ni,ij,nj->n", u, p.R1, u)
                - np.einsum("ni,ij,nj->n", v, p.R2, v))

    def terminal(times, X):
        x = X[:, -1]
        return np.einsum("ni,ij,nj->n", x, p.G, x)

    L = float(max(np.abs(p.A).sum(), np.abs(p.B1).sum(), np.abs(p.B2).sum(), 1.0))
    return GameCoefficients(drift, diffusion, driver, terminal, n=n, p=pdim, m_u=m, l_v=l, lipschitz=L,
                            markovian=True, control_path_dependent=False, name="lq", y_lipschitz=0.0)


def make_delay(r=0.25, f1=0.5, f2=1.0, f3=0.3, l1=0.5, l2=0.5, rho=0.3, eta=0.2, sigma=0.4,
               horizon=1.0) -> GameCoefficients:
    """Bounded scalar delay game with control-path dependence.

    drift  = f1 tanh(x(t-r)) + f2 (u + v)/2 + f3 tanh(int_0^t (z - w) ds)
    sigma  = sigma (1 + sin(x_t)/4)
    driver = l1 sin(x(t-r)) + l2 (u^2 - v^2) + rho tanh(y) + eta tanh(q)
    m      = tanh(x_T) + tanh(int_0^T x ds / T) / 2
    """

    def drift(times, X, U, V):
        mem = _control_integral(times, U)[:, 0] - _control_integral(times, V)[:, 0]
        val = f1 * np.tanh(_lagged(times, X, r)[:, 0]) + 0.5 * f2 * (U[:, -1, 0] + V[:, -1, 0]) + f3 * np.tanh(mem)
        return val[:, None]

    def diffusion(times, X, U, V):
        return (sigma * (1 + 0.25 * np.sin(X[:, -1, 0])))[:, None, None]

    def driver(times, X, y, q, U, V):
        return (l1 * np.sin(_lagged(times, X, r)[:, 0]) + l2 * (U[:, -1, 0] ** 2 - V[:, -1, 0] ** 2)
                + rho * np.tanh(y) + eta * np.tanh(q[:, 0]))

    def terminal(times, X):
        return np.tanh(X[:, -1, 0]) + 0.5 * np.tanh(_path_integral(times, X)[:, 0] / max(float(times[-1]), 1e-300))

    L = max(f1, f2, f3, l1 + 2 * l2, rho, eta, sigma, 1.0) * 2
    M = abs(f1) + abs(f2) + abs(f3) + abs(l1) + abs(l2) + abs(rho) + abs(eta) + 1.25 * abs(sigma) + 1.5
    return GameCoefficients(drift, diffusion, driver, terminal, bound=M, lipschitz=L, name="delay",
                            y_lipschitz=abs(rho))


def make_separated_hamiltonian(a=0.5, b1=1.0, b2=0.5, sigma=0.5, c1=0.5, c2=0.5, rho=0.0,
                               horizon=1.0) -> GameCoefficients:
    """Hamiltonian splits as F(u) + G(v) + rest, so Isaacs' condition holds on product grids.

    drift = a tanh(x) + b1 u + b2 v; sigma constant;
    driver = cos(x) + c1 u^2 - c2 v^2 + rho tanh(y); m = sin(x_T).
    """

    def drift(times, X, U, V):
        return a * np.tanh(X[:, -1]) + b1 * U[:, -1] + b2 * V[:, -1]

    def diffusion(times, X, U, V):
        return np.full((X.shape[0], 1, 1), sigma)

    def driver(times, X, y, q, U, V):
        return np.cos(X[:, -1, 0]) + c1 * U[:, -1, 0] ** 2 - c2 * V[:, -1, 0] ** 2 + rho * np.tanh(y)

    def terminal(times, X):
        return np.sin(X[:, -1, 0])

    L = max(abs(a), abs(b1), abs(b2), 1.0, 2 * abs(c1), 2 * abs(c2), abs(rho))
    M = abs(a) + abs(b1) + abs(b2) + abs(sigma) + 1 + abs(c1) + abs(c2) + abs(rho) + 1
    return GameCoefficients(drift, diffusion, driver, terminal, bound=M, lipschitz=L, markovian=True,
                            control_path_dependent=False, name="separated_hamiltonian", y_lipschitz=abs(rho))


def make_saddle_square(sigma=0.0, horizon=1.0) -> GameCoefficients:
    """dx = (u + v) dt + sigma dB, no running cost, m = x_T^2."""

    def drift(times, X, U, V):
        return U[:, -1] + V[:, -1]

    def diffusion(times, X, U, V):
        return np.full((X.shape[0], 1, 1), sigma)

    def driver(times, X, y, q, U, V):
        return _zeros(X)

    def terminal(times, X):
        return X[:, -1, 0] ** 2

    return GameCoefficients(drift, diffusion, driver, terminal, lipschitz=2.0, markovian=True,
                            control_path_dependent=False, name="saddle_square", y_lipschitz=0.0)


def make_bilinear(horizon=1.0) -> GameCoefficients:
    """No dynamics, running cost u v: the Hamiltonian is coupled."""

    def drift(times, X, U, V):
        return np.zeros((X.shape[0], 1))

    def diffusion(times, X, U, V):
        return np.zeros((X.shape[0], 1, 1))

    def driver(times, X, y, q, U, V):
        return U[:, -1, 0] * V[:, -1, 0]

    def terminal(times, X):
        return _zeros(X)

    return GameCoefficients(drift, diffusion, driver, terminal, lipschitz=1.0, markovian=True,
                            control_path_dependent=False, name="bilinear", y_lipschitz=0.0)


def make_martingale(sigma=1.0, horizon=1.0) -> GameCoefficients:
    """Uncontrolled: dx = sigma dB, l = 0, m = sin(x_T)."""

    def drift(times, X, U, V):
        return np.zeros((X.shape[0], 1))

    def diffusion(times, X, U, V):
        return np.full((X.shape[0], 1, 1), sigma)

    def driver(times, X, y, q, U, V):
        return _zeros(X)

    def terminal(times, X):
        return np.sin(X[:, -1, 0])

    return GameCoefficients(drift, diffusion, driver, terminal, bound=max(1.0, abs(sigma)), lipschitz=1.0,
                            markovian=True, control_path_dependent=False, name="martingale", y_lipschitz=0.0)


@dataclass(frozen=True)
class CatalogEntry:
    make: Callable
    schema: dict
    description: str


CATALOG = {
    "lq": CatalogEntry(make_lq, {"A": 0.0, "B1": 1.0, "B2": 1.0, "Q": 0.5, "R1": 1.0, "R2": 2.0, "G": 1.0,
                                 "sigma": 0.5, "horizon": 1.0},
                       "Markovian linear-quadratic game with a Riccati benchmark"),
    "delay": CatalogEntry(make_delay, {"r": 0.25, "f1": 0.5, "f2": 1.0, "f3": 0.3, "l1": 0.5, "l2": 0.5,
                                       "rho": 0.3, "eta": 0.2, "sigma": 0.4, "horizon": 1.0},
                          "bounded scalar delay game with state- and control-path dependence"),
    "separated_hamiltonian": CatalogEntry(
        make_separated_hamiltonian, {"a": 0.5, "b1": 1.0, "b2": 0.5, "sigma": 0.5, "c1": 0.5, "c2": 0.5,
                                     "rho": 0.0, "horizon": 1.0},
        "Hamiltonian additively separated in (u, v); Isaacs condition holds"),
    "saddle_square": CatalogEntry(make_saddle_square, {"sigma": 0.0, "horizon": 1.0},
                                  "dx = (u + v) dt, terminal cost x_T^2"),
    "bilinear": CatalogEntry(make_bilinear, {"horizon": 1.0}, "running cost u v, coupled Hamiltonian"),
    "martingale": CatalogEntry(make_martingale, {"sigma": 1.0, "horizon": 1.0},
                               "uncontrolled Brownian state, terminal cost sin(x_T)"),
}


def make_instance(name: str, params: dict | None = None) -> GameCoefficients:
    if name not in CATALOG:
        raise KeyError(f"unknown catalog instance {name!r}; known: {sorted(CATALOG)}")
    entry = CATALOG[name]
    params = dict(params or {})
    unknown = set(params) - set(entry.schema)
    if unknown:
        raise ValueError(f"unknown parameters for {name!r}: {sorted(unknown)}")
    return entry.make(**{**entry.schema, **params})


def catalog_description() -> dict:
    return {name: {"description": e.description, "parameters": e.schema} for name, e in CATALOG.items()}


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------

def terminal_value_functional() -> PathFunctional:
    return PathFunctional(lambda a, z, w: a.terminal[0], "C12",
                          batch_eval=lambda times, X: X[:, -1, 0].copy(), name="terminal")


def terminal_square_functional() -> PathFunctional:
    return PathFunctional(lambda a, z, w: a.terminal[0] ** 2, "C12",
                          batch_eval=lambda times, X: X[:, -1, 0] ** 2, name="square")


def running_integral_functional() -> PathFunctional:
    return PathFunctional(lambda a, z, w: float(_path_integral(a.grid, a.values[None])[0, 0]), "C12",
                          batch_eval=lambda times, X: _path_integral(times, X)[:, 0], name="integral")


def ito_families() -> dict:
    """The three cylindrical families used by the Ito verification."""
    return {"identity": terminal_value_functional(), "square": terminal_square_functional(),
            "integral": running_integral_functional()}


def riccati_functional(sol: RiccatiSolution, shift: float = 0.0, time_slope: float = 0.0) -> PathFunctional:
    """A_t -> a_t' P(t) a_t + c(t) + shift + time_slope (T - t)."""
    T = sol.params.horizon

    def value(a: Path, z=None, w=None):
        t = a.t_end
        return sol.value(t, a.terminal) + shift + time_slope * (T - t)

    return PathFunctional(value, "C12", name="riccati")
