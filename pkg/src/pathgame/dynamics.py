"""Forward simulation of path-dependent controlled SDEs.

Coefficients are stored in *batch form*: every callable receives a shared
time grid ``times`` of length L together with path arrays of shape
``(N, L, dim)`` and returns one output per row.  Control arrays share the
state grid; entry ``j`` is the control in force on ``[times[j], times[j+1])``
and the last entry is the control chosen at the current time.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .paths import CadlagPath, Path, d_infty


class NumericalFailure(RuntimeError):
    """Raised when a simulation or solve produces non-finite numbers."""


def _empty_controls(n_rows, length, dim):
    return np.zeros((n_rows, length, dim))


def path_arrays(a: Path, z: CadlagPath | None, w: CadlagPath | None, m_u: int, l_v: int):
    """Sample a (state, control, control) triple on the state grid as batch arrays."""
    times = a.grid
    x = a.values[None, :, :]
    u = z.at(times)[None, :, :] if z is not None else _empty_controls(1, times.size, m_u)
    v = w.at(times)[None, :, :] if w is not None else _empty_controls(1, times.size, l_v)
    if u.shape[2] != m_u or v.shape[2] != l_v:
        raise ValueError(f"control dimensions {u.shape[2]}, {v.shape[2]} do not match ({m_u}, {l_v})")
    return times, x, u, v


@dataclass(frozen=True)
class GameCoefficients:
    """Drift, diffusion, BSDE driver and terminal cost in batch form.

    drift(times, X, U, V) -> (N, n); diffusion(...) -> (N, n, p);
    driver(times, X, y, q, U, V) -> (N,) with y of shape (N,) and q of shape
    (N, p); terminal(times, X) -> (N,).  ``bound`` and ``lipschitz`` are the
    declared constants checked by :func:`validate_assumption1`.
    """

    drift: Callable
    diffusion: Callable
    driver: Callable
    terminal: Callable
    n: int = 1
    p: int = 1
    m_u: int = 1
    l_v: int = 1
    bound: float = np.inf
    lipschitz: float = 1.0
    markovian: bool = False
    control_path_dependent: bool = True
    name: str = "custom"
    y_lipschitz: float | None = None

    @property
    def driver_y_lipschitz(self) -> float:
        """Lipschitz constant of the driver in y (defaults to ``lipschitz``)."""
        return self.lipschitz if self.y_lipschitz is None else self.y_lipschitz

    def __post_init__(self):
        if not (self.lipschitz > 0 and np.isfinite(self.lipschitz)):
            raise ValueError("declared Lipschitz constant must be positive and finite")
        if not self.bound > 0:
            raise ValueError("declared bound must be positive")

    @classmethod
    def from_path_callables(cls, drift, diffusion, driver, terminal, **kwargs) -> "GameCoefficients":
        """Wrap per-path callables ``f(A, Z, W)`` etc. into the batch form."""

        def rows(times, X, U, V):
            t_end = float(times[-1])
            for i in range(X.shape[0]):
                yield (Path.trusted(times, X[i]), CadlagPath.trusted(times, U[i], t_end),
                       CadlagPath.trusted(times, V[i], t_end))

        def b_drift(times, X, U, V):
            return np.array([np.atleast_1d(drift(a, z, w)) for a, z, w in rows(times, X, U, V)], dtype=float)

        def b_diffusion(times, X, U, V):
            n = X.shape[2]
            return np.array([np.asarray(diffusion(a, z, w), dtype=float).reshape(n, -1)
                             for a, z, w in rows(times, X, U, V)])

        def b_driver(times, X, y, q, U, V):
            return np.array([float(driver(a, y[i], q[i], z, w))
                             for i, (a, z, w) in enumerate(rows(times, X, U, V))])

        def b_terminal(times, X):
            return np.array([float(terminal(Path.trusted(times, X[i]))) for i in range(X.shape[0])])

        return cls(b_drift, b_diffusion, b_driver, b_terminal, **kwargs)

    # single-path evaluation ------------------------------------------------
    def drift_at(self, a: Path, z=None, w=None) -> np.ndarray:
        return self.drift(*path_arrays(a, z, w, self.m_u, self.l_v))[0]

    def diffusion_at(self, a: Path, z=None, w=None) -> np.ndarray:
        return self.diffusion(*path_arrays(a, z, w, self.m_u, self.l_v))[0]

    def driver_at(self, a: Path, y, q, z=None, w=None) -> float:
        times, x, u, v = path_arrays(a, z, w, self.m_u, self.l_v)
        q = np.asarray(q, dtype=float).reshape(1, self.p)
        return float(self.driver(times, x, np.array([float(y)]), q, u, v)[0])

    def terminal_at(self, a: Path) -> float:
        return float(self.terminal(a.grid, a.values[None, :, :])[0])


# ---------------------------------------------------------------------------
# Brownian increments
# ---------------------------------------------------------------------------

def _is_power_of_two(k: int) -> bool:
    return k >= 1 and (k & (k - 1)) == 0


def _bridge_increments(normals: np.ndarray, horizon: float) -> np.ndarray:
    """Levy construction: coarse dyadic levels use the first normals.

    For a power-of-two step count, the Brownian values at the coarse dyadic
    times do not depend on how finely the path is resolved, which couples
    runs at different resolutions.
    """
    n_paths, n_steps, p = normals.shape
    w = np.zeros((n_paths, n_steps + 1, p))
    w[:, -1] = np.sqrt(horizon) * normals[:, 0]
    used = 1
    width = n_steps
    while width > 1:
        half = width // 2
        left = np.arange(0, n_steps, width)
        mid, right = left + half, left + width
        k = left.size
        sd = np.sqrt(horizon * half / n_steps / 2.0)
        w[:, mid] = 0.5 * (w[:, left] + w[:, right]) + sd * normals[:, used:used + k]
        used += k
        width = half
    return np.diff(w, axis=1)


@dataclass(frozen=True, eq=False)
class BrownianBatch:
    """Reproducible Brownian increments on a uniform grid of ``[t0, T]``.

    Path ``i`` draws from ``default_rng([seed, i])``, so any subset of paths
    is reproducible on its own.  Power-of-two step counts use a dyadic bridge
    construction (consistent across resolutions).
    """

    n_paths: int
    n_steps: int
    t0: float
    T: float
    p: int = 1
    seed: int = 0
    increments: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1:
            raise ValueError("need at least one path and one step")
        if not self.T > self.t0:
            raise ValueError(f"empty horizon [{self.t0}, {self.T}]")
        normals = np.empty((self.n_paths, self.n_steps, self.p))
        for i in range(self.n_paths):
            normals[i] = np.random.default_rng([self.seed, i]).standard_normal((self.n_steps, self.p))
        span = self.T - self.t0
        if _is_power_of_two(self.n_steps):
            inc = _bridge_increments(normals, span)
        else:
            inc = normals * np.sqrt(span / self.n_steps)
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def describe(self) -> dict:
        return {"seed": self.seed, "n_paths": self.n_paths, "n_steps": self.n_steps,
                "horizon": [self.t0, self.T], "p": self.p}


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SimulatedPaths:
    """State and control arrays on the full grid ``times`` (prefix included)."""

    times: np.ndarray
    states: np.ndarray
    u: np.ndarray
    v: np.ndarray
    increments: np.ndarray
    prefix_len: int
    batch: dict

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def dt(self) -> float:
        return float(self.times[-1] - self.times[self.prefix_len - 1]) / self.n_steps

    def path(self, i: int) -> Path:
        return Path(self.times, self.states[i])

    def controls(self, i: int) -> tuple[CadlagPath, CadlagPath]:
        t_end = float(self.times[-1])
        return CadlagPath(self.times, self.u[i], t_end), CadlagPath(self.times, self.v[i], t_end)

    def to_csv(self) -> str:
        """Long format: path_id, time, v0..v{n-1}."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        n = self.states.shape[2]
        writer.writerow(["path_id", "time"] + [f"v{i}" for i in range(n)])
        for i in range(self.n_paths):
            for s, row in zip(self.times, self.states[i]):
                writer.writerow([i, repr(float(s))] + [repr(float(x)) for x in row])
        return buf.getvalue()


def _control_column(ctrl, times, X, U, V, k, dim, n_rows):
    """Control values at the current grid point: deterministic path or feedback policy."""
    if dim == 0:
        return np.zeros((n_rows, 0))
    if isinstance(ctrl, CadlagPath):
        return np.broadcast_to(ctrl.at(times[-1]), (n_rows, dim))
    out = np.asarray(ctrl(k, times, X, U, V), dtype=float)
    return np.broadcast_to(out.reshape(n_rows, -1) if out.ndim > 1 else out.reshape(-1, dim), (n_rows, dim))


def simulate_sde(c: GameCoefficients, initial: Path, u, v, bb: BrownianBatch,
                 z0: CadlagPath | None = None, w0: CadlagPath | None = None) -> SimulatedPaths:
    """Euler-Maruyama for the path-dependent SDE started from ``initial``.

    ``u`` and ``v`` are either CadlagPaths on ``[0, T]`` (deterministic
    controls, which also supply the control prefix) or feedback policies
    ``policy(k, times, X, U, V) -> (N, dim)`` evaluated on the current prefix.
    Feedback policies take their prefix from ``z0`` / ``w0`` (zeros if absent).
    """
    t0 = initial.t_end
    if abs(bb.t0 - t0) > 1e-12 * max(1.0, t0):
        raise ValueError(f"Brownian horizon starts at {bb.t0}, initial path ends at {t0}")
    if bb.p != c.p or initial.dim != c.n:
        raise ValueError("Brownian or state dimension does not match the coefficients")
    n_rows, K = bb.n_paths, bb.n_steps
    m0 = initial.grid.size
    times = np.concatenate([initial.grid, bb.times[1:]])
    L = m0 + K
    X = np.empty((n_rows, L, c.n))
    X[:, :m0] = initial.values
    U = np.zeros((n_rows, L, c.m_u))
    V = np.zeros((n_rows, L, c.l_v))
    for arr, ctrl, prefix, dim in ((U, u, z0, c.m_u), (V, v, w0, c.l_v)):
        if dim == 0:
            continue
        if isinstance(ctrl, CadlagPath):
            arr[:] = ctrl.at(times)
        elif prefix is not None:
            arr[:, :m0] = prefix.at(initial.grid)
    dt = bb.dt
    dB = bb.increments
    for k in range(K):
        j = m0 - 1 + k
        tt = times[: j + 1]
        if not isinstance(u, CadlagPath):
            U[:, j] = _control_column(u, tt, X[:, : j + 1], U[:, : j + 1], V[:, : j + 1], k, c.m_u, n_rows)
        if not isinstance(v, CadlagPath):
            V[:, j] = _control_column(v, tt, X[:, : j + 1], U[:, : j + 1], V[:, : j + 1], k, c.l_v, n_rows)
        xs, us, vs = X[:, : j + 1], U[:, : j + 1], V[:, : j + 1]
        drift = c.drift(tt, xs, us, vs)
        sig = c.diffusion(tt, xs, us, vs)
        X[:, j + 1] = X[:, j] + drift * dt + np.einsum("inp,ip->in", sig, dB[:, k])
        if not isinstance(u, CadlagPath):
            U[:, j + 1] = U[:, j]
        if not isinstance(v, CadlagPath):
            V[:, j + 1] = V[:, j]
        bad = ~np.all(np.isfinite(X[:, j + 1]), axis=1)
        if np.any(bad):
            raise NumericalFailure(f"non-finite state at step {k} on path {int(np.argmax(bad))}")
    return SimulatedPaths(times, X, U, V, dB, m0, bb.describe())


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    max_ratio_f: float
    max_ratio_sigma: float
    max_ratio_l: float
    max_ratio_m: float
    bound_violations: int
    lipschitz_violations: dict

    @property
    def ok(self) -> bool:
        return self.bound_violations == 0 and not any(self.lipschitz_violations.values())


def _random_prefix(rng, grid_size, t_end, dim, scale):
    grid = np.linspace(0.0, t_end, grid_size)
    steps = rng.normal(size=(grid_size - 1, dim)) * np.sqrt(np.diff(grid))[:, None]
    start = rng.uniform(-1, 1, size=dim)
    return grid, scale * np.vstack([start, start + np.cumsum(steps, axis=0)])


def validate_assumption1(c: GameCoefficients, probes: int, seed: int, t_end: float = 1.0,
                         scale: float = 1.0, control_scale: float = 1.0,
                         grid_size: int = 6) -> AssumptionReport:
    """Sampled Lipschitz ratios and bound checks for the coefficients.

    Inputs are random paths on random horizons; the ratios use the d_infty
    distances of states and controls exactly as in the Lipschitz conditions.
    """
    if probes < 2:
        raise ValueError("need at least two probes")
    rng = np.random.default_rng(seed)
    ratios = {"f": 0.0, "sigma": 0.0, "l": 0.0, "m": 0.0}
    violations = 0
    for _ in range(probes):
        sample = []
        for _side in range(2):
            s = rng.uniform(0.2, 1.0) * t_end
            grid, xv = _random_prefix(rng, grid_size, s, c.n, scale)
            uv = control_scale * rng.uniform(-1, 1, size=(grid_size, c.m_u))
            vv = control_scale * rng.uniform(-1, 1, size=(grid_size, c.l_v))
            y = rng.normal() * scale
            q = rng.normal(size=c.p) * scale
            a = Path(grid, xv)
            z = CadlagPath(grid, uv, s) if c.m_u else None
            w = CadlagPath(grid, vv, s) if c.l_v else None
            sample.append((a, z, w, y, q))
        outs = []
        for a, z, w, y, q in sample:
            f = c.drift_at(a, z, w)
            sg = c.diffusion_at(a, z, w)
            ll = c.driver_at(a, y, q, z, w)
            outs.append((f, sg, ll))
            for val in (np.linalg.norm(f), np.linalg.norm(sg), abs(ll)):
                if not np.isfinite(val) or val > c.bound:
                    violations += 1
        (a1, z1, w1, y1, q1), (a2, z2, w2, y2, q2) = sample
        dist = d_infty(a1, a2)
        if z1 is not None:
            dist += d_infty(z1, z2)
        if w1 is not None:
            dist += d_infty(w1, w2)
        if dist > 0:
            ratios["f"] = max(ratios["f"], np.linalg.norm(outs[0][0] - outs[1][0]) / dist)
            ratios["sigma"] = max(ratios["sigma"], np.linalg.norm(outs[0][1] - outs[1][1]) / dist)
            dl = dist + abs(y1 - y2) + np.linalg.norm(q1 - q2)
            ratios["l"] = max(ratios["l"], abs(outs[0][2] - outs[1][2]) / dl)
        # terminal cost compares two paths on the common horizon
        grid, x1 = _random_prefix(rng, grid_size, t_end, c.n, scale)
        _, x2 = _random_prefix(rng, grid_size, t_end, c.n, scale)
        p1, p2 = Path(grid, x1), Path(grid, x2)
        m1, m2 = c.terminal_at(p1), c.terminal_at(p2)
        for val in (m1, m2):
            if not np.isfinite(val) or abs(val) > c.bound:
                violations += 1
        sup = float(np.max(np.linalg.norm(x1 - x2, axis=1)))
        if sup > 0:
            ratios["m"] = max(ratios["m"], abs(m1 - m2) / sup)
    flags = {k: bool(r > c.lipschitz) for k, r in ratios.items()}
    return AssumptionReport(ratios["f"], ratios["sigma"], ratios["l"], ratios["m"], violations, flags)


@dataclass
class MomentReport:
    sup_sq: float
    increment_sq_per_time: float
    stability_sq: float
    stability_ratio: float
    t1: float
    t2: float


def estimate_moment_bounds(c: GameCoefficients, initial: Path, u, v, bb: BrownianBatch,
                           t1: float | None = None, t2: float | None = None,
                           initial2: Path | None = None, u2=None, v2=None) -> MomentReport:
    """Sample moments for the a-priori state estimates.

    Returns E||X_T||^2, E sup_{[t1,t2]} |x_s - x_{t1}|^2 / (t2 - t1), and, when
    a second input is given, E||X^1 - X^2||^2 together with its ratio to
    ``||A^1 - A^2|| + int |U^1-U^2|^2 + |V^1-V^2|^2`` (same Brownian batch).
    """
    sim = simulate_sde(c, initial, u, v, bb)
    times = sim.times
    t1 = initial.t_end if t1 is None else t1
    t2 = bb.T if t2 is None else t2
    if not initial.t_end <= t1 < t2 <= bb.T + 1e-12:
        raise ValueError(f"need t <= t1 < t2 <= T, got t1={t1}, t2={t2}")
    sup_sq = float(np.mean(np.max(np.sum(sim.states ** 2, axis=2), axis=1)))
    x_t1 = np.stack([np.array([np.interp(t1, times, sim.states[i, :, d]) for d in range(c.n)])
                     for i in range(sim.n_paths)])
    window = (times >= t1) & (times <= t2 + 1e-12)
    dev = np.max(np.sum((sim.states[:, window] - x_t1[:, None, :]) ** 2, axis=2), axis=1)
    inc = float(np.mean(dev) / (t2 - t1))
    stab_sq, stab_ratio = 0.0, 0.0
    if initial2 is not None:
        sim2 = simulate_sde(c, initial2, u if u2 is None else u2, v if v2 is None else v2, bb)
        diff = sim.states - sim2.states
        stab_sq = float(np.mean(np.max(np.sum(diff ** 2, axis=2), axis=1)))
        denom = float(np.max(np.linalg.norm(initial.values - initial2.values, axis=1)))
        dts = np.diff(times)[None, :]
        for a1, a2 in ((sim.u, sim2.u), (sim.v, sim2.v)):
            if a1.shape[2]:
                denom += float(np.mean(np.sum(np.sum((a1 - a2) ** 2, axis=2)[:, :-1] * dts, axis=1)))
        stab_ratio = stab_sq / denom if denom > 0 else 0.0
    return MomentReport(sup_sq, inc, stab_sq, stab_ratio, t1, t2)
