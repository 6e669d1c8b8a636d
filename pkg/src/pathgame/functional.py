"""Numerical functional calculus for path functionals.

Horizontal derivatives perturb the path by flat extension, vertical ones by
bumping the terminal value.  Both use finite differences with one level of
Richardson extrapolation.  Array ("batch") twins of the path operations let
the Ito verifier differentiate many paths at once.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import BrownianBatch, GameCoefficients, NumericalFailure, simulate_sde
from .paths import (CadlagPath, HolderBall, Path, VERTICAL_EPS, d_infty, flat_extend,
                    sample_holder_ball, vertical_control_sub, vertical_extend, vertical_refine)

H_STEPS = (1e-3, 5e-4, 2.5e-4)
DT_STEPS = (1e-3, 5e-4)
PREDICTABLE_TOL = 1e-10


@dataclass(frozen=True)
class PathFunctional:
    """A real functional of (state path, control path, control path).

    ``batch_eval(times, X) -> (N,)`` is an optional vectorized form for
    functionals of the state path alone; it must agree with ``eval``.
    """

    eval: Callable
    smoothness: str = "none"
    kappa: float | None = None
    batch_eval: Callable | None = None
    name: str = ""

    def __post_init__(self):
        if self.smoothness not in ("none", "C12", "C12_kappa"):
            raise ValueError(f"unknown smoothness class {self.smoothness!r}")

    def __call__(self, a: Path, z: CadlagPath | None = None, w: CadlagPath | None = None) -> float:
        return float(self.eval(a, z, w))

    def scaled(self, factor: float) -> "PathFunctional":
        batch = None if self.batch_eval is None else (lambda t, x: factor * self.batch_eval(t, x))
        return PathFunctional(lambda a, z, w: factor * self.eval(a, z, w), self.smoothness,
                              self.kappa, batch, self.name)


@dataclass
class FunctionalDerivatives:
    dt: float
    dx: np.ndarray
    dxx: np.ndarray
    step_report: dict = field(default_factory=dict)


def _finite(val, what):
    if not np.all(np.isfinite(val)):
        raise NumericalFailure(f"non-finite functional value during {what}")
    return val


def _richardson(values, steps, order):
    """One extrapolation level on the two finest steps; returns (estimate, residual)."""
    if len(values) == 1:
        return values[0], float("nan")
    est = []
    for i in range(len(values) - 1):
        r = (steps[i] / steps[i + 1]) ** order
        est.append((r * values[i + 1] - values[i]) / (r - 1))
    resid = abs(np.asarray(est[-1]) - np.asarray(est[-2])) if len(est) > 1 else abs(
        np.asarray(est[-1]) - np.asarray(values[-1]))
    return est[-1], np.max(resid)


def _unpack(at):
    if isinstance(at, Path):
        return at, None, None
    a, z, w = (tuple(at) + (None, None))[:3]
    return a, z, w


def _scale(a: Path) -> float:
    return max(1.0, a.sup_norm())


# ---------------------------------------------------------------------------
# single-path derivatives
# ---------------------------------------------------------------------------

def horizontal_derivative(f: PathFunctional, at, dt_steps=None, horizon: float | None = None) -> float:
    """Richardson-extrapolated forward difference under joint flat extension."""
    a, z, w = _unpack(at)
    scale = horizon if horizon is not None else max(a.t_end, 1.0)
    steps = [s * scale for s in (dt_steps or DT_STEPS)]
    f0 = _finite(f(a, z, w), "horizontal differencing")
    diffs = []
    for d in steps:
        ext = [flat_extend(a, d, horizon)]
        ext += [None if c is None else flat_extend(c, d, horizon) for c in (z, w)]
        diffs.append((_finite(f(*ext), "horizontal differencing") - f0) / d)
    est, _ = _richardson(diffs, steps, 1)
    return float(est)


def _vertical_table(f, a, z, w, steps, need_cross, horizon):
    """Evaluate f on all bumps needed for gradient and Hessian stencils."""
    n = a.dim
    eye = np.eye(n)
    # all stencil points share the refined grid of the unbumped path
    a = vertical_refine(a, horizon)
    f0 = _finite(f(a, z, w), "vertical differencing")
    plus, minus, cross = [], [], []
    for h in steps:
        fp = np.array([f(vertical_extend(a, h * eye[i], horizon), z, w) for i in range(n)])
        fm = np.array([f(vertical_extend(a, -h * eye[i], horizon), z, w) for i in range(n)])
        plus.append(_finite(fp, "vertical differencing"))
        minus.append(_finite(fm, "vertical differencing"))
        if need_cross and n > 1:
            c = np.zeros((n, n, 4))
            for i in range(n):
                for j in range(i + 1, n):
                    for k, (si, sj) in enumerate(((1, 1), (1, -1), (-1, 1), (-1, -1))):
                        c[i, j, k] = f(vertical_extend(a, h * (si * eye[i] + sj * eye[j]), horizon), z, w)
            cross.append(_finite(c, "vertical differencing"))
    return f0, plus, minus, cross


def _assemble(f0, plus, minus, cross, steps, n):
    grads = [(p - m) / (2 * h) for p, m, h in zip(plus, minus, steps)]
    hess = []
    for idx, h in enumerate(steps):
        H = np.diag((plus[idx] - 2 * f0 + minus[idx]) / h ** 2)
        if cross:
            c = cross[idx]
            for i in range(n):
                for j in range(i + 1, n):
                    H[i, j] = H[j, i] = (c[i, j, 0] - c[i, j, 1] - c[i, j, 2] + c[i, j, 3]) / (4 * h ** 2)
        hess.append(H)
    g, g_res = _richardson(grads, steps, 2)
    H, h_res = _richardson(hess, steps, 2)
    H = 0.5 * (H + H.T)
    return np.asarray(g, dtype=float), H, float(g_res), float(h_res)


def vertical_gradient(f: PathFunctional, at, h_steps=None, horizon: float | None = None) -> np.ndarray:
    a, z, w = _unpack(at)
    steps = [s * _scale(a) for s in (h_steps or H_STEPS)]
    f0, plus, minus, _ = _vertical_table(f, a, z, w, steps, False, horizon)
    grads = [(p - m) / (2 * h) for p, m, h in zip(plus, minus, steps)]
    g, _ = _richardson(grads, steps, 2)
    return np.asarray(g, dtype=float)


def vertical_hessian(f: PathFunctional, at, h_steps=None, horizon: float | None = None) -> np.ndarray:
    a, z, w = _unpack(at)
    steps = [s * _scale(a) for s in (h_steps or H_STEPS)]
    f0, plus, minus, cross = _vertical_table(f, a, z, w, steps, True, horizon)
    return _assemble(f0, plus, minus, cross, steps, a.dim)[1]


def derivatives(f: PathFunctional, at, h_steps=None, dt_steps=None,
                horizon: float | None = None) -> FunctionalDerivatives:
    """All first/second functional derivatives, sharing function evaluations."""
    a, z, w = _unpack(at)
    steps = [s * _scale(a) for s in (h_steps or H_STEPS)]
    f0, plus, minus, cross = _vertical_table(f, a, z, w, steps, True, horizon)
    g, H, g_res, h_res = _assemble(f0, plus, minus, cross, steps, a.dim)
    dt = horizontal_derivative(f, (a, z, w), dt_steps, horizon)
    report = {"h_steps": steps, "dt_steps": list(dt_steps or DT_STEPS),
              "gradient_residual": g_res, "hessian_residual": h_res}
    return FunctionalDerivatives(dt, g, H, report)


# ---------------------------------------------------------------------------
# batch derivatives for state-only functionals
# ---------------------------------------------------------------------------

def batch_flat_extend(times, X, delta):
    return np.append(times, times[-1] + delta), np.concatenate([X, X[:, -1:]], axis=1)


def batch_vertical_refine(times, X, eps_v):
    if times.size == 1:
        return times, X
    t = times[-1]
    return np.concatenate([times[:-1], [t - eps_v, t]]), np.concatenate([X, X[:, -1:]], axis=1)


def batch_vertical_extend(times, X, H, eps_v):
    """Bump the terminal value of already refined paths."""
    out = X.copy()
    out[:, -1] += H
    return times, out


def batch_derivatives(f: PathFunctional, times, X, horizon: float | None = None,
                      h_steps=None, dt_steps=None):
    """Vectorized twin of :func:`derivatives` over a batch of paths sharing a grid.

    Returns (dt (N,), dx (N, n), dxx (N, n, n)).
    """
    if f.batch_eval is None:
        raise ValueError("functional has no batch form")
    N, _, n = X.shape
    t_end = float(times[-1])
    T = horizon if horizon is not None else max(t_end, 1.0)
    eps_v = VERTICAL_EPS * T
    scale = np.maximum(1.0, np.max(np.linalg.norm(X, axis=2), axis=1))
    f0 = _finite(f.batch_eval(times, X), "batch differencing")
    dts = [s * T for s in (dt_steps or DT_STEPS)]
    hor = [(f.batch_eval(*batch_flat_extend(times, X, d)) - f0) / d for d in dts]
    dt, _ = _richardson(hor, dts, 1)
    times, X = batch_vertical_refine(times, X, eps_v)
    f0 = _finite(f.batch_eval(times, X), "batch differencing")
    rel = list(h_steps or H_STEPS)
    eye = np.eye(n)
    grads, hess = [], []
    for r in rel:
        h = r * scale
        H = np.zeros((N, n, n))
        g = np.zeros((N, n))
        for i in range(n):
            fp = f.batch_eval(*batch_vertical_extend(times, X, h[:, None] * eye[i], eps_v))
            fm = f.batch_eval(*batch_vertical_extend(times, X, -h[:, None] * eye[i], eps_v))
            g[:, i] = (fp - fm) / (2 * h)
            H[:, i, i] = (fp - 2 * f0 + fm) / h ** 2
            for j in range(i + 1, n):
                vals = [f.batch_eval(*batch_vertical_extend(times, X, h[:, None] * (si * eye[i] + sj * eye[j]), eps_v))
                        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
                H[:, i, j] = H[:, j, i] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4 * h ** 2)
        grads.append(g)
        hess.append(H)
    # relative steps share the same ratios for every row
    dx, _ = _richardson(grads, rel, 2)
    dxx, _ = _richardson(hess, rel, 2)
    dxx = 0.5 * (dxx + np.swapaxes(dxx, 1, 2))
    out = (np.asarray(dt), np.asarray(dx), np.asarray(dxx))
    for arr in out:
        _finite(arr, "batch differencing")
    return out


# ---------------------------------------------------------------------------
# structural checks
# ---------------------------------------------------------------------------

def check_predictable_dependence(f: PathFunctional, at, probes: int = 8, seed: int = 0,
                                 control_scale: float = 1.0) -> tuple[bool, float]:
    """Does f ignore the terminal values of the control paths?"""
    if probes < 1:
        raise ValueError("need at least one probe")
    a, z, w = _unpack(at)
    rng = np.random.default_rng(seed)
    f0 = f(a, z, w)
    dev = 0.0
    for _ in range(probes):
        if z is not None:
            u = control_scale * rng.normal(size=z.dim)
            dev = max(dev, abs(f(a, vertical_control_sub(z, u), w) - f0))
        if w is not None:
            v = control_scale * rng.normal(size=w.dim)
            dev = max(dev, abs(f(a, z, vertical_control_sub(w, v)) - f0))
    return bool(dev <= PREDICTABLE_TOL * (1 + abs(f0))), float(dev)


def holder_seminorm_estimate(f: PathFunctional, kappa: float, ball: HolderBall, samples: int,
                             seed: int, t_end: float = 1.0, grid_size: int = 12) -> float:
    """Sample-max of |f(A) - f(A')| / d_infty(A, A')**kappa.

    Only a lower bound for the seminorm; a sample cannot certify a sup.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(samples):
        horizon = t_end * rng.uniform(0.2, 1.0)
        paths.append(sample_holder_ball(ball, horizon, grid_size, seed=[seed, i]))
    vals = [f(p) for p in paths]
    best = 0.0
    for i in range(samples):
        for j in range(i + 1, samples):
            d = d_infty(paths[i], paths[j])
            if d > 0:
                best = max(best, abs(vals[i] - vals[j]) / d ** kappa)
    return best


# ---------------------------------------------------------------------------
# functional Ito formula
# ---------------------------------------------------------------------------

@dataclass
class ItoReport:
    n_paths: int
    n_steps: int
    seed: int
    max_err: float
    p50_err: float
    p95_err: float
    relative_err: float
    per_path_errors: np.ndarray = field(repr=False)

    def to_json(self) -> str:
        return json.dumps({"n_paths": self.n_paths, "n_steps": self.n_steps, "max_err": self.max_err,
                           "p50_err": self.p50_err, "p95_err": self.p95_err, "seed": self.seed,
                           "relative_err": self.relative_err})


def verify_functional_ito(f: PathFunctional, c: GameCoefficients, initial: Path, n_paths: int,
                          n_steps: int, seed: int, horizon: float = 1.0, u=None, v=None) -> ItoReport:
    """Compare f(X_T) - f(X_t) with the discrete functional Ito expansion.

    The right side is the left-point sum of dt f * dt + dx f . dx +
    1/2 Tr(dxx f sigma sigma^T) dt along each simulated path, with all
    derivatives computed numerically.  ``relative_err`` divides the largest
    pathwise discrepancy by the largest |f(X_T) - f(X_t)|.
    """
    if f.smoothness == "none":
        raise ValueError("the Ito verifier needs a functional declared C12")
    bb = BrownianBatch(n_paths, n_steps, initial.t_end, horizon, c.p, seed)
    if u is None:
        u = CadlagPath.constant(np.zeros(c.m_u), 0.0, horizon) if c.m_u else None
    if v is None:
        v = CadlagPath.constant(np.zeros(c.l_v), 0.0, horizon) if c.l_v else None
    sim = simulate_sde(c, initial, u, v, bb)
    times, X, m0 = sim.times, sim.states, sim.prefix_len
    dt = bb.dt
    rhs = np.zeros(n_paths)
    for k in range(n_steps):
        j = m0 - 1 + k
        tt, xs = times[: j + 1], X[:, : j + 1]
        us, vs = sim.u[:, : j + 1], sim.v[:, : j + 1]
        try:
            if f.batch_eval is not None:
                d_t, d_x, d_xx = batch_derivatives(f, tt, xs, horizon)
            else:
                rows = [derivatives(f, (Path.trusted(tt, xs[i]),), horizon=horizon) for i in range(n_paths)]
                d_t = np.array([r.dt for r in rows])
                d_x = np.array([r.dx for r in rows])
                d_xx = np.array([r.dxx for r in rows])
        except NumericalFailure as exc:
            raise NumericalFailure(f"derivative estimation failed at time index {k}: {exc}") from exc
        sig = c.diffusion(tt, xs, us, vs)
        cov = np.einsum("inp,imp->inm", sig, sig)
        dx = X[:, j + 1] - X[:, j]
        rhs += d_t * dt + np.einsum("in,in->i", d_x, dx) + 0.5 * np.einsum("inm,imn->i", d_xx, cov) * dt
    if f.batch_eval is not None:
        f_end = f.batch_eval(times, X)
        f_start = f.batch_eval(times[:m0], X[:, :m0])
    else:
        f_end = np.array([f(sim.path(i)) for i in range(n_paths)])
        f_start = np.full(n_paths, f(initial))
    lhs = f_end - f_start
    err = np.abs(lhs - rhs)
    scale = float(np.max(np.abs(lhs)))
    rel = float(np.max(err) / scale) if scale > 0 else float(np.max(err))
    return ItoReport(n_paths, n_steps, seed, float(np.max(err)), float(np.percentile(err, 50)),
                     float(np.percentile(err, 95)), rel, err)
