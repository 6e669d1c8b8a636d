"""Backward solvers for the controlled BSDE.

On a scenario tree the conditional expectations are exact finite sums, so
the backward Euler recursion (implicit in y, explicit in q) is solved to
round-off.  On simulated batches the expectations are replaced by
least-squares regressions on path features.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import BrownianBatch, GameCoefficients, NumericalFailure, SimulatedPaths, simulate_sde
from .paths import CadlagPath, Path

log = logging.getLogger(__name__)

NODE_BUDGET = 2 ** 20
FIXED_POINT_TOL = 1e-15
FIXED_POINT_ITERS = 200
COMPARISON_SLACK = 1e-10


class BudgetExceeded(RuntimeError):
    """Raised when a tree or an enumeration would exceed its configured budget."""


def tree_increments(branching: int, p: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Increment values (B, p) and probabilities (B,) matching N(0, dt I).

    Two branches give the symmetric +-sqrt(dt) walk; more branches use
    Gauss-Hermite nodes.  For p > 1 the one-dimensional rule is tensorized.
    """
    if branching < 2:
        raise ValueError("branching must be at least 2")
    if branching == 2:
        nodes, probs = np.array([1.0, -1.0]), np.array([0.5, 0.5])
    else:
        nodes, weights = np.polynomial.hermite_e.hermegauss(branching)
        probs = weights / weights.sum()
    vals = np.array(list(itertools.product(nodes, repeat=p))) * np.sqrt(dt)
    pr = np.array([np.prod(c) for c in itertools.product(probs, repeat=p)])
    return vals.reshape(-1, p), pr / pr.sum()


def implicit_step(c: GameCoefficients, times, X, U, V, y_children, incr, probs, dt,
                  driver=None, tol: float = FIXED_POINT_TOL, max_iter: int = FIXED_POINT_ITERS):
    """One backward Euler step for a batch of nodes.

    y_children has shape (N, B).  Returns (y (N,), q (N, p)) with
    q = E[y' dB] / dt and y = E[y'] + l(y, q) dt solved by fixed-point
    iteration (a contraction when L dt < 1).
    """
    if c.driver_y_lipschitz * dt >= 1:
        raise NumericalFailure(
            f"fixed-point map is not a contraction (L*dt = {c.driver_y_lipschitz * dt:.3g} >= 1); "
            "use a smaller time step")
    driver = driver or c.driver
    # explicit row sums keep each row's arithmetic independent of the batch size
    weighted = y_children * probs
    ey = weighted.sum(axis=1)
    q = (weighted[:, :, None] * incr[None, :, :]).sum(axis=1) / dt
    y = ey.copy()
    active = np.ones(y.shape, dtype=bool)
    for _ in range(max_iter):
        y_new = ey + dt * driver(times, X, y, q, U, V)
        if not np.all(np.isfinite(y_new)):
            raise NumericalFailure("non-finite value in the implicit BSDE step")
        conv = np.abs(y_new - y) <= tol * (1 + np.abs(y_new))
        # rows freeze at their own convergence step
        y = np.where(active, y_new, y)
        active &= ~conv
        if not active.any():
            return y, q
    raise NumericalFailure(f"implicit BSDE step did not converge in {max_iter} iterations")


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Non-recombining Brownian tree with state and control arrays per depth.

    Node ``i`` at depth ``k`` has children ``i * B + b`` at depth ``k + 1``.
    ``states[k]`` has shape (B**k, prefix_len + k, n); controls likewise.
    """

    times: np.ndarray
    prefix_len: int
    dt: float
    increments: np.ndarray
    probs: np.ndarray
    states: list
    u: list
    v: list

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def branching(self) -> int:
        return self.probs.size

    def level_times(self, k: int) -> np.ndarray:
        return self.times[: self.prefix_len + k]

    def node_path(self, k: int, i: int) -> Path:
        return Path(self.level_times(k), self.states[k][i])

    def to_json(self) -> str:
        return json.dumps({
            "times": self.times.tolist(), "prefix_len": self.prefix_len, "dt": self.dt,
            "increments": self.increments.tolist(), "probs": self.probs.tolist(),
            "states": [s[:, -1].tolist() for s in self.states],
        })


def _fill_controls(ctrl, k, times, X, U, V, dim):
    n_rows = X.shape[0]
    if dim == 0:
        return np.zeros((n_rows, 0))
    if isinstance(ctrl, CadlagPath):
        return np.broadcast_to(ctrl.at(times[-1]), (n_rows, dim))
    return np.asarray(ctrl(k, times, X, U, V), dtype=float).reshape(n_rows, dim)


def build_tree(c: GameCoefficients, initial: Path, u, v, n_steps: int, horizon: float,
               branching: int = 2, node_budget: int = NODE_BUDGET,
               z0: CadlagPath | None = None, w0: CadlagPath | None = None) -> ScenarioTree:
    """Forward Euler pass over all branches of the tree.

    ``u`` and ``v`` are deterministic CadlagPaths on [0, T] or feedback
    policies ``policy(k, times, X, U, V) -> (N, dim)`` (as in simulate_sde).
    """
    n_leaves = (branching ** c.p) ** n_steps
    if n_leaves > node_budget:
        raise BudgetExceeded(f"tree needs {n_leaves} leaves, budget is {node_budget}")
    t0 = initial.t_end
    if n_steps and not horizon > t0:
        raise ValueError(f"horizon {horizon} must exceed the initial time {t0}")
    dt = (horizon - t0) / n_steps if n_steps else 0.0
    incr, probs = tree_increments(branching, c.p, dt if n_steps else 1.0)
    m0 = initial.grid.size
    times = np.concatenate([initial.grid, t0 + dt * np.arange(1, n_steps + 1)])
    B = probs.size
    X = initial.values[None, :, :].copy()
    U = np.zeros((1, m0, c.m_u))
    V = np.zeros((1, m0, c.l_v))
    for arr, ctrl, prefix, dim in ((U, u, z0, c.m_u), (V, v, w0, c.l_v)):
        if dim == 0:
            continue
        if isinstance(ctrl, CadlagPath):
            arr[0] = ctrl.at(initial.grid)
        elif prefix is not None:
            arr[0] = prefix.at(initial.grid)
    states, us, vs = [], [], []
    for k in range(n_steps + 1):
        tt = times[: m0 + k]
        U[:, -1] = _fill_controls(u, k, tt, X, U, V, c.m_u)
        V[:, -1] = _fill_controls(v, k, tt, X, U, V, c.l_v)
        states.append(X)
        us.append(U)
        vs.append(V)
        if k == n_steps:
            break
        drift = c.drift(tt, X, U, V)
        sig = c.diffusion(tt, X, U, V)
        nxt = X[:, -1][:, None, :] + (drift * dt)[:, None, :] + np.einsum("inp,bp->ibn", sig, incr)
        if not np.all(np.isfinite(nxt)):
            raise NumericalFailure(f"non-finite state at tree depth {k + 1}")
        X = np.concatenate([np.repeat(X, B, axis=0), nxt.reshape(-1, 1, c.n)], axis=1)
        U = np.repeat(np.concatenate([U, U[:, -1:]], axis=1), B, axis=0)
        V = np.repeat(np.concatenate([V, V[:, -1:]], axis=1), B, axis=0)
    return ScenarioTree(times, m0, dt, incr, probs, states, us, vs)


@dataclass
class BsdeSolution:
    """y and q per tree depth (or per path and step for regression solves)."""

    y: list
    q: list
    value: float
    stderr: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_csv(self, times) -> str:
        lines = []
        p = self.q[0].shape[-1] if self.q else 0
        lines.append(",".join(["node_id", "time", "y"] + [f"q_{j}" for j in range(p)]))
        for k, yk in enumerate(self.y):
            for i, val in enumerate(np.atleast_1d(yk)):
                qs = self.q[k][i] if k < len(self.q) else np.full(p, np.nan)
                lines.append(",".join([str(i), repr(float(times[k])), repr(float(val))]
                                      + [repr(float(x)) for x in qs]))
        return "\n".join(lines) + "\n"


def solve_bsde_tree(tree: ScenarioTree, c: GameCoefficients, terminal=None, driver=None,
                    k_start: int = 0, k_end: int | None = None) -> BsdeSolution:
    """Exact backward recursion on the tree between depths ``k_start`` and ``k_end``.

    ``terminal`` gives y at depth ``k_end`` (default: the terminal cost m at
    the leaves).  Entries ``y[k]`` for depths outside the window are None.
    """
    K = tree.n_steps if k_end is None else k_end
    if not 0 <= k_start <= K <= tree.n_steps:
        raise ValueError(f"invalid depth window [{k_start}, {K}] for a {tree.n_steps}-step tree")
    if terminal is None:
        if K != tree.n_steps:
            raise ValueError("terminal data must be supplied for a truncated solve")
        terminal = c.terminal(tree.times, tree.states[K])
    y_next = np.asarray(terminal, dtype=float).reshape(-1)
    if y_next.size != tree.states[K].shape[0]:
        raise ValueError(f"terminal data has {y_next.size} entries, depth {K} has {tree.states[K].shape[0]} nodes")
    ys = [None] * (tree.n_steps + 1)
    qs = [None] * tree.n_steps
    ys[K] = y_next
    B = tree.branching
    for k in range(K - 1, k_start - 1, -1):
        tt = tree.level_times(k)
        y_k, q_k = implicit_step(c, tt, tree.states[k], tree.u[k], tree.v[k],
                                 ys[k + 1].reshape(-1, B), tree.increments, tree.probs, tree.dt, driver)
        ys[k], qs[k] = y_k, q_k
    return BsdeSolution(ys, qs, float(ys[k_start][0]))


def semigroup_pi(tree: ScenarioTree, c: GameCoefficients, k_start: int, k_end: int, terminal_data,
                 driver=None) -> np.ndarray:
    """Backward semigroup: solve on depths [k_start, k_end] with terminal data at k_end.

    Returns y at every node of depth ``k_start`` (a length-one array at the root).
    """
    if not k_start < k_end:
        raise ValueError("the semigroup needs k_start < k_end")
    return solve_bsde_tree(tree, c, terminal_data, driver, k_start, k_end).y[k_start]


def objective_J(c: GameCoefficients, initial: Path, u, v, horizon: float, n_steps: int,
                branching: int = 2, z0=None, w0=None) -> float:
    """J(t, A_t; U, V) = y_t, computed exactly on a scenario tree."""
    if n_steps == 0 or horizon <= initial.t_end:
        return c.terminal_at(initial)
    tree = build_tree(c, initial, u, v, n_steps, horizon, branching, z0=z0, w0=w0)
    return solve_bsde_tree(tree, c).value


# ---------------------------------------------------------------------------
# comparison principle
# ---------------------------------------------------------------------------

class ComparisonHypothesisError(ValueError):
    """The ordering hypotheses of the comparison test do not hold."""


@dataclass
class ComparisonReport:
    holds: bool
    violations: int
    root_gap: float
    min_gap: float


def check_comparison(tree: ScenarioTree, c: GameCoefficients, driver1, driver2, terminal1, terminal2,
                     slack: float = COMPARISON_SLACK, probes: int = 5, seed: int = 0) -> ComparisonReport:
    """Solve both BSDEs on the same tree and test y1 >= y2 at every node.

    The hypotheses (terminal1 >= terminal2 everywhere, driver1 >= driver2 at
    every node for the solved and for randomly probed (y, q)) are checked
    first and raise ComparisonHypothesisError if violated.
    """
    t1 = np.asarray(terminal1, dtype=float)
    t2 = np.asarray(terminal2, dtype=float)
    if np.any(t1 < t2):
        raise ComparisonHypothesisError("hypothesis violated: terminal1 < terminal2 at some leaf")
    s1 = solve_bsde_tree(tree, c, t1, driver1)
    s2 = solve_bsde_tree(tree, c, t2, driver2)
    rng = np.random.default_rng(seed)
    for k in range(tree.n_steps):
        tt = tree.level_times(k)
        X, U, V = tree.states[k], tree.u[k], tree.v[k]
        cands = [(s1.y[k], s1.q[k]), (s2.y[k], s2.q[k])]
        scale = 1 + np.max(np.abs(s1.y[k]))
        cands += [(scale * rng.normal(size=X.shape[0]), scale * rng.normal(size=(X.shape[0], c.p)))
                  for _ in range(probes)]
        for y, q in cands:
            if np.any(driver1(tt, X, y, q, U, V) < driver2(tt, X, y, q, U, V)):
                raise ComparisonHypothesisError(f"hypothesis violated: driver1 < driver2 at depth {k}")
    violations = 0
    min_gap = np.inf
    for y1, y2 in zip(s1.y, s2.y):
        gap = y1 - y2
        violations += int(np.sum(gap < -slack * (1 + np.abs(y1))))
        min_gap = min(min_gap, float(np.min(gap)))
    return ComparisonReport(violations == 0, violations, s1.value - s2.value, min_gap)


# ---------------------------------------------------------------------------
# least-squares Monte Carlo
# ---------------------------------------------------------------------------

FEATURES = ("terminal", "integral", "max")


def path_features(times, X, names=FEATURES) -> np.ndarray:
    """Per-path features of prefixes X (N, L, n)."""
    cols = []
    for name in names:
        if name == "terminal":
            cols.append(X[:, -1])
        elif name == "integral":
            if times.size > 1:
                cols.append(np.trapezoid(X, times, axis=1))
            else:
                cols.append(np.zeros_like(X[:, -1]))
        elif name == "max":
            cols.append(np.max(X[:, :, :1], axis=1))
        else:
            raise ValueError(f"unknown feature {name!r}")
    return np.concatenate(cols, axis=1)


def _basis(feats: np.ndarray, degree: int) -> np.ndarray:
    sd = feats.std(axis=0)
    keep = sd > 1e-12 * (1 + np.abs(feats.mean(axis=0)))
    z = (feats[:, keep] - feats[:, keep].mean(axis=0)) / sd[keep]
    cols = [np.ones(feats.shape[0])]
    d = z.shape[1]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            cols.append(np.prod(z[:, combo], axis=1))
    return np.stack(cols, axis=1)


def _regress(phi: np.ndarray, targets: np.ndarray) -> np.ndarray:
    coef, _, rank, sv = np.linalg.lstsq(phi, targets, rcond=None)
    if rank < phi.shape[1]:
        gram = phi.T @ phi
        lam = 1e-8 * np.trace(gram) / gram.shape[0]
        log.info("rank-deficient regression (rank %d of %d); ridge regularizer %.3g", rank, phi.shape[1], lam)
        # the intercept is left unpenalized so constants are reproduced exactly
        pen = lam * np.eye(gram.shape[0])
        pen[0, 0] = 0.0
        coef = np.linalg.solve(gram + pen, phi.T @ targets)
    return phi @ coef


def solve_bsde_lsmc(sim: SimulatedPaths, c: GameCoefficients, terminal=None, features=FEATURES,
                    degree: int = 2, driver=None) -> BsdeSolution:
    """Regression-based backward recursion over a simulated batch.

    Conditional expectations of y_{k+1} and y_{k+1} dB_k are regressions on a
    polynomial basis (degree <= ``degree``) of standardized path features.
    The reported stderr is that of the pathwise cost m(X_T) + sum l dt.
    """
    N, K = sim.n_paths, sim.n_steps
    m0 = sim.prefix_len
    dt = sim.dt
    n_basis = len(list(itertools.chain.from_iterable(
        itertools.combinations_with_replacement(range(len(features) * c.n), d) for d in range(degree + 1))))
    if N < 10 * n_basis:
        raise ValueError(f"need at least {10 * n_basis} paths for a {n_basis}-function basis, got {N}")
    driver = driver or c.driver
    times = sim.times
    y_next = c.terminal(times, sim.states) if terminal is None else np.asarray(terminal, dtype=float)
    pathwise = y_next.copy()
    ys = [None] * (K + 1)
    qs = [None] * K
    ys[K] = y_next
    for k in range(K - 1, -1, -1):
        j = m0 - 1 + k
        tt = times[: j + 1]
        X, U, V = sim.states[:, : j + 1], sim.u[:, : j + 1], sim.v[:, : j + 1]
        phi = _basis(path_features(tt, X, features), degree)
        dB = sim.increments[:, k]
        ey = _regress(phi, ys[k + 1])
        q = np.stack([_regress(phi, ys[k + 1] * dB[:, i]) for i in range(c.p)], axis=1) / dt
        y = ey.copy()
        for _ in range(FIXED_POINT_ITERS):
            y_new = ey + dt * driver(tt, X, y, q, U, V)
            done = np.all(np.abs(y_new - y) <= FIXED_POINT_TOL * (1 + np.abs(y_new)))
            y = y_new
            if done:
                break
        if not np.all(np.isfinite(y)):
            raise NumericalFailure(f"non-finite regression value at step {k}")
        ys[k], qs[k] = y, q
        pathwise += dt * driver(tt, X, y, q, U, V)
    stderr = float(pathwise.std(ddof=1) / np.sqrt(N))
    return BsdeSolution(ys, qs, float(np.mean(ys[0])), stderr, {"features": list(features), "degree": degree})


def objective_J_lsmc(c: GameCoefficients, initial: Path, u, v, bb: BrownianBatch, features=FEATURES,
                     degree: int = 2, z0=None, w0=None) -> BsdeSolution:
    """J by forward simulation and regression; ``value`` and ``stderr`` are set."""
    sim = simulate_sde(c, initial, u, v, bb, z0, w0)
    return solve_bsde_lsmc(sim, c, features=features, degree=degree)
