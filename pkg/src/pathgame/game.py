"""Lower and upper game values on scenario trees and by Monte Carlo.

On a tree the lower value (Player 1 plays a nonanticipative strategy
against Player 2's adapted control) is computed by backward induction over
(tree node, control history): at each decision node Player 2 commits first,
Player 1 answers, so the node value is ``max_v min_u Phi(u, v)`` with Phi the
one-step BSDE operator.  The upper value mirrors this with
``min_u max_v``.  A brute-force enumeration of strategy tables is kept as an
independent oracle.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import (BudgetExceeded, implicit_step, objective_J_lsmc, semigroup_pi, build_tree,
                   solve_bsde_lsmc, tree_increments, FEATURES)
from .dynamics import BrownianBatch, GameCoefficients, NumericalFailure, simulate_sde
from .paths import CadlagPath, ControlSet, Path, d_infty, flat_extend

ENUMERATION_BUDGET = 10 ** 7
CHUNK_ROWS = 200_000


@dataclass
class ValueEstimate:
    value: float
    method: str
    stderr: float | None = None
    metadata: dict = field(default_factory=dict)


def _as_candidates(grid, dim):
    """Normalize a control grid into a callable (k, times, X, U, V) -> (N, K, dim)."""
    if callable(grid):
        return grid
    if isinstance(grid, ControlSet):
        pts = grid.grid()
    elif grid is None:
        pts = np.zeros((1, dim))
    else:
        pts = np.asarray(grid, dtype=float).reshape(-1, dim) if dim else np.zeros((1, 0))
    if pts.shape[1] != dim:
        raise ValueError(f"control grid has dimension {pts.shape[1]}, expected {dim}")
    return lambda k, times, X, U, V: np.broadcast_to(pts, (X.shape[0],) + pts.shape)


def _grid_size(grid, dim):
    if callable(grid):
        return None
    if isinstance(grid, ControlSet):
        return grid.grid().shape[0]
    if grid is None:
        return 1
    return np.asarray(grid, dtype=float).reshape(-1, dim).shape[0] if dim else 1


@dataclass
class _GameContext:
    c: GameCoefficients
    times: np.ndarray
    prefix_len: int
    n_steps: int
    dt: float
    incr: np.ndarray
    probs: np.ndarray
    cand_u: Callable
    cand_v: Callable
    evaluations: int = 0


def _make_context(c, initial, horizon, n_steps, branching, u_grid, v_grid):
    t0 = initial.t_end
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    if n_steps and not horizon > t0:
        raise ValueError(f"horizon {horizon} must exceed the initial time {t0}")
    dt = (horizon - t0) / n_steps if n_steps else 0.0
    incr, probs = tree_increments(branching, c.p, dt if n_steps else 1.0)
    times = np.concatenate([initial.grid, t0 + dt * np.arange(1, n_steps + 1)])
    return _GameContext(c, times, initial.grid.size, n_steps, dt, incr, probs,
                        _as_candidates(u_grid, c.m_u), _as_candidates(v_grid, c.l_v))


def _initial_arrays(c, initial, z0, w0):
    X = initial.values[None, :, :].copy()
    U = (z0.at(initial.grid)[None] if z0 is not None else np.zeros((1, initial.grid.size, c.m_u))).copy()
    V = (w0.at(initial.grid)[None] if w0 is not None else np.zeros((1, initial.grid.size, c.l_v))).copy()
    if U.shape[2] != c.m_u or V.shape[2] != c.l_v:
        raise ValueError("control prefix dimensions do not match the coefficients")
    return X, U, V


def _count_rows(branching_total, ku, kv, depth):
    per = branching_total * ku * kv
    return sum(per ** k * ku * kv for k in range(depth))


def _expand(ctx: _GameContext, k, X, U, V):
    """Decision rows for every (node, u, v) and their children."""
    c = ctx.c
    tt = ctx.times[: ctx.prefix_len + k]
    cu = np.asarray(ctx.cand_u(k, tt, X, U, V), dtype=float)
    cv = np.asarray(ctx.cand_v(k, tt, X, U, V), dtype=float)
    N, Ku, Kv = X.shape[0], cu.shape[1], cv.shape[1]
    rows = N * Ku * Kv
    Xd = np.repeat(X, Ku * Kv, axis=0)
    Ud = np.repeat(U, Ku * Kv, axis=0)
    Vd = np.repeat(V, Ku * Kv, axis=0)
    Ud[:, -1] = np.repeat(cu, Kv, axis=1).reshape(rows, c.m_u)
    Vd[:, -1] = np.tile(cv, (1, Ku, 1)).reshape(rows, c.l_v)
    return tt, Xd, Ud, Vd, Ku, Kv


def _children(ctx: _GameContext, tt, Xd, Ud, Vd):
    c = ctx.c
    B = ctx.probs.size
    drift = c.drift(tt, Xd, Ud, Vd)
    sig = c.diffusion(tt, Xd, Ud, Vd)
    nxt = Xd[:, -1][:, None, :] + (drift * ctx.dt)[:, None, :] + np.einsum("inp,bp->ibn", sig, ctx.incr)
    if not np.all(np.isfinite(nxt)):
        raise NumericalFailure("non-finite state while expanding the game tree")
    Xc = np.concatenate([np.repeat(Xd, B, axis=0), nxt.reshape(-1, 1, c.n)], axis=1)
    Uc = np.repeat(np.concatenate([Ud, Ud[:, -1:]], axis=1), B, axis=0)
    Vc = np.repeat(np.concatenate([Vd, Vd[:, -1:]], axis=1), B, axis=0)
    return Xc, Uc, Vc


def _game_values(ctx: _GameContext, k, X, U, V, side, stop, leaf):
    """Values (N,) of the game started at the depth-k nodes X, U, V."""
    if k == stop:
        return leaf(k, X, U, V)
    N = X.shape[0]
    per_node = ctx.probs.size * 9  # rough child count for chunking
    if N > 1 and N * per_node > CHUNK_ROWS:
        size = max(1, CHUNK_ROWS // per_node)
        parts = [_game_values(ctx, k, X[i:i + size], U[i:i + size], V[i:i + size], side, stop, leaf)
                 for i in range(0, N, size)]
        return np.concatenate(parts)
    tt, Xd, Ud, Vd, Ku, Kv = _expand(ctx, k, X, U, V)
    ctx.evaluations += Xd.shape[0]
    Xc, Uc, Vc = _children(ctx, tt, Xd, Ud, Vd)
    y_children = _game_values(ctx, k + 1, Xc, Uc, Vc, side, stop, leaf)
    B = ctx.probs.size
    y, _ = implicit_step(ctx.c, tt, Xd, Ud, Vd, y_children.reshape(-1, B), ctx.incr, ctx.probs, ctx.dt)
    phi = y.reshape(N, Ku, Kv)
    if side == "lower":
        return phi.min(axis=1).max(axis=1)
    return phi.max(axis=2).min(axis=1)


def _terminal_leaf(ctx):
    def leaf(k, X, U, V):
        return ctx.c.terminal(ctx.times[: ctx.prefix_len + k], X)
    return leaf


def _check_side(side):
    if side not in ("lower", "upper"):
        raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")


def tree_value(c: GameCoefficients, initial: Path, z0: CadlagPath | None, w0: CadlagPath | None,
               horizon: float, n_steps: int, u_grid, v_grid, side: str = "lower", branching: int = 2,
               method: str = "backward_induction", budget: int = ENUMERATION_BUDGET,
               threads: int = 1, seed: int | None = None) -> ValueEstimate:
    """Lower or upper value on a scenario tree; ``seed`` is accepted and ignored."""
    _check_side(side)
    if method == "brute_force":
        return _brute_force(c, initial, z0, w0, horizon, n_steps, u_grid, v_grid, side, branching, budget)
    if method != "backward_induction":
        raise ValueError(f"unknown method {method!r}")
    ctx = _make_context(c, initial, horizon, n_steps, branching, u_grid, v_grid)
    ku, kv = _grid_size(u_grid, c.m_u), _grid_size(v_grid, c.l_v)
    if ku is not None and kv is not None:
        rows = _count_rows(ctx.probs.size, ku, kv, n_steps)
        if rows > budget:
            raise BudgetExceeded(
                f"backward induction needs {rows} decision evaluations (grids {ku}x{kv}, "
                f"{n_steps} steps, budget {budget}); use smaller grids or fewer steps")
    X, U, V = _initial_arrays(c, initial, z0, w0)
    leaf = _terminal_leaf(ctx)
    if n_steps == 0:
        value = float(leaf(0, X, U, V)[0])
    elif threads > 1:
        value = _threaded_root(ctx, X, U, V, side, leaf, threads)
    else:
        value = float(_game_values(ctx, 0, X, U, V, side, n_steps, leaf)[0])
    meta = {"side": side, "n_steps": n_steps, "branching": branching, "horizon": horizon,
            "u_grid_size": ku, "v_grid_size": kv, "evaluations": ctx.evaluations}
    return ValueEstimate(value, "tree_exact", None, meta)


def _threaded_root(ctx, X, U, V, side, leaf, threads):
    """Root expansion serially, subtrees in a thread pool, ordered reduction."""
    tt, Xd, Ud, Vd, Ku, Kv = _expand(ctx, 0, X, U, V)
    ctx.evaluations += Xd.shape[0]
    Xc, Uc, Vc = _children(ctx, tt, Xd, Ud, Vd)
    n = Xc.shape[0]
    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)

    def work(i):
        lo, hi = bounds[i], bounds[i + 1]
        return _game_values(ctx, 1, Xc[lo:hi], Uc[lo:hi], Vc[lo:hi], side, ctx.n_steps, leaf)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, range(len(bounds) - 1)))
    y_children = np.concatenate(parts)
    y, _ = implicit_step(ctx.c, tt, Xd, Ud, Vd, y_children.reshape(-1, ctx.probs.size),
                         ctx.incr, ctx.probs, ctx.dt)
    phi = y.reshape(1, Ku, Kv)
    val = phi.min(axis=1).max(axis=1) if side == "lower" else phi.max(axis=2).min(axis=1)
    return float(val[0])


def lower_value_tree(c, initial, z0, w0, horizon, n_steps, u_grid, v_grid, **kw) -> ValueEstimate:
    """inf over nonanticipative strategies of sup over adapted controls of J."""
    return tree_value(c, initial, z0, w0, horizon, n_steps, u_grid, v_grid, side="lower", **kw)


def upper_value_tree(c, initial, z0, w0, horizon, n_steps, u_grid, v_grid, **kw) -> ValueEstimate:
    """sup over nonanticipative strategies of inf over adapted controls of J."""
    return tree_value(c, initial, z0, w0, horizon, n_steps, u_grid, v_grid, side="upper", **kw)


# ---------------------------------------------------------------------------
# brute-force strategy enumeration (oracle)
# ---------------------------------------------------------------------------

def _indexed_objective(ctx, X0, U0, V0, u_idx, v_idx):
    """J on the plain scenario tree with control indices chosen per tree node."""
    c = ctx.c
    B = ctx.probs.size
    X, U, V = X0, U0.copy(), V0.copy()
    levels = []
    for k in range(ctx.n_steps):
        tt = ctx.times[: ctx.prefix_len + k]
        cu = np.asarray(ctx.cand_u(k, tt, X, U, V), dtype=float)
        cv = np.asarray(ctx.cand_v(k, tt, X, U, V), dtype=float)
        rows = np.arange(X.shape[0])
        U = U.copy()
        V = V.copy()
        U[:, -1] = cu[rows, u_idx[k]]
        V[:, -1] = cv[rows, v_idx[k]]
        levels.append((tt, X, U, V))
        X, U, V = _children(ctx, tt, X, U, V)
    y = c.terminal(ctx.times, X)
    for tt, Xk, Uk, Vk in reversed(levels):
        y, _ = implicit_step(c, tt, Xk, Uk, Vk, y.reshape(-1, B), ctx.incr, ctx.probs, ctx.dt)
    return float(y[0])


def _brute_force(c, initial, z0, w0, horizon, n_steps, u_grid, v_grid, side, branching, budget):
    ctx = _make_context(c, initial, horizon, n_steps, branching, u_grid, v_grid)
    X0, U0, V0 = _initial_arrays(c, initial, z0, w0)
    if n_steps == 0:
        return ValueEstimate(float(c.terminal(ctx.times, X0)[0]), "tree_exact", None, {"side": side})
    # sizes of the candidate sets (assumed constant across nodes)
    tt0 = ctx.times[: ctx.prefix_len]
    Ku = np.asarray(ctx.cand_u(0, tt0, X0, U0, V0)).shape[1]
    Kv = np.asarray(ctx.cand_v(0, tt0, X0, U0, V0)).shape[1]
    B = ctx.probs.size
    # the strategy player reacts to the opponent; the opponent plays one control per node
    k_str, k_opp = (Ku, Kv) if side == "lower" else (Kv, Ku)
    nodes = [B ** k for k in range(n_steps)]
    entries = [nodes[k] * k_opp ** (k + 1) for k in range(n_steps)]
    offsets = np.concatenate([[0], np.cumsum(entries)])
    n_tables = k_str ** int(offsets[-1])
    n_opp = k_opp ** int(sum(nodes))
    if n_tables * n_opp > budget:
        raise BudgetExceeded(
            f"brute force needs {n_tables} strategy tables x {n_opp} opponent controls "
            f"> budget {budget}; use smaller grids or fewer steps")
    results = np.empty((n_tables, n_opp))
    opp_list = list(itertools.product(range(k_opp), repeat=int(sum(nodes))))
    for j, opp in enumerate(opp_list):
        opp_levels, pos = [], 0
        for k in range(n_steps):
            opp_levels.append(np.array(opp[pos:pos + nodes[k]], dtype=int))
            pos += nodes[k]
        # history code of each node: opponent indices along its ancestry
        codes = []
        for k in range(n_steps):
            idx = np.arange(nodes[k])
            code = np.zeros(nodes[k], dtype=int)
            for d in range(k + 1):
                code = code * k_opp + opp_levels[d][idx // B ** (k - d)]
            codes.append(offsets[k] + idx * k_opp ** (k + 1) + code)
        for i, table in enumerate(itertools.product(range(k_str), repeat=int(offsets[-1]))):
            table = np.asarray(table, dtype=int)
            own = [table[codes[k]] for k in range(n_steps)]
            u_idx, v_idx = (own, opp_levels) if side == "lower" else (opp_levels, own)
            results[i, j] = _indexed_objective(ctx, X0, U0, V0, u_idx, v_idx)
    if side == "lower":
        value = float(results.max(axis=1).min())
    else:
        value = float(results.min(axis=1).max())
    meta = {"side": side, "n_steps": n_steps, "strategy_tables": n_tables, "opponent_controls": n_opp}
    return ValueEstimate(value, "tree_exact", None, meta)


# ---------------------------------------------------------------------------
# dynamic programming principle
# ---------------------------------------------------------------------------

@dataclass
class DppReport:
    lhs: float
    rhs: float
    abs_gap: float
    side: str
    split_step: int


def check_dpp(c: GameCoefficients, initial: Path, z0, w0, horizon: float, n_steps: int, split_step: int,
              u_grid, v_grid, side: str = "lower", branching: int = 2,
              budget: int = ENUMERATION_BUDGET) -> DppReport:
    """Compare the value with the semigroup applied to values at an intermediate time.

    The right side evaluates a fresh game (public API, rebuilt Path and
    CadlagPath inputs) at every node of depth ``split_step`` and propagates
    those values back to the root with the minimaxed one-step operator.
    """
    _check_side(side)
    if not 0 < split_step <= n_steps:
        raise ValueError(f"split step must lie in (0, {n_steps}]")
    lhs = tree_value(c, initial, z0, w0, horizon, n_steps, u_grid, v_grid, side, branching,
                     budget=budget).value
    ctx = _make_context(c, initial, horizon, n_steps, branching, u_grid, v_grid)
    remaining = n_steps - split_step

    def leaf(k, X, U, V):
        tt = ctx.times[: ctx.prefix_len + k]
        t1 = float(tt[-1])
        out = np.empty(X.shape[0])
        for i in range(X.shape[0]):
            a = Path(tt, X[i])
            z = CadlagPath(tt, U[i], t1) if c.m_u else None
            w = CadlagPath(tt, V[i], t1) if c.l_v else None
            out[i] = tree_value(c, a, z, w, horizon, remaining, u_grid, v_grid, side, branching,
                                budget=budget).value
        return out

    X, U, V = _initial_arrays(c, initial, z0, w0)
    rhs = float(_game_values(ctx, 0, X, U, V, side, split_step, leaf)[0])
    return DppReport(lhs, rhs, abs(lhs - rhs), side, split_step)


# ---------------------------------------------------------------------------
# regularity probes
# ---------------------------------------------------------------------------

@dataclass
class RegularityReport:
    scales: list
    distances: list
    differences: list
    ratios: list
    time_shifts: list = field(default_factory=list)
    time_ratios: list = field(default_factory=list)

    @property
    def max_growth(self) -> float:
        r = [x for x in self.ratios if x > 0]
        if len(r) < 2:
            return 1.0
        return max(b / a for a, b in zip(r[:-1], r[1:]))


def value_regularity_probe(c: GameCoefficients, initial: Path, z0, w0, horizon: float, n_steps: int,
                           u_grid, v_grid, bump, scales=(0.2, 0.1, 0.05, 0.025), side: str = "lower",
                           time_shifts=(), branching: int = 2) -> RegularityReport:
    """Empirical moduli of the value against input perturbations.

    ``bump`` is an array of the initial path's shape; the perturbed input is
    ``initial + s * bump`` for each scale s.  Time shifts compare the value at
    A_t with the value at the flat extension A_{t, tau}.
    """
    def value(a):
        return tree_value(c, a, z0 if a.t_end == initial.t_end else _extend(z0, a.t_end),
                          w0 if a.t_end == initial.t_end else _extend(w0, a.t_end),
                          horizon, n_steps, u_grid, v_grid, side, branching).value

    base = value(initial)
    bump = np.asarray(bump, dtype=float).reshape(initial.values.shape)
    dists, diffs, ratios = [], [], []
    for s in scales:
        pert = Path(initial.grid, initial.values + s * bump)
        d = d_infty(initial, pert)
        diff = abs(value(pert) - base)
        dists.append(d)
        diffs.append(diff)
        ratios.append(diff / d if d > 0 else 0.0)
    t_ratios = []
    for tau in time_shifts:
        shifted = flat_extend(initial, tau, horizon)
        diff = abs(value(shifted) - base)
        t_ratios.append(diff / (np.sqrt(tau) * (1 + initial.sup_norm())))
    return RegularityReport(list(scales), dists, diffs, ratios, list(time_shifts), t_ratios)


def _extend(z, t_end):
    return None if z is None else flat_extend(z, t_end - z.t_end)


# ---------------------------------------------------------------------------
# Monte Carlo values over parametric strategy families
# ---------------------------------------------------------------------------

def _family_matrix(c, initial, z0, w0, bb, u_family, v_family, features, degree):
    J = np.empty((len(u_family), len(v_family)))
    S = np.empty_like(J)
    for i, pu in enumerate(u_family):
        for j, pv in enumerate(v_family):
            sol = objective_J_lsmc(c, initial, pu, pv, bb, features, degree, z0, w0)
            J[i, j], S[i, j] = sol.value, sol.stderr
    return J, S


def value_lsmc(c: GameCoefficients, initial: Path, z0, w0, bb: BrownianBatch, u_family, v_family,
               side: str = "lower", features=FEATURES, degree: int = 2) -> ValueEstimate:
    """Min-max (or max-min) of regression-estimated J over finite policy families.

    All cells share the Brownian batch (common random numbers).  Policies
    are deterministic CadlagPaths or feedback callables as in simulate_sde.
    The optimization is over the family only, so the result brackets the
    game value only in that restricted sense.
    """
    _check_side(side)
    J, S = _family_matrix(c, initial, z0, w0, bb, u_family, v_family, features, degree)
    if side == "lower":
        # u responds to v: max over v of min over u, as on the tree
        best_u = J.argmin(axis=0)
        j = int(np.argmax(J[best_u, np.arange(J.shape[1])]))
        i = int(best_u[j])
    else:
        best_v = J.argmax(axis=1)
        i = int(np.argmin(J[np.arange(J.shape[0]), best_v]))
        j = int(best_v[i])
    meta = {"side": side, "matrix": J.tolist(), "stderr_matrix": S.tolist(), "u_index": i, "v_index": j,
            "batch": bb.describe()}
    return ValueEstimate(float(J[i, j]), "lsmc", float(S[i, j]), meta)


def lower_value_lsmc(c, initial, z0, w0, bb, u_family, v_family, **kw) -> ValueEstimate:
    return value_lsmc(c, initial, z0, w0, bb, u_family, v_family, side="lower", **kw)


def upper_value_lsmc(c, initial, z0, w0, bb, u_family, v_family, **kw) -> ValueEstimate:
    return value_lsmc(c, initial, z0, w0, bb, u_family, v_family, side="upper", **kw)
