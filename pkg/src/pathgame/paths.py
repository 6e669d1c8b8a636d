"""Path containers and path-space operations.

Continuous paths are piecewise linear on an explicit time grid; cadlag
(control) paths are right-continuous and piecewise constant.  Every operation
here is a pure function returning new objects.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

# Relative width of the pre-terminal segment used to represent a vertical bump
# inside a continuous container.
VERTICAL_EPS = 1e-9


def _as_2d(values, n_points=None):
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if n_points is None or arr.shape[0] == n_points else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"values must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def _freeze(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Path:
    """Continuous path on ``[0, t_end]``, linear between grid points."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float).reshape(-1)
        values = _as_2d(self.values, grid.shape[0])
        if grid.size == 0:
            raise ValueError("a path needs at least one grid point")
        if grid[0] != 0.0:
            raise ValueError(f"path grid must start at 0, got {grid[0]!r}")
        if grid.size > 1 and not np.all(np.diff(grid) > 0):
            raise ValueError("path grid must be strictly increasing")
        if values.shape[0] != grid.shape[0]:
            raise ValueError(f"{grid.shape[0]} grid points but {values.shape[0]} values")
        if not np.all(np.isfinite(values)):
            raise ValueError("path values must be finite")
        object.__setattr__(self, "grid", _freeze(grid))
        object.__setattr__(self, "values", _freeze(values))

    @classmethod
    def trusted(cls, grid, values) -> "Path":
        # Skips validation; callers guarantee the invariants (hot loops only).
        obj = object.__new__(cls)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "values", values)
        return obj

    @classmethod
    def constant(cls, value, t_end: float, n_points: int = 2) -> "Path":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        if t_end == 0:
            return cls([0.0], value.reshape(1, -1))
        grid = np.linspace(0.0, t_end, max(n_points, 2))
        return cls(grid, np.tile(value, (grid.size, 1)))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def t_end(self) -> float:
        return float(self.grid[-1])

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def at(self, s):
        """Linear interpolation; times beyond ``t_end`` see the flat extension."""
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("path evaluated before time 0")
        out = np.empty(s.shape + (self.dim,))
        for i in range(self.dim):
            out[..., i] = np.interp(s, self.grid, self.values[:, i])
        return out

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def restrict(self, t: float) -> "Path":
        """The path stopped at time ``t`` (``A_t``)."""
        if t < 0 or t > self.t_end:
            raise ValueError(f"cannot restrict path on [0, {self.t_end}] to [0, {t}]")
        keep = self.grid < t
        grid = np.append(self.grid[keep], t)
        values = np.vstack([self.values[keep], self.at(t)[None, :]])
        return Path(grid, values)

    def equals(self, other: "Path") -> bool:
        return (
            isinstance(other, Path)
            and np.array_equal(self.grid, other.grid)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class CadlagPath:
    """Right-continuous piecewise-constant path on ``[grid[0], t_end]``.

    The value at ``s`` is ``values[i]`` for the largest ``grid[i] <= s``.
    """

    grid: np.ndarray
    values: np.ndarray
    t_end: float = None

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float).reshape(-1)
        values = _as_2d(self.values, grid.shape[0])
        if grid.size == 0:
            raise ValueError("a cadlag path needs at least one grid point")
        if grid.size > 1 and not np.all(np.diff(grid) > 0):
            raise ValueError("cadlag grid must be strictly increasing")
        if values.shape[0] != grid.shape[0]:
            raise ValueError(f"{grid.shape[0]} grid points but {values.shape[0]} values")
        t_end = float(grid[-1]) if self.t_end is None else float(self.t_end)
        if t_end < grid[-1]:
            raise ValueError(f"t_end={t_end} precedes the last grid point {grid[-1]}")
        object.__setattr__(self, "grid", _freeze(grid))
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "t_end", t_end)

    @classmethod
    def trusted(cls, grid, values, t_end) -> "CadlagPath":
        obj = object.__new__(cls)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "values", values)
        object.__setattr__(obj, "t_end", t_end)
        return obj

    @classmethod
    def constant(cls, value, t_start: float, t_end: float) -> "CadlagPath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls([t_start], value.reshape(1, -1), t_end)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def t_start(self) -> float:
        return float(self.grid[0])

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def at(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < self.grid[0]):
            raise ValueError(f"cadlag path starting at {self.grid[0]} evaluated at an earlier time")
        idx = np.searchsorted(self.grid, s, side="right") - 1
        return self.values[idx]

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def restrict(self, t: float) -> "CadlagPath":
        if t < self.grid[0] or t > self.t_end:
            raise ValueError(f"cannot restrict cadlag path on [{self.grid[0]}, {self.t_end}] to end at {t}")
        keep = self.grid <= t
        return CadlagPath(self.grid[keep], self.values[keep], t)

    def equals(self, other: "CadlagPath") -> bool:
        return (
            isinstance(other, CadlagPath)
            and self.t_end == other.t_end
            and np.array_equal(self.grid, other.grid)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class HolderBall:
    """The set of paths with kappa-Hoelder modulus <= mu and sup-norm <= mu0."""

    kappa: float
    mu: float
    mu0: float

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.mu <= 0 or self.mu0 <= 0:
            raise ValueError("mu and mu0 must be positive")

    @property
    def viscosity_ready(self) -> bool:
        return self.kappa < 0.5


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Compact control set: either an explicit finite grid or a box."""

    points: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    _tol: float = field(default=1e-12, repr=False)

    def __post_init__(self):
        if (self.points is None) == (self.lower is None or self.upper is None):
            raise ValueError("give either finite points or both box bounds")
        if self.points is not None:
            pts = _as_2d(self.points)
            if pts.shape[0] == 0:
                raise ValueError("control set must be nonempty")
            object.__setattr__(self, "points", _freeze(pts))
        else:
            lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
            hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
            if lo.shape != hi.shape or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise ValueError("box bounds must be finite and of equal length")
            if np.any(lo > hi):
                raise ValueError("box lower bound exceeds upper bound")
            object.__setattr__(self, "lower", _freeze(lo))
            object.__setattr__(self, "upper", _freeze(hi))

    @classmethod
    def finite(cls, points) -> "ControlSet":
        return cls(points=points)

    @classmethod
    def box(cls, lower, upper) -> "ControlSet":
        return cls(lower=lower, upper=upper)

    @property
    def dim(self) -> int:
        return self.points.shape[1] if self.points is not None else self.lower.size

    @property
    def is_box(self) -> bool:
        return self.points is None

    def contains(self, u) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (self.dim,):
            return False
        if self.is_box:
            return bool(np.all(u >= self.lower - self._tol) and np.all(u <= self.upper + self._tol))
        return bool(np.any(np.all(np.abs(self.points - u) <= self._tol, axis=1)))

    def grid(self, n_per_axis: int = 3) -> np.ndarray:
        """Finite grid of points (the explicit points, or a product grid of the box)."""
        if not self.is_box:
            return self.points
        axes = [np.linspace(lo, hi, n_per_axis) if hi > lo else np.array([lo])
                for lo, hi in zip(self.lower, self.upper)]
        return np.array(list(itertools.product(*axes)), dtype=float)

    def clip(self, u):
        if not self.is_box:
            raise ValueError("clip is only defined for box control sets")
        return np.clip(u, self.lower, self.upper)


# ---------------------------------------------------------------------------
# extensions and concatenation
# ---------------------------------------------------------------------------

def flat_extend(p, delta: float, horizon: float | None = None):
    """Hold the terminal value of ``p`` constant for ``delta`` more time units."""
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")
    t_end = p.t_end
    if horizon is not None and t_end + delta > horizon * (1 + 1e-14):
        raise ValueError(
            f"flat extension overflows the horizon: T={horizon}, t_end={t_end}, delta={delta}"
        )
    if delta == 0:
        return p
    if isinstance(p, CadlagPath):
        return CadlagPath.trusted(p.grid, p.values, t_end + delta)
    grid = np.append(p.grid, t_end + delta)
    values = np.vstack([p.values, p.values[-1:]])
    return Path.trusted(_freeze(grid), _freeze(values))


def vertical_refine(p: Path, horizon: float | None = None) -> Path:
    """Insert the pre-terminal point used by vertical bumps, without bumping.

    The new point sits at ``t_end - VERTICAL_EPS * T`` and holds the terminal
    value, so bumped and unbumped paths share everything but the last value.
    """
    if p.grid.size == 1:
        return p
    t_end = p.t_end
    eps_v = VERTICAL_EPS * (horizon if horizon is not None else max(t_end, 1.0))
    if p.grid[-2] >= t_end - eps_v * (1 + 1e-6):
        return p
    grid = np.concatenate([p.grid[:-1], [t_end - eps_v, t_end]])
    values = np.vstack([p.values, p.values[-1:]])
    return Path.trusted(_freeze(grid), _freeze(values))


def vertical_extend(p: Path, h, horizon: float | None = None) -> Path:
    """Bump only the terminal value of ``p`` by ``h``.

    The jump is realized as a steep pre-terminal segment of width
    ``VERTICAL_EPS * T`` (see :func:`vertical_refine`) so the result stays a
    continuous path.  A path whose last segment is already that short is
    bumped in place, which makes successive bumps additive.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.shape != (p.dim,):
        raise ValueError(f"bump has shape {h.shape}, path dimension is {p.dim}")
    if not np.any(h):
        return p
    base = vertical_refine(p, horizon)
    values = base.values.copy()
    values[-1] = values[-1] + h
    return Path.trusted(base.grid, _freeze(values))


def concat(init: CadlagPath, tail: CadlagPath, control_set: ControlSet | None = None) -> CadlagPath:
    """``init`` on ``[0, t)`` followed by ``tail`` on ``[t, T]``."""
    t = tail.t_start
    if abs(init.t_end - t) > 1e-12 * max(1.0, abs(t)):
        raise ValueError(f"time mismatch: init ends at {init.t_end}, tail starts at {t}")
    if init.dim != tail.dim:
        raise ValueError(f"dimension mismatch: {init.dim} vs {tail.dim}")
    if control_set is not None:
        for u in itertools.chain(init.values, tail.values):
            if not control_set.contains(u):
                raise ValueError(f"control value {u} lies outside the control set")
    keep = init.grid < t
    grid = np.concatenate([init.grid[keep], tail.grid])
    values = np.vstack([init.values[keep], tail.values])
    return CadlagPath(grid, values, tail.t_end)


def vertical_control_sub(z: CadlagPath, u, control_set: ControlSet | None = None) -> CadlagPath:
    """Replace the value of ``z`` at its final time ``t`` by the control ``u``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (z.dim,):
        raise ValueError(f"control has shape {u.shape}, path dimension is {z.dim}")
    if control_set is not None and not control_set.contains(u):
        raise ValueError(f"control value {u} lies outside the control set")
    t = z.t_end
    if np.array_equal(z.at(t), u):
        return z
    if z.grid[-1] == t:
        values = z.values.copy()
        values[-1] = u
        return CadlagPath.trusted(z.grid, _freeze(values), t)
    grid = np.append(z.grid, t)
    values = np.vstack([z.values, u[None, :]])
    return CadlagPath.trusted(_freeze(grid), _freeze(values), t)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _check_dims(p, q):
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")


def d_infty(p, q) -> float:
    """``|t - t'| + sup |flat(p) - q|`` with the shorter path flat-extended.

    Exact for piecewise-linear and piecewise-constant paths: the sup of the
    difference is attained on the union of the two grids.
    """
    _check_dims(p, q)
    if p.t_end > q.t_end:
        p, q = q, p
    pts = np.union1d(p.grid, q.grid)
    pts = pts[pts <= q.t_end]
    if isinstance(q, CadlagPath):
        pts = pts[pts >= max(p.grid[0], q.grid[0])]
    diff = np.linalg.norm(p.at(pts) - q.at(pts), axis=1)
    return abs(q.t_end - p.t_end) + float(np.max(diff))


def sup_distance(p, q) -> float:
    """``||p - q||_inf`` for two paths on the same horizon."""
    return d_infty(p, q) - abs(p.t_end - q.t_end)


def _jump_times(p: CadlagPath, horizon: float) -> np.ndarray:
    changed = np.any(p.values[1:] != p.values[:-1], axis=1)
    times = p.grid[1:][changed]
    return times[(times > 0) & (times < horizon)]


def _deformed_sup(p, q, a0, b0, a1, b1, qjumps):
    """sup over r in [a0, a1) of |p(r) - q(iota(r))| with iota linear a->b."""
    scale = (a1 - a0) / (b1 - b0)
    inner_q = qjumps[(qjumps > b0) & (qjumps < b1)]
    inner_p = p.grid[(p.grid > a0) & (p.grid < a1)]
    breaks = np.unique(np.concatenate([[a0, a1], inner_p, a0 + (inner_q - b0) * scale]))
    mids = 0.5 * (breaks[:-1] + breaks[1:])
    iota = b0 + (mids - a0) / scale
    return float(np.max(np.linalg.norm(p.at(mids) - q.at(iota), axis=1)))


def skorohod_d(p: CadlagPath, q: CadlagPath, max_jumps: int = 60) -> float:
    """Upper approximation of the Skorohod distance between two cadlag paths.

    The shorter path is flat-extended to the common horizon.  Time deformations
    are restricted to piecewise-linear maps that send jump times of ``p`` to
    jump times of ``q``; the best such map is found by a bottleneck dynamic
    programme over monotone jump matchings.  The identity map is always a
    candidate, so the result never exceeds the sup distance.
    """
    if not (isinstance(p, CadlagPath) and isinstance(q, CadlagPath)):
        raise TypeError("skorohod_d expects two CadlagPath objects")
    _check_dims(p, q)
    if p.t_end > q.t_end:
        p, q = q, p
    horizon = q.t_end
    start = max(p.grid[0], q.grid[0])
    a = np.concatenate([[start], _jump_times(p, horizon), [horizon]])
    b = np.concatenate([[start], _jump_times(q, horizon), [horizon]])
    if a.size > max_jumps or b.size > max_jumps:
        raise ValueError(f"too many jumps for the alignment search ({a.size}, {b.size} > {max_jumps})")
    end_gap = float(np.linalg.norm(p.at(horizon) - q.at(horizon)))
    if horizon == start:
        return end_gap
    qjumps = q.grid
    na, nb = a.size, b.size
    best = np.full((na, nb), np.inf)
    best[0, 0] = 0.0
    for i in range(1, na):
        for j in range(1, nb):
            # the final anchor must be the common horizon on both sides
            if (i == na - 1) != (j == nb - 1):
                continue
            anchor = abs(a[i] - b[j])
            cand = np.inf
            for i0 in range(i):
                for j0 in range(j):
                    prev = best[i0, j0]
                    if prev >= cand:
                        continue
                    cost = max(prev, anchor, abs(a[i0] - b[j0]),
                               _deformed_sup(p, q, a[i0], b[j0], a[i], b[j], qjumps))
                    cand = min(cand, cost)
            best[i, j] = cand
    return max(float(best[-1, -1]), end_gap)


def d_infty_prime(p: CadlagPath, q: CadlagPath) -> float:
    """``|t - t'|`` plus the (approximate) Skorohod distance."""
    return abs(p.t_end - q.t_end) + skorohod_d(p, q)


# ---------------------------------------------------------------------------
# Hoelder balls
# ---------------------------------------------------------------------------

def holder_modulus(p: Path, kappa: float) -> float:
    """Max of ``|a_s - a_r| / |s - r|**kappa`` over grid pairs ``s < r``."""
    if not 0 < kappa <= 1:
        raise ValueError(f"kappa must lie in (0, 1], got {kappa}")
    if p.grid.size < 2:
        return 0.0
    g, v = p.grid, p.values
    best = 0.0
    # row-by-row keeps memory linear in the grid size
    for i in range(g.size - 1):
        num = np.linalg.norm(v[i + 1:] - v[i], axis=1)
        den = (g[i + 1:] - g[i]) ** kappa
        best = max(best, float(np.max(num / den)))
    return best


def in_holder_ball(p: Path, ball: HolderBall) -> bool:
    return holder_modulus(p, ball.kappa) <= ball.mu and p.sup_norm() <= ball.mu0


def perturb_path(p: Path, ball: HolderBall, epsilon: float) -> Path:
    """Radially pull each past value toward the terminal value.

    Values within ``(mu - eps) |t - r|**kappa`` of ``a_t`` are kept; the others
    are moved onto that sphere around ``a_t``.
    """
    if not 0 < epsilon <= ball.mu / 2:
        raise ValueError(f"epsilon must lie in (0, mu/2] = (0, {ball.mu / 2}], got {epsilon}")
    if not in_holder_ball(p, ball):
        raise ValueError("perturb_path requires a path inside the Hoelder ball")
    a_t = p.values[-1]
    diff = p.values - a_t
    dist = np.linalg.norm(diff, axis=1)
    radius = (ball.mu - epsilon) * (p.t_end - p.grid) ** ball.kappa
    out = p.values.copy()
    clamp = dist > radius
    out[clamp] = a_t + radius[clamp, None] * diff[clamp] / dist[clamp, None]
    return Path(p.grid, out)


def sample_holder_ball(
    ball: HolderBall,
    t_end: float,
    grid_size: int,
    seed: int,
    dim: int = 1,
    max_rejections: int = 100,
) -> Path:
    """Draw a random path from the Hoelder ball (deterministic per seed).

    A Brownian path with a random start and drift is shrunk toward zero until
    both the modulus and the sup-norm constraints hold.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, t_end, grid_size)
    dt = np.diff(grid)
    for _ in range(max_rejections):
        start = rng.uniform(-1.0, 1.0, size=dim) * ball.mu0
        drift = rng.normal(size=dim) * ball.mu
        steps = rng.normal(size=(grid_size - 1, dim)) * np.sqrt(dt)[:, None] * ball.mu
        steps += drift * dt[:, None]
        values = np.vstack([start, start + np.cumsum(steps, axis=0)])
        raw = Path(grid, values)
        mod = holder_modulus(raw, ball.kappa)
        sup = raw.sup_norm()
        shrink = min(1.0, ball.mu / mod if mod > 0 else np.inf, ball.mu0 / sup if sup > 0 else np.inf)
        shrink *= rng.uniform(0.25, 1.0) * (1 - 1e-12)
        cand = Path(grid, values * shrink)
        if in_holder_ball(cand, ball):
            return cand
    raise RuntimeError(
        f"no path found in the Hoelder ball after {max_rejections} draws; "
        "try a larger mu or mu0"
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def path_to_json(p) -> str:
    kind = "cadlag" if isinstance(p, CadlagPath) else "continuous"
    obj = {"kind": kind, "grid": p.grid.tolist(), "values": p.values.tolist()}
    if kind == "cadlag":
        obj["t_end"] = p.t_end
    return json.dumps(obj)


def path_from_json(text: str):
    obj = json.loads(text)
    kind = obj.get("kind")
    if kind == "continuous":
        return Path(obj["grid"], np.array(obj["values"], dtype=float))
    if kind == "cadlag":
        return CadlagPath(obj["grid"], np.array(obj["values"], dtype=float), obj["t_end"])
    raise ValueError(f"unknown path kind {kind!r}")


def path_to_csv(p) -> str:
    buf = io.StringIO()
    kind = "cadlag" if isinstance(p, CadlagPath) else "continuous"
    buf.write(f"# kind={kind} t_end={p.t_end!r}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time"] + [f"v{i}" for i in range(p.dim)])
    for s, row in zip(p.grid, p.values):
        writer.writerow([repr(float(s))] + [repr(float(x)) for x in row])
    return buf.getvalue()


def path_from_csv(text: str):
    lines = text.splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for token in lines[0][1:].split():
            key, _, val = token.partition("=")
            meta[key] = val
        lines = lines[1:]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    if header[0] != "time":
        raise ValueError("first CSV column must be 'time'")
    data = np.array([[float(x) for x in row] for row in body], dtype=float).reshape(len(body), len(header))
    grid, values = data[:, 0], data[:, 1:]
    if meta.get("kind", "continuous") == "cadlag":
        return CadlagPath(grid, values, float(meta["t_end"]))
    return Path(grid, values)
