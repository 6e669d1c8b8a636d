"""Config-driven experiment runner.

    python3 -m pathgame run config.yaml [--output-dir DIR] [--threads K]
    python3 -m pathgame catalog [--json]

Exit codes: 0 success, 2 config error, 3 budget exceeded, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .bsde import BudgetExceeded
from .catalog import CATALOG, catalog_description, ito_families, make_instance, riccati_functional
from .dynamics import BrownianBatch, NumericalFailure
from .functional import verify_functional_ito
from .game import check_dpp, tree_value, value_lsmc
from .hji import CandidateSolution, HamiltonianInput, isaacs_gap, phji_residual, terminal_gap
from .paths import CadlagPath, ControlSet, HolderBall, Path, sample_holder_ball
from .riccati import LQParams, solve_riccati

log = logging.getLogger(__name__)

THREADS_ENV = "PATHGAME_THREADS"
METHODS = ("tree", "lsmc", "residual", "dpp_check", "isaacs", "ito_verify")
ITO_ROUNDOFF = 1e-8
EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class Numerics:
    n_steps: int | list = 2
    branching: int = 2
    x0: list = field(default_factory=lambda: [1.0])
    u_grid: list = field(default_factory=lambda: [-1.0, 0.0, 1.0])
    v_grid: list = field(default_factory=lambda: [-1.0, 0.0, 1.0])
    sides: list = field(default_factory=lambda: ["lower", "upper"])
    split_step: int = 1
    n_paths: int = 1000
    degree: int = 2
    u_gains: list = field(default_factory=lambda: [-1.5, -1.0, -0.5])
    v_gains: list = field(default_factory=lambda: [0.0, 0.5, 1.0])
    samples: int = 20
    ball: dict = field(default_factory=lambda: {"kappa": 0.4, "mu": 2.0, "mu0": 2.0})
    families: list = field(default_factory=lambda: ["identity", "square", "integral"])


@dataclass
class ExperimentConfig:
    seed: int
    instance: str
    params: dict
    method: str
    numerics: Numerics
    output: str | None = None

    def canonical(self) -> dict:
        """Everything that determines the results (the output location does not)."""
        return {"seed": self.seed, "instance": self.instance, "params": self.params, "method": self.method,
                "numerics": asdict(self.numerics)}

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _strict(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def parse_config(data: dict) -> ExperimentConfig:
    _strict(data, {"seed", "instance", "method", "numerics", "output"}, "config")
    if "seed" not in data or isinstance(data["seed"], bool) or not isinstance(data["seed"], int):
        raise ConfigError("seed: a non-negative integer seed is mandatory")
    if data["seed"] < 0:
        raise ConfigError("seed: must be non-negative")
    inst = data.get("instance")
    if isinstance(inst, str):
        inst = {"name": inst}
    if inst is None:
        raise ConfigError("instance: missing")
    _strict(inst, {"name", "params"}, "instance")
    name = inst.get("name")
    if name not in CATALOG:
        raise ConfigError(f"instance.name: unknown instance {name!r}; known: {sorted(CATALOG)}")
    params = dict(inst.get("params") or {})
    unknown = set(params) - set(CATALOG[name].schema)
    if unknown:
        raise ConfigError(f"instance.params: unknown key(s) {sorted(unknown)}")
    method = data.get("method")
    if method not in METHODS:
        raise ConfigError(f"method: must be one of {list(METHODS)}, got {method!r}")
    num_in = data.get("numerics") or {}
    _strict(num_in, {f.name for f in fields(Numerics)}, "numerics")
    numerics = Numerics(**num_in)
    _validate_numerics(numerics, method)
    out = data.get("output")
    if out is not None:
        if isinstance(out, dict):
            _strict(out, {"directory"}, "output")
            out = out.get("directory")
        if not isinstance(out, str):
            raise ConfigError("output.directory: expected a string")
    return ExperimentConfig(data["seed"], name, params, method, numerics, out)


def _validate_numerics(n: Numerics, method: str):
    steps = n.n_steps if isinstance(n.n_steps, list) else [n.n_steps]
    if not steps or any(not isinstance(s, int) or s < 1 for s in steps):
        raise ConfigError("numerics.n_steps: positive integer(s) required")
    if method != "ito_verify" and isinstance(n.n_steps, list):
        raise ConfigError("numerics.n_steps: a list is only allowed for ito_verify")
    if not isinstance(n.branching, int) or n.branching < 2:
        raise ConfigError("numerics.branching: integer >= 2 required")
    if any(s not in ("lower", "upper") for s in n.sides) or not n.sides:
        raise ConfigError("numerics.sides: entries must be 'lower' or 'upper'")
    if not isinstance(n.n_paths, int) or n.n_paths < 1:
        raise ConfigError("numerics.n_paths: positive integer required")
    if method == "dpp_check" and not 0 < n.split_step <= steps[0]:
        raise ConfigError("numerics.split_step: must lie in (0, n_steps]")
    _strict(n.ball, {"kappa", "mu", "mu0"}, "numerics.ball")
    fam = set(n.families) - set(ito_families())
    if fam:
        raise ConfigError(f"numerics.families: unknown {sorted(fam)}")


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    if data is None:
        data = {}
    return parse_config(data)


# ---------------------------------------------------------------------------
# methods
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def _setup(cfg: ExperimentConfig):
    c = make_instance(cfg.instance, cfg.params)
    horizon = float({**CATALOG[cfg.instance].schema, **cfg.params}["horizon"])
    x0 = np.asarray(cfg.numerics.x0, dtype=float).reshape(-1)
    if x0.size != c.n:
        raise ConfigError(f"numerics.x0: expected {c.n} entries, got {x0.size}")
    return c, horizon, Path.constant(x0, 0.0)


def _grid(values, dim, name):
    arr = np.asarray(values, dtype=float)
    try:
        return arr.reshape(-1, dim)
    except ValueError as exc:
        raise ConfigError(f"numerics.{name}: cannot be shaped into points of dimension {dim}") from exc


def _run_tree(cfg, threads):
    c, T, a0 = _setup(cfg)
    n = cfg.numerics
    ug, vg = _grid(n.u_grid, c.m_u, "u_grid"), _grid(n.v_grid, c.l_v, "v_grid")
    rows, vals = [], {}
    for side in n.sides:
        est = tree_value(c, a0, None, None, T, n.n_steps, ug, vg, side, n.branching, threads=threads)
        vals[side] = est.value
        rows.append([side, est.value, 0.0])
    gap = vals["upper"] - vals["lower"] if len(vals) == 2 else float("nan")
    return {"values.csv": _csv(["side", "value", "stderr"], rows)}, vals, {"value": vals.get("lower", vals.get(
        "upper")), "stderr": 0.0, "gap": gap}


def _gain_family(gains, dim, state_dim):
    fam = []
    for g in gains:
        g = float(g)

        def policy(k, times, X, U, V, g=g):
            return np.repeat(g * X[:, -1, :1], dim, axis=1)

        fam.append(policy)
    return fam


def _run_lsmc(cfg, threads):
    c, T, a0 = _setup(cfg)
    n = cfg.numerics
    bb = BrownianBatch(n.n_paths, n.n_steps, 0.0, T, c.p, cfg.seed)
    uf, vf = _gain_family(n.u_gains, c.m_u, c.n), _gain_family(n.v_gains, c.l_v, c.n)
    rows, vals, errs = [], {}, {}
    mats = {}
    for side in n.sides:
        est = value_lsmc(c, a0, None, None, bb, uf, vf, side, degree=n.degree)
        vals[side], errs[side] = est.value, est.stderr
        mats[side] = est.metadata
        rows.append([side, est.value, est.stderr])
    matrix = mats[n.sides[0]]
    cells = [[float(n.u_gains[i]), float(n.v_gains[j]), matrix["matrix"][i][j], matrix["stderr_matrix"][i][j]]
             for i in range(len(n.u_gains)) for j in range(len(n.v_gains))]
    arts = {"values.csv": _csv(["side", "value", "stderr"], rows),
            "policy_matrix.csv": _csv(["u_gain", "v_gain", "J", "stderr"], cells)}
    side0 = n.sides[0]
    gap = vals["upper"] - vals["lower"] if len(vals) == 2 else float("nan")
    return arts, vals, {"value": vals[side0], "stderr": errs[side0], "gap": gap}


def _run_dpp(cfg, threads):
    c, T, a0 = _setup(cfg)
    n = cfg.numerics
    ug, vg = _grid(n.u_grid, c.m_u, "u_grid"), _grid(n.v_grid, c.l_v, "v_grid")
    rows, gaps = [], []
    for side in n.sides:
        rep = check_dpp(c, a0, None, None, T, n.n_steps, n.split_step, ug, vg, side, n.branching)
        rows.append([side, rep.lhs, rep.rhs, rep.abs_gap])
        gaps.append(rep.abs_gap)
    return ({"dpp.csv": _csv(["side", "lhs", "rhs", "abs_gap"], rows)}, {"max_abs_gap": max(gaps)},
            {"value": rows[0][1], "stderr": 0.0, "gap": max(gaps)})


def _ball(n):
    return HolderBall(float(n.ball["kappa"]), float(n.ball["mu"]), float(n.ball["mu0"]))


def _run_isaacs(cfg, threads):
    c, T, _ = _setup(cfg)
    n = cfg.numerics
    ug, vg = _grid(n.u_grid, c.m_u, "u_grid"), _grid(n.v_grid, c.l_v, "v_grid")
    ball = _ball(n)
    rng = np.random.default_rng(cfg.seed)
    rows, gaps = [], []
    for i in range(n.samples):
        t = float(rng.uniform(0.05, 0.95) * T)
        a = sample_holder_ball(ball, t, 8, seed=[cfg.seed, i], dim=c.n)
        z = CadlagPath.constant(rng.uniform(-1, 1, c.m_u), 0.0, t) if c.m_u else None
        w = CadlagPath.constant(rng.uniform(-1, 1, c.l_v), 0.0, t) if c.l_v else None
        P = rng.normal(size=(c.n, c.n))
        inp = HamiltonianInput(a, z, w, float(rng.normal()), rng.normal(size=c.n), P + P.T)
        gap, raw = isaacs_gap(c, inp, None, ug, vg, return_raw=True)
        rows.append([i, t, gap, raw])
        gaps.append(gap)
    return ({"isaacs.csv": _csv(["sample", "t", "gap", "raw_gap"], rows)}, {"max_gap": max(gaps)},
            {"value": max(gaps), "stderr": 0.0, "gap": max(gaps)})


def _run_residual(cfg, threads):
    if cfg.instance != "lq":
        raise ConfigError("method: 'residual' needs the 'lq' instance (Riccati candidate)")
    c, T, _ = _setup(cfg)
    n = cfg.numerics
    params = {**CATALOG["lq"].schema, **cfg.params}
    sol = solve_riccati(LQParams.from_dict(params))
    cand = CandidateSolution(riccati_functional(sol), horizon=T)
    ug, vg = _grid(n.u_grid, c.m_u, "u_grid"), _grid(n.v_grid, c.l_v, "v_grid")
    lo = np.minimum(ug.min(axis=0), -4.0)
    hi = np.maximum(ug.max(axis=0), 4.0)
    U = ControlSet.box(lo, hi)
    V = ControlSet.box(np.minimum(vg.min(axis=0), -4.0), np.maximum(vg.max(axis=0), 4.0))
    ball = _ball(n)
    rng = np.random.default_rng(cfg.seed)
    rows, worst = [], 0.0
    for i in range(n.samples):
        t = float(rng.uniform(0.05, 0.95) * T)
        a = sample_holder_ball(ball, t, 8, seed=[cfg.seed, i], dim=c.n)
        aT = sample_holder_ball(ball, T, 8, seed=[cfg.seed, i, 1], dim=c.n)
        tg = terminal_gap(c, cand, aT)
        for side in n.sides:
            r = phji_residual(c, cand, a, side, U, V).residual
            rows.append([i, side, r, tg])
            worst = max(worst, abs(r))
    return ({"residuals.csv": _csv(["path_id", "side", "residual", "terminal_gap"], rows)},
            {"max_abs_residual": worst}, {"value": worst, "stderr": 0.0, "gap": float("nan")})


def _run_ito(cfg, threads):
    c, T, a0 = _setup(cfg)
    n = cfg.numerics
    steps = n.n_steps if isinstance(n.n_steps, list) else [n.n_steps]
    fams = ito_families()
    rows, reports = [], {}
    for name in n.families:
        for k in steps:
            rep = verify_functional_ito(fams[name], c, a0, n.n_paths, k, cfg.seed, horizon=T)
            rows.append([name, k, rep.max_err, rep.p95_err, rep.relative_err])
            reports.setdefault(name, []).append(rep.max_err)
    mono = {name: bool(all(b <= max(a, ITO_ROUNDOFF) for a, b in zip(v[:-1], v[1:])))
            for name, v in reports.items()}
    return ({"ito.csv": _csv(["family", "n_steps", "max_err", "p95_err", "relative_err"], rows)},
            {"nonincreasing": mono}, {"value": rows[-1][2], "stderr": 0.0, "gap": float("nan")})


RUNNERS = {"tree": _run_tree, "lsmc": _run_lsmc, "dpp_check": _run_dpp, "isaacs": _run_isaacs,
           "residual": _run_residual, "ito_verify": _run_ito}

LEDGER_FIELDS = ["instance_hash", "method", "value", "stderr", "gap", "seed", "timestamp"]


def _summary_text(cfg, digest, results):
    lines = [f"run {digest}", f"instance: {cfg.instance} {json.dumps(cfg.params, sort_keys=True)}",
             f"method: {cfg.method}", f"seed: {cfg.seed}",
             f"numerics: {json.dumps(asdict(cfg.numerics), sort_keys=True)}"]
    for k, v in sorted(results.items()):
        lines.append(f"{k}: {json.dumps(v, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def run(config_path: str, output_dir: str | None = None, threads: int | None = None) -> int:
    try:
        cfg = load_config(config_path)
        if threads is None:
            threads = int(os.environ.get(THREADS_ENV, "1"))
        if threads < 1:
            raise ConfigError("threads: must be >= 1")
        root = output_dir or cfg.output or "runs"
        digest = cfg.digest()
        arts, results, ledger_row = RUNNERS[cfg.method](cfg, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    run_dir = os.path.join(root, digest)
    os.makedirs(run_dir, exist_ok=True)
    report = {"config": cfg.canonical(), "digest": digest, "results": results}
    arts = dict(arts)
    arts["report.json"] = json.dumps(report, sort_keys=True, indent=2) + "\n"
    arts["config.json"] = json.dumps(cfg.canonical(), sort_keys=True, indent=2) + "\n"
    arts["summary.txt"] = _summary_text(cfg, digest, results)
    for name, text in arts.items():
        with open(os.path.join(run_dir, name), "w", newline="") as fh:
            fh.write(text)
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    with open(os.path.join(run_dir, "metadata.json"), "w") as fh:
        json.dump({"timestamp": stamp, "threads": threads, "config_path": os.path.abspath(config_path)}, fh,
                  indent=2)
    ledger = os.path.join(root, "ledger.csv")
    new = not os.path.exists(ledger)
    with open(ledger, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(LEDGER_FIELDS)
        w.writerow([digest, cfg.method, _fmt(ledger_row["value"]), _fmt(ledger_row["stderr"]),
                    _fmt(ledger_row["gap"]), cfg.seed, stamp])
    sys.stdout.write(arts["summary.txt"])
    print(f"artifacts: {run_dir}")
    return EXIT_OK


def catalog_list(as_json: bool = False) -> int:
    desc = catalog_description()
    if as_json:
        print(json.dumps(desc, sort_keys=True, indent=2))
    else:
        for name, d in desc.items():
            params = ", ".join(f"{k}={v}" for k, v in d["parameters"].items())
            print(f"{name}: {d['description']}\n    {params}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pathgame", description="path-dependent zero-sum game experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None)
    r.add_argument("--threads", type=int, default=None,
                   help=f"worker threads for tree values (default ${THREADS_ENV} or 1)")
    c = sub.add_parser("catalog", help="list built-in game instances")
    c.add_argument("--json", action="store_true", help="machine-readable output")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "catalog":
        return catalog_list(args.json)
    return run(args.config, args.output_dir, args.threads)


if __name__ == "__main__":
    sys.exit(main())
