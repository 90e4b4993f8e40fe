"""Experiment runner: presets, config handling, seeded runs and report files.

``lab list`` prints the preset catalog, ``lab validate <config>`` checks a
config without running it and ``lab run <config>`` runs it and writes
``data/*.csv``, ``summary.json`` and ``manifest.json`` to the output
directory.  Exit codes: 0 pass, 1 criteria failed, 2 config error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .constructions import (TREE_CARRIER, ApproximationPlan, HazardSpec, StaircaseSource,
                            approximate_supermartingale, brownian_bundle, compensator_example,
                            compensator_example_tree, compensator_limit_tree, ex0_tree,
                            ex2_adaptive_tau, ex2_gamma_bound, ex2_sup_probability)
from .integration import (FVIntegrand, integrate_phi_dX, integrate_X_dphi,
                          integration_by_parts_residual, limit_integral_formula, reference_integrals)
from .ladlag_path import LadlagPath, PathBundle, evaluate_at
from .limits import (ConvergenceReport, ExtractionError, NotStabilized, convergence_in_probability,
                     double_limit, exceedance, fatou_limit, komlos_extract,
                     left_limit_convergence_check, stabilized_limit)
from .scenario_tree import (AdaptedProcess, ScenarioTree, check_martingale, check_relation_2_12)
from .timebase import GridError, GridStoppingTime, TimeGrid, grid_from_config

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "Outcome",
    "Preset",
    "RunManifest",
    "PRESETS",
    "list_presets",
    "load_config",
    "run_experiment",
    "main",
    "OUTPUT_ROOT_ENV",
]

OUTPUT_ROOT_ENV = "LAB_OUTPUT_ROOT"
CONFIG_KEYS = ("experiment", "grid", "scenarios", "seed", "params", "output_dir", "thresholds", "workers")

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid or unknown configuration (exit code 2)."""


# --------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    experiment: str
    grid: object
    scenarios: int
    seed: int
    params: dict = field(default_factory=dict)
    output_dir: str | None = None
    thresholds: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed <= 0:
            raise ConfigError(f"seed must be a positive integer, got {self.seed!r}")
        if not isinstance(self.scenarios, int) or isinstance(self.scenarios, bool) or self.scenarios <= 0:
            raise ConfigError(f"scenarios must be a positive integer, got {self.scenarios!r}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(f"workers must be a positive integer, got {self.workers!r}")
        for name, t in self.thresholds.items():
            if not isinstance(t, (int, float)) or isinstance(t, bool) or not math.isfinite(t):
                raise ConfigError(f"threshold {name!r} must be a finite number")

    @classmethod
    def from_dict(cls, data: dict, overrides: dict | None = None) -> "ExperimentConfig":
        """Merge preset defaults < ``data`` < ``overrides`` and validate."""
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(data) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        overrides = overrides or {}
        name = overrides.get("experiment", data.get("experiment"))
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; see 'lab list'")
        preset = PRESETS[name]
        merged = {"experiment": name, "grid": preset.grid, "scenarios": preset.scenarios,
                  "seed": preset.seed, "params": dict(preset.params), "output_dir": None,
                  "thresholds": dict(preset.thresholds), "workers": 1}
        for source in (data, overrides):
            for key, value in source.items():
                if key in ("params", "thresholds"):
                    declared = preset.params if key == "params" else preset.thresholds
                    if not isinstance(value, dict):
                        raise ConfigError(f"{key} must be an object")
                    extra = sorted(set(value) - set(declared))
                    if extra:
                        raise ConfigError(f"preset {name!r} does not declare {key} {extra}")
                    merged[key].update(value)
                else:
                    merged[key] = value
        cfg = cls(**merged)
        try:
            cfg.time_grid()
        except (GridError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid grid: {exc}") from exc
        return cfg

    def time_grid(self) -> TimeGrid:
        return grid_from_config(self.grid)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "grid": self.grid, "scenarios": self.scenarios,
                "seed": self.seed, "params": self.params, "output_dir": self.output_dir,
                "thresholds": self.thresholds, "workers": self.workers}

    def digest(self) -> str:
        """SHA-256 of the config minus the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def output_path(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV, "lab-output")
        return Path(root) / self.experiment


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data, overrides)


# --------------------------------------------------------------------------
# results


@dataclass
class Outcome:
    """What a preset produced: tables, scalar metrics and verdicts.

    Each verdict maps to ``{"pass": bool, "thresholds": [names]}``; the
    names must be thresholds of the run's config.
    """

    tables: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)

    def table(self, name: str, columns, rows):
        self.tables[name] = (list(columns), [list(r) for r in rows])

    def report(self, name: str, report: ConvergenceReport):
        cols = ("n", "tau_id", "side", "eps", "estimate", "stderr", "samples")
        self.table(name, cols, ([r[c] for c in cols] for r in report.rows))

    def verdict(self, name: str, ok: bool, *thresholds: str):
        self.verdicts[name] = {"pass": bool(ok), "thresholds": list(thresholds)}


@dataclass
class RunManifest:
    config_sha256: str
    version: str
    started: str
    finished: str
    outputs: list
    verdicts: dict

    @property
    def passed(self) -> bool:
        return all(v["pass"] for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {"config_sha256": self.config_sha256, "version": self.version,
                "started": self.started, "finished": self.finished,
                "outputs": self.outputs, "verdicts": self.verdicts, "passed": self.passed}


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def _write_table(path: Path, columns, rows):
    with path.open("w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(_cell(v) for v in r) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else str(float(x))
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def _stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def run_experiment(config: ExperimentConfig) -> RunManifest:
    """Run a preset and write its data, summary and manifest."""
    preset = PRESETS[config.experiment]
    started = _stamp()
    outcome = preset.runner(config)
    for name, v in outcome.verdicts.items():
        missing = [t for t in v["thresholds"] if t not in config.thresholds]
        if missing:
            raise RuntimeError(f"verdict {name!r} uses undeclared thresholds {missing}")
    out = config.output_path()
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)
    files = []
    for name in sorted(outcome.tables):
        columns, rows = outcome.tables[name]
        path = data / f"{name}.csv"
        _write_table(path, columns, rows)
        files.append(str(path.relative_to(out)))
    summary = {"experiment": config.experiment, "anchor": preset.anchor, "config": config.to_dict(),
               "metrics": outcome.metrics, "verdicts": outcome.verdicts}
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    files.append("summary.json")
    hashes = {f: hashlib.sha256((out / f).read_bytes()).hexdigest() for f in files}
    manifest = RunManifest(config.digest(), __version__, started, _stamp(),
                           [{"path": f, "sha256": hashes[f]} for f in files], outcome.verdicts)
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest.to_dict()), indent=2,
                                                  sort_keys=True) + "\n")
    return manifest


# --------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class Preset:
    name: str
    anchor: str
    description: str
    runner: Callable[[ExperimentConfig], Outcome]
    grid: object
    scenarios: int
    params: dict
    thresholds: dict
    seed: int = 7


def _seeds(cfg: ExperimentConfig, n: int) -> list:
    return np.random.SeedSequence(cfg.seed).spawn(n)


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def _hazard(cfg, grid):
    return HazardSpec.constant_rate(grid, float(cfg.params["rate"]))


def _run_ex0(cfg: ExperimentConfig) -> Outcome:
    grid = cfg.time_grid()
    n_list = [int(n) for n in cfg.params["n_list"]] + [int(n) for n in cfg.params["tail"]]
    tree, bundles, per_n = ex0_tree(n_list, grid)
    out = Outcome()
    rows, worst = [], 0.0
    for n, b in zip(n_list, bundles):
        means = b.mean(b.V)
        worst = max(worst, float(np.abs(means - 1.0).max()))
        rows += [(n, k, float(grid.nodes[k]), float(means[k])) for k in range(grid.K + 1)]
    per_n_ok = all(check_martingale(p).ok for p in per_n)
    out.table("expectations", ("n", "node", "t", "mean"), rows)
    fatou = fatou_limit(bundles)
    target = (grid.nodes < 0.5).astype(float)
    fatou_err = float(np.abs(fatou.V - target[None, :]).max())
    half = grid.index_of(0.5)
    point, unstable = stabilized_limit(np.stack([b.V for b in bundles]), tree.weights)
    half_err = float(np.abs(point[:, half] - 1.0).max())
    out.table("fatou", ("node", "t", "fatou_min", "fatou_max", "pointwise_min", "pointwise_max", "target"),
              [(k, float(grid.nodes[k]), float(fatou.V[:, k].min()), float(fatou.V[:, k].max()),
                float(point[:, k].min()), float(point[:, k].max()), float(target[k]))
               for k in range(grid.K + 1)])
    out.metrics.update(expectation_error=worst, per_n_martingale=per_n_ok, fatou_error=fatou_err,
                       pointwise_at_half_error=half_err, unstable_mass=float(tree.weights @ unstable.any(axis=1)),
                       scenarios=tree.n_scenarios)
    t = cfg.thresholds
    out.verdict("expectation_one", worst < t["expectation_error"] and per_n_ok, "expectation_error")
    out.verdict("fatou_limit", fatou_err <= t["fatou_error"], "fatou_error")
    out.verdict("pointwise_at_half", half_err <= t["value_at_half_error"], "value_at_half_error")
    return out


def _compensator_taus(ex, grid, cfg):
    S = ex.sigma.values.size
    taus = [GridStoppingTime(grid, ex.sigma.capped().values, name="sigma")]
    taus += [GridStoppingTime.at_time(grid, float(t), S) for t in cfg.params["times"]]
    hit = GridStoppingTime.first_hit(grid, ex.X1.V, lambda v: v <= float(cfg.params["hit_level"]),
                                     name="hit").capped()
    return taus + [hit]


def _run_compensator(cfg: ExperimentConfig) -> Outcome:
    grid = cfg.time_grid()
    p = cfg.params
    ex = compensator_example(_hazard(cfg, grid), p["n_list"], grid, cfg.seed, cfg.scenarios)
    eps = float(p["eps"])
    rep = convergence_in_probability(ex.M2, ex.X2, _compensator_taus(ex, grid, cfg), [eps],
                                     ns=p["n_list"], seed=cfg.seed)
    out = Outcome()
    out.report("convergence", rep)
    sigma = ex.sigma.capped()
    left = left_limit_convergence_check(ex.M2, ex.X1, sigma, eps, p["n_list"],
                                        cfg.thresholds["left_limit_exceedance"])
    out.report("left_limit", left.convergence)
    fin = ex.sigma.finite
    sub = GridStoppingTime(grid, ex.sigma.values[fin])
    last = ex.M2[-1]
    lv = last.left_values()[np.flatnonzero(fin), sub.values]
    x2 = ex.X2.V[np.flatnonzero(fin), sub.values]
    p_vs_value = float(np.mean(np.abs(lv - x2) > eps))
    out.metrics.update(first_below=_jsonable({"|".join(map(str, k)): v for k, v in
                                              rep.first_below(cfg.thresholds["exceedance"]).items()}),
                       left_vs_value_exceedance=p_vs_value, p_sigma_finite=float(fin.mean()))
    t = cfg.thresholds
    out.verdict("convergence_at_stopping_times",
                rep.eventually_below(t["exceedance"], from_n=int(p["from_n"])), "exceedance")
    out.verdict("left_limit_to_left_value", left.passed, "left_limit_exceedance")
    out.verdict("left_limit_differs_from_value", p_vs_value >= t["left_vs_value_min"], "left_vs_value_min")
    return out


def _komlos_one(args):
    ss, S, N, eps = args
    rng = np.random.default_rng(ss)
    n = np.arange(1, N + 1)
    f = n * (rng.random((S, N)) <= 1.0 / n)
    try:
        sc = komlos_extract(f, eps)
    except ExtractionError:
        return 0, 0, "error", 1.0
    ft = sc.apply(f)
    return (len(sc.info["subsequence"]), sc.n_out, sc.info["mode"],
            float(np.mean(np.abs(ft[:, -1]) > eps)))


def _run_komlos(cfg: ExperimentConfig) -> Outcome:
    p = cfg.params
    jobs = [(ss, cfg.scenarios, int(p["n_inputs"]), float(p["eps"]))
            for ss in _seeds(cfg, int(p["n_seeds"]))]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            res = list(pool.map(_komlos_one, jobs))
    else:
        res = [_komlos_one(j) for j in jobs]
    out = Outcome()
    out.table("seeds", ("seed_index", "picks", "n_out", "mode", "final_exceedance"),
              [(i,) + tuple(r) for i, r in enumerate(res)])
    thr = cfg.thresholds["final_exceedance"]
    frac = float(np.mean([r[3] < thr for r in res]))
    out.metrics.update(pass_fraction=frac, worst=max(r[3] for r in res))
    out.verdict("seeds_passing", frac >= cfg.thresholds["seed_pass_fraction"],
                "final_exceedance", "seed_pass_fraction")
    return out


def _random_integrand(grid, rng, dyadic=False):
    K = grid.K + 1
    draw = (lambda n: rng.integers(-8, 9, n) / 4.0) if dyadic else (lambda n: rng.normal(size=n))
    a = np.where(rng.random(K) < 0.4, draw(K), 0.0)
    b = np.where(rng.random(K) < 0.4, draw(K), 0.0)
    a[0], b[-1] = 0.0, 0.0
    return FVIntegrand(grid, np.cumsum(draw(K)), a, b)


def _run_ibp(cfg: ExperimentConfig) -> Outcome:
    grid = cfg.time_grid()
    s_big, s_small = _seeds(cfg, 2)
    rng = np.random.default_rng(s_big)
    rows, worst = [], 0.0
    for i in range(cfg.scenarios):
        phi = _random_integrand(grid, rng)
        X = LadlagPath(grid, np.cumsum(rng.normal(size=grid.K + 1)), rng.normal(size=grid.K))
        k = int(rng.integers(0, grid.K + 1))
        r = integration_by_parts_residual(phi, X, k)
        scale = 1.0 + abs(phi.node_values()[k] * X.node_values[k])
        worst = max(worst, abs(r) / scale)
        rows.append((i, k, r, scale))
    out = Outcome()
    out.table("ibp", ("pair", "node", "residual", "scale"), rows)
    rng = np.random.default_rng(s_small)
    small, bf = [], 0.0
    for K in cfg.params["small_grids"]:
        g = TimeGrid.uniform(int(K))
        for _ in range(int(cfg.params["small_cases"])):
            phi = _random_integrand(g, rng, dyadic=True)
            X = LadlagPath(g, rng.integers(-8, 9, g.K + 1) / 4.0, rng.integers(-8, 9, g.K) / 4.0)
            k = int(rng.integers(0, g.K + 1))
            ref_dx, ref_dphi = reference_integrals(phi, X, k)
            e = max(abs(ref_dx - integrate_phi_dX(phi, X, k)), abs(ref_dphi - integrate_X_dphi(X, phi, k)))
            bf = max(bf, e)
            small.append((int(K), k, ref_dx, ref_dphi, e))
    out.table("bruteforce", ("K", "node", "phi_dX", "X_dphi", "abs_error"), small)
    out.metrics.update(max_relative_residual=worst, bruteforce_max_error=bf, small_cases=len(small))
    out.verdict("integration_by_parts", worst < cfg.thresholds["ibp_residual"], "ibp_residual")
    out.verdict("bruteforce_agreement", bf <= cfg.thresholds["bruteforce_error"], "bruteforce_error")
    return out


def _phi_from_params(grid, spec) -> FVIntegrand:
    c = float(spec.get("slope", 0.0)) * grid.nodes + float(spec.get("level", 0.0))
    return FVIntegrand.from_config(grid, {"continuous": c, "jumps": spec.get("jumps", [])})


def _run_limit_integral(cfg: ExperimentConfig) -> Outcome:
    grid = cfg.time_grid()
    p = cfg.params
    n_list = [int(n) for n in p["n_list"]] + [int(n) for n in p["tail"]]
    ex = compensator_limit_tree(_hazard(cfg, grid), n_list, grid)
    phi = _phi_from_params(grid, p["phi"])
    X1, X0 = double_limit(ex.M2)
    S = ex.tree.n_scenarios
    taus = [GridStoppingTime(grid, ex.sigma.capped().values, name="sigma")]
    taus += [GridStoppingTime.at_time(grid, float(t), S) for t in p["times"]]
    eps = float(p["eps"])
    rep = ConvergenceReport(seed=cfg.seed)
    formula_err = 0.0
    for tau in taus:
        lim = limit_integral_formula(phi, X1, X0, tau)
        vals = np.stack([integrate_phi_dX(phi, b, tau) for b in ex.M2])
        for n, v in zip(n_list, vals):
            est, se, m = exceedance(v, lim, eps, ex.tree.weights, exact=True)
            rep.add(n, tau.name, "at", eps, est, se, m)
        point, unstable = stabilized_limit(vals, ex.tree.weights)
        formula_err = max(formula_err, float(np.abs(point - lim)[~unstable].max(initial=0.0)))
    out = Outcome()
    out.report("convergence", rep)
    out.metrics.update(formula_error=formula_err, scenarios=S)
    t = cfg.thresholds
    out.verdict("integral_convergence", rep.eventually_below(t["exceedance"]), "exceedance")
    out.verdict("limit_formula", formula_err <= t["formula_error"], "formula_error")
    return out


def _run_ex2(cfg: ExperimentConfig) -> Outcome:
    grid = cfg.time_grid()
    p = cfg.params
    s_main, s_stair, s_sup = _seeds(cfg, 3)
    src = StaircaseSource(grid, cfg.scenarios, _int_seed(s_main), float(p["jump"]), float(p["growth"]),
                          float(p["up_until"]))
    eps = float(p["eps"])
    tau, rep = ex2_adaptive_tau(src, int(p["block"]), eps, int(p["m_max"]), grid, int(p["n_max"]))
    out = Outcome()
    out.table("levels", ("m", "reached"), [(m + 1, c) for m, c in enumerate(rep.level_counts)])
    out.table("hypothesis", ("t", "worst_exceedance", "ok"),
              [(h["t"], h["worst_exceedance"], h["ok"]) for h in rep.hypothesis])
    complete = (rep.n_m >= 0).all(axis=1)
    inc = bool(np.all(np.diff(rep.tau_m[complete], axis=1) > 0)) if rep.m_max > 1 else True
    sup_src = StaircaseSource(grid, int(p["sup_scenarios"]), _int_seed(s_stair), float(p["jump"]),
                              float(p["sup_growth"]), 1.0)
    lo, hi, c = float(p["sup_lo"]), float(p["sup_hi"]), float(p["sup_c"])
    n = int(p["sup_n"])
    b = sup_src(n)
    klo, khi = grid.index_of(lo), grid.index_of(hi)
    p_B = float(np.mean((np.abs(b.V[:, klo] - (1 - lo)) < eps) & (np.abs(b.V[:, khi] - (1 - hi)) < eps)))
    gamma = ex2_gamma_bound(c, hi - lo, eps, 1.0)
    p_sup, se_sup = ex2_sup_probability(sup_src, n, c, lo, hi, np.random.default_rng(s_sup))
    t = cfg.thresholds
    z = t["sigmas"]
    out.metrics.update(report=rep.summary(), tau_increasing=inc, gamma_bound=gamma, sup_probability=p_sup,
                       sup_stderr=se_sup, p_near_line=p_B)
    out.verdict("tau_below_one", rep.p_tau_lt_1 >= t["p_tau_lt_1"] - z * rep.stderr_tau, "p_tau_lt_1", "sigmas")
    out.verdict("all_levels", rep.p_all_levels >= t["p_all_levels"] - z * rep.stderr_levels,
                "p_all_levels", "sigmas")
    out.verdict("sup_bound", p_sup >= gamma - z * se_sup and p_B >= 1 - eps, "sigmas")
    return out


def _random_walk_tree(grid: TimeGrid, reveal, step: float) -> AdaptedProcess:
    """Fair ``+-step`` coins revealed at the given nodes; the partial sums."""
    m = len(reveal)
    bits = np.indices((2,) * m).reshape(m, -1).T
    S = bits.shape[0]
    levels = np.zeros((grid.K + 1, S), dtype=np.int64)
    V = np.zeros((S, grid.K + 1))
    for k in range(grid.K + 1):
        seen = [i for i, r in enumerate(reveal) if r <= k]
        code = np.zeros(S, dtype=np.int64)
        for i in seen:
            code = code * 2 + bits[:, i]
        levels[k] = code
        V[:, k] = step * (2 * bits[:, seen] - 1).sum(axis=1) if seen else 0.0
    tree = ScenarioTree(grid, levels, np.full(S, 1.0 / S))
    return AdaptedProcess.from_values(tree, V, V[:, :-1], "random walk")


def _run_approx(cfg: ExperimentConfig) -> Outcome:
    grid = cfg.time_grid()
    p = cfg.params
    plan = ApproximationPlan(n_list=tuple(p["n_list"]), jump_threshold=float(p["jump_threshold"]))
    reveal = [grid.first_at_or_after(float(t)) for t in p["walk_times"]]
    walk = _random_walk_tree(grid, reveal, float(p["walk_step"]))
    base = ScenarioTree(grid, np.zeros((grid.K + 1, 1), dtype=np.int64), np.ones(1))
    line = 1.0 - grid.nodes / 2.0
    drift = AdaptedProcess.from_values(base, line[None, :], line[None, :-1], "1-t/2")
    ex = compensator_example_tree(_hazard(cfg, grid), [], grid)
    X2 = ex.adapted(ex.X2)
    eps = float(p["eps"])
    out = Outcome()
    rep = ConvergenceReport(seed=cfg.seed)
    slack, bound, monotone = 0.0, 0.0, True
    for name, X in (("bounded_martingale", walk), ("linear_drift", drift), ("X2", X2)):
        S = X.tree.n_scenarios
        taus = [GridStoppingTime.at_time(grid, float(t), S) for t in p["times"]]
        if name == "X2":
            s = ex.sigma.capped().values
            taus += [GridStoppingTime(grid, s, name="sigma"),
                     GridStoppingTime(grid, np.minimum(s + 1, grid.K), name="sigma+1")]
        if name == "bounded_martingale":
            taus.append(GridStoppingTime.first_hit(grid, X.V, lambda v: v >= float(p["walk_step"]),
                                                   name="hit").capped())
        ap = approximate_supermartingale(X, plan, TREE_CARRIER)
        for proc in ap.processes:
            slack = max(slack, check_martingale(proc, tol=1e-6).max_abs_slack)
            bound = max(bound, float(np.abs(proc.V).max()))
        r = ap.exceedance_report(taus, [eps])
        for cell in r.cells().values():
            est = [row["estimate"] for row in cell]
            monotone &= all(b <= a + 1e-12 for a, b in zip(est, est[1:]))
        for row in r.rows:
            rep.add(row["n"], f"{name}:{row['tau_id']}", row["side"], row["eps"], row["estimate"],
                    row["stderr"], row["samples"])
    out.report("convergence", rep)
    out.metrics.update(max_martingale_slack=slack, max_abs_value=bound, monotone_in_n=monotone)
    t = cfg.thresholds
    out.verdict("exceedance_at_largest_n", rep.eventually_below(t["exceedance"]), "exceedance")
    out.verdict("tree_exact_martingales", slack <= t["martingale_slack"], "martingale_slack")
    return out


def _run_left_limit(cfg: ExperimentConfig) -> Outcome:
    grid = cfg.time_grid()
    p = cfg.params
    s_ex, s_w = _seeds(cfg, 2)
    ex = compensator_example(_hazard(cfg, grid), p["n_list"], grid, _int_seed(s_ex), cfg.scenarios)
    sigma = ex.sigma.capped()
    W = brownian_bundle(grid, cfg.scenarios, np.random.default_rng(s_w))
    hit = GridStoppingTime.first_hit(grid, W.V, lambda v: v >= float(p["brownian_level"])).capped()
    zoo = {"X1": (ex.X1, sigma), "X2": (ex.X2, sigma), "M1_last": (ex.M1[-1], sigma),
           "M2_last": (ex.M2[-1], sigma), "brownian_hit": (W, hit)}
    eps = float(p["eps"])
    out = Outcome()
    res = {}
    for name, seq in (("M1", ex.M1), ("M2", ex.M2)):
        res[name] = left_limit_convergence_check(seq, ex.X1, sigma, eps, p["n_list"],
                                                 cfg.thresholds["left_exceedance"], zoo,
                                                 tuple(p["m_list"]))
        for row in res[name].convergence.rows:
            row["tau_id"] = f"{name}:{row['tau_id']}"
    rep = ConvergenceReport(rows=res["M1"].convergence.rows + res["M2"].convergence.rows, seed=cfg.seed)
    out.report("left_limit", rep)
    gaps = res["M1"].gaps
    out.table("dyadic_gap", ("process", "m", "estimate", "stderr", "samples"),
              [(name, g["m"], g["estimate"], g["stderr"], g["samples"])
               for name in sorted(gaps) for g in gaps[name]])
    out.metrics.update(gap_envelope=res["M1"].gap_envelope, gap_decreasing=res["M1"].gap_decreasing)
    out.verdict("left_limits_converge", res["M1"].passed and res["M2"].passed, "left_exceedance")
    return out


def _run_relation(cfg: ExperimentConfig) -> Outcome:
    grid = cfg.time_grid()
    p = cfg.params
    n_list = [int(n) for n in p["n_list"]] + [int(n) for n in p["tail"]]
    ex = compensator_limit_tree(_hazard(cfg, grid), n_list, grid)
    out = Outcome()
    rows, worst = [], math.inf
    for name, seq in (("M1", ex.M1), ("M2", ex.M2)):
        X1, X0 = double_limit(seq)
        r = check_relation_2_12(AdaptedProcess(ex.tree, X1), AdaptedProcess(ex.tree, X0),
                                tol=abs(cfg.thresholds["min_slack"]))
        worst = min(worst, r.min_slack)
        rows.append((name, r.checks, r.min_slack, r.max_abs_slack, len(r.violations)))
    out.table("relation", ("sequence", "checks", "min_slack", "max_abs_slack", "violations"), rows)
    out.metrics.update(min_slack=worst, scenarios=ex.tree.n_scenarios)
    out.verdict("relation_holds", worst >= cfg.thresholds["min_slack"], "min_slack")
    return out


_TIMES = [0.25, 0.5, 0.75, 1.0]

PRESETS: dict[str, Preset] = {p.name: p for p in [
    Preset("ex0-fatou", "Example 2.4",
           "Martingales equal to 1 until just after 1/2, then 0 or n: expectations stay 1, "
           "the Fatou limit is the indicator of [0, 1/2) while the pointwise limit at 1/2 is 1.",
           _run_ex0, {"dyadic_level": 8}, 1,
           {"n_list": [2, 10, 100], "tail": [1000, 10000, 100000]},
           {"expectation_error": 1e-12, "fatou_error": 0.0, "value_at_half_error": 0.0}),
    Preset("compensator-example", "Section 3 example",
           "A jump time with its compensator: the delayed-correction martingales converge to "
           "1 - A + 1 at sigma at every test stopping time, while their left values at sigma "
           "converge to 1 - A, not to the value.",
           _run_compensator, {"dyadic_level": 8}, 20000,
           {"rate": 1.0, "n_list": [2, 5, 10, 20, 50, 100, 200], "eps": 0.1, "times": _TIMES,
            "hit_level": 0.8, "from_n": 100},
           {"exceedance": 0.05, "left_limit_exceedance": 0.05, "left_vs_value_min": 0.9}),
    Preset("komlos-extract", "Corollary 2.2 (Komlos lemma)",
           "Forward convex combinations of f_n = n 1(U_n <= 1/n) that converge to 0 in probability, "
           "over many independent master seeds.",
           _run_komlos, {"dyadic_level": 1}, 1000,
           {"n_seeds": 100, "n_inputs": 4096, "eps": 0.1},
           {"final_exceedance": 0.05, "seed_pass_fraction": 0.95}),
    Preset("integration-ibp", "Integration by parts (7.3)",
           "Integration by parts for finite-variation integrands against ladlag paths, and agreement "
           "with a split-point loop on small grids.",
           _run_ibp, {"dyadic_level": 6}, 1000,
           {"small_grids": [1, 2, 4, 8, 16], "small_cases": 200},
           {"ibp_residual": 1e-10, "bruteforce_error": 0.0}),
    Preset("limit-integral", "Proposition 2.13",
           "Integrals of a finite-variation integrand against the delayed-correction martingales "
           "converge to the formula written with the value limits and the left-value limits.",
           _run_limit_integral, {"dyadic_level": 5}, 1,
           {"rate": 1.0, "n_list": [4, 8, 16, 32, 64], "tail": [1000, 10000, 100000], "eps": 0.1,
            "times": [0.5, 1.0], "phi": {"slope": 1.0, "level": 0.5, "jumps": [[0.5, 0.25, -0.5]]}},
           {"exceedance": 0.05, "formula_error": 1e-12}),
    Preset("counterexample-ex2", "Proposition 4.1 and Lemma 4.3",
           "Adaptive stopping time along which convex combinations of martingales close to 1 - t "
           "climb above 2^m at every level, plus the sup bound gamma.",
           _run_ex2, {"dyadic_level": 6}, 2000,
           {"m_max": 5, "eps": 0.1, "jump": 33.0, "growth": 1000.0, "up_until": 0.25, "n_max": 5000,
            "block": 1, "sup_n": 100, "sup_c": 2.0, "sup_lo": 0.0, "sup_hi": 1.0,
            "sup_growth": 100.0, "sup_scenarios": 20000},
           {"p_tau_lt_1": 0.9, "p_all_levels": 0.9, "sigmas": 3.0}),
    Preset("approximate-supermartingale", "Theorem 2.8",
           "Bounded tree-exact martingales converging to a given supermartingale at stopping times: "
           "a bounded random walk, 1 - t/2 and the jump example.",
           _run_approx, {"dyadic_level": 5}, 1,
           {"n_list": [2, 4, 6, 8, 10], "eps": 0.1, "jump_threshold": 0.05, "rate": 1.0,
            "times": [0.0, 0.25, 0.5, 0.75, 1.0], "walk_times": [0.25, 0.5, 0.75, 1.0],
            "walk_step": 0.25},
           {"exceedance": 0.1, "martingale_slack": 1e-9}),
    Preset("left-limit-ti", "Proposition 2.9",
           "Left values at a totally inaccessible jump time converge, with the dyadic-approach gap "
           "reported over a zoo of processes.",
           _run_left_limit, {"dyadic_level": 8}, 20000,
           {"rate": 1.0, "n_list": [2, 5, 10, 50, 100, 200], "eps": 0.1, "m_list": [1, 2, 3, 4, 5, 6],
            "brownian_level": 0.5},
           {"left_exceedance": 0.05}),
    Preset("relation-2-12", "Relation (2.12)",
           "Limits of values and of left values of the jump-example sequences satisfy "
           "X1_- >= X0 >= E[X1 | F_-] at every node.",
           _run_relation, {"dyadic_level": 5}, 1,
           {"rate": 1.0, "n_list": [4, 8, 16, 32, 64], "tail": [1000, 10000, 100000]},
           {"min_slack": -1e-12}),
]}


def list_presets() -> list[dict]:
    return [{"name": p.name, "anchor": p.anchor, "description": p.description}
            for p in PRESETS.values()]


# --------------------------------------------------------------------------
# command line


def _scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _key_values(items, what):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"{what} override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = _scalar(v)
    return out


def _overrides(args) -> dict:
    o = {}
    for key in ("seed", "scenarios", "workers"):
        if getattr(args, key, None) is not None:
            o[key] = getattr(args, key)
    if getattr(args, "output_dir", None):
        o["output_dir"] = args.output_dir
    params = _key_values(getattr(args, "param", None), "param")
    if params:
        o["params"] = params
    th = _key_values(getattr(args, "threshold", None), "threshold")
    if th:
        o["thresholds"] = th
    return o


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lab", description="Run supermartingale-limit experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list the experiment presets")
    for name in ("run", "validate"):
        sp = sub.add_parser(name, help=f"{name} a JSON config")
        sp.add_argument("config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--scenarios", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--output-dir")
        sp.add_argument("--param", action="append", metavar="KEY=VALUE")
        sp.add_argument("--threshold", action="append", metavar="KEY=VALUE")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        for p in list_presets():
            print(f"{p['name']:<30} [{p['anchor']}] {p['description']}")
        return EXIT_PASS
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_PASS
    try:
        manifest = run_experiment(cfg)
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure inside a run maps to one exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, v in manifest.verdicts.items():
        print(f"{'PASS' if v['pass'] else 'FAIL'} {name}")
    print(f"outputs in {cfg.output_path()}")
    return EXIT_PASS if manifest.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
