"""Config-driven experiment runner: ``rdtflab run|list|validate``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .field_core import GridSpec, MetricField, c0_deviation, identity_field
from .flow import FlowTrajectory, fit_gaussian_tail, geometric_snapshots, heat_kernel, kernel_source_mass, run_flow
from .verify import (
    DEFAULT_C_LADDER,
    FIT_HEADER,
    MIN_DECADES,
    MIN_SAMPLES,
    ConeParams,
    ShrinkingBallSchedule,
    beta_weak_report,
    davies_check,
    davies_pairs_sample,
    decay_fits,
    iteration_replay,
    lambda_exponent,
    lower_bound_decay_fit,
    measured_constants,
    tail_series,
    tail_series_constant,
    theorem45_pipeline,
    w1p_estimates_check,
)
from .weak_scalar import make_w1p_cone, smooth_bump_metric

log = logging.getLogger("rdtflab")

OUTPUT_ROOT_ENV = "RDTFLAB_OUTPUT_ROOT"
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# ------------------------------------------------------------------ config

@dataclass
class ExperimentSpec:
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    grid: dict
    metric: dict
    flow: dict
    experiments: list[ExperimentSpec]
    output_dir: str = "rdtflab_out"
    seed: int = 0
    workers: int = 2

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {"grid", "metric", "flow", "experiments", "output_dir", "seed", "workers"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown top-level field(s): {sorted(extra)}")
        for key in ("grid", "metric", "flow", "experiments"):
            if key not in raw:
                raise ConfigError(f"missing field '{key}'")
        exps = []
        for i, e in enumerate(raw["experiments"]):
            if not isinstance(e, dict) or "name" not in e:
                raise ConfigError(f"experiments[{i}]: needs a 'name'")
            exps.append(ExperimentSpec(e["name"], dict(e.get("params", {}))))
        return cls(dict(raw["grid"]), dict(raw["metric"]), dict(raw["flow"]), exps,
                   str(raw.get("output_dir", "rdtflab_out")), int(raw.get("seed", 0)), int(raw.get("workers", 2)))

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def grid_spec(self) -> GridSpec:
        g = self.grid
        return GridSpec(int(g.get("dim", 2)), float(g.get("half_width", 1.0)), int(g.get("points_per_axis", 129)),
                        g.get("collar_width"))

    def snapshot_times(self) -> list[float]:
        f = self.flow
        snaps = f.get("snapshots", {"rule": "geometric"})
        if isinstance(snaps, list):
            return sorted(float(t) for t in snaps)
        rule = snaps.get("rule", "geometric")
        if rule != "geometric":
            raise ConfigError(f"flow.snapshots.rule: unknown rule '{rule}'")
        return geometric_snapshots(float(f["t_end"]), int(snaps.get("count", 10)), float(snaps.get("ratio", 2.0)))

    def output_path(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root) / Path(self.output_dir).name if root else Path(self.output_dir)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = ExperimentConfig.from_dict(raw)
    validate(cfg)
    return cfg


# -------------------------------------------------------------- validation

def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _check_beta(where: str, beta: float) -> None:
    _require(0 < beta < 0.5, f"{where}.beta = {beta}: the beta-weak lower bound needs beta in (0, 1/2)")


def _check_gamma(where: str, beta: float, gamma: float) -> None:
    _require(gamma > 1 / (1 - 2 * beta),
             f"{where}.gamma = {gamma}: need gamma > 1/(1 - 2 beta) = {1 / (1 - 2 * beta):.4g} so that lambda > 0")


def _check_ladder(where: str, ladder) -> None:
    _require(len(ladder) > 0 and all(float(c) > 0 for c in ladder), f"{where}.C_ladder: needs positive entries")


def validate(cfg: ExperimentConfig) -> None:
    """Check every downstream precondition before anything runs."""
    g = cfg.grid
    dim = int(g.get("dim", 2))
    _require(dim in (2, 3), f"grid.dim = {dim}: must be 2 or 3")
    _require(float(g.get("half_width", 1.0)) > 0, "grid.half_width: must be > 0")
    _require(int(g.get("points_per_axis", 129)) >= 16, "grid.points_per_axis: must be >= 16")
    try:
        grid = cfg.grid_spec()
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from exc

    m = cfg.metric
    name = m.get("name")
    _require(name in METRICS, f"metric.name = {name!r}: choose from {sorted(METRICS)}")
    mp = m.get("params", {})
    if name == "cone":
        p = float(mp.get("p", 4.0))
        sigma = float(mp.get("sigma", 0.6))
        amp = float(mp.get("amplitude", 0.05))
        _require(p > dim, f"metric.params.p = {p}: need p > n = {dim}")
        _require(1 - dim / p < sigma < 1, f"metric.params.sigma = {sigma}: need 1 - n/p < sigma < 1")
        _require(0 <= amp < 0.5, f"metric.params.amplitude = {amp}: need 0 <= amplitude < 1/2")
    if name == "bump":
        _require(abs(float(mp.get("amplitude", 0.05))) < 0.5, "metric.params.amplitude: need |amplitude| < 1/2")
    if "tau" in mp:
        tau = float(mp["tau"])
        _require(tau > (dim - 2) / 2, f"metric.params.tau = {tau}: need tau > (n - 2)/2")

    f = cfg.flow
    _require("t_end" in f and float(f["t_end"]) > 0, "flow.t_end: must be > 0")
    s = float(f.get("sigma_cfl", 0.1))
    _require(0 < s <= 0.25, f"flow.sigma_cfl = {s}: must lie in (0, 0.25]")
    if "keep_every" in f:
        _require(int(f["keep_every"]) >= 1, "flow.keep_every: must be >= 1")
    snaps = cfg.snapshot_times()
    _require(all(0 < t <= float(f["t_end"]) for t in snaps), "flow.snapshots: times must lie in (0, t_end]")

    _require(cfg.workers >= 1, "workers: must be >= 1")
    _require(len(cfg.experiments) > 0, "experiments: list is empty")
    seen = set()
    for i, e in enumerate(cfg.experiments):
        where = f"experiments[{i}] ({e.name})"
        _require(e.name in EXPERIMENTS, f"{where}: unknown experiment; run 'list' for names")
        _require(e.name not in seen, f"{where}: listed twice")
        seen.add(e.name)
        EXPERIMENTS[e.name].validate(where, e.params, cfg, grid, snaps)


def _fit_window(where: str, params: dict, snaps: list[float]) -> None:
    lo, hi = float(params.get("t_lo", 0.0)), float(params.get("t_hi", math.inf))
    sel = [t for t in snaps if lo * (1 - 1e-12) <= t <= hi * (1 + 1e-12)]
    _require(len(sel) >= MIN_SAMPLES, f"{where}: fit window holds {len(sel)} snapshots, need >= {MIN_SAMPLES}")
    _require(math.log10(max(sel) / min(sel)) >= MIN_DECADES - 1e-9,
             f"{where}: fit window spans < {MIN_DECADES} decades of t")


# ------------------------------------------------------------- experiments

@dataclass
class Outcome:
    passed: bool
    header: list[str]
    rows: list[list]
    summary: str


@dataclass
class Context:
    cfg: ExperimentConfig
    grid: GridSpec
    g0: MetricField
    traj: FlowTrajectory


def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def _centre_node(ctx: Context, params: dict) -> tuple[int, ...]:
    return ctx.grid.nearest_node(params.get("x", (0.0,) * ctx.grid.dim))


def _fit_outcome(reports, extra_summary: str = "") -> Outcome:
    rows = [r.row() for r in reports]
    lines = [f"{r.quantity}: slope {r.fitted if r.fitted is None else round(r.fitted, 4)} "
             f"(predicted {r.predicted}) {'pass' if r.passed else 'FAIL'} {r.note}".rstrip() for r in reports]
    if extra_summary:
        lines.append(extra_summary)
    return Outcome(all(r.passed for r in reports), FIT_HEADER, rows, "\n".join(lines))


def run_decay_fits(ctx: Context, p: dict) -> Outcome:
    return _fit_outcome(decay_fits(ctx.traj, float(p.get("t_lo", 1e-4)), float(p.get("t_hi", 1e-2)),
                                   tol=float(p.get("tol", 0.15))))


def run_w1p(ctx: Context, p: dict) -> Outcome:
    reps = w1p_estimates_check(ctx.traj, float(p.get("p", 4.0)), p.get("A"), float(p.get("t_lo", 1e-4)),
                               float(p.get("t_hi", 1e-2)), float(p.get("tol", 0.15)))
    return _fit_outcome(reps, f"A = {reps[0].extra['A']:.6g}")


def run_beta_weak(ctx: Context, p: dict) -> Outcome:
    beta, kappa, tol = float(p.get("beta", 0.25)), float(p.get("kappa", 0.0)), float(p.get("tol", 0.02))
    rep = beta_weak_report(ctx.traj, _centre_node(ctx, p), beta, p.get("C_ladder", DEFAULT_C_LADDER))
    rows = [[C, rep.raw[C], rep.extrapolated[C], rep.radii[C][0], rep.radii[C][1]] for C in sorted(rep.raw)]
    passed = rep.estimate >= kappa - tol
    summary = (f"estimate {rep.estimate:.6g} (kappa {kappa}, tol {tol}) {'pass' if passed else 'FAIL'}; "
               f"decade [{rep.decade[0]:.4g}, {rep.decade[1]:.4g}]; "
               f"inf-then-lim {rep.inf_then_lim:.6g}, lim-then-inf {rep.lim_then_inf:.6g}")
    return Outcome(passed, ["C", "raw_min", "extrapolated", "radius_min", "radius_max"], rows, summary)


def run_lower_bound(ctx: Context, p: dict) -> Outcome:
    rep = lower_bound_decay_fit(ctx.traj, _centre_node(ctx, p), float(p.get("kappa", 0.0)),
                                float(p.get("beta", 0.25)), float(p.get("gamma", 3.0)),
                                lam_min=float(p.get("lam_min", 0.1)))
    return _fit_outcome([rep])


def run_iteration(ctx: Context, p: dict) -> Outcome:
    beta, gamma = float(p.get("beta", 0.25)), float(p.get("gamma", 3.0))
    t = float(p.get("t", ctx.traj.snapshot_times[-1]))
    D = float(p.get("D", 4.0))
    C2 = float(p.get("C2", 1.0))
    sched = ShrinkingBallSchedule(_centre_node(ctx, p), beta, t)
    partial_err = abs(sched.accumulated()[-1] - sched.rho_infinity)
    steps = iteration_replay(ctx.traj, sched.x, beta, t, C2=C2, D=D)
    lam = lambda_exponent(beta, gamma)
    C3 = tail_series_constant(beta, gamma, D)
    ts = np.geomspace(1e-3, 1e-1, 5)
    series_ok = all(tail_series(tt, beta, D) <= C3 * tt**lam for tt in ts)
    rows = [[s.k, " ".join(map(str, s.node)), s.a_k, s.radius, s.accumulated, s.distance, s.bound, s.holds]
            for s in steps]
    passed = partial_err <= 1e-10 and series_ok and all(s.holds for s in steps)
    summary = (f"partial-sum error {partial_err:.3g}; lambda {lam:.4g}; C3 {C3:.6g}; series bound "
               f"{'holds' if series_ok else 'FAILS'}; replay depth {len(steps)} "
               f"{'holds' if all(s.holds for s in steps) else 'FAILS'}")
    return Outcome(passed, ["k", "node", "a_k", "radius", "accumulated", "distance", "bound", "holds"], rows, summary)


def run_heat_kernel(ctx: Context, p: dict) -> Outcome:
    rng = np.random.default_rng(ctx.cfg.seed)
    times = ctx.traj.times
    grid = ctx.grid
    interior = np.argwhere(~grid.collar_mask() & (grid.radius((0.0,) * grid.dim) <= 0.5 * grid.half_width))
    rows, ok = [], True
    for _ in range(int(p.get("samples", 5))):
        y = tuple(int(i) for i in interior[rng.integers(len(interior))])
        s, t = sorted(rng.choice(times[times >= 0.1 * times[-1]], 2, replace=False))
        k = heat_kernel(ctx.traj, y, float(s), float(t))
        y_mass = kernel_source_mass(ctx.traj, y, float(s), float(t))
        fit = fit_gaussian_tail(k, ctx.traj)
        good = (0.99 <= y_mass <= 1.01 and fit.D > 4 and fit.satisfied
                and float(k.density.values.min()) >= -1e-12)
        ok &= good
        rows.append([" ".join(map(str, y)), float(s), float(t), y_mass, k.mass, fit.D, fit.C2, fit.satisfied, good])
    return Outcome(ok, ["source", "s", "t", "y_mass", "x_mass", "D_fit", "C2", "tail_bound", "passed"], rows,
                   f"{sum(r[-1] for r in rows)}/{len(rows)} kernels within mass and tail checks")


def run_davies(ctx: Context, p: dict) -> Outcome:
    C, beta, gamma = float(p.get("C", 0.25)), float(p.get("beta", 0.25)), float(p.get("gamma", 1.0))
    c2eps, c3eps = measured_constants(ctx.traj)
    pairs = davies_pairs_sample(ctx.traj, ctx.grid, (0.0,) * ctx.grid.dim, ctx.traj.t_end, C, beta, gamma, c2eps,
                                int(p.get("pairs", 10)), ctx.cfg.seed)
    rep, samples = davies_check(ctx.traj, (0.0,) * ctx.grid.dim, pairs, C, beta, gamma, (c2eps, c3eps))
    rows = [[s.t, s.T, s.lhs, s.lhs_forward, s.rhs, s.rhs_sharp, s.distance, s.vol_T_U1, s.vol_t_U2,
             s.volume_bound_ok, s.holds, s.holds_sharp] for s in samples]
    summary = (f"stated bound holds at {rep.extra['held']}/{len(samples)} pairs, sharp form at "
               f"{rep.extra['sharp_held']}/{len(samples)}; route gap {rep.extra['route_gap']:.3g}; {rep.note}")
    return Outcome(rep.passed, ["t", "T", "lhs", "lhs_forward", "rhs", "rhs_sharp", "distance", "vol_T_U1",
                                "vol_t_U2", "volume_bound_ok", "holds", "holds_sharp"], rows, summary)


def _cone_params(ctx: Context) -> ConeParams:
    m = ctx.cfg.metric
    mp = m.get("params", {})
    if m["name"] == "flat":
        return ConeParams(amplitude=0.0)
    return ConeParams(float(mp.get("sigma", 0.6)), float(mp.get("amplitude", 0.05)), float(mp.get("p", 4.0)),
                      mp.get("r_in"), mp.get("r_out"))


def run_pipeline(ctx: Context, p: dict) -> Outcome:
    T_ladder = [float(T) for T in p.get("T_ladder", [ctx.traj.t_end])]
    res = theorem45_pipeline(ctx.grid, _cone_params(ctx), float(p.get("kappa", 0.0)), float(p.get("beta", 0.25)),
                             float(p.get("gamma", 1.0)), T_ladder, float(p.get("C", 0.25)), float(p.get("eta", 1.5)),
                             int(p.get("samples", 24)), int(p.get("pairs", 10)), ctx.cfg.seed,
                             trajectory=ctx.traj)
    rows = []
    for trace in res.energy:
        for t, e, m in zip(trace.times, trace.values, trace.annulus_mass):
            rows.append([trace.T, float(t), float(e), float(m)])
    checks = " ".join(f"{k}={'pass' if v else 'FAIL'}" for k, v in res.checks.items())
    bw = res.details["beta_weak"]
    summary = (f"{checks}\nc2eps {res.details['c2eps']:.6g} c3eps {res.details['c3eps']:.6g} "
               f"eta_min {res.details['eta_min']:.6g}\nbeta-weak estimate {bw.estimate:.6g}")
    return Outcome(all(res.checks.values()), ["T", "t", "energy", "annulus_mass"], rows, summary)


@dataclass(frozen=True)
class Experiment:
    runner: Callable[[Context, dict], Outcome]
    required: tuple[str, ...]
    anchor: str
    check: Callable[[str, dict, ExperimentConfig, GridSpec, list], None] = lambda *a: None

    def validate(self, where, params, cfg, grid, snaps) -> None:
        self.check(where, params, cfg, grid, snaps)


def _v_fit(where, p, cfg, grid, snaps):
    _fit_window(where, {"t_lo": p.get("t_lo", 1e-4), "t_hi": p.get("t_hi", 1e-2)}, snaps)


def _v_w1p(where, p, cfg, grid, snaps):
    _require(float(p.get("p", 4.0)) > grid.dim, f"{where}.p: need p > n")
    _v_fit(where, p, cfg, grid, snaps)


def _v_beta(where, p, cfg, grid, snaps):
    _check_beta(where, float(p.get("beta", 0.25)))
    _check_ladder(where, p.get("C_ladder", DEFAULT_C_LADDER))
    _require(float(p.get("kappa", 0.0)) >= 0, f"{where}.kappa: must be >= 0")


def _v_lower(where, p, cfg, grid, snaps):
    _v_beta(where, p, cfg, grid, snaps)
    _check_gamma(where, float(p.get("beta", 0.25)), float(p.get("gamma", 3.0)))
    _fit_window(where, {}, snaps)


def _v_iter(where, p, cfg, grid, snaps):
    _check_beta(where, float(p.get("beta", 0.25)))
    _check_gamma(where, float(p.get("beta", 0.25)), float(p.get("gamma", 3.0)))
    _require(float(p.get("D", 4.0)) > 0, f"{where}.D: must be > 0")


def _v_davies(where, p, cfg, grid, snaps):
    _check_beta(where, float(p.get("beta", 0.25)))
    _require(float(p.get("C", 0.25)) > 0, f"{where}.C: must be > 0")
    _require(float(p.get("gamma", 1.0)) > 0, f"{where}.gamma: must be > 0")
    _require(int(p.get("pairs", 10)) >= 1, f"{where}.pairs: must be >= 1")


def _v_pipeline(where, p, cfg, grid, snaps):
    _v_davies(where, p, cfg, grid, snaps)
    _require(cfg.metric.get("name") in ("cone", "flat"), f"{where}: needs metric 'cone' or 'flat'")
    centre = cfg.metric.get("params", {}).get("center")
    _require(centre is None or not any(centre), f"{where}: the cone must be centred at the origin")
    _require(float(p.get("kappa", 0.0)) >= 0, f"{where}.kappa: must be >= 0")
    _require(float(p.get("eta", 1.5)) > 1, f"{where}.eta: must be > 1")
    t_end = float(cfg.flow["t_end"])
    for T in p.get("T_ladder", [t_end]):
        _require(0 < float(T) <= t_end, f"{where}.T_ladder: entries must lie in (0, t_end]")
        _require(any(abs(t - float(T)) <= 1e-12 * T for t in snaps), f"{where}.T_ladder: {T} is not a snapshot")


def _v_kernel(where, p, cfg, grid, snaps):
    _require(int(p.get("samples", 5)) >= 1, f"{where}.samples: must be >= 1")
    _require("keep_every" in cfg.flow, f"{where}: needs flow.keep_every for dense slices")


EXPERIMENTS: dict[str, Experiment] = {
    "decay_fits": Experiment(run_decay_fits, ("t_lo", "t_hi"),
                             "sup-norm decay of dg, d2g, R, dR along the flow", _v_fit),
    "w1p_estimates_check": Experiment(run_w1p, ("p",), "improved decay for W^{1,p} initial data", _v_w1p),
    "heat_kernel_check": Experiment(run_heat_kernel, ("samples",),
                                    "unit mass and Gaussian tail of the flow heat kernel", _v_kernel),
    "beta_weak_estimate": Experiment(run_beta_weak, ("beta", "C_ladder", "kappa"),
                                     "beta-weak lower bound on shrinking balls", _v_beta),
    "lower_bound_decay_fit": Experiment(run_lower_bound, ("beta", "gamma", "kappa"),
                                        "pointwise lower bound R >= kappa - C t^lambda", _v_lower),
    "iteration_replay": Experiment(run_iteration, ("beta", "gamma", "t"),
                                   "shrinking-ball argmin chain and tail series", _v_iter),
    "davies_check": Experiment(run_davies, ("C", "beta", "gamma", "pairs"),
                               "double-integral heat kernel upper bound", _v_davies),
    "theorem45_pipeline": Experiment(run_pipeline, ("kappa", "beta", "gamma", "T_ladder", "eta"),
                                     "energy argument: distributional bound implies flow lower bound",
                                     _v_pipeline),
}


def list_experiments() -> str:
    lines = ["experiment               required params                      reproduces"]
    for name, exp in EXPERIMENTS.items():
        lines.append(f"{name:<24} {', '.join(exp.required):<36} -> {exp.anchor}")
    return "\n".join(lines)


# ------------------------------------------------------------------ metrics

def _flat(grid: GridSpec, p: dict) -> MetricField:
    return MetricField(grid, identity_field(grid))


def _cone(grid: GridSpec, p: dict) -> MetricField:
    return make_w1p_cone(grid, p.get("center"), float(p.get("sigma", 0.6)), float(p.get("amplitude", 0.05)),
                         float(p.get("p", 4.0)), r_in=p.get("r_in"), r_out=p.get("r_out"))


def _bump(grid: GridSpec, p: dict) -> MetricField:
    return smooth_bump_metric(grid, float(p.get("amplitude", 0.05)), p.get("radius"), p.get("center"))


METRICS = {"flat": _flat, "cone": _cone, "bump": _bump}


# -------------------------------------------------------------------- run

@dataclass
class RunManifest:
    config_hash: str
    version: str
    experiments: dict[str, dict]
    flow: dict

    @property
    def passed(self) -> bool:
        return all(e["status"] == "pass" for e in self.experiments.values())

    def files(self) -> list[str]:
        return sorted(f for e in self.experiments.values() for f in e["files"])


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def _execute(name: str, params: dict, ctx: Context, out: Path) -> dict:
    t0 = time.perf_counter()
    try:
        res = EXPERIMENTS[name].runner(ctx, params)
    except Exception as exc:  # reported per experiment; the run keeps going
        log.error("%s: %s", name, exc)
        (out / f"{name}.txt").write_text(f"{name}: error: {exc}\n")
        return {"status": "error", "error": str(exc), "wall_time": time.perf_counter() - t0,
                "files": [f"{name}.txt"]}
    _write_csv(out / f"{name}.csv", res.header, res.rows)
    (out / f"{name}.txt").write_text(f"{name}: {'pass' if res.passed else 'FAIL'}\n{res.summary}\n")
    return {"status": "pass" if res.passed else "fail", "wall_time": time.perf_counter() - t0,
            "files": [f"{name}.csv", f"{name}.txt"]}


def run(config_path: str | Path) -> RunManifest:
    cfg = load_config(config_path)
    grid = cfg.grid_spec()
    metric = cfg.metric
    g0 = METRICS[metric["name"]](grid, metric.get("params", {}))
    f = cfg.flow
    t0 = time.perf_counter()
    traj = run_flow(g0, float(f["t_end"]), cfg.snapshot_times(), float(f.get("sigma_cfl", 0.1)),
                    f.get("keep_every"))
    flow_info = {"steps": traj.scheme["steps"], "slices": len(traj.slices), "wall_time": time.perf_counter() - t0,
                 "eps": c0_deviation(g0)}
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, grid, g0, traj)
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        futures = {e.name: pool.submit(_execute, e.name, e.params, ctx, out) for e in cfg.experiments}
        results = {name: fut.result() for name, fut in futures.items()}
    diag_rows = [[t] + [d[k] for k in sorted(d)] for t, d in traj.snapshot_diagnostics()]
    key_order = sorted(traj.diagnostics[0]) if traj.diagnostics else []
    _write_csv(out / "diagnostics.csv", ["t", *key_order], diag_rows)
    results["flow"] = {"status": "pass", "wall_time": flow_info["wall_time"], "files": ["diagnostics.csv"]}
    manifest = RunManifest(cfg.digest(), __version__, results, flow_info)
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return manifest


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdtflab", description="Ricci-DeTurck flow experiment runner")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every experiment in a config")
    r.add_argument("config")
    sub.add_parser("list", help="list experiments and their parameters")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "list":
        print(list_experiments())
        return EXIT_PASS
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"ok: {len(cfg.experiments)} experiment(s), config hash {cfg.digest()[:12]}")
            return EXIT_PASS
        manifest = run(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name, e in manifest.experiments.items():
        print(f"{name:<24} {e['status']:<6} {e['wall_time']:.2f}s")
    return EXIT_PASS if manifest.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
