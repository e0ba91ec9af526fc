"""Outer time loop, configuration, output writers and study harnesses."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import grid as mr
from .control import StepControlConfig, constant_mode_dt, propose_next_dt, safety_factor
from .fv import FvOperator, NonFiniteModelError, weighted_norm
from .irk import IrkStepper, NewtonDivergence, NewtonOptions
from .linalg import make_solver
from .models import BzParams, IgnitionParams, SingularSourceError, bz_model, get_model, ignition_model
from .tableaux import tableau

log = logging.getLogger(__name__)

OUTPUT_ENV = "MRIRK_OUTPUT_ROOT"

CANONICAL = {
    "bz1d": "bz1d_t0.5.csv.gz",
    "bz2d": "bz2d_t2_J8.csv.gz",
}


class StepSizeUnderflow(RuntimeError):
    pass


class NonFiniteStateError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    model: str = "bz1d"
    model_params: dict = field(default_factory=dict)
    max_level: int = 10
    roots: tuple = (1,)
    eta_mr: float = 1e-3
    adapt: bool = True
    scheme: str = "sdirk4"
    gamma: float | None = None
    control: StepControlConfig = field(default_factory=StepControlConfig)
    t_start: float = 0.0
    t_end: float = 1.0
    initial: str = "seed"
    output_dir: str | None = None
    output_every: int = 0
    resample_level: int | None = None
    linear_solver: str = "gmres"
    ilut_fill: int = 10
    ilut_drop: float = 1e-3
    gmres_restart: int = 30
    gmres_max_iter: int = 500
    max_halvings: int = 8
    study: str = "single_run"

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")
        if self.control.mode == "adaptive" and not tableau(self.scheme, self.gamma).has_estimator:
            raise ValueError(f"adaptive mode needs sdirk4 or radau5, not {self.scheme}")
        self.roots = tuple(int(r) for r in self.roots)

    @property
    def mr_config(self) -> mr.MrConfig:
        return mr.MrConfig(max_level=self.max_level, roots_per_dir=self.roots, eta_mr=self.eta_mr)

    def newton_options(self) -> NewtonOptions:
        c = self.control
        return NewtonOptions(eta_newt=c.newton_tol, eta_ls=c.linear_tol, k_max=c.k_newt_max,
                             k_ls_j=c.k_ls_j, max_halvings=self.max_halvings)

    def make_solver(self):
        if self.linear_solver == "direct":
            return make_solver("direct")
        return make_solver("gmres", fill=self.ilut_fill, drop=self.ilut_drop,
                           restart=self.gmres_restart, max_iter=self.gmres_max_iter)


_SECTIONS = {
    "mr": ("max_level", "roots", "eta_mr", "adapt"),
    "scheme": ("scheme", "gamma"),
    "time": ("t_start", "t_end", "initial"),
    "output": ("output_dir", "output_every", "resample_level"),
    "linear": ("linear_solver", "ilut_fill", "ilut_drop", "gmres_restart", "gmres_max_iter", "max_halvings"),
    "run": ("study",),
}
_ALIASES = {("scheme", "name"): "scheme", ("linear", "solver"): "linear_solver", ("model", "name"): "model"}


def _convert(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float) or like is None:
        v = value.strip()
        if v.lower() in ("none", ""):
            return None
        try:
            return float(v)
        except ValueError:
            return v
    if isinstance(like, tuple):
        return tuple(int(x) for x in value.replace("x", ",").split(",") if x.strip())
    return value.strip()


def config_from_mapping(sections: dict) -> RunConfig:
    """Build a :class:`RunConfig` from ``{section: {key: text}}``."""
    defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                for f in dataclasses.fields(RunConfig)}
    kw = {}
    ctl = {}
    params = {}
    ctl_defaults = {f.name: f.default for f in dataclasses.fields(StepControlConfig)}
    for sec, items in sections.items():
        for key, text in items.items():
            name = _ALIASES.get((sec, key), key)
            if sec == "control":
                if key not in ctl_defaults:
                    raise KeyError(f"unknown control key {key!r}")
                like = ctl_defaults[key]
                ctl[key] = _convert(text, like if like is not None else 0.0)
            elif sec == "model" and name != "model":
                params[key] = float(text)
            elif name in defaults and (sec == "model" or name in _SECTIONS.get(sec, ())):
                like = defaults[name]
                if name == "gamma":
                    like = 0.0
                kw[name] = _convert(text, like)
            else:
                raise KeyError(f"unknown config key {sec}.{key}")
    if ctl.get("mode") == "constant" and "dt" not in ctl:
        ctl["dt"] = ctl.get("dt0", ctl_defaults["dt0"])
    kw["control"] = StepControlConfig(**ctl)
    kw["model_params"] = params
    return RunConfig(**kw)


def load_config(path, overrides=()) -> RunConfig:
    """Read an INI file; ``overrides`` are ``section.key=value`` strings."""
    cp = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    sections = {s: dict(cp[s]) for s in cp.sections()}
    for item in overrides:
        lhs, _, value = item.partition("=")
        sec, _, key = lhs.partition(".")
        if not key or not _:
            raise ValueError(f"override {item!r} is not section.key=value")
        sections.setdefault(sec.strip(), {})[key.strip()] = value
    return config_from_mapping(sections)


def config_to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["model"] = {"name": cfg.model, **{k: repr(v) for k, v in cfg.model_params.items()}}
    cp["mr"] = {"max_level": str(cfg.max_level), "roots": ",".join(map(str, cfg.roots)),
                "eta_mr": repr(cfg.eta_mr), "adapt": str(cfg.adapt)}
    cp["scheme"] = {"name": cfg.scheme, "gamma": repr(cfg.gamma)}
    cp["control"] = {f.name: repr(getattr(cfg.control, f.name)).strip("'")
                     for f in dataclasses.fields(StepControlConfig)}
    cp["time"] = {"t_start": repr(cfg.t_start), "t_end": repr(cfg.t_end), "initial": cfg.initial}
    cp["output"] = {"output_dir": str(cfg.output_dir), "output_every": str(cfg.output_every),
                    "resample_level": str(cfg.resample_level)}
    cp["linear"] = {"solver": cfg.linear_solver, "ilut_fill": str(cfg.ilut_fill), "ilut_drop": repr(cfg.ilut_drop),
                    "gmres_restart": str(cfg.gmres_restart), "gmres_max_iter": str(cfg.gmres_max_iter),
                    "max_halvings": str(cfg.max_halvings)}
    cp["run"] = {"study": cfg.study}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# models and initial data


def build_model(cfg: RunConfig, grid: mr.GradedTreeGrid | None = None):
    p = dict(cfg.model_params)
    if cfg.model in ("bz1d", "bz2d"):
        dim = 1 if cfg.model == "bz1d" else 2
        diff = tuple(p.pop(k) for k in ("D_a", "D_b", "D_c")) if "D_a" in p else BzParams.diffusion
        return bz_model(dim, BzParams(diffusion=diff, **p), t_final=cfg.t_end)
    if cfg.model == "ignition":
        smoothing = p.pop("smoothing", None)
        if smoothing is None:
            # tanh transition spread over about two finest cells
            smoothing = 2.0 / (cfg.roots[0] * 2**cfg.max_level)
        return ignition_model(IgnitionParams(**p), smoothing=smoothing, t_final=cfg.t_end)
    return get_model(cfg.model, **p)


def canonical_path(model: str) -> Path:
    return Path(str(resources.files("mrirk") / "data" / CANONICAL[model]))


def initial_grid(cfg: RunConfig, model) -> mr.GradedTreeGrid:
    """Seed sampled on the finest grid, or a snapshot (``initial = canonical`` or a path)."""
    if cfg.initial == "seed":
        conf = cfg.mr_config
        if not cfg.adapt:
            conf = dataclasses.replace(conf, eta_mr=0.0)
        return mr.initialise(conf, model.initial, model.m, model.lower, model.upper)
    path = canonical_path(cfg.model) if cfg.initial == "canonical" else Path(cfg.initial)
    grid, _ = mr.load_csv(path)
    if grid.max_level != cfg.max_level:
        raise ValueError(f"snapshot {path} has J={grid.max_level}, config asks for J={cfg.max_level}")
    return grid


# ---------------------------------------------------------------------------
# statistics


STATS_COLUMNS = ("n", "t", "dt", "accepted", "err", "max_k", "max_k_stage", "max_k_ls", "jac_refreshes",
                 "halvings", "n_leaves")


@dataclass
class StatsLog:
    records: list = field(default_factory=list)
    wall_time: float = 0.0
    compression: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append(rec)

    @property
    def accepted(self) -> list:
        return [r for r in self.records if r["accepted"]]

    def summary(self) -> dict:
        acc = self.accepted
        return {
            "steps": len(acc),
            "rejected": len(self.records) - len(acc),
            "max_dt": max((r["dt"] for r in acc), default=0.0),
            "max_k": max((r["max_k"] for r in acc), default=0),
            "max_k_stage": max((r["max_k_stage"] for r in acc), default=0),
            "max_k_ls": max((r["max_k_ls"] for r in acc), default=0),
            "wall_time": self.wall_time,
            "mean_compression": float(np.mean(self.compression)) if self.compression else float("nan"),
        }

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=STATS_COLUMNS, extrasaction="ignore")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return path

    @staticmethod
    def read_csv(path) -> "StatsLog":
        out = StatsLog()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                out.records.append({
                    "n": int(r["n"]), "t": float(r["t"]), "dt": float(r["dt"]),
                    "accepted": r["accepted"] == "True", "err": float(r["err"]),
                    "max_k": int(r["max_k"]), "max_k_stage": int(r["max_k_stage"]),
                    "max_k_ls": int(r["max_k_ls"]), "jac_refreshes": int(r["jac_refreshes"]),
                    "halvings": int(r["halvings"]), "n_leaves": int(r["n_leaves"]),
                })
        return out


@dataclass
class RunResult:
    grid: mr.GradedTreeGrid
    state: np.ndarray
    t: float
    stats: StatsLog
    model: object = None


# ---------------------------------------------------------------------------
# outputs


def output_root(cfg: RunConfig) -> Path | None:
    if cfg.output_dir:
        p = Path(cfg.output_dir)
        return p if p.is_absolute() or OUTPUT_ENV not in os.environ else Path(os.environ[OUTPUT_ENV]) / p
    if OUTPUT_ENV in os.environ:
        return Path(os.environ[OUTPUT_ENV])
    return None


def write_resample(grid: mr.GradedTreeGrid, path, level=None, names=None) -> Path:
    """Uniform reconstruction as CSV: centre coordinates then components."""
    centres, vals = mr.resample(grid, level)
    d = grid.dim
    mesh = np.meshgrid(*centres, indexing="ij")
    m = vals.shape[0]
    names = list(names) if names else [f"u{c}" for c in range(m)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{a}" for a in range(d)] + names)
        cols = [c.ravel() for c in mesh] + [vals[c].ravel() for c in range(m)]
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])
    return path


def write_outputs(grid: mr.GradedTreeGrid, state, t: float, directory, names=None, resample_level=None,
                  tag: str | None = None) -> dict:
    """Leaf dump (and optionally a uniform resample) of ``state`` at time ``t``."""
    directory = Path(directory)
    tag = tag or f"t{t:.6f}"
    g = grid.copy()
    g.set_leaf_values(np.asarray(state).reshape(g.n_leaves, -1))
    out = {"leaves": mr.dump_csv(g, directory / f"state_{tag}.csv", names=names)}
    if resample_level is not None:
        out["resample"] = write_resample(g, directory / f"resample_{tag}.csv", resample_level, names)
    return out


# ---------------------------------------------------------------------------
# time loop


def _velocity_time(t: float, ctl: StepControlConfig) -> float:
    # the vortex is singular at t = 0; sample it one initial step later
    return t if t > 0 else ctl.dt0


def run(cfg: RunConfig, grid: mr.GradedTreeGrid | None = None, stop_times=(), on_stop=None,
        model=None) -> RunResult:
    """Integrate ``cfg`` from ``t_start`` to ``t_end``.

    ``stop_times`` are additional times the step sequence must hit exactly;
    ``on_stop(t, grid, state)`` is called there.  ``model`` replaces the one
    named in ``cfg`` (for variants such as a model with its source switched off).
    """
    wall0 = time.perf_counter()
    model = build_model(cfg) if model is None else model
    grid = initial_grid(cfg, model) if grid is None else grid
    conf = cfg.mr_config
    ctl = cfg.control
    tab = tableau(cfg.scheme, cfg.gamma)
    solver = cfg.make_solver()
    nopts = cfg.newton_options()
    adaptive = ctl.mode == "adaptive"
    out_dir = output_root(cfg)
    names = model.component_names or None

    t = cfg.t_start
    dt = ctl.dt0
    if not adaptive:
        dt = min(dt, ctl.dt)
    floor = 1e-14 * abs(cfg.t_end)
    stops = sorted(s for s in stop_times if cfg.t_start < s < cfg.t_end) + [cfg.t_end]
    U = grid.leaf_values().ravel()
    stats = StatsLog()
    n = 0
    stop_tol = 1e-12 * max(1.0, abs(cfg.t_end))
    try:
        while stops:
            target = stops[0]
            op = FvOperator(grid, model, _velocity_time(t, ctl) if model.velocity is not None else None)
            stepper = IrkStepper(tab, op.rhs, op.jacobian, solver, nopts, op.weights)
            stepper.prepare(U, t)
            F0 = op.rhs(t, U) if (adaptive and tab.e0) else None
            rejections = 0
            while True:
                dt_try = min(dt, target - t)
                res = stepper.step(dt_try)
                rep = res.report
                nu_k = safety_factor(rep.max_stage_iterations, rep.max_ls, ctl)
                finite = np.all(np.isfinite(res.U1))
                if not finite:
                    accepted, err, dt_next = False, np.inf, 0.5 * res.dt
                elif adaptive:
                    err = stepper.estimate_error(res, F0)
                    accepted, dt_next = propose_next_dt(err, res.dt, nu_k, ctl)
                else:
                    err = float("nan")
                    accepted, dt_next = True, constant_mode_dt(res.dt, nu_k, ctl)
                stats.append(n=n, t=t + res.dt if accepted else t, dt=res.dt, accepted=accepted, err=err,
                             max_k=rep.iterations, max_k_stage=rep.max_stage_iterations, max_k_ls=rep.max_ls,
                             jac_refreshes=rep.jac_refreshes, halvings=res.halvings + rejections,
                             n_leaves=grid.n_leaves)
                if accepted:
                    break
                rejections += 1
                dt = dt_next
                if dt < floor:
                    raise StepSizeUnderflow(f"dt={dt:.3e} fell below {floor:.3e} at t={t:.9g}")
            U = res.U1
            clipped = res.dt < dt - 1e-15 * dt and abs(t + res.dt - target) <= stop_tol
            t = target if abs(t + res.dt - target) <= stop_tol else t + res.dt
            # a step shortened to hit a stop time says nothing about how far dt may grow
            if not (clipped and res.halvings == 0 and dt_next >= res.dt):
                dt = dt_next
            n += 1
            if abs(t - target) <= stop_tol:
                stops.pop(0)
                if on_stop is not None and stops:
                    on_stop(t, grid, U.copy())
            if cfg.adapt and conf.eta_mr > 0:
                grid.set_leaf_values(U.reshape(grid.n_leaves, -1))
                grid = mr.adapt(grid, conf)
                U = grid.leaf_values().ravel()
            stats.compression.append(mr.compression_ratio(grid))
            if out_dir is not None and cfg.output_every and n % cfg.output_every == 0:
                write_outputs(grid, U, t, out_dir, names, cfg.resample_level)
            log.debug("n=%d t=%.6g dt=%.3e leaves=%d", n, t, res.dt, grid.n_leaves)
    except (NewtonDivergence, StepSizeUnderflow, SingularSourceError, NonFiniteModelError):
        stats.wall_time = time.perf_counter() - wall0
        if out_dir is not None:
            write_outputs(grid, U, t, out_dir, names, tag="failure")
            stats.write_csv(out_dir / "stats.csv")
        raise
    stats.wall_time = time.perf_counter() - wall0
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_outputs(grid, U, t, out_dir, names, cfg.resample_level, tag="final")
        stats.write_csv(out_dir / "stats.csv")
        (out_dir / "config.ini").write_text(config_to_ini(cfg))
    grid.set_leaf_values(U.reshape(grid.n_leaves, -1))
    return RunResult(grid, U.reshape(grid.n_leaves, -1), t, stats, model)


# ---------------------------------------------------------------------------
# studies


def component_errors(grid: mr.GradedTreeGrid, u, v) -> np.ndarray:
    """Normalised l2 error of each component."""
    diff = np.asarray(u).reshape(grid.n_leaves, -1) - np.asarray(v).reshape(grid.n_leaves, -1)
    w = grid.leaf_weights
    return np.sqrt(w @ diff**2)


def reference_states(grid: mr.GradedTreeGrid, model, t0: float, times, eta: float = 1e-14) -> dict:
    """Radau5 solution at ``t0 + dt`` for every ``dt`` in ``times``, at tolerance ``eta``.

    Steps are additionally bounded by a quarter of the smallest sampled ``dt``:
    near roundoff the error estimate alone lets the reference drift by more
    than the local errors it is meant to resolve.
    """
    # start well below the smallest sampled step so no reference step coincides with a tested one
    ctl = StepControlConfig(eta_rk=eta, eta_newt=eta, eta_ls=eta, dt0=min(times) / 16)
    targets = sorted(t0 + dt for dt in times)
    h = min(times) / 4
    grid_stops = t0 + h * np.arange(1, int((targets[-1] - t0) / h))
    cfg = RunConfig(model=model.name, max_level=grid.max_level, roots=grid.roots_per_dir, eta_mr=0.0, adapt=False,
                    scheme="radau5", control=ctl, t_start=t0, t_end=targets[-1], initial="given",
                    linear_solver="direct")
    out = {}

    def keep(t, g, state):
        out[t] = state.reshape(g.n_leaves, -1)

    res = run(cfg, grid.copy(), stop_times=sorted(set(targets[:-1]) | set(grid_stops)), on_stop=keep)
    out[targets[-1]] = res.state
    return {dt: out[min(out, key=lambda s: abs(s - (t0 + dt)))] for dt in times}


def order_sweep(grid: mr.GradedTreeGrid, model, t0: float, dts, schemes, eta: float = 1e-14, reference=None):
    """Local errors of one step of each scheme from ``(t0, grid)``.

    Returns rows ``(scheme, dt, err_0, ..., err_{m-1}, estimate)`` where the
    estimate is the embedded error (NaN without an estimator).
    """
    dts = list(dts)
    ref = reference if reference is not None else reference_states(grid, model, t0, dts, eta)
    op = FvOperator(grid, model)
    U0 = grid.leaf_values().ravel()
    F0 = op.rhs(t0, U0)
    opts = NewtonOptions(eta_newt=eta, eta_ls=eta, max_halvings=0)
    rows = []
    for name in schemes:
        tab = tableau(name)
        stepper = IrkStepper(tab, op.rhs, op.jacobian, make_solver("direct"), opts, op.weights)
        stepper.prepare(U0, t0)
        for dt in dts:
            try:
                res = stepper.step(dt)
            except NewtonDivergence:
                rows.append((name, dt) + (np.nan,) * (model.m + 1))
                continue
            errs = component_errors(grid, res.U1, ref[dt])
            est = stepper.estimate_error(res, F0) if tab.has_estimator else np.nan
            rows.append((name, dt, *errs, est))
    return rows


def write_sweep_csv(rows, path, names=("a", "b", "c")) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "dt", *[f"err_{n}" for n in names], "estimate"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return path


PERF_COLUMNS = ("scheme", "eta_rk", "n", "max_dt", "max_k", "max_k_stage", "max_k_ls", "wall_time",
                "mean_compression")


def perf_table(configs) -> list[dict]:
    """Run every config and collect table rows (steps, max dt, Newton/GMRES maxima, wall time)."""
    rows = []
    for cfg in configs:
        res = run(cfg)
        s = res.stats.summary()
        rows.append({"scheme": cfg.scheme, "eta_rk": cfg.control.eta_rk, "n": s["steps"], "max_dt": s["max_dt"],
                     "max_k": s["max_k"], "max_k_stage": s["max_k_stage"], "max_k_ls": s["max_k_ls"],
                     "wall_time": s["wall_time"], "mean_compression": s["mean_compression"],
                     "dts": [r["dt"] for r in res.stats.accepted]})
    return rows


def write_perf_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PERF_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def burn_in(model_name: str, path=None, **overrides) -> RunResult:
    """Regenerate a canonical snapshot from the seed.

    bz1d: uniform 1024 cells, Radau5 at ``eta_rk = 1e-10`` up to ``t = 0.5``.
    bz2d: adapted ``J = 8`` grid, SDIRK4 up to ``t = 2``.
    """
    if model_name == "bz1d":
        ctl = StepControlConfig(eta_rk=1e-10, dt0=1e-8)
        cfg = RunConfig(model="bz1d", max_level=10, eta_mr=0.0, adapt=False, scheme="radau5", control=ctl,
                        t_end=0.5, linear_solver="direct")
    elif model_name == "bz2d":
        ctl = StepControlConfig(eta_rk=1e-3, dt0=1e-6)
        cfg = RunConfig(model="bz2d", max_level=8, roots=(1, 1), eta_mr=1e-3, scheme="sdirk4", control=ctl,
                        t_end=2.0)
    else:
        raise ValueError(f"no burn-in procedure for {model_name!r}")
    cfg = dataclasses.replace(cfg, **overrides) if overrides else cfg
    res = run(cfg)
    if path is not None:
        mr.dump_csv(res.grid, path, res.state, names=res.model.component_names)
    return res


def max_temperature(res: RunResult) -> float:
    """Peak temperature (K) of an ignition run, from the minimum reduced temperature."""
    p = res.model.params
    theta = res.state[:, 1]
    return float(np.max(p.T_O0 + theta * (p.T_F0 - p.T_O0)))


__all__ = [
    "RunConfig", "StatsLog", "RunResult", "run", "load_config", "config_to_ini", "order_sweep", "perf_table",
    "burn_in", "write_outputs", "write_resample", "reference_states", "component_errors", "weighted_norm",
]
