"""Scenario files, the search -> optimization -> tracking pipeline, metrics and batch runs.

Modes:
    NO-T   search with yaw, optimize, track the optimized trajectory
    NOY-T  same with the yaw channel frozen at the start heading
    KD-T   search with yaw, track the coarse trajectory directly
    KDY-T  coarse trajectory with frozen yaw
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from .kinosearch import NoPathFound, SearchConfig, plan
from .obvp import ReferenceSpeeds, State
from .trajopt import MotionLimits, OptConfig, PolyTrajectory, from_coarse, min_clearance, optimize
from .tracksim import ClosedLoop, NoiseSpec, SafetyLimits, SimTrace, TrackerConfig
from .worldmodel import DistanceField, GridMap, MapFormatError, compute_edf, load_map

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

MODES = ("NO-T", "NOY-T", "KD-T", "KDY-T")
OUT_ENV = "ANISOPLAN_OUT"

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_NO_PATH = 3
EXIT_DEGRADED = 4
EXIT_UNSAFE = 5


class ScenarioError(ValueError):
    """Malformed scenario file or invalid configuration."""


# --- config bundle -------------------------------------------------------------

def _build(cls, data, where: str, nested: dict | None = None):
    """Instantiate a frozen config dataclass from a TOML table, rejecting unknown keys."""
    data = dict(data or {})
    nested = nested or {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ScenarioError(f"[{where}] unknown key(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            kwargs[key] = _build(nested[key], value, f"{where}.{key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"[{where}] {exc}") from None


@dataclass(frozen=True)
class Scenario:
    name: str
    map_path: Path
    start: tuple
    goals: tuple  # one or more (x, y, yaw) waypoints, visited in order
    start_velocity: tuple = (0.0, 0.0, 0.0)
    mode: str = "NO-T"
    seed: int = 0
    map_resolution: float = 0.1  # used for PGM maps only
    settle: float = 1.0  # extra tracking time after the reference ends, seconds
    speeds: ReferenceSpeeds = field(default_factory=ReferenceSpeeds)
    search: SearchConfig = field(default_factory=SearchConfig)
    opt: OptConfig = field(default_factory=OptConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if len(self.start) != 3 or len(self.start_velocity) != 3:
            raise ScenarioError("start and start_velocity need three entries (x, y, yaw)")
        if not self.goals or any(len(g) != 3 for g in self.goals):
            raise ScenarioError("goal waypoints need three entries (x, y, yaw)")

    @property
    def freeze_yaw(self) -> bool:
        return "Y" in self.mode

    @property
    def optimized(self) -> bool:
        return self.mode.startswith("NO")

    @property
    def run_id(self) -> str:
        return f"{self.name}-{self.mode}-s{self.seed}"

    def with_overrides(self, mode: str | None = None, seed: int | None = None) -> "Scenario":
        return dataclasses.replace(self, mode=mode or self.mode, seed=self.seed if seed is None else seed)

    def search_config(self) -> SearchConfig:
        return dataclasses.replace(self.search, speeds=self.speeds, freeze_yaw=self.freeze_yaw, seed=self.seed)

    def noise_spec(self) -> NoiseSpec:
        return dataclasses.replace(self.noise, seed=self.seed)

    def load_grid(self) -> GridMap:
        try:
            return load_map(self.map_path, self.map_resolution)
        except FileNotFoundError:
            raise ScenarioError(f"map file not found: {self.map_path}") from None
        except MapFormatError as exc:
            raise ScenarioError(f"{self.map_path}: {exc}") from None


_TOP_KEYS = {"name", "map", "start", "start_velocity", "goal", "goals", "mode", "seed", "map_resolution",
             "settle", "speeds", "search", "opt", "tracker", "noise"}


def scenario_from_dict(data: dict, base_dir: Path = Path("."), name: str = "scenario") -> Scenario:
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    if "map" not in data or "start" not in data:
        raise ScenarioError("scenario needs 'map' and 'start'")
    if ("goal" in data) == ("goals" in data):
        raise ScenarioError("give exactly one of 'goal' or 'goals'")
    goals = [data["goal"]] if "goal" in data else list(data["goals"])
    try:
        goals = tuple(tuple(float(v) for v in g) for g in goals)
        start = tuple(float(v) for v in data["start"])
        start_velocity = tuple(float(v) for v in data.get("start_velocity", (0.0, 0.0, 0.0)))
    except (TypeError, ValueError):
        raise ScenarioError("start, start_velocity and goals must be numeric lists") from None
    map_path = Path(data["map"])
    if not map_path.is_absolute():
        map_path = base_dir / map_path
    search_data = dict(data.get("search", {}))
    for key in ("speeds", "freeze_yaw", "seed"):
        if key in search_data:
            raise ScenarioError(f"[search] '{key}' is set by the scenario, not the search table")
    noise_data = dict(data.get("noise", {}))
    if "seed" in noise_data:
        raise ScenarioError("[noise] 'seed' follows the scenario seed")
    return Scenario(
        name=str(data.get("name", name)),
        map_path=map_path,
        start=start,
        goals=goals,
        start_velocity=start_velocity,
        mode=str(data.get("mode", "NO-T")),
        seed=int(data.get("seed", 0)),
        map_resolution=float(data.get("map_resolution", 0.1)),
        settle=float(data.get("settle", 1.0)),
        speeds=_build(ReferenceSpeeds, data.get("speeds"), "speeds"),
        search=_build(SearchConfig, search_data, "search"),
        opt=_build(OptConfig, data.get("opt"), "opt", {"limits": MotionLimits}),
        tracker=_build(TrackerConfig, data.get("tracker"), "tracker", {"safety": SafetyLimits}),
        noise=_build(NoiseSpec, noise_data, "noise"),
    )


def load_scenario(path) -> Scenario:
    """Parse a TOML scenario; a bare name such as ``doorway`` resolves to a bundled scenario."""
    path = Path(path)
    if not path.exists():
        bundled = resources.files("anisoplan") / "data" / f"{path.stem}.toml"
        if path.suffix in ("", ".toml") and bundled.is_file():
            path = Path(str(bundled))
        else:
            raise ScenarioError(f"scenario file not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return scenario_from_dict(data, path.parent, path.stem)


def bundled_scenarios() -> list[str]:
    root = resources.files("anisoplan") / "data"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


# --- defaults as documented TOML -------------------------------------------------

_DOCS = {
    "speeds.v_ref": "planar reference speed for edge durations, m/s",
    "speeds.w_ref": "yaw reference rate for edge durations, rad/s",
    "search.grid_size": "roadmap cell size, m",
    "search.max_bias": "max jitter of a sample from its cell center, m",
    "search.expand_radius": "neighbour radius, m (default 2.5 * grid_size)",
    "search.lam_yaw": "weight of squared yaw change in edge cost",
    "search.clearance": "minimum obstacle distance along edges, m",
    "search.check_step": "spacing of edge collision checks, m",
    "search.t_min": "minimum edge duration, s",
    "search.max_iter": "expansion cap (default 10 * roadmap size)",
    "opt.lam_s": "energy weight",
    "opt.lam_c": "obstacle weight",
    "opt.lam_t": "time weight",
    "opt.R": "energy weights per axis (x, y, yaw)",
    "opt.d_th": "obstacle cost distance threshold, m",
    "opt.dt": "sampling step of penalty terms, s",
    "opt.eps_d": "distance clip for the obstacle cost, m (default resolution / 10)",
    "opt.obstacle_shift": "subtract 1/d_th so the obstacle cost is continuous",
    "opt.order": "polynomial order per segment",
    "opt.continuity": "highest derivative shared at junctions",
    "opt.limit_margin": "fraction by which penalty limits are tightened",
    "opt.penalty_weight": "initial constraint penalty weight",
    "opt.penalty_growth": "penalty multiplier per round",
    "opt.penalty_rounds": "maximum penalty rounds",
    "opt.tol_c": "normalized violation accepted as converged",
    "opt.max_iter": "optimizer iterations per round",
    "opt.min_samples": "minimum samples per segment",
    "opt.time_budget": "soft wall-clock budget, s (unset: run to convergence, deterministic)",
    "opt.limits.v_mx": "forward semi-axis of the velocity ellipse, m/s",
    "opt.limits.v_my": "lateral semi-axis of the velocity ellipse, m/s",
    "opt.limits.v_max": "velocity box (x, y, yaw)",
    "opt.limits.a_max": "acceleration box (x, y, yaw)",
    "tracker.dt": "control and simulation step, s",
    "tracker.horizon": "prediction steps",
    "tracker.Q": "state error weights (x, y, yaw, vx, vy, w)",
    "tracker.R_u": "input weights relative to the reference acceleration",
    "tracker.a_max": "input bounds (x, y, yaw)",
    "tracker.safety_weight": "weight of the squared safety hinge",
    "tracker.unsafe_margin": "flag unsafe when h_s exceeds margin * h_th",
    "tracker.max_iter": "solver iterations per step",
    "tracker.safety.lam_l": "linear speed weight in h_s",
    "tracker.safety.lam_w": "yaw rate weight in h_s",
    "tracker.safety.h_th": "h_s threshold",
    "noise.sigma": "planar acceleration noise scale, m/s^2",
    "noise.sigma_yaw": "yaw acceleration noise, rad/s^2",
    "noise.lateral_gain": "lateral noise multiplier (default v_mx / v_my)",
    "noise.speed_scaled": "scale noise by per-axis speed over its ellipse semi-axis",
    "noise.correlation": "noise correlation time, s (0: white)",
    "noise.exponent": "power applied to the per-axis speed ratio",
}


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return json.dumps(str(v))


def _emit_table(lines: list, prefix: str, obj, skip=()):
    subtables = []
    lines.append(f"[{prefix}]")
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if dataclasses.is_dataclass(value):
            subtables.append((key, value))
            continue
        doc = _DOCS.get(key, "")
        if value is None:
            lines.append(f"# {f.name} is unset by default: {doc}")
        else:
            lines.append(f"{f.name} = {_toml_value(value)}" + (f"  # {doc}" if doc else ""))
    lines.append("")
    for key, value in subtables:
        _emit_table(lines, key, value)


def defaults_toml() -> str:
    """A complete scenario template with every default value and a short description."""
    lines = [
        "# anisoplan scenario defaults",
        'map = "doorway.map"  # text grid or PGM, relative to this file',
        "# map_resolution = 0.1  # PGM maps only, m per pixel",
        "start = [2.5, 1.0, 0.0]  # x, y, yaw",
        "start_velocity = [0.0, 0.0, 0.0]",
        "goal = [3.0, 9.0, 1.5707963267948966]  # or goals = [[...], [...]] for sequential waypoints",
        'mode = "NO-T"  # NO-T | NOY-T | KD-T | KDY-T',
        "seed = 0  # roadmap jitter and noise",
        "settle = 1.0  # tracking time after the reference ends, s",
        "",
    ]
    _emit_table(lines, "speeds", ReferenceSpeeds())
    _emit_table(lines, "search", SearchConfig(), skip=("speeds", "freeze_yaw", "seed"))
    _emit_table(lines, "opt", OptConfig())
    _emit_table(lines, "tracker", TrackerConfig())
    _emit_table(lines, "noise", NoiseSpec(), skip=("seed",))
    return "\n".join(lines)


# --- metrics -----------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    duration: float
    v_ave: float
    w_ave: float
    v_max: float
    w_max: float  # signed value at the largest |w|
    planning_time: float = 0.0
    optimization_time: float = 0.0
    unsafe: bool = False
    max_h_s: float = -math.inf
    rms_error: float = 0.0


def compute_metrics(trace: SimTrace, planning_time: float = 0.0, optimization_time: float = 0.0) -> MetricsReport:
    if trace.t.size < 2:
        raise ValueError("trace needs at least two samples")
    duration = trace.duration
    xy = trace.state[:, :2]
    length = float(np.sum(np.hypot(*np.diff(xy, axis=0).T)))
    speed = np.hypot(trace.state[:, 3], trace.state[:, 4])
    w = trace.state[:, 5]
    k = int(np.argmax(np.abs(w)))
    return MetricsReport(
        duration=duration,
        v_ave=length / duration,
        w_ave=float(trapezoid(np.abs(w), trace.t)) / duration,
        v_max=float(speed.max()),
        w_max=float(w[k]),
        planning_time=planning_time,
        optimization_time=optimization_time,
        unsafe=trace.unsafe,
        max_h_s=trace.max_h_s,
        rms_error=trace.rms_planar_error,
    )


# --- running -------------------------------------------------------------------------

def concat(trajs: list[PolyTrajectory]) -> PolyTrajectory:
    order = max(t.order for t in trajs)
    parts = [t.embed(order) for t in trajs]
    return PolyTrajectory(np.concatenate([p.coeffs for p in parts]), np.concatenate([p.tau for p in parts]))


@dataclass
class PlanResult:
    trajectory: PolyTrajectory
    coarse_duration: float
    planning_time: float
    optimization_time: float
    degraded: bool
    segments: int


def plan_legs(scenario: Scenario, grid: GridMap, field: DistanceField, start: State, goals,
              on_record=None) -> PlanResult:
    """Plan through every waypoint in turn; each leg starts from the previous leg's end state."""
    cfg = scenario.search_config()
    legs, t_plan, t_opt, degraded, coarse_T, segs = [], 0.0, 0.0, False, 0.0, 0
    state = start
    for goal in goals:
        t0 = time.perf_counter()
        coarse = plan(grid, field, state, goal, cfg)
        t_plan += time.perf_counter() - t0
        coarse_T += coarse.duration
        segs += len(coarse.segments)
        if scenario.optimized:
            res = optimize(coarse, field, scenario.opt, freeze_yaw=scenario.freeze_yaw, on_record=on_record)
            t_opt += res.wall_time
            degraded |= res.degraded
            leg = res.trajectory
        else:
            leg = from_coarse(coarse, scenario.opt.order)
        legs.append(leg)
        p, v = leg.end_state()
        state = State(p, v)
    return PlanResult(concat(legs), coarse_T, t_plan, t_opt, degraded, segs)


@dataclass
class RunResult:
    scenario: Scenario
    exit_code: int
    status: str
    message: str = ""
    plan: PlanResult | None = None
    trace: SimTrace | None = None
    metrics: MetricsReport | None = None
    roundtrip_ok: bool | None = None
    replans: int = 0

    def record(self) -> dict:
        """Deterministic metric record (wall-clock timings live in :meth:`timing_record`)."""
        s = self.scenario
        rec = {"run_id": s.run_id, "scenario": s.name, "mode": s.mode, "seed": s.seed,
               "status": self.status, "exit_code": self.exit_code}
        if self.plan is not None:
            rec.update(planned_duration=self.plan.trajectory.duration, coarse_duration=self.plan.coarse_duration,
                       segments=self.plan.segments, degraded=self.plan.degraded, replans=self.replans)
        if self.metrics is not None:
            m = self.metrics
            rec.update(duration=m.duration, v_ave=m.v_ave, w_ave=m.w_ave, v_max=m.v_max, w_max=m.w_max,
                       max_h_s=m.max_h_s, unsafe=m.unsafe, rms_error=m.rms_error)
        if self.roundtrip_ok is not None:
            rec["roundtrip_ok"] = self.roundtrip_ok
        if self.message:
            rec["message"] = self.message
        return rec

    def timing_record(self) -> dict:
        rec = {"run_id": self.scenario.run_id}
        if self.plan is not None:
            rec.update(planning_time=self.plan.planning_time, optimization_time=self.plan.optimization_time)
        return rec


def format_record(rec: dict) -> str:
    """One JSON line; float formatting is locale independent (shortest round-trip repr)."""
    return json.dumps(rec, sort_keys=True, allow_nan=True)


def roundtrip_check(traj: PolyTrajectory, field: DistanceField, continuity: int, dt: float) -> bool:
    """Re-parse the CSV form and re-check junction continuity and clearance."""
    back = PolyTrajectory.from_csv(traj.to_csv())
    if not (np.array_equal(back.coeffs, traj.coeffs) and np.allclose(back.durations, traj.durations, rtol=1e-15)):
        return False
    if back.n_segments > 1:
        scale = 1.0 + np.abs(back.coeffs).max() * max(1.0, back.durations.max()) ** back.order
        if back.junction_residuals(continuity).max() > 1e-9 * scale:
            return False
    return min_clearance(back, field, dt / 10) > 0.0


def write_plot(path: Path, grid: GridMap, result: RunResult, limits: MotionLimits) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Ellipse

    matplotlib.rcParams["svg.hashsalt"] = "anisoplan"
    w, h = grid.size_m
    ox, oy = grid.origin
    fig, ax = plt.subplots(figsize=(6, 6 * h / w if w >= h else 6), dpi=100)
    ax.imshow(grid.occupancy, origin="lower", cmap="Greys", extent=(ox, ox + w, oy, oy + h), vmin=0, vmax=1)
    traj = result.plan.trajectory
    ts = np.linspace(0.0, traj.duration, 400)
    p = traj.evaluate(ts)
    ax.plot(p[:, 0], p[:, 1], "-", color="tab:blue", lw=1.5, label="reference")
    if result.trace is not None:
        st = result.trace.state
        ax.plot(st[:, 0], st[:, 1], "--", color="tab:red", lw=1.0, label="tracked")
    scale = 0.25
    for t in np.arange(0.0, traj.duration, 1.0):
        q = traj.evaluate(t)[0]
        ax.add_patch(Ellipse((q[0], q[1]), 2 * scale * limits.v_mx, 2 * scale * limits.v_my,
                             angle=math.degrees(q[2]), fill=False, color="tab:green", lw=0.8))
    ax.set_xlim(ox, ox + w)
    ax.set_ylim(oy, oy + h)
    ax.set_aspect("equal")
    ax.set_title(result.scenario.run_id)
    ax.legend(loc="upper right", fontsize=7)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "anisoplan_out"))


def _simulate(scenario, grid, field, first: PlanResult, replan_ms: float | None):
    """Closed-loop tracking; with ``replan_ms`` the plan is recomputed from the simulated state periodically."""
    traj = first.trajectory
    cfg = scenario.tracker
    x0 = np.concatenate([traj.evaluate(0.0, 0)[0], traj.evaluate(0.0, 1)[0]])
    loop = ClosedLoop(x0, cfg, scenario.noise_spec(), scenario.opt.limits)
    total = int(math.ceil((traj.duration + scenario.settle) / cfg.dt - 1e-9))
    if not replan_ms:
        loop.advance(traj, 0.0, total)
        return loop.trace(), 0
    period = max(1, int(round(replan_ms / 1000.0 / cfg.dt)))
    t_local, replans = 0.0, 0
    pending = list(scenario.goals)
    while True:
        remaining = int(math.ceil((traj.duration + scenario.settle - t_local) / cfg.dt - 1e-9))
        if remaining <= 0:
            break
        n = min(period, remaining)
        loop.advance(traj, t_local, n)
        t_local += n * cfg.dt
        if t_local >= traj.duration or not np.all(np.isfinite(loop.x)):
            continue
        while len(pending) > 1 and np.hypot(*(loop.x[:2] - pending[0][:2])) < scenario.search.grid_size:
            pending.pop(0)
        try:
            new = plan_legs(scenario, grid, field, State(loop.x[:3], loop.x[3:]), pending)
        except (NoPathFound, ValueError) as exc:
            log.info("replan skipped at t=%.2f: %s", loop.time, exc)
            continue
        traj, t_local = new.trajectory, 0.0
        replans += 1
    return loop.trace(), replans


def run(scenario: Scenario, out_dir: Path | None = None, replan_ms: float | None = None, plot: bool = False,
        on_record=None) -> RunResult:
    """Execute one scenario; writes artifacts under ``out_dir / run_id`` when ``out_dir`` is given."""
    try:
        grid = scenario.load_grid()
    except ScenarioError as exc:
        return RunResult(scenario, EXIT_PARSE, "parse-error", str(exc))
    field_ = compute_edf(grid)
    start = State(scenario.start, scenario.start_velocity)
    try:
        first = plan_legs(scenario, grid, field_, start, scenario.goals, on_record)
    except NoPathFound as exc:
        result = RunResult(scenario, EXIT_NO_PATH, "no-path", f"{scenario.run_id}: {exc}")
        _write(result, out_dir, grid, plot)
        return result
    trace, replans = _simulate(scenario, grid, field_, first, replan_ms)
    metrics = compute_metrics(trace, first.planning_time, first.optimization_time)
    continuity = scenario.opt.continuity if scenario.optimized else 1
    ok = roundtrip_check(first.trajectory, field_, continuity, scenario.opt.dt)
    if first.degraded:
        code, status = EXIT_DEGRADED, "degraded"
    elif metrics.unsafe:
        code, status = EXIT_UNSAFE, "unsafe"
    else:
        code, status = EXIT_OK, "ok"
    result = RunResult(scenario, code, status, "", first, trace, metrics, ok, replans)
    _write(result, out_dir, grid, plot)
    return result


def _write(result: RunResult, out_dir: Path | None, grid: GridMap, plot: bool) -> None:
    if out_dir is None:
        return
    run_dir = Path(out_dir) / result.scenario.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.jsonl").write_text(format_record(result.record()) + "\n", encoding="utf-8")
    (run_dir / "timing.jsonl").write_text(format_record(result.timing_record()) + "\n", encoding="utf-8")
    if result.plan is not None:
        (run_dir / "trajectory.csv").write_text(result.plan.trajectory.to_csv(), encoding="utf-8")
    if result.trace is not None:
        (run_dir / "trace.csv").write_text(result.trace.to_csv(), encoding="utf-8")
    if plot and result.plan is not None:
        write_plot(run_dir / "plot.svg", grid, result, result.scenario.opt.limits)


def batch(scenario_dir, seeds, modes=None, out_dir: Path | None = None) -> dict:
    """Run every scenario file in ``scenario_dir`` for each seed (and mode, if given)."""
    paths = sorted(Path(scenario_dir).glob("*.toml"))
    if not paths:
        raise ScenarioError(f"no scenario files in {scenario_dir}")
    records, groups = [], {}
    for path in paths:
        try:
            base = load_scenario(path)
        except ScenarioError as exc:
            records.append({"scenario": path.stem, "status": "parse-error", "exit_code": EXIT_PARSE,
                            "message": str(exc)})
            continue
        for mode in modes or [base.mode]:
            for seed in seeds:
                sc = base.with_overrides(mode=mode, seed=seed)
                try:
                    res = run(sc, out_dir)
                    rec = res.record()
                except Exception as exc:  # a failing run must not stop the batch
                    log.exception("run %s failed", sc.run_id)
                    rec = {"run_id": sc.run_id, "scenario": sc.name, "mode": mode, "seed": seed,
                           "status": "error", "exit_code": 1, "message": str(exc)}
                records.append(rec)
                groups.setdefault((sc.name, mode), []).append(rec)
    summary = []
    for (name, mode), recs in sorted(groups.items()):
        entry = {"scenario": name, "mode": mode, "runs": len(recs),
                 "success_rate": sum(r["exit_code"] == EXIT_OK for r in recs) / len(recs)}
        for key in ("planned_duration", "duration", "v_ave", "w_ave", "v_max", "w_max", "max_h_s", "rms_error"):
            vals = [r[key] for r in recs if key in r]
            if vals:
                entry[f"{key}_mean"] = float(np.mean(vals))
                entry[f"{key}_std"] = float(np.std(vals))
        entry["unsafe_rate"] = sum(bool(r.get("unsafe")) for r in recs) / len(recs)
        summary.append(entry)
    report = {"runs": records, "summary": summary}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "batch_metrics.jsonl").write_text("".join(format_record(r) + "\n" for r in records), encoding="utf-8")
        (out / "batch_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return report
