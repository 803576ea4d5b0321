import dataclasses
import json
import math
import sys
from importlib import resources

import numpy as np
import pytest

from anisoplan import cli, pipeline
from anisoplan.kinosearch import SearchConfig
from anisoplan.obvp import ReferenceSpeeds
from anisoplan.pipeline import (
    EXIT_DEGRADED,
    EXIT_NO_PATH,
    EXIT_OK,
    EXIT_PARSE,
    EXIT_UNSAFE,
    ScenarioError,
    compute_metrics,
    load_scenario,
    scenario_from_dict,
)
from anisoplan.trajopt import OptConfig, PolyTrajectory
from anisoplan.tracksim import NoiseSpec, SimTrace, TrackerConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATA = resources.files("anisoplan") / "data"


def _trace(t, pos, vel, dt=0.1):
    n = t.size
    state = np.hstack([pos, vel])
    return SimTrace(dt, t, state.copy(), state, np.zeros((n, 3)), np.full(n, -1.0), 2.5)


def _write_scenario(path, **overrides):
    body = {
        "map": str(DATA / "doorway.map"),
        "start": [2.5, 1.0, 0.0],
        "goal": [3.5, 9.0, math.pi / 2],
    }
    body.update(overrides)
    lines = []
    for k, v in body.items():
        lines.append(f"{k} = {json.dumps(v)}")
    path.write_text("\n".join(lines) + "\n")
    return path


# --- metrics --------------------------------------------------------------------------

def test_metrics_constant_speed():
    t = np.linspace(0, 10, 101)
    pos = np.stack([t, np.zeros_like(t), np.zeros_like(t)], axis=1)
    vel = np.tile([1.0, 0.0, 0.0], (t.size, 1))
    m = compute_metrics(_trace(t, pos, vel))
    assert m.duration == pytest.approx(10.0)
    assert m.v_ave == pytest.approx(1.0) and m.v_max == pytest.approx(1.0)
    assert m.w_ave == 0.0 and m.w_max == 0.0


def test_metrics_pure_rotation():
    t = np.linspace(0, 3, 31)
    pos = np.stack([np.zeros_like(t), np.zeros_like(t), -2 * t], axis=1)
    vel = np.tile([0.0, 0.0, -2.0], (t.size, 1))
    m = compute_metrics(_trace(t, pos, vel))
    assert m.w_ave == pytest.approx(2.0)
    assert m.w_max == pytest.approx(-2.0)
    assert m.v_ave == 0.0


def test_metrics_analytic_profile():
    # x = t^2 / 2 and w = 1 - 1.5 t on [0, 2]: length 2, int |w| = 5/3, extremum w(2) = -2
    t = np.linspace(0, 2, 6001)
    w = 1 - 1.5 * t
    pos = np.stack([t**2 / 2, np.zeros_like(t), t - 0.75 * t**2], axis=1)
    vel = np.stack([t, np.zeros_like(t), w], axis=1)
    m = compute_metrics(_trace(t, pos, vel))
    assert m.v_ave == pytest.approx(1.0, abs=1e-6)
    assert m.v_max == pytest.approx(2.0, abs=1e-6)
    assert m.w_ave == pytest.approx(5 / 6, abs=1e-6)
    assert m.w_max == pytest.approx(-2.0, abs=1e-6)


def test_metrics_need_two_samples():
    with pytest.raises(ValueError):
        compute_metrics(_trace(np.zeros(1), np.zeros((1, 3)), np.zeros((1, 3))))


# --- scenarios ------------------------------------------------------------------------------

def test_bundled_scenarios_load():
    assert {"doorway", "corridor"} <= set(pipeline.bundled_scenarios())
    sc = load_scenario("doorway")
    assert sc.opt.limits.v_mx == 2.4 and sc.opt.limits.v_my == 1.2
    assert sc.opt.limits.v_max == (1.2, 1.2, 1.8) and sc.opt.limits.a_max == (1.6, 1.6, 2.4)
    assert sc.map_path.exists()


def test_scenario_overrides_and_run_id():
    sc = load_scenario("doorway").with_overrides(mode="KDY-T", seed=4)
    assert sc.run_id == "doorway-KDY-T-s4"
    assert sc.freeze_yaw and not sc.optimized
    cfg = sc.search_config()
    assert cfg.freeze_yaw and cfg.seed == 4 and cfg.speeds == sc.speeds
    assert sc.noise_spec().seed == 4


@pytest.mark.parametrize(
    "data, match",
    [
        ({"map": "m", "start": [0, 0, 0]}, "goal"),
        ({"map": "m", "start": [0, 0, 0], "goal": [1, 1, 0], "goals": [[1, 1, 0]]}, "goal"),
        ({"map": "m", "start": [0, 0, 0], "goal": [1, 1, 0], "colour": 1}, "unknown"),
        ({"map": "m", "start": [0, 0, 0], "goal": [1, 1, 0], "opt": {"lam_x": 1}}, "lam_x"),
        ({"map": "m", "start": [0, 0, 0], "goal": [1, 1, 0], "opt": {"limits": {"v_mx": 1, "v_my": 2}}}, "opt.limits"),
        ({"map": "m", "start": [0, 0, 0], "goal": [1, 1, 0], "search": {"seed": 3}}, "seed"),
        ({"map": "m", "start": [0, 0, 0], "goal": [1, 1, 0], "noise": {"seed": 3}}, "seed"),
        ({"map": "m", "start": [0, 0, 0], "goal": [1, 1, 0], "mode": "XX"}, "mode"),
        ({"map": "m", "start": [0, 0], "goal": [1, 1, 0]}, "three"),
        ({"map": "m", "start": ["a", 0, 0], "goal": [1, 1, 0]}, "numeric"),
    ],
)
def test_scenario_errors(data, match):
    with pytest.raises(ScenarioError, match=match):
        scenario_from_dict(data)


def test_waypoint_list_parsed():
    sc = scenario_from_dict({"map": "m", "start": [0, 0, 0], "goals": [[1, 1, 0], [2, 2, 1]]})
    assert sc.goals == ((1.0, 1.0, 0.0), (2.0, 2.0, 1.0))


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ScenarioError, match="not found"):
        load_scenario(tmp_path / "absent.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("start = [1, 2\n")
    with pytest.raises(ScenarioError):
        load_scenario(bad)


def test_print_defaults_is_a_valid_scenario():
    text = pipeline.defaults_toml()
    data = tomllib.loads(text)
    sc = scenario_from_dict(data, DATA, "defaults")
    assert sc.opt == OptConfig()
    assert sc.tracker == TrackerConfig()
    assert sc.speeds == ReferenceSpeeds()
    assert dataclasses.replace(sc.search, speeds=SearchConfig().speeds) == SearchConfig()
    assert sc.noise == NoiseSpec()
    assert "expand_radius is unset by default" in text


# --- runs and exit codes ---------------------------------------------------------------------

def test_cli_plan_success_writes_artifacts(tmp_path, capsys):
    code = cli.main(["plan", "doorway", "--out", str(tmp_path), "--plot"])
    assert code == EXIT_OK
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["status"] == "ok" and rec["roundtrip_ok"] is True
    run_dir = tmp_path / "doorway-NO-T-s0"
    assert json.loads((run_dir / "metrics.jsonl").read_text()) == rec
    traj = PolyTrajectory.from_csv((run_dir / "trajectory.csv").read_text())
    assert traj.duration == pytest.approx(rec["planned_duration"])
    header = (run_dir / "trace.csv").read_text().splitlines()[0]
    assert header.startswith("t,x_ref,y_ref,θ_ref")
    assert (run_dir / "plot.svg").read_text().lstrip().startswith("<?xml")
    timing = json.loads((run_dir / "timing.jsonl").read_text())
    assert timing["planning_time"] > 0 and timing["optimization_time"] > 0
    assert rec["v_ave"] <= rec["v_max"]


def test_cli_unsafe_exit(tmp_path, capsys):
    assert cli.main(["plan", "doorway", "--mode", "NOY-T", "--out", str(tmp_path)]) == EXIT_UNSAFE
    assert json.loads(capsys.readouterr().out)["unsafe"] is True


def test_cli_parse_errors(tmp_path, capsys):
    assert cli.main(["plan", str(tmp_path / "nothing.toml")]) == EXIT_PARSE
    bad = tmp_path / "bad.toml"
    bad.write_text("map = \n")
    assert cli.main(["plan", str(bad)]) == EXIT_PARSE
    missing_map = _write_scenario(tmp_path / "mm.toml", map="nowhere.map")
    assert cli.main(["plan", str(missing_map), "--out", str(tmp_path)]) == EXIT_PARSE
    assert "not found" in capsys.readouterr().err


def test_cli_no_path(tmp_path, capsys):
    sc = _write_scenario(tmp_path / "np.toml", goal=[1.0, 5.0, 0.0])
    assert cli.main(["plan", str(sc), "--out", str(tmp_path)]) == EXIT_NO_PATH
    assert "no path" in capsys.readouterr().err
    assert (tmp_path / "np-NO-T-s0" / "metrics.jsonl").exists()


def test_degraded_optimizer_exit(monkeypatch, tmp_path):
    real = pipeline.optimize

    def degraded(*args, **kwargs):
        return dataclasses.replace(real(*args, **kwargs), degraded=True)

    monkeypatch.setattr(pipeline, "optimize", degraded)
    res = pipeline.run(load_scenario("doorway"), tmp_path)
    assert res.exit_code == EXIT_DEGRADED and res.status == "degraded"


def test_output_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(pipeline.OUT_ENV, str(tmp_path / "env_out"))
    assert cli.main(["plan", "doorway", "--mode", "KD-T"]) == EXIT_OK
    assert (tmp_path / "env_out" / "doorway-KD-T-s0" / "metrics.jsonl").exists()


def test_verbose_streams_telemetry(tmp_path, capsys):
    cli.main(["plan", "doorway", "--out", str(tmp_path), "--verbose"])
    err = capsys.readouterr().err.strip().splitlines()
    recs = [json.loads(line) for line in err if line.startswith("{")]
    assert recs and all("objective" in r for r in recs)


def test_print_defaults_command(capsys):
    assert cli.main(["print-defaults"]) == 0
    tomllib.loads(capsys.readouterr().out)


def test_replanning_mode():
    scenario = load_scenario("doorway")
    res = pipeline.run(scenario, replan_ms=1000)
    assert res.replans > 0
    assert res.exit_code == EXIT_OK
    assert np.linalg.norm(res.trace.state[-1, :2] - scenario.goals[-1][:2]) < 0.1


def test_sequential_waypoints(tmp_path):
    path = _write_scenario(tmp_path / "wp.toml", goals=[[1.5, 7.0, 1.0], [4.5, 8.5, 0.0]])
    del_goal = path.read_text().replace(f"goal = {json.dumps([3.5, 9.0, math.pi / 2])}\n", "")
    path.write_text(del_goal)
    res = pipeline.run(load_scenario(path))
    assert res.exit_code in (EXIT_OK, EXIT_UNSAFE)
    traj = res.plan.trajectory
    p = traj.evaluate(traj.breakpoints)
    assert np.min(np.linalg.norm(p[:, :2] - [1.5, 7.0], axis=1)) < 1e-9
    np.testing.assert_allclose(p[-1, :2], [4.5, 8.5], atol=1e-9)
    assert traj.junction_residuals(1).max() <= 1e-9


def test_plot_is_deterministic(tmp_path):
    sc = load_scenario("doorway").with_overrides(mode="KD-T")
    pipeline.run(sc, tmp_path / "a", plot=True)
    pipeline.run(sc, tmp_path / "b", plot=True)
    a = (tmp_path / "a" / sc.run_id / "plot.svg").read_bytes()
    b = (tmp_path / "b" / sc.run_id / "plot.svg").read_bytes()
    assert a == b


# --- batch ----------------------------------------------------------------------------------

def _scenario_dir(tmp_path, *names):
    d = tmp_path / "scenarios"
    d.mkdir()
    for name in names:
        (d / f"{name}.toml").write_text((DATA / f"{name}.toml").read_text().replace(
            f'map = "{name}.map"', f'map = "{DATA / (name + ".map")}"'))
    return d


def test_batch_single_run_matches_run(tmp_path):
    d = _scenario_dir(tmp_path, "doorway")
    report = pipeline.batch(d, [0], ["KD-T"])
    direct = pipeline.run(load_scenario("doorway").with_overrides(mode="KD-T", seed=0)).record()
    assert report["runs"] == [direct]


def test_batch_denominator_and_failures(tmp_path, capsys):
    d = _scenario_dir(tmp_path, "doorway")
    (d / "broken.toml").write_text("map = 3\n")
    out = tmp_path / "out"
    code = cli.main(["batch", str(d), "--seeds", "0,1", "--modes", "NO-T,NOY-T", "--out", str(out)])
    assert code == 0
    summary = {(e["scenario"], e["mode"]): e for e in json.loads(capsys.readouterr().out)}
    assert summary[("doorway", "NO-T")]["runs"] == 2
    assert summary[("doorway", "NO-T")]["success_rate"] == 1.0
    assert summary[("doorway", "NOY-T")]["unsafe_rate"] == 1.0
    lines = (out / "batch_metrics.jsonl").read_text().splitlines()
    assert len(lines) == 5
    assert any(json.loads(line)["status"] == "parse-error" for line in lines)
    assert (out / "batch_summary.json").exists()


def test_batch_errors(tmp_path, capsys):
    with pytest.raises(ScenarioError):
        pipeline.batch(tmp_path, [0])
    assert cli.main(["batch", str(tmp_path), "--modes", "XX"]) == EXIT_PARSE


def test_corridor_batch_optimized_is_faster(tmp_path):
    d = _scenario_dir(tmp_path, "corridor")
    report = pipeline.batch(d, list(range(10)), ["NO-T", "KD-T"])
    summary = {e["mode"]: e for e in report["summary"]}
    assert summary["NO-T"]["runs"] == summary["KD-T"]["runs"] == 10
    assert summary["NO-T"]["planned_duration_mean"] < summary["KD-T"]["planned_duration_mean"]
    assert summary["NO-T"]["duration_mean"] < summary["KD-T"]["duration_mean"]
