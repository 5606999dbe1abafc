"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``python tests/test_acceptance.py`` or ``pytest tests/test_acceptance.py -s``.
The safety and failure-mix checks take a few minutes on one core.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import dense_oracle, flood_components
from soilpick.cli import main as cli_main
from soilpick.config import CameraSetup, PickParams, load_scenario
from soilpick.contour import find_regions
from soilpick.control import ControllerConfig, GraspModel, closed_form_moves, run_dive
from soilpick.experiment import ablation_split, run_ablation, run_experiment, run_vision_eval, wilson_interval
from soilpick.geometry import (PixelDepth, Pose, back_project, compose, intrinsics_from_fov, invert, project,
                               transform_point)
from soilpick.planner import PlannerConfig, Workspace, plan_rrt_star
from soilpick.terrain import DepthNoiseModel, Material
from soilpick.vision import SynthConfig, TrainConfig, split_dataset, synthesize_dataset, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, detail

    return emit


def test_wilson_reproduction(verdict):
    published = {(23, 30): (73.6, 14.6), (25, 30): (79.6, 13.1)}
    t0 = time.perf_counter()
    got = {k: wilson_interval(*k, 0.95) for k in published}
    ms = (time.perf_counter() - t0) * 1e3
    parts, ok = [], ms < 1.0
    for k, (c, h) in published.items():
        gc, gh = 100 * got[k][0], 100 * got[k][1]
        good = abs(gc - c) <= 0.05 and abs(gh - h) <= 0.05
        ok &= good
        parts.append(f"{k[0]}/{k[1]} -> {gc:.4f} ± {gh:.4f} (want {c} ± {h}{'' if good else ', off'})")
    verdict("Wilson reproduction", ok, "; ".join(parts) + f"; {ms:.3f} ms")


def test_controller_analytics(verdict):
    cfg = ControllerConfig(tolerance=0.001)
    res = run_dive(0.77, lambda z: z, cfg)
    errs = np.array([m for m, _ in res.profile]) - cfg.setpoint
    ratio_ok = np.allclose(errs[1:], 0.1 * errs[:-1], rtol=0, atol=1e-12)

    tight = ControllerConfig(tolerance=1e-13, max_steps=40)
    long_errs = np.array([m for m, _ in run_dive(0.77, lambda z: z, tight).profile]) - tight.setpoint
    decay_ok = np.allclose(long_errs[1:], 0.1 * long_errs[:-1], rtol=0, atol=1e-12)

    rng = np.random.default_rng(2024)
    mismatches = 0
    for start in rng.uniform(0.3, 2.0, 100):
        if run_dive(start, lambda z: z, cfg).moves != closed_form_moves(start - cfg.setpoint, cfg):
            mismatches += 1
    ok = res.readings == 4 and res.moves == 3 and ratio_ok and decay_ok and mismatches == 0
    verdict("Controller analytics", ok,
            f"0.77 m start: {res.readings} readings, {res.moves} moves, errors {np.round(errs, 6).tolist()}; "
            f"ratio 0.1 to 1e-12 over {len(long_errs)} readings: {decay_ok}; closed-form mismatches {mismatches}/100")


def test_contour_oracle(verdict):
    rng = np.random.default_rng(0)
    masks = [rng.random((64, 64)) < rng.uniform(0.2, 0.8) for _ in range(100)]
    find_regions(masks[0])  # warm the compiled kernels
    t0 = time.perf_counter()
    got = [find_regions(m) for m in masks]
    secs = time.perf_counter() - t0
    bad = 0
    for m, regions in zip(masks, got):
        expect = flood_components(m)
        if len(regions) != len(expect) or any(
                r.area != a or max(abs(r.centroid[0] - c[0]), abs(r.centroid[1] - c[1])) > 1e-9
                for r, (a, c, _) in zip(regions, expect)):
            bad += 1
    n_regions = sum(len(r) for r in got)
    verdict("Contour oracle", bad == 0 and secs < 5.0,
            f"{100 - bad}/100 masks match ({n_regions} regions), find_regions total {secs:.3f} s")


def test_geometry_round_trip(verdict):
    rng = np.random.default_rng(7)
    k = intrinsics_from_fov(math.radians(75), 512, 512)
    worst = 0.0
    for _ in range(1000):
        p = PixelDepth(rng.uniform(0, 512), rng.uniform(0, 512), rng.uniform(0.05, 5.0))
        q = project(k, back_project(k, p))
        worst = max(worst, abs(q.u - p.u), abs(q.v - p.v), abs(q.d - p.d))

    def rand_pose():
        return Pose.from_rpy(*rng.uniform(-math.pi, math.pi, 3), rng.uniform(-2, 2, 3))

    group = 0.0
    for _ in range(200):
        a, b, c = rand_pose(), rand_pose(), rand_pose()
        x = rng.uniform(-1, 1, 3)
        ident = compose(a, invert(a))
        group = max(group, np.abs(ident.rotation - np.eye(3)).max(), np.abs(ident.translation).max(),
                    np.abs(transform_point(compose(compose(a, b), c), x)
                           - transform_point(compose(a, compose(b, c)), x)).max())
    verdict("Geometry round trip", worst <= 1e-9 and group <= 1e-9,
            f"max round-trip error {worst:.2e}, max group-law error {group:.2e}")


def test_planner_properties(verdict):
    w = Workspace(0.9)
    rng = np.random.default_rng(11)
    plan_rrt_star((0.1, 0, 0.3), (-0.1, 0, 0.3), w, PlannerConfig(max_iterations=50))  # compile
    worst_ratio, worst_time, problems = 0.0, 0.0, []
    for seed in range(10):
        while True:
            s, g = rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.5, 0.5, 3)
            if np.linalg.norm(s) < 0.85 and np.linalg.norm(g) < 0.85 and np.linalg.norm(g - s) > 0.2:
                break
        cfg = PlannerConfig(seed=seed, max_iterations=4000)
        t0 = time.perf_counter()
        path = plan_rrt_star(s, g, w, cfg)
        dt = time.perf_counter() - t0
        again = plan_rrt_star(s, g, w, cfg)
        ratio = path.cost / np.linalg.norm(g - s)
        curve = np.array(path.cost_curve)
        fin = curve[np.isfinite(curve)]
        worst_ratio, worst_time = max(worst_ratio, ratio), max(worst_time, dt)
        if ratio > 1.05:
            problems.append(f"seed {seed} ratio {ratio:.4f}")
        if np.any(np.diff(fin) > 1e-12):
            problems.append(f"seed {seed} curve increases")
        if any(dense_oracle(a, b, w) for a, b in zip(path.waypoints[:-1], path.waypoints[1:])):
            problems.append(f"seed {seed} edge collides")
        if again.waypoints.tobytes() != path.waypoints.tobytes():
            problems.append(f"seed {seed} not deterministic")
        if dt >= 2.0:
            problems.append(f"seed {seed} took {dt:.2f} s")
    verdict("Planner properties", not problems,
            f"worst cost/Euclidean {worst_ratio:.4f}, slowest plan {worst_time:.3f} s"
            + (f"; {', '.join(problems)}" if problems else ""))


@pytest.mark.slow
def test_safety_invariant(verdict, segmenter):
    s = load_scenario(CONFIGS / "rocks.json").with_overrides(n_trials=500, base_seed=1000)
    assert s.terrain.rock_fraction == pytest.approx(0.3)
    rep = run_experiment(s, segmenter)
    targeted = [t for t in rep.trials if t["target"] is not None]
    unsafe = [t["trial"] for t in targeted if t["target_material"] != int(Material.SOIL)]
    verdict("Safety invariant", not unsafe,
            f"{len(unsafe)} of {len(targeted)} selected targets on unpickable cells over {rep.n_trials} picks; "
            f"outcomes {rep.counts}")


@pytest.mark.slow
def test_failure_mix(verdict, segmenter):
    base = load_scenario(CONFIGS / "paper_defaults.json")
    s = base.with_overrides(
        n_trials=2000, base_seed=7,
        camera=CameraSetup(width=128, height=128), pick=PickParams(min_area=12),
        planner=PlannerConfig(max_iterations=500), noise=DepthNoiseModel.noiseless(),
        grasp=GraspModel(retention_prob=0.92, deadlock_prob_per_plan=0.03))
    rep = run_experiment(s, segmenter)
    f = rep.fractions
    # deadlock is drawn before the grip, so grip failures come from the 97% that reach it
    expect = {"Deadlock": 0.03, "GripFail": 0.97 * 0.08, "Success": 0.97 * 0.92}
    off = {k: abs(f.get(k, 0.0) - v) for k, v in expect.items()}
    other = 1.0 - sum(f.get(k, 0.0) for k in expect)
    ok = all(d <= 0.03 for d in off.values()) and other <= 0.03
    verdict("Failure-mix recovery", ok,
            ", ".join(f"{k} {f.get(k, 0.0):.4f} (expected {v:.4f})" for k, v in expect.items())
            + f", other causes {other:.4f}")


def test_vision_desk_scale(verdict):
    imgs = synthesize_dataset(SynthConfig(count=150), 0)
    split = split_dataset(imgs, seed=0)
    model = train(split, TrainConfig(seed=0))
    test = run_vision_eval(split, model)["test"]
    rows = run_ablation(ablation_split(seed=0), TrainConfig(seed=0), [{"augment": False}])
    delta = rows[1].deltas["validation"].accuracy
    ok = test.accuracy >= 0.95 and test.iou >= 0.90 and delta <= 0
    verdict("Vision at desk scale", ok,
            f"{len(imgs)} images ({len(split.train)}/{len(split.validation)}/{len(split.test)}), "
            f"test accuracy {test.accuracy:.4f}, test IoU {test.iou:.4f}; "
            f"augmentation-off validation accuracy delta {delta:+.4f}")


def test_end_to_end_determinism(verdict, tmp_path, capsys):
    outs = []
    for run in ("a", "b"):
        code = cli_main(["experiment", "--config", str(CONFIGS / "paper_defaults.json"), "--trials", "10",
                         "--out", str(tmp_path / run)])
        capsys.readouterr()
        assert code == 0
        outs.append((tmp_path / run / "report.json").read_bytes())
    verdict("End-to-end determinism", outs[0] == outs[1],
            f"two CLI experiment runs, {len(outs[0])} bytes each, identical: {outs[0] == outs[1]}")


def test_thirty_trial_runtime(verdict, segmenter):
    times, counts = {}, {}
    for name in ("no_rocks", "rocks"):
        s = load_scenario(CONFIGS / f"{name}.json")
        t0 = time.perf_counter()
        rep = run_experiment(s, segmenter)
        times[name] = time.perf_counter() - t0
        counts[name] = rep.counts
        assert rep.n_trials == 30
    total = sum(times.values())
    verdict("30-trial runtime", total < 60.0,
            f"total {total:.1f} s ({', '.join(f'{k} {v:.1f} s {counts[k]}' for k, v in times.items())})")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
