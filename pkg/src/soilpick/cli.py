"""Command-line entry point: ``python3 -m soilpick <subcommand> ...``.

Every subcommand writes under ``--out`` and prints one JSON line to stdout.
Exit status is 2 for usage errors, 1 for runtime failures, 0 otherwise.
"""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import netpbm
from .config import Scenario, load_scenario, load_segmenter
from .contour import find_regions
from .control import InterruptChannel, InterruptReason, PickLimits, run_pick
from .experiment import (ablation_csv, ablation_split, metrics_csv, run_ablation, run_experiment, run_vision_eval,
                         trial_seed)
from .planner import PlanningError, plan_rrt_star
from .terrain import TerrainGrid, capture, generate_terrain
from .geometry import Pose
from .vision import (SegmenterModel, TrainConfig, TrainingDiverged, load_dataset, save_dataset, split_dataset,
                     synthesize_dataset, train)

log = logging.getLogger("soilpick")


class UsageError(Exception):
    pass


def _vec3(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z but got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return parts


def _toggle(text: str) -> dict:
    out = {}
    for item in text.split(","):
        key, sep, raw = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"toggle entries look like key=value, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw.strip().lower() if raw.strip().lower() in ("true", "false") else raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def _scenario(args) -> Scenario:
    s = load_scenario(args.config) if args.config else Scenario()
    if getattr(args, "trials", None) is not None:
        s = replace(s, n_trials=args.trials)
    if args.seed is not None:
        s = replace(s, base_seed=args.seed)
    if getattr(args, "retry_on_grip", False):
        s = replace(s, limits=replace(s.limits, retry_on_grip=True))
    return s


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


@contextmanager
def _sigint_to(channel: InterruptChannel):
    """Route Ctrl-C into the pick machine instead of killing the process."""
    prev = signal.getsignal(signal.SIGINT)
    signal.signal(signal.SIGINT, lambda *_: channel.signal(InterruptReason.USER))
    try:
        yield
    finally:
        signal.signal(signal.SIGINT, prev)


def cmd_gen_terrain(args, out: Path) -> dict:
    s = _scenario(args)
    seed = s.base_seed
    world = generate_terrain(s.terrain, seed)
    (out / "terrain.json").write_text(json.dumps(world.to_dict(), sort_keys=True))
    cap = capture(world, s.camera.pose(), s.camera.intrinsics())
    netpbm.write_ppm(out / "capture.ppm", cap.rgb)
    netpbm.write_pgm(out / "truth_mask.pgm", cap.mask)
    rock = float(np.mean(world.material != 0))
    return {"nx": world.nx, "ny": world.ny, "rock_fraction": rock, "seed": seed}


def cmd_gen_dataset(args, out: Path) -> dict:
    s = _scenario(args)
    synth = s.synth if args.count is None else replace(s.synth, count=args.count)
    imgs = synthesize_dataset(synth, s.base_seed, s.terrain)
    save_dataset(imgs, out, {"seed": s.base_seed, "synth": synth.__dict__})
    pos = sum(int(im.mask.sum()) for im in imgs)
    return {"count": len(imgs), "pickable_fraction": pos / sum(im.mask.size for im in imgs)}


def _train_cfg(args) -> TrainConfig:
    cfg = TrainConfig(seed=args.seed if args.seed is not None else 0)
    kw = {}
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if args.learning_rate is not None:
        kw["learning_rate"] = args.learning_rate
    if args.batch_size is not None:
        kw["batch_size"] = args.batch_size
    if args.no_augment:
        kw["augment"] = False
    return replace(cfg, **kw)


def cmd_train(args, out: Path) -> dict:
    cfg = _train_cfg(args)
    split = split_dataset(load_dataset(args.data), seed=cfg.seed)
    model = train(split, cfg)
    model.save(out / "model.json")
    st = model.train_stats
    return {"train": len(split.train), "validation": len(split.validation), "test": len(split.test),
            "steps": st["steps"], "augmented_images": st["augmented_images"],
            "initial_loss": st["initial_loss"], "final_loss": st["final_loss"]}


def cmd_eval(args, out: Path) -> dict:
    seed = args.seed if args.seed is not None else 0
    split = split_dataset(load_dataset(args.data), seed=seed)
    m = SegmenterModel.load(args.model)
    res = run_vision_eval(split, m)
    _write_json(out / "metrics.json", {k: v.to_dict() for k, v in res.items()})
    (out / "metrics.csv").write_text(metrics_csv([("model", k, v) for k, v in res.items()]))
    return {k: v.to_dict() for k, v in res.items()}


def cmd_segment(args, out: Path) -> dict:
    m = SegmenterModel.load(args.model)
    rgb = netpbm.read_ppm(args.image)
    mask = m.segment(rgb)
    netpbm.write_pgm(out / "mask.pgm", mask)
    regions = find_regions(mask)
    _write_json(out / "regions.json", [r.to_dict() for r in regions])
    return {"pickable_pixels": int(mask.sum()), "regions": len(regions)}


def cmd_plan(args, out: Path) -> dict:
    s = _scenario(args)
    start = args.start if args.start is not None else tuple(s.camera.capture_position)
    cfg = replace(s.planner, seed=s.base_seed) if args.seed is not None else s.planner
    if args.iterations is not None:
        cfg = replace(cfg, max_iterations=args.iterations)
    path = plan_rrt_star(start, args.goal, s.workspace, cfg)
    _write_json(out / "path.json", path.to_dict())
    return {"cost": path.cost, "waypoints": len(path.waypoints), "tree_size": path.tree_size}


def cmd_pick(args, out: Path) -> dict:
    s = _scenario(args)
    seed = s.base_seed
    world = generate_terrain(s.terrain, seed)
    channel = InterruptChannel()
    with _sigint_to(channel):
        report = run_pick(world, s.systems(load_segmenter(s)), s.limits, seed, channel)
    d = report.to_dict()
    d["seed"] = seed
    d["scenario"] = s.to_dict()
    _write_json(out / "report.json", d)
    return {"outcome": report.outcome, "retries_used": report.retries_used, "seed": seed}


def cmd_experiment(args, out: Path) -> dict:
    s = _scenario(args)
    rep = run_experiment(s, workers=args.workers)
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "counts.csv").write_text(rep.to_csv())
    return rep.summary()


def cmd_ablate(args, out: Path) -> dict:
    seed = args.seed if args.seed is not None else 0
    if args.data:
        split = split_dataset(load_dataset(args.data), seed=seed)
    else:
        split = ablation_split(seed=seed)
    base = _train_cfg(args)
    toggles = args.toggle or [{"augment": False}]
    rows = run_ablation(split, base, toggles)
    _write_json(out / "ablation.json", [r.to_dict() for r in rows])
    (out / "ablation.csv").write_text(ablation_csv(rows))
    return {r.name: (None if r.deltas is None else r.deltas["validation"].accuracy) for r in rows}


def cmd_replay(args, out: Path) -> dict:
    report = json.loads(Path(args.report).read_text())
    if "trials" in report:
        trial = report["trials"][args.trial]
        scen = Scenario.from_dict(report["scenario"])
    else:
        trial = report
        scen = Scenario.from_dict(report["scenario"])
    world = generate_terrain(scen.terrain, trial["seed"])
    k = scen.camera.intrinsics()
    for i, pose in enumerate(trial["frames"]):
        cap = capture(world, Pose.from_dict(pose), k)
        netpbm.write_ppm(out / f"frame_{i:02d}.ppm", cap.rgb)
        netpbm.write_pgm(out / f"frame_{i:02d}_truth.pgm", cap.mask)
    return {"frames": len(trial["frames"]), "outcome": trial["outcome"], "seed": trial["seed"]}


COMMANDS = {
    "gen-terrain": cmd_gen_terrain,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "segment": cmd_segment,
    "plan": cmd_plan,
    "pick": cmd_pick,
    "experiment": cmd_experiment,
    "ablate": cmd_ablate,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soilpick", description="Soil sampling pipeline simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, config=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=Path, default=Path("out"))
        if config:
            sp.add_argument("--config", type=Path, default=None, help="scenario JSON")
        return sp

    add("gen-terrain", "generate a bed and render it from the capture pose")
    sp = add("gen-dataset", "render a labeled synthetic dataset")
    sp.add_argument("--count", type=int, default=None)

    def train_flags(sp):
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--learning-rate", type=float, default=None)
        sp.add_argument("--batch-size", type=int, default=None)
        sp.add_argument("--no-augment", action="store_true")

    sp = add("train", "train a segmenter on a dataset directory", config=False)
    sp.add_argument("--data", type=Path, required=True)
    train_flags(sp)
    sp = add("eval", "pooled metrics of a model on the validation and test splits", config=False)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--model", type=Path, required=True)
    sp = add("segment", "segment one PPM image", config=False)
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--image", type=Path, required=True)
    sp = add("plan", "plan an RRT* path in the scenario workspace")
    sp.add_argument("--goal", type=_vec3, required=True)
    sp.add_argument("--start", type=_vec3, default=None)
    sp.add_argument("--iterations", type=int, default=None)
    sp = add("pick", "run one pick")
    sp.add_argument("--retry-on-grip", action="store_true")
    sp = add("experiment", "run the multi-trial protocol")
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--retry-on-grip", action="store_true")
    sp = add("ablate", "train with and without mechanisms and compare", config=False)
    sp.add_argument("--data", type=Path, default=None, help="dataset directory; default is a rotation-sensitive synthetic set")
    sp.add_argument("--toggle", type=_toggle, action="append", help="TrainConfig overrides, e.g. augment=false")
    train_flags(sp)
    sp = add("replay", "re-render the capture frames of a pick or experiment report", config=False)
    sp.add_argument("--report", type=Path, required=True)
    sp.add_argument("--trial", type=int, default=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (PlanningError, TrainingDiverged, ValueError, OSError, KeyError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "out": str(out), **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
