"""Trial protocol, Wilson intervals, vision evaluation and the ablation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .config import Scenario, load_segmenter
from .control import PickReport, run_pick
from .terrain import generate_terrain
from .vision import Confusion, DatasetSplit, LabeledImage, Metrics, SegmenterModel, TrainConfig, confusion, train

log = logging.getLogger(__name__)

# figure-style buckets; everything else lands in "Other"
CATEGORIES = {"Success": "Success", "Deadlock": "Thread/Deadlock", "GripFail": "Grip", "DiveFail": "Dive"}


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval as ``(center, half_width)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 <= successes <= n:
        raise ValueError("successes must lie in [0, n]")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    z = NormalDist().inv_cdf(0.5 + confidence / 2.0)
    p = successes / n
    z2n = z * z / n
    center = (p + z2n / 2.0) / (1.0 + z2n)
    half = z / (1.0 + z2n) * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n))
    return center, half


def trial_seed(base_seed: int, i: int) -> int:
    """Independent per-trial seed from (base_seed, trial index)."""
    return int(np.random.SeedSequence([base_seed, i]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class ExperimentReport:
    scenario: dict
    trials: list[dict]
    counts: dict[str, int]
    fractions: dict[str, float]
    categories: dict[str, int]
    success_interval: tuple[float, float]
    confidence: float

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    def to_dict(self) -> dict:
        return {
            "format": "soilpick-experiment/1",
            "scenario": self.scenario,
            "n_trials": self.n_trials,
            "counts": self.counts,
            "fractions": self.fractions,
            "categories": self.categories,
            "success_interval": {"center": self.success_interval[0], "half_width": self.success_interval[1],
                                 "confidence": self.confidence},
            "trials": self.trials,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def summary(self) -> dict:
        c, h = self.success_interval
        return {"n_trials": self.n_trials, "counts": self.counts, "success_center": c, "success_half_width": h}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "count", "percent"])
        for name, count in self.categories.items():
            w.writerow([name, count, f"{100.0 * count / self.n_trials:.1f}"])
        return buf.getvalue()


def _run_trial(args) -> dict:
    scenario, segmenter, i = args
    seed = trial_seed(scenario.base_seed, i)
    world = generate_terrain(scenario.terrain, seed)
    report = run_pick(world, scenario.systems(segmenter), scenario.limits, seed)
    out = report.to_dict()
    out["trial"] = i
    out["seed"] = seed
    return out


def aggregate(scenario: Scenario, trials: list[dict]) -> ExperimentReport:
    n = len(trials)
    counts: dict[str, int] = {}
    for t in trials:
        counts[t["outcome"]] = counts.get(t["outcome"], 0) + 1
    counts = dict(sorted(counts.items()))
    cats = {v: 0 for v in CATEGORIES.values()} | {"Other": 0}
    for label, c in counts.items():
        cats[CATEGORIES.get(label, "Other")] += c
    wilson = wilson_interval(counts.get("Success", 0), n, scenario.confidence)
    return ExperimentReport(scenario.to_dict(), trials, counts, {k: v / n for k, v in counts.items()}, cats,
                            wilson, scenario.confidence)


def run_experiment(s: Scenario, segmenter: SegmenterModel | None = None, workers: int = 1) -> ExperimentReport:
    """Run ``s.n_trials`` picks, each on a fresh bed seeded from ``(base_seed, i)``.

    Results are folded in trial order, so any worker count gives the same report.
    """
    seg = segmenter if segmenter is not None else load_segmenter(s)
    jobs = [(s, seg, i) for i in range(s.n_trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            trials = list(pool.map(_run_trial, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        trials = [_run_trial(j) for j in jobs]
    return aggregate(s, trials)


def _pooled(m, imgs: Sequence[LabeledImage]) -> Confusion:
    total = Confusion()
    for im in imgs:
        total = total + confusion(m.segment(im.rgb), im.mask)
    return total


def run_vision_eval(data: DatasetSplit, m) -> dict[str, Metrics]:
    """Metrics from confusion counts pooled over each split."""
    if not data.validation or not data.test:
        raise ValueError("validation and test splits must be nonempty")
    return {"validation": _pooled(m, data.validation).metrics(), "test": _pooled(m, data.test).metrics()}


@dataclass
class AblationRow:
    name: str
    config: dict
    metrics: dict[str, Metrics] | None
    deltas: dict[str, Metrics] | None
    error: str | None = None

    def to_dict(self) -> dict:
        def md(x):
            return None if x is None else {k: v.to_dict() for k, v in x.items()}

        return {"name": self.name, "config": self.config, "metrics": md(self.metrics), "deltas": md(self.deltas),
                "error": self.error}


def toggle_name(t: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in sorted(t.items())) or "base"


def run_ablation(data: DatasetSplit, base: TrainConfig, toggles: Sequence[dict]) -> list[AblationRow]:
    """Base row first, then one row per toggle with signed deltas (row minus base).

    A row whose training diverges records the error and leaves the rest intact.
    """
    for t in toggles:
        bad = set(t) - set(base.__dataclass_fields__)
        if bad:
            raise ValueError(f"unknown TrainConfig fields in toggle: {sorted(bad)}")
    base_metrics = run_vision_eval(data, train(data, base))
    zero = {k: v.minus(v) for k, v in base_metrics.items()}
    rows = [AblationRow("base", asdict(base), base_metrics, zero)]
    for t in toggles:
        cfg = replace(base, **t)
        try:
            met = run_vision_eval(data, train(data, cfg))
        except Exception as exc:  # one bad row must not sink the table
            log.warning("ablation row %s failed: %s", toggle_name(t), exc)
            rows.append(AblationRow(toggle_name(t), asdict(cfg), None, None, f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(AblationRow(toggle_name(t), asdict(cfg), met, {k: met[k].minus(base_metrics[k]) for k in met}))
    return rows


def metrics_csv(rows: Sequence[tuple[str, str, Metrics]]) -> str:
    """Rows of ``(name, split, metrics)`` as a table with one metric per column."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "split", "accuracy", "precision", "iou", "recall"])
    for name, split, m in rows:
        w.writerow([name, split, f"{m.accuracy:.6f}", f"{m.precision:.6f}", f"{m.iou:.6f}", f"{m.recall:.6f}"])
    return buf.getvalue()


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    flat = []
    for r in rows:
        if r.metrics is None:
            continue
        for split in ("validation", "test"):
            flat.append((r.name, split, r.metrics[split]))
            if r.name != "base":
                flat.append((f"delta {r.name}", split, r.deltas[split]))
    return metrics_csv(flat)


def rotation_sensitive_dataset(n: int, size: int = 64, seed: int = 0, ramp: float = 0.12,
                               color_gap: float = 0.03, noise: float = 0.02) -> list[LabeledImage]:
    """Images whose texture orientation encodes the class.

    Soil carries a ramp along rows, rock the same ramp along columns, and the
    two differ only slightly in redness. A model fit on upright images leans on
    the orientation cue, which a quarter turn or a flip breaks.
    """
    rng = np.random.default_rng(seed)
    period = 8
    saw = (np.arange(size) % period) / (period - 1) - 0.5
    rows_ramp = np.repeat(saw[:, None], size, axis=1) * ramp
    cols_ramp = np.repeat(saw[None, :], size, axis=0) * ramp
    out = []
    for _ in range(n):
        # blocky soil/rock layout
        cells = rng.random((size // 8, size // 8)) < 0.5
        mask = np.kron(cells, np.ones((8, 8), dtype=bool)).astype(np.uint8)
        base = np.where(mask[..., None] == 1, [0.5 + color_gap, 0.5, 0.5], [0.5, 0.5, 0.5])
        tex = np.where(mask == 1, rows_ramp, cols_ramp)[..., None]
        rgb = np.clip(base + tex + rng.normal(0, noise, (size, size, 3)), 0, 1)
        out.append(LabeledImage(rgb, mask))
    return out


def ablation_split(n_train: int = 24, n_val: int = 24, n_test: int = 12, size: int = 64, seed: int = 0) -> DatasetSplit:
    """Upright training images; validation and test images appear under random rotations and flips."""
    from .vision import apply_dihedral

    rng = np.random.default_rng(seed)
    imgs = rotation_sensitive_dataset(n_train + n_val + n_test, size, seed)
    moved = [apply_dihedral(im, int(rng.integers(1, 8))) for im in imgs[n_train:]]
    return DatasetSplit(imgs[:n_train], moved[:n_val], moved[n_val:])
