"""Dataset handling, the per-pixel logistic segmenter and the segmentation metric suite."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import netpbm

log = logging.getLogger(__name__)

FEATURE_VERSION = "rgb+mean3+std3+vgrad3+bias/1"
N_FEATURES = 13
TARGET_SIZE = 512


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LabeledImage:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) in {0, 1}

    def __post_init__(self):
        self.rgb = np.ascontiguousarray(self.rgb)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("rgb must be (H, W, 3)")
        if self.rgb.shape[:2] != self.mask.shape:
            raise ValueError(f"rgb {self.rgb.shape[:2]} and mask {self.mask.shape} differ in size")
        if self.mask.size and self.mask.max() > 1:
            raise ValueError("mask values must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class DatasetSplit:
    train: list[LabeledImage]
    validation: list[LabeledImage]
    test: list[LabeledImage]
    indices: dict = field(default_factory=dict)  # split name -> source indices


def _resample_axis(n_in: int, n_out: int):
    # pixel-center aligned source coordinate of each output pixel
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_to_512(img: LabeledImage, size: int = TARGET_SIZE) -> LabeledImage:
    """Bilinear resample of the color image, nearest-neighbour resample of the mask."""
    h, w = img.shape
    if h == 0 or w == 0:
        raise ValueError("cannot resize an empty image")
    if (h, w) == (size, size):
        return LabeledImage(img.rgb.copy(), img.mask.copy())
    r0, r1, fr = _resample_axis(h, size)
    c0, c1, fc = _resample_axis(w, size)
    src = img.rgb.astype(np.float64)
    rows = src[r0] * (1 - fr)[:, None, None] + src[r1] * fr[:, None, None]
    rgb = rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    nr = np.minimum(((np.arange(size) + 0.5) * (h / size)).astype(np.int64), h - 1)
    nc = np.minimum(((np.arange(size) + 0.5) * (w / size)).astype(np.int64), w - 1)
    mask = img.mask[nr][:, nc]
    return LabeledImage(rgb.astype(img.rgb.dtype if img.rgb.dtype.kind == "f" else np.float32), mask)


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [r * n for r in ratios]
    sizes = [int(math.floor(q)) for q in quotas]
    rest = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split_dataset(imgs: Sequence[LabeledImage], ratios=(0.7, 0.2, 0.1), seed: int = 0) -> DatasetSplit:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    n = len(imgs)
    order = np.random.default_rng(seed).permutation(n)
    a, b, _ = largest_remainder(n, ratios)
    parts = order[:a], order[a:a + b], order[a + b:]
    names = ("train", "validation", "test")
    return DatasetSplit(*[[imgs[i] for i in p] for p in parts], indices={k: p.tolist() for k, p in zip(names, parts)})


def dihedral(arr: np.ndarray, g: int) -> np.ndarray:
    """Element ``g`` in 0..7 of the order-8 dihedral group: ``g % 4`` quarter turns, then a left-right flip if ``g >= 4``."""
    out = np.rot90(arr, g % 4, axes=(0, 1))
    if g >= 4:
        out = out[:, ::-1]
    return out


def apply_dihedral(img: LabeledImage, g: int) -> LabeledImage:
    if img.shape[0] != img.shape[1]:
        raise ValueError("dihedral augmentation needs a square image")
    return LabeledImage(dihedral(img.rgb, g), dihedral(img.mask, g))


def augment(img: LabeledImage, rng: np.random.Generator) -> LabeledImage:
    """Uniformly random rotation/flip applied identically to image and mask."""
    if img.shape[0] != img.shape[1]:
        raise ValueError("dihedral augmentation needs a square image")
    return apply_dihedral(img, int(rng.integers(8)))


# 3x3 neighbourhood in a fixed order; full maps and sampled pixels sum in this order
_NEIGHBOURS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]


def _features_from_neighbours(get) -> np.ndarray:
    """Assemble the feature stack from ``get(dr, dc) -> (..., 3)`` neighbour values (edge-replicated)."""
    center = get(0, 0)
    s = np.zeros_like(center)
    s2 = np.zeros_like(center)
    for dr, dc in _NEIGHBOURS:
        v = get(dr, dc)
        s = s + v
        s2 = s2 + v * v
    mean = s / 9.0
    std = np.sqrt(np.maximum(s2 / 9.0 - mean * mean, 0.0))
    vgrad = (get(1, 0) - get(-1, 0)) / 2.0
    bias = np.ones(center.shape[:-1] + (1,))
    return np.concatenate([center, mean, std, vgrad, bias], axis=-1)


def compute_features(rgb: np.ndarray) -> np.ndarray:
    """Per-pixel features, shape (H, W, 13): RGB, 3x3 mean and std per channel, vertical central difference per channel, bias."""
    x = np.asarray(rgb, dtype=np.float64)
    h, w = x.shape[:2]
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    return _features_from_neighbours(lambda dr, dc: p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w])


def _dihedral_source(rows: np.ndarray, cols: np.ndarray, n: int, g: int):
    """Map coordinates in ``dihedral(arr, g)`` back to coordinates in ``arr`` (square, side ``n``)."""
    if g >= 4:
        cols = n - 1 - cols
    for _ in range(g % 4):
        # one quarter turn: out[i, j] = arr[j, n - 1 - i]
        rows, cols = cols, n - 1 - rows
    return rows, cols


def features_at(rgb: np.ndarray, rows: np.ndarray, cols: np.ndarray, g: int = 0) -> np.ndarray:
    """Features at selected pixels of ``dihedral(rgb, g)``.

    Equal to ``compute_features(dihedral(rgb, g))[rows, cols]`` but gathers
    straight from ``rgb`` without building the transformed image.
    """
    h, w = rgb.shape[:2]
    if g and h != w:
        raise ValueError("dihedral transforms need a square image")
    flat = np.asarray(rgb).reshape(-1, 3)
    rows = np.asarray(rows)[..., None]
    cols = np.asarray(cols)[..., None]
    dr = np.array([d[0] for d in _NEIGHBOURS])
    dc = np.array([d[1] for d in _NEIGHBOURS])
    rr = np.clip(rows + dr, 0, h - 1)
    cc = np.clip(cols + dc, 0, w - 1)
    rr, cc = _dihedral_source(rr, cc, h, g)
    patch = flat[rr * w + cc].astype(np.float64)  # (..., 9, 3)
    index = {d: i for i, d in enumerate(_NEIGHBOURS)}
    return _features_from_neighbours(lambda a, b: patch[..., index[(a, b)], :])


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Segmenter(Protocol):
    def segment(self, rgb: np.ndarray) -> np.ndarray: ...


@dataclass
class SegmenterModel:
    weights: np.ndarray
    threshold: float = 0.5
    feature_version: str = FEATURE_VERSION
    train_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(N_FEATURES)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("segmenter weights must be finite")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    @classmethod
    def zeros(cls) -> "SegmenterModel":
        return cls(np.zeros(N_FEATURES))

    def predict_proba(self, rgb: np.ndarray) -> np.ndarray:
        return sigmoid(compute_features(rgb) @ self.weights)

    def segment(self, rgb: np.ndarray) -> np.ndarray:
        return segment(self, rgb)

    def to_dict(self) -> dict:
        return {"format": "soilpick-segmenter/1", "feature_version": self.feature_version,
                "weights": self.weights.tolist(), "threshold": self.threshold, "train_stats": self.train_stats}

    @classmethod
    def from_dict(cls, d: dict) -> "SegmenterModel":
        if d.get("feature_version") != FEATURE_VERSION:
            raise ValueError(f"model feature version {d.get('feature_version')!r} does not match {FEATURE_VERSION!r}")
        return cls(np.asarray(d["weights"]), float(d.get("threshold", 0.5)), d["feature_version"], d.get("train_stats", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SegmenterModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def segment(m: SegmenterModel, rgb: np.ndarray) -> np.ndarray:
    """1 where the pickable probability reaches the threshold (ties count as pickable)."""
    return (m.predict_proba(rgb) >= m.threshold).astype(np.uint8)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 0.001
    augment: bool = True
    seed: int = 0
    pixels_per_image: int = 256

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.pixels_per_image < 1:
            raise ValueError("epochs, batch_size and pixels_per_image must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    eps = 1e-12
    return float(-np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))


def _sample_pixels(img: LabeledImage, k: int, rng: np.random.Generator, g: int = 0):
    h, w = img.shape
    rows = rng.integers(0, h, size=k)
    cols = rng.integers(0, w, size=k)
    sr, sc = _dihedral_source(rows, cols, h, g)
    return features_at(img.rgb, rows, cols, g), img.mask[sr, sc].astype(np.float64)


def train(data: DatasetSplit, cfg: TrainConfig) -> SegmenterModel:
    """Mini-batch gradient descent on mean per-pixel binary cross-entropy.

    Features are standardized with statistics from a fixed pixel sample of the
    training set; the learned weights are folded back so the returned model
    acts on raw features. Initial weights are zero.
    """
    imgs = data.train
    if not imgs:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)

    # fixed probe sample: standardization statistics and before/after loss
    probe_x, probe_y = zip(*(_sample_pixels(im, min(cfg.pixels_per_image, im.mask.size), rng) for im in imgs))
    probe_x, probe_y = np.concatenate(probe_x), np.concatenate(probe_y)
    mu = probe_x[:, :-1].mean(axis=0)
    sd = probe_x[:, :-1].std(axis=0)
    sd[sd < 1e-8] = 1.0

    def standardize(x):
        z = x.copy()
        z[:, :-1] = (x[:, :-1] - mu) / sd
        return z

    probe_z = standardize(probe_x)
    w = np.zeros(N_FEATURES)
    initial_loss = _bce(sigmoid(probe_z @ w), probe_y)
    history = []
    steps = 0
    augmented = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(imgs))
        for b in range(0, len(order), cfg.batch_size):
            xs, ys = [], []
            for idx in order[b:b + cfg.batch_size]:
                im = imgs[idx]
                g = 0
                if cfg.augment:
                    # same draw as augment(); the transform is applied to sampled coordinates only
                    if im.shape[0] != im.shape[1]:
                        raise ValueError("dihedral augmentation needs a square image")
                    g = int(rng.integers(8))
                    augmented += 1
                x, y = _sample_pixels(im, cfg.pixels_per_image, rng, g)
                xs.append(x)
                ys.append(y)
            z = standardize(np.concatenate(xs))
            y = np.concatenate(ys)
            p = sigmoid(z @ w)
            loss = _bce(p, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {steps}")
            history.append(loss)
            w = w - cfg.learning_rate * (z.T @ (p - y)) / len(y)
            if not np.all(np.isfinite(w)):
                raise TrainingDiverged(f"weights became non-finite at step {steps}")
            steps += 1
    final_loss = _bce(sigmoid(probe_z @ w), probe_y)

    raw = np.empty(N_FEATURES)
    raw[:-1] = w[:-1] / sd
    raw[-1] = w[-1] - float(np.sum(w[:-1] * mu / sd))
    stats = {"steps": steps, "augmented_images": augmented, "pixels_per_step": cfg.batch_size * cfg.pixels_per_image,
             "initial_loss": initial_loss, "final_loss": final_loss, "loss_history": history, "config": asdict(cfg)}
    return SegmenterModel(raw, 0.5, FEATURE_VERSION, stats)


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def metrics(self) -> "Metrics":
        # an undefined ratio is perfect when the positive class is absent from both masks
        both_empty = self.tp + self.fp + self.fn == 0

        def ratio(num, den):
            if den == 0:
                return 1.0 if both_empty else 0.0
            return num / den

        return Metrics(
            accuracy=(self.tp + self.tn) / self.n if self.n else 1.0,
            precision=ratio(self.tp, self.tp + self.fp),
            recall=ratio(self.tp, self.tp + self.fn),
            iou=ratio(self.tp, self.tp + self.fp + self.fn),
        )


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    iou: float

    def to_dict(self) -> dict:
        return asdict(self)

    def minus(self, other: "Metrics") -> "Metrics":
        return Metrics(*(a - b for a, b in zip(astuple_metrics(self), astuple_metrics(other))))


def astuple_metrics(m: Metrics) -> tuple[float, float, float, float]:
    return m.accuracy, m.precision, m.recall, m.iou


def confusion(pred, truth) -> Confusion:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in size")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return Confusion(tp, fp, fn, pred.size - tp - fp - fn)


def evaluate(pred, truth) -> Metrics:
    return confusion(pred, truth).metrics()


def save_dataset(imgs: Sequence[LabeledImage], directory, extra: dict | None = None) -> Path:
    """Write paired PPM/PGM files plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, im in enumerate(imgs):
        rgb_name, mask_name = f"img_{i:04d}.ppm", f"img_{i:04d}_mask.pgm"
        netpbm.write_ppm(d / rgb_name, im.rgb)
        netpbm.write_pgm(d / mask_name, im.mask)
        entries.append({"rgb": rgb_name, "mask": mask_name})
    manifest = {"format": "soilpick-dataset/1", "count": len(entries), "images": entries}
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d / "manifest.json"


def load_dataset(directory) -> list[LabeledImage]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    return [LabeledImage(netpbm.read_ppm(d / e["rgb"]), netpbm.read_mask(d / e["mask"])) for e in manifest["images"]]


@dataclass
class SynthConfig:
    """Randomized top-down views of generated beds, used as a labeled corpus."""

    count: int = 150
    native_size: int = 128
    hfov_deg: float = 75.0
    height_range: tuple[float, float] = (0.4, 0.8)
    rock_fraction_range: tuple[float, float] = (0.15, 0.45)
    center: tuple[float, float] = (0.55, 0.0)
    center_jitter: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("height_range", "rock_fraction_range", "center"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def synthesize_dataset(cfg: SynthConfig, seed: int, terrain_cfg=None) -> list[LabeledImage]:
    """Render ``cfg.count`` labeled 512x512 views, each of a fresh bed with its own rock fraction and camera pose."""
    from dataclasses import replace

    from .geometry import intrinsics_from_fov, look_down_pose
    from .terrain import TerrainConfig, capture, generate_terrain

    base_cfg = terrain_cfg or TerrainConfig()
    k = intrinsics_from_fov(math.radians(cfg.hfov_deg), cfg.native_size, cfg.native_size)
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(cfg.count)):
        rng = np.random.default_rng(child)
        tcfg = replace(base_cfg, rock_fraction=float(rng.uniform(*cfg.rock_fraction_range)))
        world = generate_terrain(tcfg, int(rng.integers(2**31)))
        pos = (cfg.center[0] + rng.uniform(-cfg.center_jitter, cfg.center_jitter),
               cfg.center[1] + rng.uniform(-cfg.center_jitter, cfg.center_jitter),
               base_cfg.surface_z + rng.uniform(*cfg.height_range))
        cap = capture(world, look_down_pose(pos, float(rng.uniform(0, 2 * math.pi))), k)
        out.append(resize_to_512(LabeledImage(cap.rgb.astype(np.float32), cap.mask)))
    return out
