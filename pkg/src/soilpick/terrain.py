"""Ground-truth 2.5D soil bed: generation, ray casting, rendering, IR depth sensing, excavation."""
from __future__ import annotations

import base64
import enum
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, Pose, pixel_rays

INCH = 0.0254


class Material(enum.IntEnum):
    SOIL = 0
    ROCK = 1
    ROOT = 2
    GRASS = 3


def pickable(m) -> bool | np.ndarray:
    """Only soil may be sampled. Vectorizes over integer material arrays."""
    if isinstance(m, np.ndarray):
        return m == Material.SOIL
    return Material(m) is Material.SOIL


class NoReturn(Exception):
    """The sensor ray left the bed without hitting terrain."""


@dataclass(frozen=True)
class AlbedoModel:
    """Per-cell albedo ``base * brightness + jitter``; brightness ~ U(1-b, 1+b), jitter ~ U(-j, j) per channel."""

    base: tuple[float, float, float]
    brightness: float = 0.1
    jitter: float = 0.02

    def band(self) -> tuple[np.ndarray, np.ndarray]:
        base = np.asarray(self.base)
        lo = np.clip(base * (1 - self.brightness) - self.jitter, 0.0, 1.0)
        hi = np.clip(base * (1 + self.brightness) + self.jitter, 0.0, 1.0)
        return lo, hi

    def contains(self, rgb: np.ndarray) -> np.ndarray:
        lo, hi = self.band()
        rgb = np.asarray(rgb)
        return np.all((rgb >= lo) & (rgb <= hi), axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        b = rng.uniform(1 - self.brightness, 1 + self.brightness, size=(n, 1))
        j = rng.uniform(-self.jitter, self.jitter, size=(n, 3))
        return np.clip(np.asarray(self.base) * b + j, 0.0, 1.0)


DEFAULT_ALBEDO = {
    Material.SOIL: AlbedoModel((0.48, 0.32, 0.18), 0.12, 0.02),
    Material.ROCK: AlbedoModel((0.56, 0.56, 0.56), 0.18, 0.02),
    Material.ROOT: AlbedoModel((0.30, 0.18, 0.10), 0.10, 0.02),
    Material.GRASS: AlbedoModel((0.22, 0.50, 0.16), 0.12, 0.02),
}


@dataclass
class TerrainConfig:
    size_x: float = 40 * INCH
    size_y: float = 40 * INCH
    cell_size: float = 40 * INCH / 128
    origin: tuple[float, float] = (0.042, -20 * INCH)
    surface_z: float = 0.0
    soil_depth: float = 6 * INCH
    rock_fraction: float = 0.0
    rock_cluster_radius: float = 0.05
    rock_height: float = 0.02
    height_roughness: float = 0.004
    roughness_scale: float = 0.03
    albedo: dict = field(default_factory=lambda: dict(DEFAULT_ALBEDO))
    background_rgb: tuple[float, float, float] = (0.08, 0.08, 0.10)
    light_dir: tuple[float, float, float] = (0.35, -0.25, 1.0)
    ambient: float = 0.45

    def __post_init__(self):
        if not (self.size_x > 0 and self.size_y > 0 and self.cell_size > 0):
            raise ValueError("terrain dimensions and cell size must be positive")
        if not 0.0 <= self.rock_fraction <= 1.0:
            raise ValueError("rock_fraction must lie in [0, 1]")
        self.albedo = {Material(k) if not isinstance(k, str) else Material[k.upper()]: v for k, v in self.albedo.items()}

    @property
    def dims(self) -> tuple[int, int]:
        return max(1, round(self.size_x / self.cell_size)), max(1, round(self.size_y / self.cell_size))

    @classmethod
    def from_dict(cls, d: dict) -> "TerrainConfig":
        d = dict(d)
        if "dims" in d:
            d["size_x"], d["size_y"] = d.pop("dims")
        if "albedo" in d:
            alb = dict(DEFAULT_ALBEDO)
            for name, spec in d["albedo"].items():
                alb[Material[name.upper()]] = AlbedoModel(tuple(spec["base"]), spec.get("brightness", 0.1), spec.get("jitter", 0.02))
            d["albedo"] = alb
        for key in ("origin", "background_rgb", "light_dir"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "albedo"}
        out["albedo"] = {m.name.lower(): {"base": list(a.base), "brightness": a.brightness, "jitter": a.jitter} for m, a in self.albedo.items()}
        return out


@dataclass
class TerrainGrid:
    """Cell ``(i, j)`` covers ``x in origin_x + [i, i+1) * cell_size`` and likewise ``y`` with ``j``."""

    cell_size: float
    origin: tuple[float, float]
    height: np.ndarray  # (nx, ny) meters, world z
    material: np.ndarray  # (nx, ny) int8 Material codes
    albedo: np.ndarray  # (nx, ny, 3) in [0, 1]
    floor_z: float
    background_rgb: tuple[float, float, float] = (0.08, 0.08, 0.10)
    light_dir: tuple[float, float, float] = (0.35, -0.25, 1.0)
    ambient: float = 0.45

    def __post_init__(self):
        self.height = np.asarray(self.height, dtype=float)
        self.material = np.asarray(self.material, dtype=np.int8)
        self.albedo = np.asarray(self.albedo, dtype=float)
        if self.height.ndim != 2 or min(self.height.shape) < 1:
            raise ValueError("height grid must be 2-D and non-empty")
        if self.material.shape != self.height.shape or self.albedo.shape != self.height.shape + (3,):
            raise ValueError("height, material and albedo grids disagree in shape")
        if not np.all(np.isfinite(self.height)):
            raise ValueError("terrain heights must be finite")

    @property
    def nx(self) -> int:
        return self.height.shape[0]

    @property
    def ny(self) -> int:
        return self.height.shape[1]

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    def cell_of(self, x, y):
        """Integer cell indices of world points; ``-1`` where outside the bed."""
        i = np.floor((np.asarray(x, dtype=float) - self.origin[0]) / self.cell_size).astype(np.int64)
        j = np.floor((np.asarray(y, dtype=float) - self.origin[1]) / self.cell_size).astype(np.int64)
        inside = (i >= 0) & (i < self.nx) & (j >= 0) & (j < self.ny)
        return np.where(inside, i, -1), np.where(inside, j, -1)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin[0] + (np.arange(self.nx) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(self.ny) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys, indexing="ij")

    def material_at(self, x: float, y: float) -> Material | None:
        i, j = self.cell_of(x, y)
        if int(i) < 0:
            return None
        return Material(int(self.material[int(i), int(j)]))

    def shade(self) -> np.ndarray:
        """Lambertian factor per cell from the height-field normal."""
        gx, gy = np.gradient(self.height, self.cell_size) if min(self.height.shape) > 1 else (np.zeros_like(self.height),) * 2
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        light = np.asarray(self.light_dir, dtype=float)
        light = light / np.linalg.norm(light)
        lam = np.clip(n @ light, 0.0, 1.0)
        flat = light[2]
        # normalized so flat ground renders at exactly its albedo
        return self.ambient + (1.0 - self.ambient) * lam / flat

    def copy(self) -> "TerrainGrid":
        return TerrainGrid(self.cell_size, tuple(self.origin), self.height.copy(), self.material.copy(), self.albedo.copy(),
                           self.floor_z, tuple(self.background_rgb), tuple(self.light_dir), self.ambient)

    def to_dict(self) -> dict:
        def enc(a, dtype):
            return base64.b64encode(np.ascontiguousarray(a, dtype=dtype).tobytes()).decode("ascii")

        return {
            "format": "soilpick-terrain/1",
            "nx": self.nx,
            "ny": self.ny,
            "cell_size": self.cell_size,
            "origin": list(self.origin),
            "floor_z": self.floor_z,
            "background_rgb": list(self.background_rgb),
            "light_dir": list(self.light_dir),
            "ambient": self.ambient,
            "height_f64le": enc(self.height, "<f8"),
            "material_i8": enc(self.material, "i1"),
            "albedo_f64le": enc(self.albedo, "<f8"),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TerrainGrid":
        nx, ny = int(d["nx"]), int(d["ny"])

        def dec(key, dtype, shape):
            return np.frombuffer(base64.b64decode(d[key]), dtype=dtype).reshape(shape).copy()

        return cls(
            float(d["cell_size"]), tuple(d["origin"]),
            dec("height_f64le", "<f8", (nx, ny)), dec("material_i8", "i1", (nx, ny)), dec("albedo_f64le", "<f8", (nx, ny, 3)),
            float(d["floor_z"]), tuple(d["background_rgb"]), tuple(d["light_dir"]), float(d["ambient"]),
        )


def _place_rock(nx: int, ny: int, fraction: float, radius_cells: float, rng: np.random.Generator) -> tuple[np.ndarray, list]:
    total = nx * ny
    target = int(round(fraction * total))
    rock = np.zeros(total, dtype=bool)
    ii, jj = np.divmod(np.arange(total), ny)
    clusters = []
    count = 0
    while count < target:
        free = np.flatnonzero(~rock)
        c = free[rng.integers(len(free))]
        ci, cj = ii[c], jj[c]
        r = radius_cells * rng.uniform(0.6, 1.4)
        d2 = (ii - ci) ** 2 + (jj - cj) ** 2
        cand = np.flatnonzero((d2 <= r * r) & ~rock)
        # nearest first keeps a partially placed final cluster contiguous
        cand = cand[np.argsort(d2[cand], kind="stable")]
        take = cand[: target - count]
        rock[take] = True
        count += len(take)
        clusters.append((ci, cj, max(r, 1.0)))
    return rock.reshape(nx, ny), clusters


def generate_terrain(cfg: TerrainConfig, seed: int) -> TerrainGrid:
    """Seeded synthetic soil bed with clustered rock; exactly ``round(rock_fraction * N)`` rock cells."""
    nx, ny = cfg.dims
    rng = np.random.default_rng(seed)
    if cfg.height_roughness > 0 and nx * ny > 1:
        field_ = ndimage.gaussian_filter(rng.standard_normal((nx, ny)), cfg.roughness_scale / cfg.cell_size, mode="reflect")
        std = field_.std()
        height = cfg.surface_z + (field_ / std * cfg.height_roughness if std > 0 else 0.0 * field_)
    else:
        rng.standard_normal((nx, ny))
        height = np.full((nx, ny), cfg.surface_z, dtype=float)

    rock, clusters = _place_rock(nx, ny, cfg.rock_fraction, cfg.rock_cluster_radius / cfg.cell_size, rng)
    if clusters and cfg.rock_height > 0:
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        dome = np.zeros((nx, ny))
        for ci, cj, r in clusters:
            d2 = ((ii - ci) ** 2 + (jj - cj) ** 2) / (r * r)
            dome = np.maximum(dome, np.sqrt(np.clip(1.0 - d2, 0.0, 1.0)))
        height = height + np.where(rock, cfg.rock_height * (0.3 + 0.7 * dome), 0.0)

    material = np.where(rock, Material.ROCK, Material.SOIL).astype(np.int8)
    albedo = np.empty((nx, ny, 3))
    for m in (Material.SOIL, Material.ROCK):
        sel = material == m
        albedo[sel] = cfg.albedo[m].sample(rng, int(sel.sum()))
    return TerrainGrid(cfg.cell_size, tuple(cfg.origin), height, material, albedo, cfg.surface_z - cfg.soil_depth,
                       tuple(cfg.background_rgb), tuple(cfg.light_dir), cfg.ambient)


@dataclass
class RayHits:
    hit: np.ndarray  # bool (N,)
    t: np.ndarray  # range along unit direction, nan on miss
    i: np.ndarray  # hit cell indices, -1 on miss
    j: np.ndarray


def raycast(t: TerrainGrid, origins: np.ndarray, dirs: np.ndarray) -> RayHits:
    """First intersection of rays with the piecewise-constant height field.

    Walks the cells crossed by the ray's ground track in order and stops in
    the first one the ray leaves at or below its top; the hit is then either
    that cell's top face or its side wall.
    """
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    origins = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=float).reshape(-1, 3), dirs.shape))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    n = len(dirs)
    out_t = np.full(n, np.nan)
    out_i = np.full(n, -1, dtype=np.int64)
    out_j = np.full(n, -1, dtype=np.int64)
    _march(origins, np.ascontiguousarray(dirs), np.ascontiguousarray(t.height), float(t.origin[0]), float(t.origin[1]),
           float(t.cell_size), float(t.height.max()), float(t.height.min()), out_t, out_i, out_j)
    return RayHits(out_i >= 0, out_t, out_i, out_j)


# crossings closer than this (meters along the ray) count as passing through a corner
_TIE_EPS = 1e-12


@numba.njit(cache=True)
def _march(o, d, height, x0, y0, cell, zmax, zmin, out_t, out_i, out_j):
    nx, ny = height.shape
    x1 = x0 + nx * cell
    y1 = y0 + ny * cell
    for r in range(o.shape[0]):
        ox, oy, oz = o[r, 0], o[r, 1], o[r, 2]
        dx, dy, dz = d[r, 0], d[r, 1], d[r, 2]
        if dz >= 0.0:
            continue
        # only the slab zmin <= z <= zmax can contain a hit
        t0 = max((oz - zmax) / -dz, 0.0)
        t1 = (oz - zmin) / -dz
        # clip to the bed footprint
        if dx != 0.0:
            a, b = (x0 - ox) / dx, (x1 - ox) / dx
            t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
        elif not (x0 <= ox < x1):
            continue
        if dy != 0.0:
            a, b = (y0 - oy) / dy, (y1 - oy) / dy
            t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
        elif not (y0 <= oy < y1):
            continue
        if t0 > t1:
            continue
        i = min(max(int(np.floor((ox + dx * t0 - x0) / cell)), 0), nx - 1)
        j = min(max(int(np.floor((oy + dy * t0 - y0) / cell)), 0), ny - 1)
        # grid traversal: next boundary crossing along each axis, recomputed from the index so
        # rounding does not accumulate along long rays
        si = 1 if dx > 0 else -1
        sj = 1 if dy > 0 else -1
        ex = 1 if dx > 0 else 0
        ey = 1 if dy > 0 else 0
        tnx = (x0 + (i + ex) * cell - ox) / dx if dx != 0.0 else np.inf
        tny = (y0 + (j + ey) * cell - oy) / dy if dy != 0.0 else np.inf
        t = t0
        while True:
            t_exit = min(tnx, tny, t1)
            h = height[i, j]
            # z decreases along the ray, so the cell is hit iff the ray leaves it at or below its top
            if oz + dz * t_exit <= h or t_exit >= t1 and t1 == (oz - zmin) / -dz:
                t_top = (oz - h) / -dz
                out_t[r] = min(max(t, t_top), t_exit)
                out_i[r] = i
                out_j[r] = j
                break
            if t_exit >= t1:
                break
            t = t_exit
            # a (near-)tie is a corner crossing: move diagonally rather than graze a neighbour
            if abs(tnx - tny) <= _TIE_EPS:
                i += si
                j += sj
            elif tnx < tny:
                i += si
            else:
                j += sj
            if dx != 0.0:
                tnx = (x0 + (i + ex) * cell - ox) / dx
            if dy != 0.0:
                tny = (y0 + (j + ey) * cell - oy) / dy
            if i < 0 or i >= nx or j < 0 or j >= ny:
                break


@dataclass
class Capture:
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray  # (H, W) uint8 ground-truth pickable
    depth: np.ndarray  # (H, W) camera-frame Z, nan on miss
    rng_range: np.ndarray  # (H, W) range along each pixel ray, nan on miss
    material: np.ndarray  # (H, W) int8 material of the hit cell, -1 on miss


def capture(t: TerrainGrid, cam: Pose, k: CameraIntrinsics) -> Capture:
    """Render color, ground-truth mask and exact depth from a single ray cast per pixel."""
    rays_cam = pixel_rays(k).reshape(-1, 3)
    norms = np.linalg.norm(rays_cam, axis=1)
    dirs = rays_cam @ cam.rotation.T
    hits = raycast(t, cam.translation, dirs)
    h, w = k.height, k.width
    bg = np.asarray(t.background_rgb, dtype=float)
    rgb = np.broadcast_to(bg, (h * w, 3)).copy()
    mat = np.full(h * w, -1, dtype=np.int8)
    sel = hits.hit
    if np.any(sel):
        shade = t.shade()
        ci, cj = hits.i[sel], hits.j[sel]
        rgb[sel] = np.clip(t.albedo[ci, cj] * shade[ci, cj][:, None], 0.0, 1.0)
        mat[sel] = t.material[ci, cj]
    mask = (mat == Material.SOIL).astype(np.uint8)
    depth = hits.t / norms
    return Capture(rgb.reshape(h, w, 3), mask.reshape(h, w), depth.reshape(h, w), hits.t.reshape(h, w), mat.reshape(h, w))


def render_rgb(t: TerrainGrid, cam: Pose, k: CameraIntrinsics) -> np.ndarray:
    return capture(t, cam, k).rgb


def ground_truth_mask(t: TerrainGrid, cam: Pose, k: CameraIntrinsics) -> np.ndarray:
    return capture(t, cam, k).mask


@dataclass(frozen=True)
class DepthNoiseModel:
    sigma0: float = 0.003
    sigma_slope: float = 0.005
    rock_bias: float = -0.004

    def __post_init__(self):
        if self.sigma0 < 0 or self.sigma_slope < 0:
            raise ValueError("noise standard deviations must be non-negative")

    @classmethod
    def noiseless(cls) -> "DepthNoiseModel":
        return cls(0.0, 0.0, 0.0)

    def apply(self, true_range, is_rock, rng: np.random.Generator):
        true_range = np.asarray(true_range, dtype=float)
        noise = rng.standard_normal(true_range.shape) * (self.sigma0 + self.sigma_slope * true_range)
        out = true_range + noise + np.where(is_rock, self.rock_bias, 0.0)
        return np.maximum(out, 0.0)


def ir_depth_reading(t: TerrainGrid, sensor: Pose, noise: DepthNoiseModel, rng: np.random.Generator) -> float:
    """Noisy range along the sensor's +Z axis; raises NoReturn when the ray misses the bed."""
    axis = sensor.rotation[:, 2]
    hits = raycast(t, sensor.translation, axis[None, :])
    if not hits.hit[0]:
        raise NoReturn("IR ray did not intersect the terrain")
    r = hits.t[0]
    is_rock = t.material[hits.i[0], hits.j[0]] == Material.ROCK
    return float(noise.apply(np.array(r), is_rock, rng))


def noisy_depth_image(cap: Capture, k: CameraIntrinsics, noise: DepthNoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Camera-frame Z image with the range-dependent IR noise model applied; nan where the ray missed."""
    rays = pixel_rays(k)
    norms = np.linalg.norm(rays, axis=-1)
    r = np.nan_to_num(cap.rng_range, nan=0.0)
    noisy = noise.apply(r, cap.material == Material.ROCK, rng)
    return np.where(np.isfinite(cap.rng_range), noisy / norms, np.nan)


def excavate(t: TerrainGrid, center, radius: float, depth: float) -> float:
    """Lower soil cells whose centers lie within ``radius`` of ``center``; returns removed volume in m^3."""
    if depth <= 0 or radius <= 0:
        return 0.0
    xs, ys = t.cell_centers()
    inside = (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius * radius
    sel = inside & (t.material == Material.SOIL)
    new = np.maximum(t.height[sel] - depth, t.floor_z)
    removed = np.maximum(t.height[sel] - new, 0.0)
    t.height[sel] = np.minimum(t.height[sel], new)
    return float(removed.sum() * t.cell_area)


def visible_fraction(values: np.ndarray) -> float:
    return float(np.mean(values)) if values.size else math.nan
