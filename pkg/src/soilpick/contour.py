"""Border following over binary masks and conversion of region centers into hover targets.

Foreground is 8-connected and background 4-connected. Borders are traced with
the raster-scan border-following scheme: a run start with a 0 to its left opens
an outer border, a run end with a 0 to its right opens a hole border. Hole
borders are traced only so that they are labeled; they are not reported.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, PixelDepth, Pose, back_project, transform_point

log = logging.getLogger(__name__)

# counter-clockwise on screen (rows grow downward): E, NE, N, NW, W, SW, S, SE
_DR = (0, -1, -1, -1, 0, 1, 1, 1)
_DC = (1, 1, 0, -1, -1, -1, 0, 1)


@dataclass(frozen=True)
class Contour:
    """Closed outer boundary as ``(u, v)`` = (column, row) pixel coordinates, counter-clockwise on screen."""

    points: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.points)

    def signed_area(self) -> float:
        """Shoelace area in (u, v); negative means counter-clockwise as displayed with v pointing down."""
        if len(self.points) < 3:
            return 0.0
        p = np.asarray(self.points, dtype=float)
        q = np.roll(p, -1, axis=0)
        return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))


@dataclass(frozen=True)
class Region:
    contour: Contour
    area: int
    centroid: tuple[float, float]  # (u, v)
    origin: tuple[int, int]  # (row, col) of the first pixel in raster order

    def to_dict(self) -> dict:
        return {
            "area": self.area,
            "centroid": list(self.centroid),
            "origin": list(self.origin),
            "contour": [list(p) for p in self.contour.points],
        }


def _trace(f: list, w2: int, start: int, from_dir: int, nbd: int) -> list[int]:
    """Follow one border from flat index ``start``; ``from_dir`` points at the 0-pixel that opened it."""
    offs = [_DR[k] * w2 + _DC[k] for k in range(8)]
    # clockwise search for the first nonzero neighbour
    d1 = -1
    for s in range(8):
        k = (from_dir - s) % 8
        if f[start + offs[k]] != 0:
            d1 = k
            break
    if d1 < 0:
        f[start] = -nbd
        return [start]
    p1 = start + offs[d1]
    pts = []
    p3 = start
    d2 = d1  # direction from p3 to p2
    while True:
        pts.append(p3)
        east_zero = False
        k = (d2 + 1) % 8
        for _ in range(8):
            q = p3 + offs[k]
            if f[q] != 0:
                break
            if k == 0:
                east_zero = True
            k = (k + 1) % 8
        p4 = p3 + offs[k]
        if east_zero:
            f[p3] = -nbd
        elif f[p3] == 1:
            f[p3] = nbd
        if p4 == start and p3 == p1:
            return pts
        # direction from p4 back to p3
        d2 = (k + 4) % 8
        p3 = p4


def find_regions(mask) -> list[Region]:
    """One region per 8-connected foreground component, largest first.

    Ties in area are broken by the component's first pixel in raster order.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    b = (m != 0).astype(np.int8)
    h, w = b.shape
    if h == 0 or w == 0 or not b.any():
        return []
    w2 = w + 2
    padded = np.zeros((h + 2, w2), dtype=np.int8)
    padded[1:-1, 1:-1] = b
    f = padded.ravel().astype(np.int64).tolist()

    # runs of ones, in raster order
    dif = np.diff(np.pad(b, ((0, 0), (1, 1))).astype(np.int8), axis=1)
    srow, scol = np.nonzero(dif == 1)
    erow, ecol = np.nonzero(dif == -1)
    ecol = ecol - 1  # inclusive end column

    border_comp: dict[int, int] = {}
    comp_origin: list[tuple[int, int]] = []
    comp_contour: list[list[int]] = []
    run_comp = np.empty(len(srow), dtype=np.int64)
    nbd = 1
    for r_idx in range(len(srow)):
        i, js, je = int(srow[r_idx]), int(scol[r_idx]), int(ecol[r_idx])
        ps = (i + 1) * w2 + (js + 1)
        if f[ps] == 1:
            # left neighbour is 0 by construction of the run
            nbd += 1
            cid = len(comp_origin)
            border_comp[nbd] = cid
            comp_origin.append((i, js))
            comp_contour.append(_trace(f, w2, ps, 4, nbd))
        cid = border_comp[abs(f[ps])]
        run_comp[r_idx] = cid
        pe = (i + 1) * w2 + (je + 1)
        if f[pe] >= 1:
            # right neighbour is 0: a hole border of the same component
            nbd += 1
            border_comp[nbd] = cid
            _trace(f, w2, pe, 0, nbd)

    n = len(comp_origin)
    lengths = (ecol - scol + 1).astype(np.int64)
    area = np.bincount(run_comp, weights=lengths, minlength=n)
    sum_u = np.bincount(run_comp, weights=lengths * (scol + ecol) / 2.0, minlength=n)
    sum_v = np.bincount(run_comp, weights=lengths * srow.astype(float), minlength=n)

    regions = []
    for c in range(n):
        pts = tuple(((p % w2) - 1, (p // w2) - 1) for p in comp_contour[c])
        a = int(area[c])
        regions.append(Region(Contour(pts), a, (sum_u[c] / a, sum_v[c] / a), comp_origin[c]))
    regions.sort(key=lambda r: (-r.area, r.origin))
    return regions


@dataclass(frozen=True)
class TargetCandidate:
    position: np.ndarray  # base frame, z == hover height
    source_region_area: int
    source_pixel: tuple[int, int]  # (u, v) nearest pixel to the centroid
    centroid: tuple[float, float]
    centroid_in_region: bool
    region_origin: tuple[int, int] = (-1, -1)  # (row, col) of the source region's first pixel

    def to_dict(self) -> dict:
        return {
            "position": [float(x) for x in self.position],
            "source_region_area": self.source_region_area,
            "source_pixel": list(self.source_pixel),
            "centroid": list(self.centroid),
            "centroid_in_region": self.centroid_in_region,
            "region_origin": list(self.region_origin),
        }


def candidate_targets(regions, depth, k: CameraIntrinsics, cam_to_base: Pose, hover_height: float,
                      min_area: int = 200, mask=None) -> list[TargetCandidate]:
    """Back-project region centroids into the base frame and pin their height to ``hover_height``.

    Regions below ``min_area`` and centroids whose nearest depth pixel has no
    return (nan or non-positive) are dropped. ``mask`` is optional and only
    used to flag centroids that fall outside their own region.
    """
    depth = np.asarray(depth, dtype=float)
    out = []
    for reg in regions:
        if reg.area < min_area:
            continue
        u, v = reg.centroid
        pu = min(max(int(np.floor(u + 0.5)), 0), depth.shape[1] - 1)
        pv = min(max(int(np.floor(v + 0.5)), 0), depth.shape[0] - 1)
        d = depth[pv, pu]
        if not (np.isfinite(d) and d > 0):
            log.debug("dropping region at %s: no depth return", reg.centroid)
            continue
        inside = True
        if mask is not None:
            inside = bool(np.asarray(mask)[pv, pu])
            if not inside:
                log.info("centroid %s lies outside its region (area %d)", reg.centroid, reg.area)
        p_cam = back_project(k, PixelDepth(u, v, float(d)))
        p_base = transform_point(cam_to_base, p_cam)
        p_base[2] = hover_height
        out.append(TargetCandidate(p_base, reg.area, (pu, pv), (float(u), float(v)), inside, reg.origin))
    return out
