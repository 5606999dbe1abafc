"""Brute-force reference implementations shared by the unit and acceptance suites."""
import math
from collections import deque

import numpy as np

N8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def flood_components(mask):
    """Brute-force 8-connected components: (area, centroid (u, v), first pixel in raster order)."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    out = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                q = deque([(r, c)])
                seen[r, c] = True
                px = []
                while q:
                    a, b = q.popleft()
                    px.append((a, b))
                    for dr, dc in N8:
                        y, x = a + dr, b + dc
                        if 0 <= y < h and 0 <= x < w and mask[y, x] and not seen[y, x]:
                            seen[y, x] = True
                            q.append((y, x))
                rows = np.array([p[0] for p in px], float)
                cols = np.array([p[1] for p in px], float)
                out.append((len(px), (cols.mean(), rows.mean()), (r, c)))
    out.sort(key=lambda t: (-t[0], t[2]))
    return out


def dense_oracle(a, b, w, step=1e-3):
    """Sample the segment every millimetre and test each sample against the workspace constraints."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(2, int(math.ceil(np.linalg.norm(b - a) / step)) + 1)
    pts = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
    if np.any(np.linalg.norm(pts - np.asarray(w.base_position), axis=1) > w.reach_radius):
        return True
    if np.any(pts[:, 2] < w.floor_z):
        return True
    for box in w.static_obstacles:
        if np.any(np.all((pts >= box.lo) & (pts <= box.hi), axis=1)):
            return True
    return False
