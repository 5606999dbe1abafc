"""RRT* for the end effector in a 3-D workspace bounded by a reach sphere, a floor and static boxes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np


class PlanningError(RuntimeError):
    pass


class UnreachableEndpoint(PlanningError):
    pass


class NoPathFound(PlanningError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ValueError("obstacle boxes must have positive volume")

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class Workspace:
    reach_radius: float = 0.9
    base_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    static_obstacles: tuple[Box, ...] = ()
    floor_z: float = -math.inf

    def __post_init__(self):
        if not self.reach_radius > 0:
            raise ValueError("reach_radius must be positive")
        object.__setattr__(self, "static_obstacles", tuple(self.static_obstacles))
        lo = np.array([b.lo for b in self.static_obstacles], dtype=float).reshape(-1, 3)
        hi = np.array([b.hi for b in self.static_obstacles], dtype=float).reshape(-1, 3)
        object.__setattr__(self, "_lo", lo)
        object.__setattr__(self, "_hi", hi)

    @classmethod
    def from_dict(cls, d: dict) -> "Workspace":
        boxes = tuple(Box(tuple(b["lo"]), tuple(b["hi"])) for b in d.get("static_obstacles", ()))
        floor = d.get("floor_z")
        return cls(float(d.get("reach_radius", 0.9)), tuple(d.get("base_position", (0.0, 0.0, 0.0))), boxes,
                   -math.inf if floor is None else float(floor))

    def to_dict(self) -> dict:
        return {
            "reach_radius": self.reach_radius,
            "base_position": list(self.base_position),
            "static_obstacles": [b.to_dict() for b in self.static_obstacles],
            "floor_z": None if math.isinf(self.floor_z) else self.floor_z,
        }


def reachable(p, w: Workspace) -> bool:
    p = np.asarray(p, dtype=float)
    if np.linalg.norm(p - np.asarray(w.base_position)) > w.reach_radius or p[2] < w.floor_z:
        return False
    return not any(b.contains(p) for b in w.static_obstacles)


def _segments_collide(a: np.ndarray, b: np.ndarray, w: Workspace) -> np.ndarray:
    """Vectorized segment test from one point ``a`` to each row of ``b``."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    a = np.asarray(a, dtype=float)
    base = np.asarray(w.base_position, dtype=float)
    r2 = w.reach_radius * w.reach_radius
    # the ball is convex and the floor is a half-space, so endpoints decide both
    bad = (np.sum((b - base) ** 2, axis=1) > r2) | (b[:, 2] < w.floor_z)
    if np.sum((a - base) ** 2) > r2 or a[2] < w.floor_z:
        bad[:] = True
    if len(w._lo):
        d = b - a  # (m, 3)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d[:, None, :]  # (m, 1, 3)
            t1 = (w._lo[None] - a) * inv  # (m, k, 3)
            t2 = (w._hi[None] - a) * inv
        zero = (d == 0.0)[:, None, :]
        inside_slab = (a >= w._lo[None]) & (a <= w._hi[None])  # (1, k, 3)
        tmin = np.where(zero, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(zero, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        enter = np.max(tmin, axis=2)
        leave = np.min(tmax, axis=2)
        hit = (enter <= leave) & (leave >= 0.0) & (enter <= 1.0)
        bad |= np.any(hit, axis=1)
    return bad


def segment_collides(a, b, w: Workspace) -> bool:
    """True iff segment ``ab`` touches an obstacle box, leaves the reach sphere or dips below the floor."""
    return bool(_segments_collide(np.asarray(a, dtype=float), np.asarray(b, dtype=float)[None, :], w)[0])


@dataclass
class PlannerConfig:
    step_size: float = 0.05
    rewire_radius_gamma: float = 2.0
    radius_cap_steps: float = 10.0
    goal_bias: float = 0.05
    max_iterations: int = 4000
    goal_tolerance: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.goal_bias < 1.0:
            raise ValueError("goal_bias must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        return cls(**d)

    def neighbor_radius(self, n: int) -> float:
        cap = self.radius_cap_steps * self.step_size
        if n < 2:
            return cap
        return min(self.rewire_radius_gamma * (math.log(n) / n) ** (1.0 / 3.0), cap)


@dataclass
class Path:
    waypoints: np.ndarray
    cost: float
    cost_curve: list = field(default_factory=list)  # best goal cost every 100 iterations
    tree_size: int = 0

    def to_dict(self) -> dict:
        return {"waypoints": self.waypoints.tolist(), "cost": self.cost,
                "cost_curve": [None if math.isinf(c) else c for c in self.cost_curve], "tree_size": self.tree_size}


@dataclass
class Tree:
    nodes: np.ndarray
    parent: np.ndarray
    cost: np.ndarray
    size: int


def _sample_ball(rng: np.random.Generator, center: np.ndarray, radius: float, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + v * (radius * rng.random(n) ** (1.0 / 3.0))[:, None]


@numba.njit(cache=True)
def _seg_free(a, b, base, r2, floor_z, lo, hi):
    for p in (a, b):
        dx, dy, dz = p[0] - base[0], p[1] - base[1], p[2] - base[2]
        if dx * dx + dy * dy + dz * dz > r2 or p[2] < floor_z:
            return False
    for k in range(lo.shape[0]):
        enter = -np.inf
        leave = np.inf
        for ax in range(3):
            d = b[ax] - a[ax]
            if d == 0.0:
                if a[ax] < lo[k, ax] or a[ax] > hi[k, ax]:
                    enter = np.inf
                    break
            else:
                t1 = (lo[k, ax] - a[ax]) / d
                t2 = (hi[k, ax] - a[ax]) / d
                enter = max(enter, min(t1, t2))
                leave = min(leave, max(t1, t2))
        if enter <= leave and leave >= 0.0 and enter <= 1.0:
            return False
    return True


@numba.njit(cache=True)
def _point_ok(p, base, r2, floor_z, lo, hi):
    dx, dy, dz = p[0] - base[0], p[1] - base[1], p[2] - base[2]
    if dx * dx + dy * dy + dz * dz > r2 or p[2] < floor_z:
        return False
    for k in range(lo.shape[0]):
        if lo[k, 0] <= p[0] <= hi[k, 0] and lo[k, 1] <= p[1] <= hi[k, 1] and lo[k, 2] <= p[2] <= hi[k, 2]:
            return False
    return True


@numba.njit(cache=True)
def _rrt_star(start, goal, use_goal, samples, base, r2, floor_z, lo, hi, step, gamma, cap_r, tol,
              nodes, parent, cost, first_child, next_sib, curve):
    nodes[0] = start
    parent[0] = -1
    cost[0] = 0.0
    first_child[:] = -1
    next_sib[:] = -1
    n = 1
    m = samples.shape[0]
    dist = np.empty(nodes.shape[0])
    near = np.empty(nodes.shape[0], dtype=np.int64)
    stack = np.empty(nodes.shape[0], dtype=np.int64)
    new = np.empty(3)
    reached = np.sqrt(np.sum((start - goal) ** 2)) <= tol
    for it in range(m):
        x = goal if use_goal[it] else samples[it]
        nearest = 0
        bd = np.inf
        for i in range(n):
            d2 = (nodes[i, 0] - x[0]) ** 2 + (nodes[i, 1] - x[1]) ** 2 + (nodes[i, 2] - x[2]) ** 2
            if d2 < bd:
                bd = d2
                nearest = i
        dnear = np.sqrt(bd)
        accepted = False
        if dnear > 0.0:
            if dnear <= step:
                new[:] = x
            else:
                for ax in range(3):
                    new[ax] = nodes[nearest, ax] + (x[ax] - nodes[nearest, ax]) * (step / dnear)
            accepted = _point_ok(new, base, r2, floor_z, lo, hi) and _seg_free(nodes[nearest], new, base, r2, floor_z, lo, hi)
        if accepted:
            radius = cap_r
            if n >= 2:
                radius = min(gamma * (np.log(n) / n) ** (1.0 / 3.0), cap_r)
            nn = 0
            for i in range(n):
                d = np.sqrt((nodes[i, 0] - new[0]) ** 2 + (nodes[i, 1] - new[1]) ** 2 + (nodes[i, 2] - new[2]) ** 2)
                dist[i] = d
                if (d <= radius or i == nearest) and _seg_free(new, nodes[i], base, r2, floor_z, lo, hi):
                    near[nn] = i
                    nn += 1
            # choose parent
            p = -1
            pc = np.inf
            for q in range(nn):
                i = near[q]
                c = cost[i] + dist[i]
                if c < pc:
                    pc = c
                    p = i
            k = n
            nodes[k] = new
            parent[k] = p
            cost[k] = pc
            next_sib[k] = first_child[p]
            first_child[p] = k
            n += 1
            if np.sqrt((new[0] - goal[0]) ** 2 + (new[1] - goal[1]) ** 2 + (new[2] - goal[2]) ** 2) <= tol:
                reached = True
            # rewire
            for q in range(nn):
                j = near[q]
                if j == p:
                    continue
                c_new = cost[k] + dist[j]
                if c_new < cost[j]:
                    # unlink j from its old parent
                    op = parent[j]
                    if first_child[op] == j:
                        first_child[op] = next_sib[j]
                    else:
                        s = first_child[op]
                        while next_sib[s] != j:
                            s = next_sib[s]
                        next_sib[s] = next_sib[j]
                    parent[j] = k
                    next_sib[j] = first_child[k]
                    first_child[k] = j
                    delta = c_new - cost[j]
                    top = 0
                    stack[0] = j
                    top = 1
                    while top > 0:
                        top -= 1
                        v = stack[top]
                        cost[v] += delta
                        c = first_child[v]
                        while c >= 0:
                            stack[top] = c
                            top += 1
                            c = next_sib[c]
        if (it + 1) % 100 == 0 and reached:
            curve[(it + 1) // 100 - 1] = _best_goal_cost(goal, nodes, cost, n, tol, cap_r, base, r2, floor_z, lo, hi)[0]
    return n


@numba.njit(cache=True)
def _best_goal_cost(goal, nodes, cost, n, tol, conn_r, base, r2, floor_z, lo, hi):
    """Cheapest way to end exactly at the goal: a node within tolerance, or one within the connection radius plus a free straight segment."""
    best = np.inf
    arg = -1
    for i in range(n):
        d = np.sqrt((nodes[i, 0] - goal[0]) ** 2 + (nodes[i, 1] - goal[1]) ** 2 + (nodes[i, 2] - goal[2]) ** 2)
        if d > conn_r:
            continue
        if d > 0.0 and not _seg_free(nodes[i], goal, base, r2, floor_z, lo, hi):
            continue
        c = cost[i] + d
        if c < best:
            best = c
            arg = i
    return best, arg


def plan_rrt_star(start, goal, w: Workspace, cfg: PlannerConfig, return_tree: bool = False):
    """Asymptotically optimal RRT*; returns the cheapest goal-reaching path after ``max_iterations``.

    A path counts as goal-reaching once some tree node lies within
    ``goal_tolerance`` of the goal; the returned path then ends exactly at the
    goal through the cheapest free connection within the rewiring cap.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if not reachable(start, w):
        raise UnreachableEndpoint(f"start {start.tolist()} is not reachable")
    if not reachable(goal, w):
        raise UnreachableEndpoint(f"goal {goal.tolist()} is not reachable")

    rng = np.random.default_rng(cfg.seed)
    m = cfg.max_iterations
    use_goal = rng.random(m) < cfg.goal_bias
    center = np.asarray(w.base_position, dtype=float)
    samples = _sample_ball(rng, center, w.reach_radius, m)
    cap = m + 1
    nodes = np.zeros((cap, 3))
    parent = np.full(cap, -1, dtype=np.int64)
    cost = np.zeros(cap)
    first_child = np.full(cap, -1, dtype=np.int64)
    next_sib = np.full(cap, -1, dtype=np.int64)
    curve = np.full(m // 100, np.inf)
    r2 = w.reach_radius ** 2
    floor_z = float(w.floor_z)
    conn_r = cfg.radius_cap_steps * cfg.step_size
    n = _rrt_star(start, goal, use_goal, samples, center, r2, floor_z, w._lo, w._hi, cfg.step_size,
                  cfg.rewire_radius_gamma, conn_r, cfg.goal_tolerance,
                  nodes, parent, cost, first_child, next_sib, curve)
    tree = Tree(nodes[:n].copy(), parent[:n].copy(), cost[:n].copy(), n)
    reached = np.linalg.norm(tree.nodes - goal, axis=1) <= cfg.goal_tolerance
    if not reached.any():
        raise NoPathFound(f"no tree node within {cfg.goal_tolerance} m of the goal after {m} iterations")
    best, g = _best_goal_cost(goal, nodes, cost, n, cfg.goal_tolerance, conn_r, center, r2, floor_z, w._lo, w._hi)
    chain = []
    while g >= 0:
        chain.append(g)
        g = int(parent[g])
    wp = nodes[chain[::-1]]
    if np.linalg.norm(wp[-1] - goal) > 0.0:
        wp = np.vstack([wp, goal])
    path = Path(wp.copy(), path_length(wp), curve.tolist(), n)
    return (path, tree) if return_tree else path


def path_length(waypoints: np.ndarray) -> float:
    wp = np.asarray(waypoints, dtype=float)
    if len(wp) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(wp, axis=0), axis=1)))
