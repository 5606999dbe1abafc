"""Proportional dive controller, grasp model and the pick state machine."""
from __future__ import annotations

import enum
import logging
import math
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import ndimage

from .contour import TargetCandidate, candidate_targets, find_regions
from .geometry import CameraIntrinsics, PixelDepth, Pose, back_project, look_down_pose, transform_point
from .planner import NoPathFound, PlannerConfig, UnreachableEndpoint, Workspace, plan_rrt_star, reachable
from .terrain import DepthNoiseModel, Material, NoReturn, TerrainGrid, capture, excavate, ir_depth_reading, noisy_depth_image
from .vision import Segmenter

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ControllerConfig:
    kp: float = 0.9
    setpoint: float = 0.27
    tolerance: float = 0.005
    max_steps: int = 20
    # proportional only; kept as explicit fields so configs can state it
    ki: float = 0.0
    kd: float = 0.0

    def __post_init__(self):
        if not self.kp > 0:
            raise ValueError("kp must be positive")
        if not self.setpoint > 0 or not self.tolerance > 0:
            raise ValueError("setpoint and tolerance must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.ki != 0.0 or self.kd != 0.0:
            raise ValueError("the dive controller is proportional only; ki and kd must be 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerConfig":
        return cls(**d)


@dataclass(frozen=True)
class GraspModel:
    depth_window: tuple[float, float] = (-0.02, 0.03)
    retention_prob: float = 0.92
    deadlock_prob_per_plan: float = 0.03

    def __post_init__(self):
        lo, hi = self.depth_window
        if not lo < hi:
            raise ValueError("depth_window must satisfy min_offset < max_offset")
        for p in (self.retention_prob, self.deadlock_prob_per_plan):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "GraspModel":
        d = dict(d)
        if "depth_window" in d:
            d["depth_window"] = tuple(d["depth_window"])
        return cls(**d)


class PickState(enum.Enum):
    START = "Start"
    CAPTURE = "Capture"
    DETECT = "Detect"
    SELECT_TARGET = "SelectTarget"
    PLAN_APPROACH = "PlanApproach"
    APPROACH = "Approach"
    DIVE = "Dive"
    GRIP = "Grip"
    RETRACT = "Retract"
    DEPOSIT = "Deposit"
    SUCCESS = "Success"
    FAILED = "Failed"


S = PickState
# every legal transition; Failed is reachable from any non-terminal state
EDGES = frozenset({
    (S.START, S.CAPTURE),
    (S.CAPTURE, S.DETECT),
    (S.DETECT, S.SELECT_TARGET), (S.DETECT, S.CAPTURE),
    (S.SELECT_TARGET, S.PLAN_APPROACH), (S.SELECT_TARGET, S.DETECT),
    (S.PLAN_APPROACH, S.APPROACH), (S.PLAN_APPROACH, S.SELECT_TARGET),
    (S.APPROACH, S.DIVE),
    (S.DIVE, S.GRIP),
    (S.GRIP, S.RETRACT), (S.GRIP, S.DIVE),
    (S.RETRACT, S.DEPOSIT),
    (S.DEPOSIT, S.SUCCESS),
}) | frozenset((s, S.FAILED) for s in S if s not in (S.SUCCESS, S.FAILED))


class FailureCause(enum.Enum):
    NO_TARGETS = "NoTargets"
    UNREACHABLE = "Unreachable"
    DIVE_FAIL = "DiveFail"
    GRIP_FAIL = "GripFail"
    DEADLOCK = "Deadlock"
    INTERRUPTED = "Interrupted"


class InterruptReason(enum.Enum):
    MAX_TIME = "MaxTime"
    USER = "User"
    LOW_BATTERY = "LowBattery"


def cause_label(cause: FailureCause | None, reason: InterruptReason | None = None) -> str:
    if cause is None:
        return "Success"
    if cause is FailureCause.INTERRUPTED:
        return f"Interrupted({reason.value})"
    return cause.value


class InterruptChannel:
    """Thread-safe interrupt mailbox checked by the pick machine between states.

    ``schedule`` injects an event at a simulated time, ``signal`` raises one
    immediately (e.g. from a SIGINT handler).
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._now: InterruptReason | None = None
        self._scheduled: list[tuple[float, InterruptReason]] = []

    def signal(self, reason: InterruptReason = InterruptReason.USER) -> None:
        with self._lock:
            if self._now is None:
                self._now = reason

    def schedule(self, sim_time: float, reason: InterruptReason) -> None:
        with self._lock:
            self._scheduled.append((float(sim_time), reason))
            self._scheduled.sort(key=lambda e: e[0])

    def poll(self, sim_time: float) -> InterruptReason | None:
        with self._lock:
            if self._now is not None:
                return self._now
            for t, reason in self._scheduled:
                if t <= sim_time:
                    return reason
            return None


def dive_step(cfg: ControllerConfig, measured: float) -> float:
    """Downward displacement ``kp * (measured - setpoint)``; negative means move up."""
    if measured < 0:
        raise ValueError("measured range must be non-negative")
    return cfg.kp * (measured - cfg.setpoint)


class DiveFail(RuntimeError):
    def __init__(self, msg: str, result: "DiveResult"):
        super().__init__(msg)
        self.result = result


@dataclass
class DiveResult:
    final_height: float
    moves: int
    profile: list[tuple[float, float]]  # (measured range, commanded downward displacement) per reading

    @property
    def readings(self) -> int:
        return len(self.profile)


def run_dive(start_height: float, sensor: Callable[[float], float], cfg: ControllerConfig) -> DiveResult:
    """Measure, step, move until the reading is within tolerance of the setpoint.

    ``sensor(height)`` returns the range reading with the gripper at
    ``height`` and may raise NoReturn. A dropout holds position; two in a row
    abort. Raises DiveFail when ``max_steps`` moves do not converge.
    """
    z = float(start_height)
    profile: list[tuple[float, float]] = []
    moves = 0
    dropouts = 0
    while True:
        try:
            measured = sensor(z)
        except NoReturn:
            dropouts += 1
            profile.append((math.nan, 0.0))
            if dropouts >= 2:
                raise DiveFail("two consecutive sensor dropouts", DiveResult(z, moves, profile)) from None
            if moves >= cfg.max_steps:
                raise DiveFail(f"no convergence within {cfg.max_steps} steps", DiveResult(z, moves, profile))
            moves += 1
            continue
        dropouts = 0
        if abs(measured - cfg.setpoint) <= cfg.tolerance:
            profile.append((measured, 0.0))
            return DiveResult(z, moves, profile)
        if moves >= cfg.max_steps:
            profile.append((measured, 0.0))
            raise DiveFail(f"no convergence within {cfg.max_steps} steps", DiveResult(z, moves, profile))
        step = dive_step(cfg, measured)
        profile.append((measured, step))
        z -= step
        moves += 1


def closed_form_moves(initial_error: float, cfg: ControllerConfig) -> int:
    """Moves a noiseless dive needs: the smallest k with |e|·(1-kp)^k ≤ tolerance."""
    e = abs(initial_error)
    if e <= cfg.tolerance:
        return 0
    return math.ceil(math.log(cfg.tolerance / e) / math.log(abs(1.0 - cfg.kp)))


class GripOutcome(enum.Enum):
    HELD = "Held"
    DIVE_FAIL = "DiveFail"
    GRIP_FAIL = "GripFail"


def attempt_grip(final_range: float, material, g: GraspModel, cfg: ControllerConfig, rng: np.random.Generator) -> GripOutcome:
    """Depth-window check, then a Bernoulli retention draw.

    The retention draw happens on every in-window call so the random stream
    does not depend on what is under the gripper. Non-soil under the gripper
    holds nothing.
    """
    lo, hi = g.depth_window
    if not (cfg.setpoint + lo <= final_range <= cfg.setpoint + hi):
        return GripOutcome.DIVE_FAIL
    kept = rng.random() < g.retention_prob
    if material is None or Material(material) is not Material.SOIL:
        return GripOutcome.GRIP_FAIL
    return GripOutcome.HELD if kept else GripOutcome.GRIP_FAIL


@dataclass(frozen=True)
class StateDurations:
    """Simulated seconds charged per state; approach also pays path length / approach_speed."""

    capture: float = 2.0
    detect: float = 1.5
    select_target: float = 0.2
    plan_approach: float = 1.0
    approach_speed: float = 0.1
    dive_step: float = 0.8
    grip: float = 2.0
    retract: float = 3.0
    deposit: float = 6.0

    @classmethod
    def from_dict(cls, d: dict) -> "StateDurations":
        return cls(**d)


@dataclass(frozen=True)
class PickLimits:
    max_time: float = 180.0
    detect_retries: int = 2
    select_retries: int = 1
    retry_on_grip: bool = False
    grip_retries: int = 1
    durations: StateDurations = field(default_factory=StateDurations)

    @classmethod
    def from_dict(cls, d: dict) -> "PickLimits":
        d = dict(d)
        if "durations" in d:
            d["durations"] = StateDurations.from_dict(d["durations"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PickSystems:
    segmenter: Segmenter
    intrinsics: CameraIntrinsics
    capture_pose: Pose  # camera in base frame at capture time; the wrist also starts here
    workspace: Workspace = field(default_factory=Workspace)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    grasp: GraspModel = field(default_factory=GraspModel)
    noise: DepthNoiseModel = field(default_factory=DepthNoiseModel)
    hover_height: float = 0.40
    min_area: int = 200
    gripper_radius: float = 0.02
    scoop_depth: float = 0.03


@dataclass
class PickReport:
    outcome: str  # "Success" or the failure label
    cause: FailureCause | None
    interrupt: InterruptReason | None
    state_trace: list[tuple[str, float]]
    dive_profile: list[tuple[float, float]]
    retries_used: int
    target: dict | None = None
    target_material: int | None = None
    candidates: int = 0
    path_cost: float | None = None
    final_range: float | None = None
    removed_volume: float = 0.0
    frames: list[dict] = field(default_factory=list)  # camera poses of every Capture, for replay

    @property
    def success(self) -> bool:
        return self.cause is None

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x

        return {
            "outcome": self.outcome,
            "cause": None if self.cause is None else self.cause.value,
            "interrupt": None if self.interrupt is None else self.interrupt.value,
            "state_trace": [[s, t] for s, t in self.state_trace],
            "dive_profile": [[num(m), c] for m, c in self.dive_profile],
            "retries_used": self.retries_used,
            "target": self.target,
            "target_material": self.target_material,
            "candidates": self.candidates,
            "path_cost": self.path_cost,
            "final_range": self.final_range,
            "removed_volume": self.removed_volume,
            "frames": self.frames,
        }


class _Terminal(Exception):
    def __init__(self, cause: FailureCause, reason: InterruptReason | None = None):
        super().__init__(cause.value)
        self.cause = cause
        self.reason = reason


def footprint_clear(mask: np.ndarray, pixel: tuple[int, int], radius_px: float) -> bool:
    """True if every pixel within ``radius_px`` of ``pixel`` is inside the image and predicted pickable."""
    h, w = mask.shape
    u0, v0 = pixel
    r = int(math.ceil(radius_px))
    if u0 - r < 0 or v0 - r < 0 or u0 + r >= w or v0 + r >= h:
        return False
    dv, du = np.mgrid[-r:r + 1, -r:r + 1]
    disk = du * du + dv * dv <= radius_px * radius_px
    return bool(np.all(mask[v0 - r:v0 + r + 1, u0 - r:u0 + r + 1][disk]))


def _substreams(seed) -> dict[str, np.random.Generator]:
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    names = ("depth", "dive", "grip", "deadlock", "planner")
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(k) for n, k in zip(names, kids)}


def run_pick(world: TerrainGrid, systems: PickSystems, limits: PickLimits = PickLimits(), seed=0,
             interrupts: InterruptChannel | None = None) -> PickReport:
    """One complete pick on ``world``, which is mutated by excavation on success.

    Each entered state charges its simulated duration; the time limit and the
    interrupt channel are checked at every transition.
    """
    rngs = _substreams(seed)
    dur = limits.durations
    ctl = systems.controller
    k = systems.intrinsics
    home = systems.capture_pose.translation
    clock = 0.0
    trace: list[tuple[str, float]] = [(S.START.value, 0.0)]
    report = PickReport("", None, None, trace, [], 0)
    state = S.START
    charge = {S.CAPTURE: dur.capture, S.DETECT: dur.detect, S.SELECT_TARGET: dur.select_target,
              S.PLAN_APPROACH: dur.plan_approach, S.GRIP: dur.grip, S.RETRACT: dur.retract,
              S.DEPOSIT: dur.deposit}

    def go(nxt: PickState, extra: float = 0.0):
        nonlocal state, clock
        if (state, nxt) not in EDGES:
            raise AssertionError(f"illegal transition {state.value} -> {nxt.value}")
        state = nxt
        trace.append((nxt.value, clock))
        clock += charge.get(nxt, 0.0) + extra
        if clock > limits.max_time:
            raise _Terminal(FailureCause.INTERRUPTED, InterruptReason.MAX_TIME)
        if interrupts is not None:
            reason = interrupts.poll(clock)
            if reason is not None:
                raise _Terminal(FailureCause.INTERRUPTED, reason)

    def sensor_at(x: float, y: float):
        def read(z: float) -> float:
            return ir_depth_reading(world, look_down_pose((x, y, z)), systems.noise, rngs["dive"])
        return read

    detect_left = limits.detect_retries
    select_left = limits.select_retries
    grip_left = limits.grip_retries if limits.retry_on_grip else 0
    excluded: set[int] = set()
    cap = depth = mask = path = cand = None
    cands: list[TargetCandidate] = []
    try:
        if interrupts is not None and interrupts.poll(0.0) is not None:
            raise _Terminal(FailureCause.INTERRUPTED, interrupts.poll(0.0))
        go(S.CAPTURE)
        while True:
            if state is S.CAPTURE:
                cap = capture(world, systems.capture_pose, k)
                depth = noisy_depth_image(cap, k, systems.noise, rngs["depth"])
                report.frames.append(systems.capture_pose.to_dict())
                go(S.DETECT)
            elif state is S.DETECT:
                mask = np.asarray(systems.segmenter.segment(cap.rgb), dtype=np.uint8)
                cands = candidate_targets(find_regions(mask), depth, k, systems.capture_pose,
                                          systems.hover_height, systems.min_area, mask)
                report.candidates = len(cands)
                footprints = _Footprints(mask, depth, systems)
                if cands:
                    go(S.SELECT_TARGET)
                elif detect_left > 0:
                    detect_left -= 1
                    report.retries_used += 1
                    go(S.CAPTURE)
                else:
                    raise _Terminal(FailureCause.NO_TARGETS)
            elif state is S.SELECT_TARGET:
                chosen = _select(cands, excluded, footprints, systems)
                if chosen is not None:
                    idx, cand = chosen
                    go(S.PLAN_APPROACH)
                elif select_left > 0:
                    # earlier picks stay excluded, so the retry only sees next-ranked candidates
                    select_left -= 1
                    report.retries_used += 1
                    go(S.DETECT)
                else:
                    raise _Terminal(FailureCause.UNREACHABLE)
            elif state is S.PLAN_APPROACH:
                try:
                    path = plan_rrt_star(home, cand.position, systems.workspace, systems.planner)
                except (NoPathFound, UnreachableEndpoint) as exc:
                    log.debug("planning to candidate %d failed: %s", idx, exc)
                    excluded.add(idx)
                    report.retries_used += 1
                    go(S.SELECT_TARGET)
                    continue
                x, y = float(cand.position[0]), float(cand.position[1])
                mat = world.material_at(x, y)
                report.target = cand.to_dict()
                report.target_material = None if mat is None else int(mat)
                report.path_cost = path.cost
                if rngs["deadlock"].random() < systems.grasp.deadlock_prob_per_plan:
                    raise _Terminal(FailureCause.DEADLOCK)
                go(S.APPROACH, path.cost / dur.approach_speed)
            elif state is S.APPROACH:
                z = systems.hover_height
                go(S.DIVE)
            elif state is S.DIVE:
                try:
                    res = run_dive(z, sensor_at(x, y), ctl)
                except DiveFail as exc:
                    report.dive_profile.extend(exc.result.profile)
                    clock += exc.result.readings * dur.dive_step
                    raise _Terminal(FailureCause.DIVE_FAIL) from None
                report.dive_profile.extend(res.profile)
                z = res.final_height
                report.final_range = z - _ground_under(world, x, y)
                go(S.GRIP, res.readings * dur.dive_step)
            elif state is S.GRIP:
                outcome = attempt_grip(report.final_range, mat, systems.grasp, ctl, rngs["grip"])
                if outcome is GripOutcome.HELD:
                    report.removed_volume = excavate(world, (x, y), systems.gripper_radius, systems.scoop_depth)
                    go(S.RETRACT)
                elif outcome is GripOutcome.DIVE_FAIL:
                    raise _Terminal(FailureCause.DIVE_FAIL)
                elif grip_left > 0:
                    grip_left -= 1
                    report.retries_used += 1
                    z = systems.hover_height
                    go(S.DIVE)
                else:
                    raise _Terminal(FailureCause.GRIP_FAIL)
            elif state is S.RETRACT:
                go(S.DEPOSIT)
            elif state is S.DEPOSIT:
                go(S.SUCCESS)
                report.outcome = "Success"
                return report
    except _Terminal as term:
        report.cause = term.cause
        report.interrupt = term.reason
        report.outcome = cause_label(term.cause, term.reason)
        trace.append((S.FAILED.value, clock))
    return report


def _ground_under(world: TerrainGrid, x: float, y: float) -> float:
    i, j = world.cell_of(x, y)
    if i < 0:
        return math.nan
    return float(world.height[i, j])


class _Footprints:
    """Per-frame lookup of pixels whose whole gripper disk is predicted pickable."""

    def __init__(self, mask: np.ndarray, depth: np.ndarray, systems: PickSystems):
        self.mask = mask
        self.depth = depth
        self.systems = systems
        self.labels, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
        # distance to the nearest unpickable pixel, treating the image border as unpickable
        padded = np.pad(mask, 1)
        self.clearance = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]

    def radius_px(self, d: float) -> float:
        return self.systems.intrinsics.fx * self.systems.gripper_radius / d

    def clear(self, pixel: tuple[int, int]) -> bool:
        d = float(self.depth[pixel[1], pixel[0]])
        return math.isfinite(d) and d > 0 and footprint_clear(self.mask, pixel, self.radius_px(d))

    def relocate(self, c: TargetCandidate) -> TargetCandidate | None:
        """Nearest pixel to the centroid, in the same region, with a clear and reachable footprint."""
        label = self.labels[c.region_origin]
        vs, us = np.nonzero(self.labels == label)
        d = self.depth[vs, us]
        ok = np.isfinite(d) & (d > 0)
        vs, us, d = vs[ok], us[ok], d[ok]
        # +1 covers the disk rasterization in footprint_clear
        ok = self.clearance[vs, us] > self.radius_px(1.0) / d + 1.0
        vs, us, d = vs[ok], us[ok], d[ok]
        if len(vs) == 0:
            return None
        cu, cv = c.centroid
        order = np.lexsort((us, vs, (us - cu) ** 2 + (vs - cv) ** 2))
        k = self.systems.intrinsics
        for idx in order[:256]:
            u, v = int(us[idx]), int(vs[idx])
            if not footprint_clear(self.mask, (u, v), self.radius_px(float(d[idx]))):
                continue
            p = transform_point(self.systems.capture_pose, back_project(k, PixelDepth(u, v, float(d[idx]))))
            p[2] = self.systems.hover_height
            if reachable(p, self.systems.workspace):
                return replace(c, position=p, source_pixel=(u, v))
        return None


def _select(cands: list[TargetCandidate], excluded: set[int], fp: _Footprints,
            systems: PickSystems) -> tuple[int, TargetCandidate] | None:
    """Largest approachable candidate.

    Approachable means reachable with the whole gripper footprint predicted
    pickable. A centroid that fails either test is moved to the nearest
    qualifying pixel of its own region when one exists.
    """
    for idx, c in enumerate(cands):
        if idx in excluded:
            continue
        if reachable(c.position, systems.workspace) and fp.clear(c.source_pixel):
            return idx, c
        moved = fp.relocate(c)
        if moved is not None:
            log.debug("candidate %d moved from pixel %s to %s", idx, c.source_pixel, moved.source_pixel)
            return idx, moved
        excluded.add(idx)
    return None
