"""Scenario files: every physical constant of a run, loaded from one JSON document."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .control import ControllerConfig, GraspModel, PickLimits, PickSystems
from .geometry import CameraIntrinsics, Pose, intrinsics_from_fov, look_down_pose
from .planner import Box, PlannerConfig, Workspace
from .terrain import DepthNoiseModel, TerrainConfig
from .vision import SegmenterModel, SynthConfig, TrainConfig

log = logging.getLogger(__name__)

DEFAULT_MODEL = Path(__file__).resolve().parent / "data" / "default_segmenter.json"


@dataclass(frozen=True)
class CameraSetup:
    hfov_deg: float = 75.0
    width: int = 512
    height: int = 512
    capture_position: tuple[float, float, float] = (0.55, 0.0, 0.65)
    capture_yaw: float = 0.0

    def intrinsics(self) -> CameraIntrinsics:
        return intrinsics_from_fov(math.radians(self.hfov_deg), self.width, self.height)

    def pose(self) -> Pose:
        return look_down_pose(self.capture_position, self.capture_yaw)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSetup":
        d = dict(d)
        if "capture_position" in d:
            d["capture_position"] = tuple(d["capture_position"])
        return cls(**d)


@dataclass(frozen=True)
class PickParams:
    hover_height: float = 0.40
    min_area: int = 200
    gripper_radius: float = 0.02
    scoop_depth: float = 0.03


def default_workspace() -> Workspace:
    # the mounting platform sits just below and behind the arm base
    platform = Box((-0.25, -0.20, -0.50), (0.02, 0.20, -0.02))
    return Workspace(0.9, (0.0, 0.0, 0.0), (platform,), 0.30)


@dataclass
class Scenario:
    name: str = "default"
    n_trials: int = 30
    base_seed: int = 0
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    camera: CameraSetup = field(default_factory=CameraSetup)
    workspace: Workspace = field(default_factory=default_workspace)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    grasp: GraspModel = field(default_factory=GraspModel)
    noise: DepthNoiseModel = field(default_factory=DepthNoiseModel)
    pick: PickParams = field(default_factory=PickParams)
    limits: PickLimits = field(default_factory=PickLimits)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    segmenter_path: str | None = None
    confidence: float = 0.95

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")

    def systems(self, segmenter) -> PickSystems:
        return PickSystems(segmenter, self.camera.intrinsics(), self.camera.pose(), self.workspace, self.planner,
                           self.controller, self.grasp, self.noise, self.pick.hover_height, self.pick.min_area,
                           self.pick.gripper_radius, self.pick.scoop_depth)

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "Scenario":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        kw = {}
        for key in ("name", "n_trials", "base_seed", "confidence"):
            if key in d:
                kw[key] = d[key]
        parsers = {
            "terrain": TerrainConfig.from_dict,
            "camera": CameraSetup.from_dict,
            "workspace": Workspace.from_dict,
            "planner": PlannerConfig.from_dict,
            "controller": ControllerConfig.from_dict,
            "grasp": GraspModel.from_dict,
            "noise": lambda x: DepthNoiseModel(**x),
            "pick": lambda x: PickParams(**x),
            "limits": PickLimits.from_dict,
            "train": TrainConfig.from_dict,
            "synth": SynthConfig.from_dict,
        }
        for key, parse in parsers.items():
            if key in d:
                kw[key] = parse(d[key])
        if d.get("segmenter_path"):
            p = Path(d["segmenter_path"])
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            kw["segmenter_path"] = str(p)
        return cls(**kw)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {
            "name": self.name,
            "n_trials": self.n_trials,
            "base_seed": self.base_seed,
            "confidence": self.confidence,
            "terrain": self.terrain.to_dict(),
            "camera": asdict(self.camera),
            "workspace": self.workspace.to_dict(),
            "planner": asdict(self.planner),
            "controller": asdict(self.controller),
            "grasp": asdict(self.grasp),
            "noise": asdict(self.noise),
            "pick": asdict(self.pick),
            "limits": self.limits.to_dict(),
            "train": asdict(self.train),
            "synth": asdict(self.synth),
            "segmenter_path": self.segmenter_path,
        }


def load_scenario(path) -> Scenario:
    p = Path(path)
    return Scenario.from_dict(json.loads(p.read_text()), p.parent)


_model_cache: dict[str, SegmenterModel] = {}


def load_segmenter(s: Scenario) -> SegmenterModel:
    """The scenario's model file, else the bundled default, else one trained from a synthetic corpus."""
    for candidate in (s.segmenter_path, DEFAULT_MODEL):
        if candidate and Path(candidate).exists():
            return SegmenterModel.load(candidate)
    key = json.dumps([s.to_dict()["synth"], s.to_dict()["train"], s.terrain.to_dict()], sort_keys=True)
    if key not in _model_cache:
        from .vision import split_dataset, synthesize_dataset, train

        log.info("no segmenter file found; training one on a synthetic corpus")
        imgs = synthesize_dataset(s.synth, s.train.seed, s.terrain)
        _model_cache[key] = train(split_dataset(imgs, seed=s.train.seed), s.train)
    return _model_cache[key]
