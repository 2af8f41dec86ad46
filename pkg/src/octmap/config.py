"""Run configuration: a strict, versioned YAML schema over dataclasses.

The config file is a single YAML document (``config_version: 1``).
Unknown keys anywhere in the tree are rejected so typos fail loudly.
Defaults follow the reference operating point: 10 samples per pierced
voxel, photometric weight 1, 5000 pixels per training step, decoder
hidden width 32 with two fully-connected layers, 10 Hz input.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .geometry import Intrinsics, Pose
from .scene import ColorSpec, Primitive, SceneSpec
from .submaps import SubmapConfig
from .tracking import DriftModel

CONFIG_VERSION = 1


@dataclass
class CameraConfig:
    width: int = 160
    height: int = 120
    fx: float = 140.0
    fy: float = 140.0
    cx: float = 79.5
    cy: float = 59.5

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class PrimitiveConfig:
    type: str = "sphere"  # sphere | box | room
    center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 1.0
    size: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    color: dict = field(default_factory=lambda: {"kind": "constant", "color": [0.7, 0.7, 0.7]})

    def build(self) -> Primitive:
        c = dict(self.color)
        kind = c.pop("kind", "constant")
        spec_kwargs = {}
        if "color" in c:
            spec_kwargs["color"] = tuple(c.pop("color"))
        if "color_b" in c:
            spec_kwargs["color_b"] = tuple(c.pop("color_b"))
        for key in ("axis", "period", "lo", "hi"):
            if key in c:
                spec_kwargs[key] = c.pop(key)
        if c:
            raise ValueError(f"unknown color keys: {sorted(c)}")
        color = ColorSpec(kind=kind, **spec_kwargs)
        pose = Pose(np.eye(3), np.asarray(self.center, dtype=np.float64))
        half = tuple(s / 2.0 for s in self.size)
        return Primitive(
            kind=self.type, pose=pose, radius=self.radius,
            half_extents=half, color=color,
        )


@dataclass
class SceneConfig:
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    primitives: list = field(default_factory=list)  # list of PrimitiveConfig dicts

    def build(self) -> SceneSpec:
        prims = tuple(
            _from_dict(PrimitiveConfig, p).build() for p in self.primitives
        )
        return SceneSpec(primitives=prims, background=tuple(self.background))


@dataclass
class TrajectoryConfig:
    # square loop with an overlap past the seam so the returning camera
    # re-traverses the first edge with matching heading (loop detection)
    waypoints: list = field(default_factory=lambda: [
        [-1.5, -1.5, 1.4], [1.5, -1.5, 1.4], [1.5, 1.5, 1.4],
        [-1.5, 1.5, 1.4], [-1.5, -1.5, 1.4], [0.9, -1.5, 1.4],
    ])
    n_frames: int = 600
    closed: bool = False
    rate_hz: float = 10.0
    trans_noise: float = 0.002
    rot_noise: float = 0.0
    trans_bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    rot_bias: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def drift(self) -> DriftModel:
        return DriftModel(
            trans_noise=self.trans_noise,
            rot_noise=self.rot_noise,
            trans_bias=tuple(self.trans_bias),
            rot_bias=tuple(self.rot_bias),
        )


@dataclass
class MappingConfig:
    max_depth: int = 7
    active_levels: int = 2
    feature_dim: int = 16
    submap_extent: float = 6.4
    submap_forward_offset: float = 1.6
    hidden_dim: int = 32
    n_point: int = 10
    pixels_per_step: int = 5000
    photometric_weight: float = 1.0
    lr_features: float = 1e-2
    lr_decoders: float = 1e-3
    iterations_per_keyframe: int = 10
    replay_keyframes: int = 2
    max_voxels_per_ray: int = 0
    insert_stride: int = 1
    insert_dilation: int = 1
    # extra all-member training iterations per submap once the stream
    # ends; emulates the mapping thread that keeps optimizing between
    # keyframes in a truly parallel deployment
    final_consolidation_iters: int = 0
    consolidation_pixels: int = 0  # 0: use pixels_per_step


@dataclass
class SubmapSection:
    covis_threshold: float = 0.85
    covis_stride: int = 4
    finetune_translation: float = 0.01
    finetune_rotation_deg: float = 0.5
    finetune_budget: int = 40


@dataclass
class TrackingConfig:
    keyframe_translation: float = 0.2
    keyframe_rotation_deg: float = 10.0
    loop_radius: float = 0.5
    loop_angle_deg: float = 20.0
    loop_window: int = 20
    loop_cooldown: int = 15
    loop_edge_weight: float = 100.0
    loop_enabled: bool = True


@dataclass
class EvalConfig:
    n_views: int = 20
    view_offset: float = 0.15
    view_yaw_deg: float = 10.0
    min_clearance: float = 0.2


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "runs/out"
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    submaps: SubmapSection = field(default_factory=SubmapSection)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def submap_config(self) -> SubmapConfig:
        m, s = self.mapping, self.submaps
        return SubmapConfig(
            extent=m.submap_extent,
            forward_offset=m.submap_forward_offset,
            max_depth=m.max_depth,
            feature_dim=m.feature_dim,
            active_levels=m.active_levels,
            hidden_dim=m.hidden_dim,
            lr_features=m.lr_features,
            lr_decoders=m.lr_decoders,
            n_point=m.n_point,
            photometric_weight=m.photometric_weight,
            covis_threshold=s.covis_threshold,
            covis_stride=s.covis_stride,
            finetune_translation=s.finetune_translation,
            finetune_rotation=float(np.deg2rad(s.finetune_rotation_deg)),
            replay_keyframes=m.replay_keyframes,
            max_voxels_per_ray=m.max_voxels_per_ray,
            insert_stride=m.insert_stride,
            insert_dilation=m.insert_dilation,
        )

    def build_scene(self) -> SceneSpec:
        if not self.scene.primitives:
            from .scene import default_room_scene

            return default_room_scene(background=tuple(self.scene.background))
        return self.scene.build()


_SECTION_TYPES = {
    "scene": SceneConfig,
    "camera": CameraConfig,
    "trajectory": TrajectoryConfig,
    "mapping": MappingConfig,
    "submaps": SubmapSection,
    "tracking": TrackingConfig,
    "eval": EvalConfig,
}


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    version = data.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ValueError(f"unsupported config_version {version}")
    kwargs = {}
    for key, cls in _SECTION_TYPES.items():
        if key in data:
            kwargs[key] = _from_dict(cls, data.pop(key))
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs.update(data)
    cfg = config_validate(RunConfig(**kwargs))
    return cfg


def config_validate(cfg: RunConfig) -> RunConfig:
    m = cfg.mapping
    checks = [
        (1 <= m.max_depth <= 16, "mapping.max_depth in [1, 16]"),
        (1 <= m.active_levels <= m.max_depth, "mapping.active_levels in [1, max_depth]"),
        (m.feature_dim >= 1, "mapping.feature_dim >= 1"),
        (m.n_point >= 1, "mapping.n_point >= 1"),
        (m.pixels_per_step >= 1, "mapping.pixels_per_step >= 1"),
        (m.submap_extent > 0, "mapping.submap_extent > 0"),
        (0 < cfg.submaps.covis_threshold <= 1, "submaps.covis_threshold in (0, 1]"),
        (cfg.trajectory.n_frames >= 2, "trajectory.n_frames >= 2"),
        (cfg.camera.width > 0 and cfg.camera.height > 0, "camera size positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ValueError(f"config out of range: {msg}")
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(dataclasses.asdict(cfg), f, sort_keys=False)


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of the full config."""
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def scene_hash(cfg: RunConfig) -> str:
    """Digest of the scene section only (what eval must agree on)."""
    blob = json.dumps(dataclasses.asdict(cfg.scene), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()
