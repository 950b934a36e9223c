"""Shared data contract for the world engine.

Conventions used everywhere in this package:

- Camera frame: x right, y down, z forward (pinhole: u = fx*x/z + cx).
- Pixel (u, v) = (column, row); image arrays are indexed [v, u].
- Poses are camera-to-world. World "up" is the -y direction.
- Depth 0 marks an invalid pixel; valid depths are strictly positive meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Tuple

import numpy as np

ORTHONORMAL_TOL = 1e-6


class ValidationError(ValueError):
    """Raised when a domain object violates its invariants."""


def as_f64(a, shape=None, name="array") -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    if shape is not None and out.shape != tuple(shape):
        raise ValidationError(f"{name}: expected shape {tuple(shape)}, got {out.shape}")
    return out


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", as_f64(self.rotation, (3, 3), "rotation"))
        object.__setattr__(
            self, "translation", as_f64(self.translation, (3,), "translation")
        )
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=ORTHONORMAL_TOL):
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-5:
            raise ValidationError("rotation determinant must be +1")

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "CameraPose":
        m = as_f64(m, (4, 4), "pose matrix")
        return cls(m[:3, :3], m[:3, 3])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def approx_equal(self, other: "CameraPose", tol: float = 1e-6) -> bool:
        if np.linalg.norm(self.translation - other.translation) > tol:
            return False
        return rotation_geodesic(self.rotation, other.rotation) <= tol


def rotation_geodesic(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle in radians between two rotation matrices."""
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def yaw_rotation(angle_rad: float) -> np.ndarray:
    """Rotation about the world vertical axis (y); positive turns the
    camera's forward direction from +z toward +x."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class Frame:
    """One observed/rendered image with depth and entity labels."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    fg_mask: np.ndarray  # (H, W) bool
    entity_ids: np.ndarray  # (H, W) int, 0 = background
    timestamp: int

    def validate(self) -> "Frame":
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise ValidationError("rgb shape does not match depth")
        if self.fg_mask.shape != (h, w) or self.entity_ids.shape != (h, w):
            raise ValidationError("mask/id shape does not match depth")
        if np.any(self.depth < 0):
            raise ValidationError("depth must be non-negative")
        if not np.array_equal(self.fg_mask, self.entity_ids > 0):
            raise ValidationError("fg_mask must be exactly entity_ids > 0")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape


@dataclass
class ColoredPointCloud:
    """World-frame point cloud; entity_id 0 marks static/background points."""

    points: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) in [0, 1]
    entity_ids: np.ndarray  # (N,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.entity_ids = np.asarray(self.entity_ids, dtype=np.int32).reshape(-1)
        n = len(self.points)
        if len(self.colors) != n or len(self.entity_ids) != n:
            raise ValidationError("points/colors/entity_ids length mismatch")
        if n and not np.all(np.isfinite(self.points)):
            raise ValidationError("point coordinates must be finite")

    @classmethod
    def empty(cls) -> "ColoredPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int32))

    def __len__(self) -> int:
        return len(self.points)

    def concat(self, other: "ColoredPointCloud") -> "ColoredPointCloud":
        return ColoredPointCloud(
            np.concatenate([self.points, other.points]),
            np.concatenate([self.colors, other.colors]),
            np.concatenate([self.entity_ids, other.entity_ids]),
        )

    def select(self, mask_or_index) -> "ColoredPointCloud":
        return ColoredPointCloud(
            self.points[mask_or_index],
            self.colors[mask_or_index],
            self.entity_ids[mask_or_index],
        )

    def translated(self, offset) -> "ColoredPointCloud":
        return ColoredPointCloud(
            self.points + np.asarray(offset, dtype=np.float64),
            self.colors,
            self.entity_ids,
        )

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise ValidationError("centroid of empty cloud")
        return self.points.mean(axis=0)


@dataclass
class DynamicCloudSequence:
    """Per-frame entity clouds for one evolution window."""

    frames: List[ColoredPointCloud]
    start_clock: int

    def __len__(self) -> int:
        return len(self.frames)

    def at_clock(self, clock: int) -> ColoredPointCloud:
        i = clock - self.start_clock
        if not 0 <= i < len(self.frames):
            raise ValidationError(
                f"clock {clock} outside window [{self.start_clock}, "
                f"{self.start_clock + len(self.frames)})"
            )
        return self.frames[i]


@dataclass
class ProjectionLayer:
    """Z-buffered projection of a cloud onto one camera."""

    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 where invalid
    valid: np.ndarray  # (H, W) bool
    source_index: np.ndarray  # (H, W) winning point index, -1 where invalid

    @classmethod
    def blank(cls, height: int, width: int) -> "ProjectionLayer":
        return cls(
            rgb=np.zeros((height, width, 3)),
            depth=np.zeros((height, width)),
            valid=np.zeros((height, width), dtype=bool),
            source_index=np.full((height, width), -1, dtype=np.int64),
        )


@dataclass(frozen=True)
class EngineConfig:
    """Engine-wide knobs. Thresholds are ratios in [0, 1]."""

    T: int = 65  # frames per round
    M: int = 3  # max active monitors
    fps: int = 16
    width: int = 832
    height: int = 480
    voxel_size: float = 0.01  # meters, memory resolution
    overlap_threshold: float = 0.3  # monitor-region IOU gate for registration
    dedup_threshold: float = 0.45  # descriptor cosine gate for re-observation
    retrieval_iou_min: float = 0.04  # appearance-anchor selection gate
    depth_min: float = 0.0  # meters, exclusive lower bound for valid depth
    depth_max: float = 100.0  # meters, exclusive upper bound
    # Artifact plumbing beyond the core parameters:
    overlap_voxel_size: float = 0.1  # coarser grid for sparse entity overlap
    hole_fill_radius: int = 8  # px, Chebyshev
    background_color: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    static_keyframe_stride: int = 8  # accumulate every k-th history frame
    mid_round_detection: bool = False  # per-frame detection inside a window
    max_appearance_anchors: int = 10
    max_entity_crops: int = 5

    def __post_init__(self):
        if self.T < 1 or self.M < 1:
            raise ValidationError("T and M must be >= 1")
        for name in ("overlap_threshold", "dedup_threshold", "retrieval_iou_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1]")
        if not self.depth_min < self.depth_max:
            raise ValidationError("depth_min must be < depth_max")
        if self.voxel_size <= 0 or self.overlap_voxel_size <= 0:
            raise ValidationError("voxel sizes must be positive")

    def with_overrides(self, **kw) -> "EngineConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "M": self.M,
            "fps": self.fps,
            "width": self.width,
            "height": self.height,
            "voxel_size": self.voxel_size,
            "overlap_threshold": self.overlap_threshold,
            "dedup_threshold": self.dedup_threshold,
            "retrieval_iou_min": self.retrieval_iou_min,
            "depth_min": self.depth_min,
            "depth_max": self.depth_max,
            "overlap_voxel_size": self.overlap_voxel_size,
            "hole_fill_radius": self.hole_fill_radius,
            "background_color": list(self.background_color),
            "static_keyframe_stride": self.static_keyframe_stride,
            "mid_round_detection": self.mid_round_detection,
            "max_appearance_anchors": self.max_appearance_anchors,
            "max_entity_crops": self.max_entity_crops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        kw = dict(d)
        if "background_color" in kw:
            kw["background_color"] = tuple(float(c) for c in kw["background_color"])
        return cls(**kw)
