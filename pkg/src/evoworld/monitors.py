"""Monitor lifecycle: detection intake, dedup, overlap-gated registration,
capacity eviction and asynchronous temporal synchronization.

A monitor is a stationary virtual agent pinned at the pose where its
entities were first observed; it keeps their scripts advancing while the
observer looks elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import geometry
from .types import (
    CameraPose,
    ColoredPointCloud,
    DynamicCloudSequence,
    EngineConfig,
    Frame,
    Intrinsics,
    ValidationError,
)


@dataclass
class EntityDetection:
    """One detected dynamic entity in one observed frame."""

    entity_id: int
    mask: np.ndarray  # (H, W) bool, non-empty
    crop: Tuple[int, int, int, int]  # (u0, v0, u1, v1), exclusive upper
    descriptor: np.ndarray  # (64,) unit-L2 color histogram
    first_seen_clock: int
    frame: Optional[Frame] = field(default=None, repr=False)  # source frame

    def __post_init__(self):
        if not self.mask.any():
            raise ValidationError("detection mask must be non-empty")
        n = float(np.linalg.norm(self.descriptor))
        if abs(n - 1.0) > 1e-6:
            raise ValidationError("descriptor must have unit L2 norm")


@dataclass
class Monitor:
    """Stationary agent tracking the entities registered at its anchor."""

    id: int
    anchor_pose: CameraPose
    anchor_frame: Frame
    entities: List[EntityDetection]
    local_clock: int
    storyline_cursor: int = 0
    dynamic_clouds: Optional[DynamicCloudSequence] = None
    region_voxels: np.ndarray = field(
        default_factory=lambda: np.zeros(0, dtype=np.int64)
    )
    # Anchor-lifted clouds drive the kinematic backend; they are fixed at
    # registration so evolution dead-reckons from the script with no drift.
    base_clouds: Dict[int, ColoredPointCloud] = field(default_factory=dict)
    base_clock: int = 0

    def entity_ids(self) -> List[int]:
        return [d.entity_id for d in self.entities]

    def current_cloud(self) -> ColoredPointCloud:
        """Latest known union cloud (last evolved frame, else anchor lift)."""
        if self.dynamic_clouds is not None and len(self.dynamic_clouds):
            return self.dynamic_clouds.frames[-1]
        out = ColoredPointCloud.empty()
        for c in self.base_clouds.values():
            out = out.concat(c)
        return out


def color_histogram_descriptor(rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """64-bin (4x4x4) RGB histogram of the masked pixels, L2-normalized.

    A deterministic stand-in for a learned embedding; anything exposing the
    same unit-norm vector contract can replace it.
    """
    px = rgb[mask]
    if len(px) == 0:
        raise ValidationError("empty mask for descriptor")
    bins = np.clip((px * 4.0).astype(np.int64), 0, 3)
    idx = bins[:, 0] * 16 + bins[:, 1] * 4 + bins[:, 2]
    hist = np.bincount(idx, minlength=64).astype(np.float64)
    return hist / np.linalg.norm(hist)


def mask_bbox(mask: np.ndarray, pad: int = 2) -> Tuple[int, int, int, int]:
    v, u = np.nonzero(mask)
    h, w = mask.shape
    return (
        max(int(u.min()) - pad, 0),
        max(int(v.min()) - pad, 0),
        min(int(u.max()) + pad + 1, w),
        min(int(v.max()) + pad + 1, h),
    )


class Detector:
    """Detection interface: emit EntityDetections for one observed frame."""

    def detect(self, frame: Frame, pose: CameraPose) -> List[EntityDetection]:
        raise NotImplementedError


class GroundTruthIdDetector(Detector):
    """Reference detector reading the frame's own entity labels.

    Stands in for an open-vocabulary detector + segmenter: synthetic frames
    already carry per-pixel instance ids, so category naming collapses to
    the integer label.
    """

    def detect(self, frame: Frame, pose: CameraPose) -> List[EntityDetection]:
        out = []
        for eid in np.unique(frame.entity_ids):
            if eid <= 0:
                continue
            mask = frame.entity_ids == eid
            out.append(
                EntityDetection(
                    entity_id=int(eid),
                    mask=mask,
                    crop=mask_bbox(mask),
                    descriptor=color_histogram_descriptor(frame.rgb, mask),
                    first_seen_clock=frame.timestamp,
                    frame=frame,
                )
            )
        return out


# ---------------------------------------------------------------------------
# Registration decisions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationDecision:
    kind: str  # "register" | "merge" | "reject"
    monitor_id: Optional[int] = None

    @classmethod
    def register(cls) -> "RegistrationDecision":
        return cls("register")

    @classmethod
    def merge_into(cls, monitor_id: int) -> "RegistrationDecision":
        return cls("merge", monitor_id)

    @classmethod
    def reject(cls) -> "RegistrationDecision":
        return cls("reject")


def lift_detection(
    det: EntityDetection, pose: CameraPose, intr: Intrinsics
) -> ColoredPointCloud:
    if det.frame is None:
        raise ValidationError("detection carries no source frame to lift")
    return geometry.unproject(det.frame, pose, intr, det.mask)


def evaluate_registration(
    det: EntityDetection,
    state,
    pose: CameraPose,
    intr: Intrinsics,
    cfg: EngineConfig,
) -> RegistrationDecision:
    """Decide what to do with a detection.

    Strictly-greater descriptor cosine than dedup_threshold against any
    tracked entity means re-observation -> merge into that monitor (ties to
    the lowest monitor id). Otherwise a lifted-cloud voxel IOU at or above
    overlap_threshold against an existing monitored region rejects the
    detection; anything else registers a fresh monitor.
    """
    best_sim = -1.0
    best_monitor = None
    for mon in sorted(state.monitors, key=lambda m: m.id):
        for known in mon.entities:
            sim = float(np.dot(det.descriptor, known.descriptor))
            if sim > best_sim + 1e-12:
                best_sim = sim
                best_monitor = mon.id
    if best_monitor is not None and best_sim > cfg.dedup_threshold:
        return RegistrationDecision.merge_into(best_monitor)

    if state.monitors:
        lifted = lift_detection(det, pose, intr)
        det_keys = geometry.packed_voxels(lifted.points, cfg.overlap_voxel_size)
        for mon in sorted(state.monitors, key=lambda m: m.id):
            if geometry.packed_iou(det_keys, mon.region_voxels) >= cfg.overlap_threshold:
                return RegistrationDecision.reject()
    return RegistrationDecision.register()


def farthest_monitor(monitors: List[Monitor], observer_translation: np.ndarray) -> int:
    """Id of the monitor whose anchor is farthest from the observer
    (ties to the lowest id)."""
    if not monitors:
        raise ValidationError("no monitors to evict")
    best_id, best_d = None, -1.0
    for mon in sorted(monitors, key=lambda m: m.id):
        d = float(np.linalg.norm(mon.anchor_pose.translation - observer_translation))
        if d > best_d + 1e-12:
            best_d = d
            best_id = mon.id
    return best_id


def register_monitor(
    state,
    det: EntityDetection,
    pose: CameraPose,
    frame: Frame,
    cfg: EngineConfig,
    intr: Intrinsics,
    observer_translation: Optional[np.ndarray] = None,
) -> Tuple[object, int]:
    """Create a monitor for a detection, evicting the farthest-from-observer
    monitor first when the registry is at capacity. Returns (state, id).

    The detection's pixels are lifted at the anchor pose into the monitor's
    base cloud; the monitored region is that cloud's coarse voxel footprint.
    """
    if observer_translation is None:
        observer_translation = (
            state.history[-1][1].translation if len(state.history) else pose.translation
        )
    monitors = list(state.monitors)
    while len(monitors) >= cfg.M:
        evict_id = farthest_monitor(monitors, observer_translation)
        monitors = [m for m in monitors if m.id != evict_id]

    det = replace(det, frame=det.frame if det.frame is not None else frame)
    lifted = lift_detection(det, pose, intr)
    if len(lifted) == 0:
        raise ValidationError(
            f"detection of entity {det.entity_id} has no valid-depth pixels to lift"
        )
    mon_id = state.monitor_seq + 1
    mon = Monitor(
        id=mon_id,
        anchor_pose=pose,
        anchor_frame=frame,
        entities=[det],
        local_clock=det.first_seen_clock,
        storyline_cursor=0,
        dynamic_clouds=None,
        region_voxels=geometry.packed_voxels(lifted.points, cfg.overlap_voxel_size),
        base_clouds={det.entity_id: lifted},
        base_clock=det.first_seen_clock,
    )
    monitors.append(mon)
    state.monitors = monitors
    state.monitor_seq = mon_id
    return state, mon_id


def attach_codetection(
    mon: Monitor, det: EntityDetection, pose: CameraPose, intr: Intrinsics, cfg: EngineConfig
) -> None:
    """Fold a same-frame detection into an existing monitor (entities first
    seen together share one anchor)."""
    det = replace(det, frame=mon.anchor_frame)
    lifted = lift_detection(det, pose, intr)
    if len(lifted) == 0:
        raise ValidationError(
            f"detection of entity {det.entity_id} has no valid-depth pixels to lift"
        )
    mon.entities.append(det)
    mon.base_clouds[det.entity_id] = lifted
    mon.region_voxels = np.union1d(
        mon.region_voxels, geometry.packed_voxels(lifted.points, cfg.overlap_voxel_size)
    )


def synchronize_monitor(
    mon: Monitor,
    global_clock: int,
    backends,
    cfg: EngineConfig,
) -> Monitor:
    """Generate exactly (global_clock - local_clock) catch-up frames so the
    monitor's timeline reaches the global one."""
    if mon.local_clock > global_clock:
        raise ValidationError(
            f"monitor {mon.id}: local clock {mon.local_clock} is ahead of "
            f"global clock {global_clock}"
        )
    gap = global_clock - mon.local_clock
    if gap == 0:
        return mon
    frames = backends.evolution.evolve(
        mon,
        start_clock=mon.local_clock + 1,
        n_frames=gap,
        provider=backends.storylines,
        intr=backends.intrinsics,
        cfg=cfg,
    )
    if len(frames) != gap:
        raise ValidationError(
            f"monitor {mon.id}: backend produced {len(frames)} catch-up frames, "
            f"expected {gap}"
        )
    from .evolution import lift_dynamic  # local import avoids a cycle

    seq = lift_dynamic(frames, mon.anchor_pose, backends.intrinsics, mon.local_clock + 1)
    cursor = _cursor_at(mon, backends.storylines, global_clock)
    return replace(
        mon,
        dynamic_clouds=seq,
        local_clock=global_clock,
        storyline_cursor=cursor,
    )


def _cursor_at(mon: Monitor, provider, clock: int) -> int:
    from .storyline import step_index_at

    cursor = 0
    for eid in mon.entity_ids():
        story, epoch, _p0 = provider.get(eid)
        cursor = max(cursor, step_index_at(story, clock - epoch))
    return cursor


def monitor_status_record(mon: Monitor) -> dict:
    """JSON-able status row for the service/UI."""
    cloud = mon.current_cloud()
    centroid = cloud.centroid().tolist() if len(cloud) else None
    return {
        "id": mon.id,
        "anchor_pose": mon.anchor_pose.matrix().tolist(),
        "local_clock": mon.local_clock,
        "storyline_cursor": mon.storyline_cursor,
        "entity_ids": mon.entity_ids(),
        "last_evolved_round": (
            None
            if mon.dynamic_clouds is None
            else (mon.dynamic_clouds.start_clock + len(mon.dynamic_clouds) - 1)
        ),
        "entity_centroid": centroid,
    }
