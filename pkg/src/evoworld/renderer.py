"""State-aware observer rendering: projection composition, reference
retrieval and the deterministic projection-color backend.

The reference backend paints exactly the composed projection colors and
fills holes by nearest-valid-pixel search; generative backends can plug in
behind the same interface and receive the full reference conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .types import (
    CameraPose,
    ColoredPointCloud,
    EngineConfig,
    Frame,
    Intrinsics,
    ProjectionLayer,
    ValidationError,
)


@dataclass
class StateProjection:
    """Separated and composed projection layers for one target frame."""

    static_layer: ProjectionLayer
    dynamic_layer: ProjectionLayer
    composed: ProjectionLayer
    entity_ids: np.ndarray  # (H, W) id of the winning dynamic point, else 0
    clock: int

    @property
    def shape(self) -> Tuple[int, int]:
        return self.composed.depth.shape


@dataclass
class ReferenceSet:
    """Conditioning bundle for generative render backends."""

    temporal_anchor: Frame
    appearance_anchors: List[Frame] = field(default_factory=list)
    entity_crops: List[np.ndarray] = field(default_factory=list)


def compose_layers(
    static_layer: ProjectionLayer, dynamic_layer: ProjectionLayer
) -> Tuple[ProjectionLayer, np.ndarray]:
    """Z-buffer overlay of the dynamic layer onto the static layer.

    Where both are valid the smaller depth wins, so dynamic content can
    both occlude and be occluded by the static scene. Returns the merged
    layer and a mask of pixels the dynamic layer won.
    """
    h, w = static_layer.depth.shape
    merged = ProjectionLayer.blank(h, w)
    dyn_wins = dynamic_layer.valid & (
        ~static_layer.valid | (dynamic_layer.depth < static_layer.depth)
    )
    take_static = static_layer.valid & ~dyn_wins

    merged.valid[:] = static_layer.valid | dynamic_layer.valid
    merged.depth[take_static] = static_layer.depth[take_static]
    merged.rgb[take_static] = static_layer.rgb[take_static]
    merged.source_index[take_static] = static_layer.source_index[take_static]
    merged.depth[dyn_wins] = dynamic_layer.depth[dyn_wins]
    merged.rgb[dyn_wins] = dynamic_layer.rgb[dyn_wins]
    merged.source_index[dyn_wins] = dynamic_layer.source_index[dyn_wins]
    return merged, dyn_wins


def compose_state_projection(
    state,
    poses: Sequence[CameraPose],
    intr: Intrinsics,
    start_clock: Optional[int] = None,
) -> List[StateProjection]:
    """Project the world state along a pose window.

    Frame i pairs poses[i] with clock start_clock + i; each frame projects
    the static cloud and the union of every monitor's dynamic cloud at that
    clock (plus any pending summoned entities not yet monitored).
    """
    t0 = state.global_clock + 1 if start_clock is None else start_clock
    out: List[StateProjection] = []
    for i, pose in enumerate(poses):
        clock = t0 + i
        static_layer = geometry.project(state.static_cloud, pose, intr)

        dyn = ColoredPointCloud.empty()
        for mon in state.monitors:
            if mon.dynamic_clouds is None:
                raise ValidationError(
                    f"monitor {mon.id} has no evolved window covering clock {clock}"
                )
            dyn = dyn.concat(mon.dynamic_clouds.at_clock(clock))
        for spawn in getattr(state, "pending_spawns", []):
            c = spawn.cloud_at(clock)
            if c is not None:
                dyn = dyn.concat(c)

        dynamic_layer = geometry.project(dyn, pose, intr)
        composed, dyn_wins = compose_layers(static_layer, dynamic_layer)
        ids = np.zeros(composed.depth.shape, dtype=np.int32)
        if len(dyn):
            ids[dyn_wins] = dyn.entity_ids[dynamic_layer.source_index[dyn_wins]]
        out.append(
            StateProjection(
                static_layer=static_layer,
                dynamic_layer=dynamic_layer,
                composed=composed,
                entity_ids=ids,
                clock=clock,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Reference retrieval
# ---------------------------------------------------------------------------


def _history_bg_voxels(state, index: int, intr: Intrinsics, cfg: EngineConfig) -> np.ndarray:
    """Packed voxel keys of one history frame's background, cached on state."""
    cache = getattr(state, "_bg_voxel_cache", None)
    if cache is None:
        cache = {}
        state._bg_voxel_cache = cache
    frame, pose = state.history[index]
    key = frame.timestamp
    if key not in cache:
        mask = ~frame.fg_mask & (frame.depth > cfg.depth_min) & (frame.depth < cfg.depth_max)
        cloud = geometry.unproject(frame, pose, intr, mask)
        cache[key] = geometry.packed_voxels(cloud.points, cfg.voxel_size)
    return cache[key]


def retrieve_references(
    state, poses: Sequence[CameraPose], intr: Intrinsics, cfg: EngineConfig
) -> ReferenceSet:
    """Pick the temporal anchor and earliest-first appearance anchors.

    Appearance anchors are history frames whose background overlaps the
    region the window is about to observe (voxel IOU against the static
    points visible from sampled window poses), earliest timestamps first.
    """
    if not state.history:
        raise ValidationError("reference retrieval requires non-empty history")
    temporal_anchor = state.history[-1][0]

    visible_keys = np.zeros(0, dtype=np.int64)
    if len(state.static_cloud) and len(poses):
        sample = sorted({0, len(poses) // 2, len(poses) - 1})
        seen: List[np.ndarray] = []
        for i in sample:
            layer = geometry.project(state.static_cloud, poses[i], intr)
            src = layer.source_index[layer.source_index >= 0]
            if len(src):
                seen.append(np.unique(src))
        if seen:
            vis_idx = np.unique(np.concatenate(seen))
            visible_keys = geometry.packed_voxels(
                state.static_cloud.points[vis_idx], cfg.voxel_size
            )

    anchors: List[Frame] = []
    if len(visible_keys):
        stride = max(1, cfg.static_keyframe_stride)
        for i, (frame, _pose) in enumerate(state.history):
            if frame.timestamp % stride != 0:
                continue
            keys = _history_bg_voxels(state, i, intr, cfg)
            if geometry.packed_iou(keys, visible_keys) >= cfg.retrieval_iou_min:
                anchors.append(frame)
    anchors.sort(key=lambda f: f.timestamp)
    anchors = anchors[: cfg.max_appearance_anchors]

    crops: List[np.ndarray] = []
    for mon in sorted(state.monitors, key=lambda m: m.id):
        for det in mon.entities:
            if len(crops) >= cfg.max_entity_crops:
                break
            u0, v0, u1, v1 = det.crop
            crops.append(mon.anchor_frame.rgb[v0:v1, u0:u1].copy())
    return ReferenceSet(
        temporal_anchor=temporal_anchor,
        appearance_anchors=anchors,
        entity_crops=crops,
    )


# ---------------------------------------------------------------------------
# Hole filling and the reference backend
# ---------------------------------------------------------------------------


def _ring_offsets(r: int) -> np.ndarray:
    """Chebyshev ring offsets sorted so earlier entries have the smaller
    source linear index (lexicographic (dv, du))."""
    offs = []
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            if max(abs(dv), abs(du)) == r:
                offs.append((dv, du))
    return np.array(offs, dtype=np.int64)


def fill_holes(
    rgb: np.ndarray,
    depth: np.ndarray,
    valid: np.ndarray,
    radius: int,
    background_color: Tuple[float, float, float],
) -> Tuple[np.ndarray, np.ndarray]:
    """Copy each invalid pixel's color from its nearest valid pixel.

    Scans rings of increasing Chebyshev distance up to `radius`; within a
    ring the candidate with the smallest linear index wins. Pixels with no
    valid neighbor in range get the background color. Depth stays 0 at
    every filled pixel.
    """
    out_rgb, out_depth, _ = fill_holes_report(rgb, depth, valid, radius, background_color)
    return out_rgb, out_depth


def fill_holes_report(
    rgb: np.ndarray,
    depth: np.ndarray,
    valid: np.ndarray,
    radius: int,
    background_color: Tuple[float, float, float],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """fill_holes plus the mask of pixels left at the background color."""
    h, w = valid.shape
    out_rgb = rgb.copy()
    out_depth = depth.copy()
    out_depth[~valid] = 0.0
    residual = np.zeros((h, w), dtype=bool)
    hv, hu = np.nonzero(~valid)
    if len(hv) == 0:
        return out_rgb, out_depth, residual
    out_rgb[hv, hu] = np.asarray(background_color, dtype=np.float64)

    unfilled = np.ones(len(hv), dtype=bool)
    for r in range(1, radius + 1):
        if not unfilled.any():
            break
        for dv, du in _ring_offsets(r):
            idx = np.nonzero(unfilled)[0]
            if len(idx) == 0:
                break
            sv = hv[idx] + dv
            su = hu[idx] + du
            ok = (sv >= 0) & (sv < h) & (su >= 0) & (su < w)
            if not ok.any():
                continue
            sub = idx[ok]
            hit = valid[sv[ok], su[ok]]
            if not hit.any():
                continue
            tgt = sub[hit]
            out_rgb[hv[tgt], hu[tgt]] = rgb[sv[ok][hit], su[ok][hit]]
            unfilled[tgt] = False
    residual[hv[unfilled], hu[unfilled]] = True
    return out_rgb, out_depth, residual


class RenderBackend:
    """Turns composed state projections into observation frames.

    Contract: output rgb must agree with the composed layer at valid pixels
    (exactly, for the reference backend) and every invalid pixel must get
    some color. Depth is copied from the composed layer with holes at 0.
    """

    def render(
        self, projections: Sequence[StateProjection], refs: Optional[ReferenceSet], cfg: EngineConfig
    ) -> List[Frame]:
        raise NotImplementedError


class ProjectionColorBackend(RenderBackend):
    """Reference backend: exact projection colors + nearest-valid hole fill."""

    def render(self, projections, refs, cfg) -> List[Frame]:
        frames = []
        for proj in projections:
            comp = proj.composed
            rgb, depth = fill_holes(
                comp.rgb,
                comp.depth,
                comp.valid,
                radius=cfg.hole_fill_radius,
                background_color=cfg.background_color,
            )
            ids = proj.entity_ids.copy()
            frames.append(
                Frame(
                    rgb=rgb,
                    depth=depth,
                    fg_mask=ids > 0,
                    entity_ids=ids,
                    timestamp=proj.clock,
                )
            )
        return frames


def render_observation(
    projections: Sequence[StateProjection],
    refs: Optional[ReferenceSet],
    backend: RenderBackend,
    cfg: Optional[EngineConfig] = None,
) -> List[Frame]:
    """Render the observer's frames for one window via the given backend."""
    return backend.render(projections, refs, cfg or EngineConfig())


def unfilled_fraction(proj: StateProjection, cfg: EngineConfig) -> float:
    """Diagnostic: share of pixels with no valid source within fill radius."""
    comp = proj.composed
    _, _, residual = fill_holes_report(
        comp.rgb, comp.depth, comp.valid, cfg.hole_fill_radius, cfg.background_color
    )
    h, w = comp.valid.shape
    return float(residual.sum()) / float(h * w)
