"""Accumulation of the temporally-invariant background into the global
static point cloud."""

from __future__ import annotations

import numpy as np

from . import geometry
from .types import CameraPose, EngineConfig, Frame, Intrinsics, ValidationError


def accumulate_static(
    state, frame: Frame, pose: CameraPose, intr: Intrinsics, cfg: EngineConfig
):
    """Fuse one frame's background pixels into the static cloud.

    Background pixels (fg_mask false) with depth strictly inside
    (depth_min, depth_max) are unprojected, concatenated with the existing
    cloud and re-downsampled at the memory voxel size. Foreground pixels
    never enter static memory, so evolving entities cannot contaminate it.
    Re-voxelizing preserves the occupied-voxel set (a voxel's centroid
    stays inside the voxel), so occupancy grows monotonically.
    """
    if frame.shape != (intr.height, intr.width):
        raise ValidationError(
            f"frame shape {frame.shape} does not match intrinsics "
            f"{(intr.height, intr.width)}"
        )
    mask = ~frame.fg_mask & (frame.depth > cfg.depth_min) & (frame.depth < cfg.depth_max)
    fresh = geometry.unproject(frame, pose, intr, mask)
    if np.any(fresh.entity_ids != 0):
        raise ValidationError("foreground ids leaked into a background unprojection")
    if len(fresh) == 0:
        return state
    merged = state.static_cloud.concat(fresh)
    state.static_cloud = geometry.voxel_downsample(merged, cfg.voxel_size)
    return state
