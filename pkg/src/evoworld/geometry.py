"""Projective-geometry kernel: unprojection, Z-buffered projection,
voxel operations and Chamfer distance.

All functions are pure; inputs are never mutated.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .types import (
    CameraPose,
    ColoredPointCloud,
    Frame,
    Intrinsics,
    ProjectionLayer,
    ValidationError,
)

# Packed voxel keys: per-axis indices offset into [0, 2*_KEY_OFFSET) and
# combined base-_KEY_RANGE. Coordinates beyond +-_KEY_OFFSET voxels would
# alias; desk-scale scenes sit comfortably inside.
_KEY_OFFSET = 1 << 20
_KEY_RANGE = 1 << 21


def pixel_round(x: np.ndarray) -> np.ndarray:
    """Half-up rounding to the nearest integer (not banker's)."""
    return np.floor(x + 0.5).astype(np.int64)


def unproject(
    frame: Frame, pose: CameraPose, intr: Intrinsics, mask: np.ndarray
) -> ColoredPointCloud:
    """Lift masked pixels with positive depth into a world-frame cloud.

    Each pixel becomes one point on the ray through its center:
    p_cam = depth * K^-1 [u, v, 1], then p_world = R p_cam + t.
    Pixels with depth 0 are skipped.
    """
    h, w = frame.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (h, w):
        raise ValidationError(f"mask shape {mask.shape} does not match frame {(h, w)}")
    take = mask & (frame.depth > 0)
    v, u = np.nonzero(take)
    z = frame.depth[v, u]
    x = (u - intr.cx) / intr.fx * z
    y = (v - intr.cy) / intr.fy * z
    pts_cam = np.stack([x, y, z], axis=1)
    pts_world = pose.camera_to_world(pts_cam)
    return ColoredPointCloud(pts_world, frame.rgb[v, u], frame.entity_ids[v, u])


def project(
    cloud: ColoredPointCloud, pose: CameraPose, intr: Intrinsics
) -> ProjectionLayer:
    """Z-buffered pinhole projection of a cloud.

    Points behind the camera (z <= 0) and points landing outside the image
    are discarded. Where several points hit one pixel the smallest camera-z
    wins; exact depth ties go to the lower point index.
    """
    h, w = intr.height, intr.width
    layer = ProjectionLayer.blank(h, w)
    n = len(cloud)
    if n == 0:
        return layer

    pts_cam = pose.world_to_camera(cloud.points)
    z = pts_cam[:, 2]
    front = z > 0
    if not front.any():
        return layer

    idx = np.nonzero(front)[0]
    zc = z[idx]
    u = pixel_round(intr.fx * pts_cam[idx, 0] / zc + intr.cx)
    v = pixel_round(intr.fy * pts_cam[idx, 1] / zc + intr.cy)
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    if not inside.any():
        return layer
    idx, u, v, zc = idx[inside], u[inside], v[inside], zc[inside]

    pix = v * w + u
    # Primary key pixel, then depth, then original index: after the sort the
    # first entry of each pixel run is the Z-buffer winner.
    order = np.lexsort((idx, zc, pix))
    pix_s = pix[order]
    first = np.ones(len(pix_s), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]
    winners = idx[win]
    wpix = pix[win]

    flat = layer.valid.reshape(-1)
    flat[wpix] = True
    layer.depth.reshape(-1)[wpix] = z[winners]
    layer.rgb.reshape(-1, 3)[wpix] = cloud.colors[winners]
    layer.source_index.reshape(-1)[wpix] = winners
    return layer


def voxel_key(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Per-axis voxel indices, true floor (negatives included)."""
    return np.floor(points / np.float64(voxel_size)).astype(np.int64)


def pack_voxel_keys(keys3: np.ndarray) -> np.ndarray:
    """Fold (N, 3) voxel indices into sorted unique int64 scalars."""
    if len(keys3) == 0:
        return np.zeros(0, dtype=np.int64)
    shifted = keys3 + _KEY_OFFSET
    if shifted.min() < 0 or shifted.max() >= _KEY_RANGE:
        raise ValidationError("voxel index outside packable range")
    packed = (shifted[:, 0] * _KEY_RANGE + shifted[:, 1]) * _KEY_RANGE + shifted[:, 2]
    return np.unique(packed)


def packed_voxels(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return pack_voxel_keys(voxel_key(points, voxel_size))


def packed_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IOU of two sorted unique packed-key arrays."""
    if len(a) == 0 and len(b) == 0:
        return 0.0
    inter = len(np.intersect1d(a, b, assume_unique=True))
    union = len(a) + len(b) - inter
    return inter / union


def voxel_downsample(cloud: ColoredPointCloud, voxel_size: float) -> ColoredPointCloud:
    """One representative point per occupied voxel.

    Representative = centroid position, mean color, majority entity id
    (ties to the smallest id). Output is ordered by voxel index so the
    result is independent of input ordering.
    """
    if voxel_size <= 0:
        raise ValidationError("voxel_size must be positive")
    n = len(cloud)
    if n == 0:
        return ColoredPointCloud.empty()

    keys = voxel_key(cloud.points, voxel_size)
    shifted = keys + _KEY_OFFSET
    if shifted.min() < 0 or shifted.max() >= _KEY_RANGE:
        raise ValidationError("voxel index outside packable range")
    flat = (shifted[:, 0] * _KEY_RANGE + shifted[:, 1]) * _KEY_RANGE + shifted[:, 2]

    order = np.lexsort((cloud.entity_ids, flat))
    fs = flat[order]
    starts = np.nonzero(np.concatenate([[True], fs[1:] != fs[:-1]]))[0]
    counts = np.diff(np.concatenate([starts, [n]]))

    pts = np.add.reduceat(cloud.points[order], starts, axis=0) / counts[:, None]
    cols = np.add.reduceat(cloud.colors[order], starts, axis=0) / counts[:, None]

    # Majority entity id per voxel: build (voxel, id) runs, then keep the
    # run with the highest count (ties to the smaller id, which within a
    # voxel comes first after the sort above).
    eids_sorted = cloud.entity_ids[order]
    group_of = np.repeat(np.arange(len(starts)), counts)
    run_break = np.concatenate(
        [[True], (fs[1:] != fs[:-1]) | (eids_sorted[1:] != eids_sorted[:-1])]
    )
    run_starts = np.nonzero(run_break)[0]
    run_counts = np.diff(np.concatenate([run_starts, [n]]))
    run_group = group_of[run_starts]
    run_eid = eids_sorted[run_starts]
    pick = np.lexsort((run_eid, -run_counts, run_group))
    rg_sorted = run_group[pick]
    keep = np.concatenate([[True], rg_sorted[1:] != rg_sorted[:-1]])
    major = np.zeros(len(starts), dtype=np.int32)
    major[rg_sorted[keep]] = run_eid[pick[keep]]

    return ColoredPointCloud(pts, cols, major)


def voxel_iou(a: ColoredPointCloud, b: ColoredPointCloud, voxel_size: float) -> float:
    """Occupied-voxel intersection over union; 0.0 when both clouds are empty."""
    if voxel_size <= 0:
        raise ValidationError("voxel_size must be positive")
    return packed_iou(
        packed_voxels(a.points, voxel_size), packed_voxels(b.points, voxel_size)
    )


def chamfer_distance(a: ColoredPointCloud, b: ColoredPointCloud) -> float:
    """Symmetric Chamfer distance in meters (mean Euclidean NN, both ways).

    Uses exact nearest-neighbor queries; distances are not squared so the
    result keeps metric units.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("chamfer_distance requires non-empty clouds")
    d_ab, _ = cKDTree(b.points).query(a.points, k=1)
    d_ba, _ = cKDTree(a.points).query(b.points, k=1)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))
