"""Procedural synthetic scenes and the dense ground-truth simulator.

A scene is a textured room (floor + 3 walls) plus scripted entity point
clusters. The room cloud is built by ray-casting the analytic geometry from
the initial camera: every background point lies exactly on a pixel-center
ray of the seed view, so re-rendering from that pose reproduces the seed
image bit-for-bit. An extra low-density sweep covers the yaw range the
benchmark trajectories explore; those points stay strictly outside the
seed frustum.

The dense oracle advances every entity's script at every timestep whether
or not anything observes it, and renders with the same projection and
hole-filling code the engine uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import geometry
from .renderer import fill_holes
from .storyline import (
    MotionCommand,
    Storyline,
    StorylineStep,
    script_state,
)
from .types import (
    CameraPose,
    ColoredPointCloud,
    EngineConfig,
    Frame,
    Intrinsics,
    ValidationError,
    yaw_rotation,
)

DEFAULT_SCENE_SPEC = {
    "room": {"x_half": 2.6, "y_floor": 1.25, "z_back": 4.6},
    "n_entities": 1,
    "width": 352,
    "height": 198,
    "fx": 176.0,
    "fy": 176.0,
    "texture_cell": 0.55,
    "texture_contrast": 0.13,
    "sweep_deg": 55.0,
    "entity_points": [220, 420],
    "min_script_displacement": 0.35,
}


# ---------------------------------------------------------------------------
# Deterministic hashing for textures
# ---------------------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def _hash01(*channels: np.ndarray, seed: int) -> np.ndarray:
    """Uniform [0,1) hash of integer channel arrays, vectorized."""
    acc = seed & 0xFFFFFFFFFFFFFFFF
    out = None
    for ch in channels:
        h = _mix(np.asarray(ch).astype(np.int64).astype(np.uint64) + np.uint64(acc))
        out = h if out is None else _mix(out ^ h)
        acc = (acc + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    return (out >> np.uint64(11)).astype(np.float64) / float(1 << 53)


# ---------------------------------------------------------------------------
# Entities
# ---------------------------------------------------------------------------


@dataclass
class Entity:
    """A scripted dynamic point cluster."""

    entity_id: int
    shape: str  # "box" | "ellipsoid"
    center: np.ndarray  # (3,) placement at script time 0
    half_extent: np.ndarray  # (3,)
    n_points: int
    color_seed: int
    script_epoch: int  # scene clock at which its script starts
    storyline: Storyline
    rest_cloud: ColoredPointCloud = field(default=None, repr=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_extent = np.asarray(self.half_extent, dtype=np.float64)
        if self.rest_cloud is None:
            self.rest_cloud = build_entity_cloud(
                self.entity_id,
                self.shape,
                self.center,
                self.half_extent,
                self.n_points,
                self.color_seed,
            )

    @property
    def p_init(self) -> np.ndarray:
        return self.rest_cloud.centroid()

    def cloud_at(self, scene_clock: int) -> Optional[ColoredPointCloud]:
        """World-frame cloud at an absolute scene clock; None before spawn."""
        if scene_clock < self.script_epoch:
            return None
        st = script_state(self.storyline, self.p_init, scene_clock - self.script_epoch)
        rot = yaw_rotation(st.yaw)
        pts = (self.rest_cloud.points - self.p_init) @ rot.T + st.position
        return ColoredPointCloud(pts, self.rest_cloud.colors, self.rest_cloud.entity_ids)

    def to_manifest(self) -> dict:
        from .storyline import storyline_to_dict

        return {
            "entity_id": self.entity_id,
            "shape": self.shape,
            "center": [float(c) for c in self.center],
            "half_extent": [float(c) for c in self.half_extent],
            "n_points": self.n_points,
            "color_seed": self.color_seed,
            "script_epoch": self.script_epoch,
            "storyline": storyline_to_dict(self.storyline),
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "Entity":
        from .storyline import parse_storyline_dict

        return cls(
            entity_id=int(d["entity_id"]),
            shape=str(d["shape"]),
            center=np.array(d["center"], dtype=np.float64),
            half_extent=np.array(d["half_extent"], dtype=np.float64),
            n_points=int(d["n_points"]),
            color_seed=int(d["color_seed"]),
            script_epoch=int(d["script_epoch"]),
            storyline=parse_storyline_dict(d["storyline"]),
        )


def build_entity_cloud(
    entity_id: int,
    shape: str,
    center: np.ndarray,
    half_extent: np.ndarray,
    n_points: int,
    color_seed: int,
) -> ColoredPointCloud:
    """Deterministic scatter of points inside a box or ellipsoid."""
    rng = np.random.default_rng(color_seed)
    raw = rng.uniform(-1.0, 1.0, size=(n_points * 3, 3))
    if shape == "ellipsoid":
        raw = raw[np.sum(raw**2, axis=1) <= 1.0]
    raw = raw[:n_points]
    while len(raw) < n_points:  # ellipsoid rejection shortfall
        extra = rng.uniform(-1.0, 1.0, size=(n_points, 3))
        if shape == "ellipsoid":
            extra = extra[np.sum(extra**2, axis=1) <= 1.0]
        raw = np.concatenate([raw, extra])[:n_points]
    pts = center + raw * half_extent

    # Distinct hue band per entity keeps descriptor cosine across entities low.
    hue = (0.61803398875 * entity_id + (color_seed % 97) / 97.0) % 1.0
    base = _hsv_to_rgb(hue, 0.85, 0.9)
    jitter = rng.uniform(-0.08, 0.08, size=(n_points, 3))
    colors = np.clip(base + jitter, 0.0, 1.0)
    ids = np.full(n_points, entity_id, dtype=np.int32)
    return ColoredPointCloud(pts, colors, ids)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    seed: int
    spec: dict
    background: ColoredPointCloud
    entities: List[Entity]
    initial_pose: CameraPose
    intrinsics: Intrinsics

    def entity(self, entity_id: int) -> Entity:
        for e in self.entities:
            if e.entity_id == entity_id:
                return e
        raise KeyError(f"no entity {entity_id}")

    def next_entity_id(self) -> int:
        return max((e.entity_id for e in self.entities), default=0) + 1

    def dynamic_cloud_at(self, scene_clock: int) -> ColoredPointCloud:
        """Union of all spawned entities' clouds at a clock (may be empty)."""
        out = ColoredPointCloud.empty()
        for e in self.entities:
            c = e.cloud_at(scene_clock)
            if c is not None:
                out = out.concat(c)
        return out

    def scene_text(self) -> str:
        room = self.spec["room"]
        return (
            f"A rectangular room about {2 * room['x_half']:.1f} m wide and "
            f"{room['z_back']:.1f} m deep, with checker-textured walls and floor."
        )


def room_ray_depths(dirs: np.ndarray, room: dict) -> np.ndarray:
    """Distance along each ray (camera at origin) to the nearest room surface.

    Surfaces: floor y=y_floor, back wall z=z_back, side walls x=+-x_half;
    walls extend upward without bound, so every forward ray hits something.
    """
    x_half, y_floor, z_back = room["x_half"], room["y_floor"], room["z_back"]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    big = np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        s_floor = np.where(dy > 1e-12, y_floor / dy, big)
        s_back = np.where(dz > 1e-12, z_back / dz, big)
        s_left = np.where(dx < -1e-12, -x_half / dx, big)
        s_right = np.where(dx > 1e-12, x_half / dx, big)

    # Reject wall hits outside the lateral bounds / floor hits beyond walls.
    def _hit(s, check):
        p = dirs * s[:, None]
        ok = np.isfinite(s) & check(p)
        return np.where(ok, s, big)

    s_floor = _hit(s_floor, lambda p: (np.abs(p[:, 0]) <= x_half) & (p[:, 2] <= z_back) & (p[:, 2] >= -x_half))
    s_back = _hit(s_back, lambda p: (np.abs(p[:, 0]) <= x_half) & (p[:, 1] <= y_floor))
    s_left = _hit(s_left, lambda p: (p[:, 2] >= -x_half) & (p[:, 2] <= z_back) & (p[:, 1] <= y_floor))
    s_right = _hit(s_right, lambda p: (p[:, 2] >= -x_half) & (p[:, 2] <= z_back) & (p[:, 1] <= y_floor))
    return np.minimum.reduce([s_floor, s_back, s_left, s_right])


def _surface_id(points: np.ndarray, room: dict) -> np.ndarray:
    """0 floor, 1 back, 2 left, 3 right (nearest-plane assignment)."""
    d = np.stack(
        [
            np.abs(points[:, 1] - room["y_floor"]),
            np.abs(points[:, 2] - room["z_back"]),
            np.abs(points[:, 0] + room["x_half"]),
            np.abs(points[:, 0] - room["x_half"]),
        ],
        axis=1,
    )
    return np.argmin(d, axis=1)


def room_texture(points: np.ndarray, room: dict, seed: int, cell: float, contrast: float) -> np.ndarray:
    """Seeded checker texture with per-cell and per-point variation."""
    sid = _surface_id(points, room)
    # Checker coordinates in each surface's tangent plane.
    uu = np.where(sid == 0, points[:, 0], np.where(sid == 1, points[:, 0], points[:, 2]))
    vv = np.where(sid == 0, points[:, 2], points[:, 1])
    iu = np.floor(uu / cell).astype(np.int64)
    iv = np.floor(vv / cell).astype(np.int64)

    parity = ((iu + iv) % 2).astype(np.float64)
    base = 0.5 - contrast / 2 + parity * contrast
    cell_jitter = (_hash01(iu, iv, sid, seed=seed * 31 + 7) - 0.5) * 0.05
    lum = np.clip(base + cell_jitter, 0.03, 0.97)

    # Mild per-surface tint so the walls are tellable apart.
    tint = np.stack(
        [
            1.0 + 0.06 * _hash01(sid, np.full_like(sid, k), seed=seed * 13 + k)
            for k in range(3)
        ],
        axis=1,
    )
    rgb = np.clip(lum[:, None] * tint, 0.0, 1.0)
    # Per-point grain quantized at 2 mm so it is a pure function of position.
    q = np.floor(points / 0.002).astype(np.int64)
    grain = (_hash01(q[:, 0], q[:, 1], q[:, 2], seed=seed * 17 + 3) - 0.5) * 0.02
    return np.clip(rgb + grain[:, None], 0.0, 1.0)


def _raycast_background(intr: Intrinsics, room: dict, seed: int, cell: float, contrast: float) -> ColoredPointCloud:
    """Dense room cloud on the seed view's pixel-center rays."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    u = u.reshape(-1)
    v = v.reshape(-1)
    dirs = np.stack(
        [(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, dtype=np.float64)],
        axis=1,
    )
    s = room_ray_depths(dirs, room)
    ok = np.isfinite(s)
    pts = dirs[ok] * s[ok][:, None]
    colors = room_texture(pts, room, seed, cell, contrast)
    return ColoredPointCloud(pts, colors, np.zeros(len(pts), dtype=np.int32))


def _sweep_background(
    intr: Intrinsics, room: dict, seed: int, cell: float, contrast: float, sweep_deg: float
) -> ColoredPointCloud:
    """Angular samples covering the pan range outside the seed frustum.

    Kept strictly outside the seed image (4 px padding) so they can never
    alias into a seed-pose rendering.
    """
    step_az = math.atan(1.0 / intr.fx)
    step_el = math.atan(1.0 / intr.fy)
    az_max = math.radians(sweep_deg) + math.atan((intr.width / 2) / intr.fx)
    el_max = math.atan((intr.height / 2 + 40) / intr.fy)
    az = np.arange(-az_max, az_max, step_az)
    el = np.arange(-el_max, el_max, step_el)
    A, E = np.meshgrid(az, el)
    A = A.reshape(-1)
    E = E.reshape(-1)
    dirs = np.stack([np.sin(A) * np.cos(E), np.sin(E), np.cos(A) * np.cos(E)], axis=1)

    # Drop directions that project inside (or near) the seed image.
    z = dirs[:, 2]
    front = z > 1e-9
    uu = np.where(front, intr.fx * dirs[:, 0] / np.where(front, z, 1.0) + intr.cx, -1e9)
    vv = np.where(front, intr.fy * dirs[:, 1] / np.where(front, z, 1.0) + intr.cy, -1e9)
    pad = 4.0
    inside = front & (uu >= -pad) & (uu <= intr.width - 1 + pad) & (vv >= -pad) & (vv <= intr.height - 1 + pad)
    dirs = dirs[~inside]

    s = room_ray_depths(dirs, room)
    ok = np.isfinite(s)
    pts = dirs[ok] * s[ok][:, None]
    colors = room_texture(pts, room, seed, cell, contrast)
    return ColoredPointCloud(pts, colors, np.zeros(len(pts), dtype=np.int32))


def _frustum_margin_ok(intr: Intrinsics, point: np.ndarray, margin_px: float) -> bool:
    """Is a world point inside the seed frustum with a pixel margin?"""
    x, y, z = point
    if z <= 0.2:
        return False
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    return (
        margin_px <= u <= intr.width - 1 - margin_px
        and margin_px <= v <= intr.height - 1 - margin_px
    )


def _make_storyline(
    rng: np.random.Generator,
    entity_center: np.ndarray,
    half_extent: np.ndarray,
    intr: Intrinsics,
    room: dict,
    min_displacement: float,
    horizon: int = 260,
) -> Storyline:
    """Seeded multi-step script whose targets stay in the room and the seed
    frustum, with guaranteed displacement at the revisit clocks."""
    margin = 0.3
    ex = float(np.max(half_extent))
    x_lo, x_hi = -room["x_half"] + margin + ex, room["x_half"] - margin - ex
    z_lo, z_hi = 1.8, room["z_back"] - margin - ex
    y = entity_center[1]

    def sample_target(prev):
        for _ in range(200):
            t = np.array(
                [rng.uniform(x_lo, x_hi), y, rng.uniform(z_lo, z_hi)], dtype=np.float64
            )
            if np.linalg.norm(t - prev) < 0.6:
                continue
            corners = t + np.array([[ex, 0, 0], [-ex, 0, 0], [0, -half_extent[1], 0]])
            if all(_frustum_margin_ok(intr, c, 10.0) for c in corners):
                return t
        return None

    for _ in range(60):
        n_steps = int(rng.integers(2, 5))
        steps = []
        prev = entity_center.copy()
        ok = True
        for si in range(n_steps):
            tgt = sample_target(prev)
            if tgt is None:
                ok = False
                break
            dur = int(rng.integers(55, 95))
            program = [MotionCommand("move_to", dur, tuple(float(c) for c in tgt))]
            if rng.random() < 0.5:
                program.append(MotionCommand("dwell", int(rng.integers(8, 30))))
            if rng.random() < 0.25:
                look = sample_target(tgt)
                if look is not None:
                    program.append(
                        MotionCommand("turn_to", int(rng.integers(6, 16)), tuple(float(c) for c in look))
                    )
            side = "left" if tgt[0] < prev[0] else "right"
            steps.append(
                StorylineStep(
                    fg_text=f"The figure drifts toward the {side} side of the room and pauses.",
                    program=tuple(program),
                )
            )
            prev = tgt
        if not ok or not steps:
            continue
        story = Storyline(scene_text="", steps=tuple(steps))
        p0 = script_state(story, entity_center, 0).position
        d1 = np.linalg.norm(script_state(story, entity_center, horizon // 2).position - p0)
        d2 = np.linalg.norm(script_state(story, entity_center, horizon).position - p0)
        if d1 >= min_displacement and d2 >= min_displacement:
            return story
    raise ValidationError("could not construct a storyline inside the room bounds")


def generate_scene(seed: int, spec: Optional[dict] = None) -> SyntheticScene:
    """Build a deterministic synthetic scene from a seed and a spec dict."""
    full = dict(DEFAULT_SCENE_SPEC)
    if spec:
        full.update(spec)
        if "room" in spec:
            room = dict(DEFAULT_SCENE_SPEC["room"])
            room.update(spec["room"])
            full["room"] = room
    room = full["room"]
    n_entities = int(full["n_entities"])
    if n_entities < 0:
        raise ValidationError("n_entities must be >= 0")

    intr = Intrinsics(
        fx=float(full["fx"]),
        fy=float(full["fy"]),
        cx=full["width"] / 2.0,
        cy=full["height"] / 2.0,
        width=int(full["width"]),
        height=int(full["height"]),
    )
    cell = float(full["texture_cell"])
    contrast = float(full["texture_contrast"])

    bg_near = _raycast_background(intr, room, seed, cell, contrast)
    bg_far = _sweep_background(intr, room, seed, cell, contrast, float(full["sweep_deg"]))
    background = bg_near.concat(bg_far)

    rng = np.random.default_rng(seed)
    entities: List[Entity] = []
    lo_pts, hi_pts = full["entity_points"]
    placed_keys: List[np.ndarray] = []
    attempts = 0
    while len(entities) < n_entities:
        attempts += 1
        if attempts > 400:
            raise ValidationError("room too small for requested entities")
        eid = len(entities) + 1
        shape = "box" if rng.random() < 0.5 else "ellipsoid"
        half = np.array(
            [rng.uniform(0.16, 0.24), rng.uniform(0.18, 0.26), rng.uniform(0.16, 0.24)]
        )
        cx = rng.uniform(-1.2, 1.2)
        cz = rng.uniform(2.2, 3.4)
        cy = room["y_floor"] - half[1] - 0.02
        center = np.array([cx, cy, cz])
        if not all(
            _frustum_margin_ok(intr, center + d, 12.0)
            for d in (np.array([half[0], 0, 0]), np.array([-half[0], 0, 0]), np.array([0, -half[1], 0]))
        ):
            continue
        if any(np.linalg.norm(center - e.center) < 0.9 for e in entities):
            continue
        n_points = int(rng.integers(lo_pts, hi_pts + 1))
        color_seed = int(seed * 1000003 + eid * 7919)
        try:
            story = _make_storyline(
                rng, center, half, intr, room, float(full["min_script_displacement"])
            )
        except ValidationError:
            continue
        ent = Entity(
            entity_id=eid,
            shape=shape,
            center=center,
            half_extent=half,
            n_points=n_points,
            color_seed=color_seed,
            script_epoch=0,
            storyline=story,
        )
        key = geometry.packed_voxels(ent.rest_cloud.points, 0.01)
        if any(geometry.packed_iou(key, k) > 0 for k in placed_keys):
            continue
        placed_keys.append(key)
        entities.append(ent)

    return SyntheticScene(
        seed=seed,
        spec=full,
        background=background,
        entities=entities,
        initial_pose=CameraPose.identity(),
        intrinsics=intr,
    )


def make_summoned_entity(
    scene: SyntheticScene,
    placement: dict,
    storyline: Storyline,
    script_epoch: int,
) -> Entity:
    """Entity injected mid-session (the late-appearing event)."""
    eid = scene.next_entity_id()
    center = np.asarray(placement.get("center", [0.0, scene.spec["room"]["y_floor"] - 0.24, 2.8]), dtype=np.float64)
    half = np.asarray(placement.get("half_extent", [0.18, 0.22, 0.18]), dtype=np.float64)
    n_points = int(placement.get("n_points", 300))
    return Entity(
        entity_id=eid,
        shape=str(placement.get("shape", "box")),
        center=center,
        half_extent=half,
        n_points=n_points,
        color_seed=int(scene.seed * 1000003 + eid * 7919),
        script_epoch=script_epoch,
        storyline=storyline,
    )


# ---------------------------------------------------------------------------
# Dense oracle
# ---------------------------------------------------------------------------


def oracle_render(
    scene: SyntheticScene,
    pose: CameraPose,
    t: int,
    cfg: Optional[EngineConfig] = None,
) -> Frame:
    """Ground-truth frame at absolute clock t from an arbitrary pose.

    Every entity's script is advanced to t regardless of visibility, then
    background + entities are rendered with the shared Z-buffer projection
    and hole filling.
    """
    if t < 0:
        raise ValidationError("oracle clock must be >= 0")
    cfg = cfg or EngineConfig()
    intr = scene.intrinsics
    cloud = scene.background.concat(scene.dynamic_cloud_at(t))
    layer = geometry.project(cloud, pose, intr)
    rgb, depth = fill_holes(
        layer.rgb,
        layer.depth,
        layer.valid,
        radius=cfg.hole_fill_radius,
        background_color=cfg.background_color,
    )
    ids = np.zeros(layer.valid.shape, dtype=np.int32)
    got = layer.source_index >= 0
    ids[got] = cloud.entity_ids[layer.source_index[got]]
    return Frame(
        rgb=rgb, depth=depth, fg_mask=ids > 0, entity_ids=ids, timestamp=int(t)
    )


def initial_frame(scene: SyntheticScene, cfg: Optional[EngineConfig] = None) -> Frame:
    return oracle_render(scene, scene.initial_pose, 0, cfg)


# ---------------------------------------------------------------------------
# Scene I/O: the manifest is the source of truth; clouds regenerate from it
# ---------------------------------------------------------------------------

SCENE_SCHEMA_VERSION = 1


def scene_to_manifest(scene: SyntheticScene) -> dict:
    return {
        "version": SCENE_SCHEMA_VERSION,
        "seed": scene.seed,
        "spec": scene.spec,
        "intrinsics": scene.intrinsics.to_dict(),
        "initial_pose": scene.initial_pose.matrix().tolist(),
        "entities": [e.to_manifest() for e in scene.entities],
    }


def scene_from_manifest(d: dict) -> SyntheticScene:
    if int(d.get("version", -1)) != SCENE_SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported scene schema version {d.get('version')!r}"
        )
    base = generate_scene(int(d["seed"]), d["spec"])
    manifest_entities = [Entity.from_manifest(ed) for ed in d.get("entities", [])]
    base.entities = manifest_entities
    return base
