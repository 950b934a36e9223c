"""Streaming session service and headless execution.

A Session owns one world and applies commands strictly in arrival order;
every UI capability exists as a message, so scripted headless runs and the
browser client drive exactly the same code path. Frames travel as binary
messages: a little-endian u32 header length, a JSON header {session,
clock, width, height, encoding} and the payload (raw-rgb8 bytes or PNG).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bench import BenchCase, Trajectory, load_case
from .engine import (
    BackendSet,
    WorldState,
    freeze_baseline_step,
    init_world,
    step_world,
    summon_entity,
)
from .monitors import farthest_monitor, monitor_status_record
from .scene import (
    SyntheticScene,
    generate_scene,
    initial_frame,
    make_summoned_entity,
    scene_from_manifest,
    scene_to_manifest,
)
from .snapshot import (
    BlobWriter,
    SnapshotError,
    read_snapshot,
    world_from_document,
    world_to_document,
    write_snapshot,
)
from .storyline import Storyline, parse_storyline_dict
from .types import CameraPose, EngineConfig, Frame, ValidationError, yaw_rotation

Event = Union[dict, Frame]


class CommandError(ValidationError):
    """Malformed or out-of-order session command."""


class Session:
    """One world, one writer; commands apply in arrival order."""

    def __init__(self, scene: SyntheticScene, cfg: EngineConfig, session_id: str = "s0"):
        self.session_id = session_id
        self.scene = scene
        self.cfg = cfg
        self.backends = BackendSet.reference(scene)
        self.world = init_world(initial_frame(scene, cfg), scene.initial_pose)
        self.current_pose = scene.initial_pose
        self.pending_delta = {"dx": 0.0, "dy": 0.0, "dz": 0.0, "dyaw": 0.0}

    # -- command handling --

    def handle(self, msg: dict) -> List[Event]:
        if not isinstance(msg, dict) or "type" not in msg:
            raise CommandError("message must be an object with a 'type' field")
        kind = msg["type"]
        handler = getattr(self, f"_cmd_{kind}", None)
        if handler is None:
            raise CommandError(f"unknown message type {kind!r}")
        return handler(msg)

    def _ack(self, cmd: str, **extra) -> dict:
        return {"type": "ack", "cmd": cmd, "global_clock": self.world.global_clock, **extra}

    def _cmd_camera(self, msg: dict) -> List[Event]:
        for key in ("dx", "dy", "dz", "dyaw"):
            v = msg.get(key, 0.0)
            if not isinstance(v, (int, float)) or not np.isfinite(v):
                raise CommandError(f"camera delta {key} must be a finite number")
            self.pending_delta[key] += float(v)
        return [self._ack("camera", pending=dict(self.pending_delta))]

    def _window_poses(self) -> List[CameraPose]:
        base = self.current_pose
        local = np.array(
            [self.pending_delta["dx"], self.pending_delta["dy"], self.pending_delta["dz"]]
        )
        world_delta = base.rotation @ local
        dyaw = np.radians(self.pending_delta["dyaw"])
        poses = []
        for k in range(1, self.cfg.T + 1):
            f = k / self.cfg.T
            poses.append(
                CameraPose(
                    yaw_rotation(f * dyaw) @ base.rotation,
                    base.translation + f * world_delta,
                )
            )
        return poses

    def _cmd_advance(self, msg: dict) -> List[Event]:
        poses = self._window_poses()
        frames, self.world = step_world(
            self.world, poses, self.scene.intrinsics, self.scene.scene_text(), self.cfg, self.backends
        )
        self.current_pose = poses[-1]
        self.pending_delta = {"dx": 0.0, "dy": 0.0, "dz": 0.0, "dyaw": 0.0}
        out: List[Event] = [
            {
                "type": "frames_begin",
                "count": len(frames),
                "clock_start": frames[0].timestamp,
                "fps": self.cfg.fps,
            }
        ]
        out.extend(frames)
        out.append(self._ack("advance"))
        return out

    def _cmd_summon(self, msg: dict) -> List[Event]:
        placement = msg.get("placement", {})
        if "storyline" in msg:
            story = parse_storyline_dict(msg["storyline"])
        elif "storyline_step" in msg:
            story = parse_storyline_dict({"scene_text": "", "steps": [msg["storyline_step"]]})
        else:
            raise CommandError("summon requires 'storyline' or 'storyline_step'")
        entity = make_summoned_entity(
            self.scene, placement, story, script_epoch=self.world.global_clock
        )
        self.scene.entities.append(entity)
        self.world = summon_entity(self.world, entity)
        return [self._ack("summon", entity_id=entity.entity_id)]

    def _cmd_status(self, msg: dict) -> List[Event]:
        observer_t = self.current_pose.translation
        records = []
        next_evicted = (
            farthest_monitor(self.world.monitors, observer_t)
            if self.world.monitors
            else None
        )
        for m in sorted(self.world.monitors, key=lambda m: m.id):
            rec = monitor_status_record(m)
            rec["distance_to_observer"] = float(
                np.linalg.norm(m.anchor_pose.translation - observer_t)
            )
            rec["next_evicted"] = m.id == next_evicted
            records.append(rec)
        entities = []
        for m in self.world.monitors:
            cloud = m.current_cloud()
            if len(cloud):
                for eid in m.entity_ids():
                    sub = cloud.select(cloud.entity_ids == eid)
                    if len(sub):
                        entities.append({"id": eid, "centroid": sub.centroid().tolist()})
        for s in self.world.pending_spawns:
            c = s.cloud_at(self.world.global_clock)
            if c is not None:
                entities.append({"id": s.entity_id, "centroid": c.centroid().tolist()})
        return [
            {
                "type": "status",
                "session": self.session_id,
                "global_clock": self.world.global_clock,
                "round": self.world.global_clock // self.cfg.T,
                "frames_per_round": self.cfg.T,
                "fps": self.cfg.fps,
                "width": self.scene.intrinsics.width,
                "height": self.scene.intrinsics.height,
                "observer_pose": self.current_pose.matrix().tolist(),
                "pending_delta": dict(self.pending_delta),
                "monitors": records,
                "entities": entities,
            }
        ]

    def _cmd_snapshot(self, msg: dict) -> List[Event]:
        path = msg.get("path")
        if not path:
            raise CommandError("snapshot requires a path")
        save_snapshot(self, path)
        return [self._ack("snapshot", path=str(path))]

    def _cmd_restore(self, msg: dict) -> List[Event]:
        path = msg.get("path")
        if not path:
            raise CommandError("restore requires a path")
        other = load_snapshot(path, session_id=self.session_id)
        self.__dict__.update(other.__dict__)
        return [self._ack("restore", path=str(path))]


def handle_command(session: Session, msg: dict) -> List[Event]:
    """Apply one control message; returns JSON events and Frame events."""
    return session.handle(msg)


# ---------------------------------------------------------------------------
# Session persistence
# ---------------------------------------------------------------------------


def save_snapshot(session: Session, path) -> Path:
    w = BlobWriter()
    doc = {
        "kind": "session",
        "session_id": session.session_id,
        "config": session.cfg.to_dict(),
        "scene": scene_to_manifest(session.scene),
        "camera": {
            "pose": session.current_pose.matrix().tolist(),
            "pending_delta": dict(session.pending_delta),
        },
        "world": world_to_document(session.world, w),
    }
    return write_snapshot(path, doc, w)


def load_snapshot(path, session_id: Optional[str] = None) -> Session:
    doc, reader = read_snapshot(path)
    if doc.get("kind") != "session":
        raise SnapshotError(f"not a session snapshot: kind={doc.get('kind')!r}")
    scene = scene_from_manifest(doc["scene"])
    cfg = EngineConfig.from_dict(doc["config"])
    session = Session.__new__(Session)
    session.session_id = session_id or doc.get("session_id", "s0")
    session.scene = scene
    session.cfg = cfg
    session.backends = BackendSet.reference(scene)
    session.world = world_from_document(doc["world"], reader)
    session.current_pose = CameraPose.from_matrix(np.array(doc["camera"]["pose"]))
    session.pending_delta = {
        k: float(v) for k, v in doc["camera"]["pending_delta"].items()
    }
    return session


# ---------------------------------------------------------------------------
# Binary frame encoding
# ---------------------------------------------------------------------------


def rgb_to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_frame_message(session_id: str, frame: Frame, encoding: str = "raw-rgb8") -> bytes:
    h, w = frame.shape
    if encoding == "raw-rgb8":
        payload = rgb_to_uint8(frame.rgb).tobytes()
    elif encoding == "png":
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(rgb_to_uint8(frame.rgb), mode="RGB").save(buf, format="PNG")
        payload = buf.getvalue()
    else:
        raise ValidationError(f"unknown frame encoding {encoding!r}")
    header = json.dumps(
        {
            "session": session_id,
            "clock": frame.timestamp,
            "width": w,
            "height": h,
            "encoding": encoding,
        },
        sort_keys=True,
    ).encode("utf-8")
    return struct.pack("<I", len(header)) + header + payload


def decode_frame_message(data: bytes) -> Tuple[dict, bytes]:
    (n,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4 : 4 + n].decode("utf-8"))
    return header, data[4 + n :]


# ---------------------------------------------------------------------------
# Headless benchmark execution
# ---------------------------------------------------------------------------


def config_for_case(case: BenchCase, base: Optional[EngineConfig] = None) -> EngineConfig:
    cfg = base or EngineConfig()
    return cfg.with_overrides(
        T=case.trajectory.frames_per_round,
        fps=case.trajectory.fps,
        width=case.scene.intrinsics.width,
        height=case.scene.intrinsics.height,
    )


def run_case(
    case: BenchCase,
    cfg: Optional[EngineConfig] = None,
    freeze: bool = False,
) -> Tuple[List[Frame], List[CameraPose], WorldState]:
    """Execute a benchmark case headlessly; returns (frames, poses, state)."""
    cfg = config_for_case(case, cfg)
    scene = case.scene
    backends = BackendSet.reference(scene)
    state = init_world(initial_frame(scene, cfg), case.trajectory.poses[0])
    frames: List[Frame] = []
    for r in range(case.trajectory.rounds):
        poses = case.trajectory.window_poses(r)
        text = case.scene_texts[r] if r < len(case.scene_texts) else ""
        if freeze:
            fr, state = freeze_baseline_step(state, poses, scene.intrinsics, cfg, backends)
        else:
            fr, state = step_world(state, poses, scene.intrinsics, text, cfg, backends)
        frames.extend(fr)
    return frames, case.trajectory.poses[1:], state


# ---------------------------------------------------------------------------
# Frame export (lossless 8-bit RGB + 16-bit millimeter depth + id labels)
# ---------------------------------------------------------------------------


def export_frames(frames: Sequence[Frame], poses: Sequence[CameraPose], out_dir) -> Path:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for frame, pose in zip(frames, poses):
        ts = frame.timestamp
        rgb_name = f"rgb_{ts:05d}.png"
        depth_name = f"depth_{ts:05d}.png"
        ids_name = f"ids_{ts:05d}.png"
        Image.fromarray(rgb_to_uint8(frame.rgb), mode="RGB").save(out / rgb_name)
        depth_mm = np.clip(np.round(frame.depth * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(depth_mm, mode="I;16").save(out / depth_name)
        ids16 = np.clip(frame.entity_ids, 0, 65535).astype(np.uint16)
        Image.fromarray(ids16, mode="I;16").save(out / ids_name)
        entries.append(
            {
                "timestamp": ts,
                "pose": pose.matrix().tolist(),
                "rgb": rgb_name,
                "depth": depth_name,
                "entity_ids": ids_name,
            }
        )
    manifest = {"version": 1, "frames": entries}
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return out


def load_exported_frames(in_dir) -> Tuple[List[Frame], List[CameraPose]]:
    from PIL import Image

    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    frames, poses = [], []
    for e in manifest["frames"]:
        rgb = np.asarray(Image.open(src / e["rgb"]), dtype=np.float64) / 255.0
        depth = np.asarray(Image.open(src / e["depth"]), dtype=np.float64) / 1000.0
        ids = np.asarray(Image.open(src / e["entity_ids"]), dtype=np.int64).astype(np.int32)
        frames.append(
            Frame(
                rgb=rgb,
                depth=depth,
                fg_mask=ids > 0,
                entity_ids=ids,
                timestamp=int(e["timestamp"]),
            )
        )
        poses.append(CameraPose.from_matrix(np.array(e["pose"])))
    return frames, poses


# ---------------------------------------------------------------------------
# WebSocket app
# ---------------------------------------------------------------------------


def build_session_from_init(msg: dict, scenes_dir: Optional[Path], session_id: str) -> Session:
    scene_ref = msg.get("scene")
    if not isinstance(scene_ref, dict):
        raise CommandError("init requires a scene object ({seed[, spec]} or {path})")
    if "path" in scene_ref:
        root = Path(scenes_dir) if scenes_dir else Path(".")
        manifest = json.loads((root / scene_ref["path"]).read_text(encoding="utf-8"))
        scene = scene_from_manifest(manifest)
    elif "seed" in scene_ref:
        scene = generate_scene(int(scene_ref["seed"]), scene_ref.get("spec"))
    else:
        raise CommandError("scene object needs 'seed' or 'path'")
    cfg = EngineConfig.from_dict(msg["config"]) if msg.get("config") else EngineConfig(
        width=scene.intrinsics.width, height=scene.intrinsics.height
    )
    return Session(scene, cfg, session_id=session_id)


def create_app(scenes_dir: Optional[Path] = None):
    from fastapi import FastAPI, WebSocket, WebSocketDisconnect

    app = FastAPI(title="evoworld session service")
    counter = {"n": 0}

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        session: Optional[Session] = None
        try:
            while True:
                text = await ws.receive_text()
                try:
                    msg = json.loads(text)
                except json.JSONDecodeError:
                    await ws.send_text(json.dumps({"type": "error", "error": "bad json"}))
                    continue
                try:
                    if msg.get("type") == "init":
                        counter["n"] += 1
                        session = build_session_from_init(
                            msg, scenes_dir, session_id=f"s{counter['n']}"
                        )
                        events: List[Event] = [
                            {
                                "type": "ack",
                                "cmd": "init",
                                "session": session.session_id,
                                "global_clock": session.world.global_clock,
                                "width": session.scene.intrinsics.width,
                                "height": session.scene.intrinsics.height,
                            }
                        ]
                    elif session is None:
                        raise CommandError("first message must be init")
                    else:
                        events = session.handle(msg)
                except (CommandError, ValidationError, SnapshotError) as e:
                    await ws.send_text(json.dumps({"type": "error", "error": str(e)}))
                    continue
                encoding = msg.get("encoding", "raw-rgb8")
                for ev in events:
                    if isinstance(ev, Frame):
                        await ws.send_bytes(
                            encode_frame_message(session.session_id, ev, encoding)
                        )
                    else:
                        await ws.send_text(json.dumps(ev, sort_keys=True))
        except WebSocketDisconnect:
            return

    return app
