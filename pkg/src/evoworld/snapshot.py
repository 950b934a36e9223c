"""Lossless world/session persistence.

A snapshot is a JSON document plus one sidecar binary file. Arrays are
stored as raw little-endian blobs referenced by (offset, dtype, shape);
dtypes are recorded per blob and kept at their in-memory width (float64
for geometry and images) because restore-then-advance must reproduce the
uninterrupted run byte for byte. Blob order follows the document
traversal order, so saving a freshly loaded snapshot reproduces both
files exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .monitors import EntityDetection, Monitor
from .types import (
    CameraPose,
    ColoredPointCloud,
    DynamicCloudSequence,
    EngineConfig,
    Frame,
    ValidationError,
)

SNAPSHOT_VERSION = 1


class SnapshotError(ValidationError):
    """Unreadable, corrupt, or version-incompatible snapshot."""


class BlobWriter:
    def __init__(self):
        self._chunks: List[bytes] = []
        self._offset = 0

    def add(self, arr: np.ndarray) -> dict:
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        data = np.ascontiguousarray(arr, dtype=le).tobytes()
        ref = {
            "offset": self._offset,
            "nbytes": len(data),
            "dtype": np.dtype(le).str,
            "shape": list(arr.shape),
        }
        self._chunks.append(data)
        self._offset += len(data)
        return ref

    def payload(self) -> bytes:
        return b"".join(self._chunks)


class BlobReader:
    def __init__(self, buf: bytes):
        self._buf = buf

    def get(self, ref: dict) -> np.ndarray:
        try:
            off, n = int(ref["offset"]), int(ref["nbytes"])
            raw = self._buf[off : off + n]
            if len(raw) != n:
                raise SnapshotError("sidecar blob out of bounds")
            arr = np.frombuffer(raw, dtype=np.dtype(ref["dtype"]))
            return arr.reshape(ref["shape"]).copy()
        except (KeyError, TypeError) as e:
            raise SnapshotError(f"corrupt blob reference: {e}") from e


# --- encoders ---------------------------------------------------------------


def _cloud_ref(w: BlobWriter, c: ColoredPointCloud) -> dict:
    return {
        "points": w.add(c.points),
        "colors": w.add(c.colors),
        "entity_ids": w.add(c.entity_ids),
    }


def _cloud_from(r: BlobReader, d: dict) -> ColoredPointCloud:
    return ColoredPointCloud(r.get(d["points"]), r.get(d["colors"]), r.get(d["entity_ids"]))


def _frame_ref(w: BlobWriter, f: Frame) -> dict:
    return {
        "timestamp": f.timestamp,
        "rgb": w.add(f.rgb),
        "depth": w.add(f.depth),
        "entity_ids": w.add(f.entity_ids),
    }


def _frame_from(r: BlobReader, d: dict) -> Frame:
    ids = r.get(d["entity_ids"])
    return Frame(
        rgb=r.get(d["rgb"]),
        depth=r.get(d["depth"]),
        fg_mask=ids > 0,
        entity_ids=ids,
        timestamp=int(d["timestamp"]),
    )


def _detection_ref(w: BlobWriter, det: EntityDetection) -> dict:
    return {
        "entity_id": det.entity_id,
        "crop": list(det.crop),
        "first_seen_clock": det.first_seen_clock,
        "descriptor": w.add(det.descriptor),
        "mask": w.add(det.mask),
    }


def _detection_from(r: BlobReader, d: dict, anchor_frame: Frame) -> EntityDetection:
    return EntityDetection(
        entity_id=int(d["entity_id"]),
        mask=r.get(d["mask"]).astype(bool),
        crop=tuple(int(x) for x in d["crop"]),
        descriptor=r.get(d["descriptor"]),
        first_seen_clock=int(d["first_seen_clock"]),
        frame=anchor_frame,
    )


def _monitor_ref(w: BlobWriter, m: Monitor) -> dict:
    return {
        "id": m.id,
        "anchor_pose": m.anchor_pose.matrix().tolist(),
        "anchor_frame": _frame_ref(w, m.anchor_frame),
        "entities": [_detection_ref(w, d) for d in m.entities],
        "local_clock": m.local_clock,
        "storyline_cursor": m.storyline_cursor,
        "base_clock": m.base_clock,
        "region_voxels": w.add(m.region_voxels),
        "base_clouds": {
            str(eid): _cloud_ref(w, c) for eid, c in sorted(m.base_clouds.items())
        },
        "dynamic_clouds": (
            None
            if m.dynamic_clouds is None
            else {
                "start_clock": m.dynamic_clouds.start_clock,
                "frames": [_cloud_ref(w, c) for c in m.dynamic_clouds.frames],
            }
        ),
    }


def _monitor_from(r: BlobReader, d: dict) -> Monitor:
    anchor_frame = _frame_from(r, d["anchor_frame"])
    dyn = d.get("dynamic_clouds")
    return Monitor(
        id=int(d["id"]),
        anchor_pose=CameraPose.from_matrix(np.array(d["anchor_pose"])),
        anchor_frame=anchor_frame,
        entities=[_detection_from(r, e, anchor_frame) for e in d["entities"]],
        local_clock=int(d["local_clock"]),
        storyline_cursor=int(d["storyline_cursor"]),
        dynamic_clouds=(
            None
            if dyn is None
            else DynamicCloudSequence(
                frames=[_cloud_from(r, c) for c in dyn["frames"]],
                start_clock=int(dyn["start_clock"]),
            )
        ),
        region_voxels=r.get(d["region_voxels"]),
        base_clouds={
            int(eid): _cloud_from(r, c) for eid, c in d["base_clouds"].items()
        },
        base_clock=int(d["base_clock"]),
    )


def world_to_document(state, w: BlobWriter) -> dict:
    from .scene import Entity  # local: engine state may hold scene entities

    return {
        "global_clock": state.global_clock,
        "accumulated_until": state.accumulated_until,
        "detected_until": state.detected_until,
        "monitor_seq": state.monitor_seq,
        "static_cloud": _cloud_ref(w, state.static_cloud),
        "monitors": [_monitor_ref(w, m) for m in sorted(state.monitors, key=lambda m: m.id)],
        "pending_spawns": [s.to_manifest() for s in state.pending_spawns],
        "history_refs": [
            {"pose": pose.matrix().tolist(), "frame": _frame_ref(w, frame)}
            for frame, pose in state.history
        ],
    }


def world_from_document(doc: dict, r: BlobReader):
    from .engine import WorldState
    from .scene import Entity

    return WorldState(
        static_cloud=_cloud_from(r, doc["static_cloud"]),
        monitors=[_monitor_from(r, m) for m in doc["monitors"]],
        global_clock=int(doc["global_clock"]),
        history=[
            (_frame_from(r, h["frame"]), CameraPose.from_matrix(np.array(h["pose"])))
            for h in doc["history_refs"]
        ],
        pending_spawns=[Entity.from_manifest(m) for m in doc["pending_spawns"]],
        accumulated_until=int(doc["accumulated_until"]),
        detected_until=int(doc["detected_until"]),
        monitor_seq=int(doc["monitor_seq"]),
    )


# --- file layer -------------------------------------------------------------


def snapshot_paths(path) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix != ".json":
        p = p.with_suffix(p.suffix + ".json") if p.suffix else p.with_suffix(".json")
    return p, p.with_suffix(".bin")


def write_snapshot(path, document: dict, writer: BlobWriter) -> Path:
    json_path, bin_path = snapshot_paths(path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    document = dict(document)
    document["version"] = SNAPSHOT_VERSION
    document["sidecar"] = bin_path.name
    json_path.write_text(
        json.dumps(document, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    bin_path.write_bytes(writer.payload())
    return json_path


def read_snapshot(path) -> Tuple[dict, BlobReader]:
    json_path, bin_path = snapshot_paths(path)
    try:
        document = json.loads(json_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise SnapshotError(f"unreadable snapshot {json_path}: {e}") from e
    version = document.get("version")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(
            f"snapshot schema version {version!r} unsupported (expected {SNAPSHOT_VERSION})"
        )
    sidecar = json_path.parent / document.get("sidecar", bin_path.name)
    try:
        buf = sidecar.read_bytes()
    except OSError as e:
        raise SnapshotError(f"missing sidecar {sidecar}: {e}") from e
    return document, BlobReader(buf)


def save_world(state, cfg: EngineConfig, path) -> Path:
    w = BlobWriter()
    doc = {
        "kind": "world",
        "config": cfg.to_dict(),
        "world": world_to_document(state, w),
    }
    return write_snapshot(path, doc, w)


def load_world(path):
    doc, reader = read_snapshot(path)
    if doc.get("kind") not in ("world", "session"):
        raise SnapshotError(f"not a world snapshot: kind={doc.get('kind')!r}")
    cfg = EngineConfig.from_dict(doc["config"])
    state = world_from_document(doc["world"], reader)
    return state, cfg
