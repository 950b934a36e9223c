"""World state and the per-round orchestration tick.

Each round runs the fixed stage order: accumulate statics from the frames
observed last round, detect and register new entities there, synchronize
fresh monitors up to the global clock, evolve every monitor across the
upcoming window, lift the local videos into 4D clouds, compose the state
projections along the observer poses, render, and append to history.

Clock convention: the seed observation carries timestamp 0 and round k
generates timestamps [k*T+1, (k+1)*T], so the global clock is a multiple
of T after every completed round.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .evolution import (
    BackendError,
    EvolutionBackend,
    KinematicEvolutionBackend,
    evolve_window,
    lift_dynamic,
)
from .monitors import (
    Detector,
    EntityDetection,
    GroundTruthIdDetector,
    Monitor,
    attach_codetection,
    evaluate_registration,
    register_monitor,
    synchronize_monitor,
)
from .renderer import (
    ProjectionColorBackend,
    RenderBackend,
    compose_state_projection,
    render_observation,
    retrieve_references,
)
from .static_memory import accumulate_static
from .storyline import Storyline, step_index_at
from .types import (
    CameraPose,
    ColoredPointCloud,
    EngineConfig,
    Frame,
    Intrinsics,
    ValidationError,
)


class ScriptProvider:
    """Maps entity ids to (storyline, script_epoch, initial centroid)."""

    def get(self, entity_id: int) -> Tuple[Storyline, int, np.ndarray]:
        raise NotImplementedError


class SceneScriptProvider(ScriptProvider):
    """Scripts straight from a synthetic scene's entity manifest."""

    def __init__(self, scene):
        self.scene = scene

    def get(self, entity_id: int):
        e = self.scene.entity(entity_id)
        return e.storyline, e.script_epoch, e.p_init


@dataclass
class BackendSet:
    """Pluggable pipeline roles plus the session camera model."""

    detector: Detector
    storylines: ScriptProvider
    evolution: EvolutionBackend
    render: RenderBackend
    intrinsics: Intrinsics

    @classmethod
    def reference(cls, scene) -> "BackendSet":
        return cls(
            detector=GroundTruthIdDetector(),
            storylines=SceneScriptProvider(scene),
            evolution=KinematicEvolutionBackend(),
            render=ProjectionColorBackend(),
            intrinsics=scene.intrinsics,
        )


@dataclass
class WorldState:
    """Explicit world state: static cloud + monitors + clock + history."""

    static_cloud: ColoredPointCloud
    monitors: List[Monitor]
    global_clock: int
    history: List[Tuple[Frame, CameraPose]]
    pending_spawns: List = field(default_factory=list)  # summoned, unmonitored
    accumulated_until: int = -1
    detected_until: int = -1
    monitor_seq: int = 0

    def shallow_clone(self) -> "WorldState":
        st = WorldState(
            static_cloud=self.static_cloud,
            monitors=list(self.monitors),
            global_clock=self.global_clock,
            history=list(self.history),
            pending_spawns=list(self.pending_spawns),
            accumulated_until=self.accumulated_until,
            detected_until=self.detected_until,
            monitor_seq=self.monitor_seq,
        )
        cache = getattr(self, "_bg_voxel_cache", None)
        if cache is not None:
            st._bg_voxel_cache = dict(cache)
        return st

    def monitor(self, monitor_id: int) -> Monitor:
        for m in self.monitors:
            if m.id == monitor_id:
                return m
        raise KeyError(f"no monitor {monitor_id}")


def init_world(seed_frame: Frame, seed_pose: CameraPose) -> WorldState:
    """World at clock 0: one observed frame, nothing accumulated yet."""
    seed_frame.validate()
    return WorldState(
        static_cloud=ColoredPointCloud.empty(),
        monitors=[],
        global_clock=int(seed_frame.timestamp),
        history=[(seed_frame, seed_pose)],
    )


def _validate_step_inputs(state: WorldState, poses, cfg: EngineConfig):
    if len(poses) != cfg.T:
        raise ValidationError(f"expected {cfg.T} poses, got {len(poses)}")
    if len(state.monitors) > cfg.M:
        raise ValidationError("monitor capacity invariant already violated")
    for mon in state.monitors:
        if mon.local_clock > state.global_clock:
            raise ValidationError(
                f"monitor {mon.id} local clock ahead of global clock"
            )


def _stage_accumulate(state: WorldState, intr: Intrinsics, cfg: EngineConfig):
    stride = max(1, cfg.static_keyframe_stride)
    for frame, pose in state.history:
        ts = frame.timestamp
        if ts <= state.accumulated_until:
            continue
        if ts % stride == 0:
            accumulate_static(state, frame, pose, intr, cfg)
    state.accumulated_until = state.history[-1][0].timestamp


def _stage_detect_register(state: WorldState, intr: Intrinsics, cfg: EngineConfig, backends: BackendSet):
    """Inspect frames observed since the last boundary, oldest first, and
    run each first-in-window detection through the registration gate."""
    seen_ids = set()
    batch: List[Tuple[EntityDetection, CameraPose, Frame]] = []
    for frame, pose in state.history:
        if frame.timestamp <= state.detected_until:
            continue
        for det in backends.detector.detect(frame, pose):
            if det.entity_id in seen_ids:
                continue
            seen_ids.add(det.entity_id)
            batch.append((det, pose, frame))
    state.detected_until = state.history[-1][0].timestamp

    observer_t = state.history[-1][1].translation
    registered_here: Dict[int, int] = {}  # frame ts -> monitor id (co-detection)
    for det, pose, frame in batch:
        decision = evaluate_registration(det, state, pose, intr, cfg)
        if decision.kind == "merge":
            continue
        if decision.kind == "reject":
            continue
        ts = frame.timestamp
        if ts in registered_here:
            try:
                mon = state.monitor(registered_here[ts])
            except KeyError:
                mon = None  # co-anchor was evicted meanwhile
            if mon is not None:
                attach_codetection(mon, det, pose, intr, cfg)
                state.pending_spawns = [
                    s for s in state.pending_spawns if s.entity_id != det.entity_id
                ]
                continue
        state, mon_id = register_monitor(
            state, det, pose, frame, cfg, intr, observer_translation=observer_t
        )
        registered_here[ts] = mon_id
        state.pending_spawns = [
            s for s in state.pending_spawns if s.entity_id != det.entity_id
        ]


def _stage_evolve(
    state: WorldState, cfg: EngineConfig, backends: BackendSet, window_start: int
):
    evolved = []
    for mon in state.monitors:
        mon = synchronize_monitor(mon, state.global_clock, backends, cfg)
        story, epoch, _p0 = backends.storylines.get(mon.entity_ids()[0])
        step_idx = step_index_at(story, window_start - epoch)
        frames = evolve_window(
            mon,
            cfg.T,
            story.steps[step_idx],
            backends.intrinsics,
            cfg,
            backends.evolution,
            backends.storylines,
            start_clock=window_start,
        )
        seq = lift_dynamic(frames, mon.anchor_pose, backends.intrinsics, window_start)
        region = np.zeros(0, dtype=np.int64)
        for cloud in seq.frames:
            region = np.union1d(
                region, geometry.packed_voxels(cloud.points, cfg.overlap_voxel_size)
            )
        evolved.append(
            replace(
                mon,
                dynamic_clouds=seq,
                local_clock=window_start + cfg.T - 1,
                storyline_cursor=step_index_at(story, window_start + cfg.T - 1 - epoch),
                region_voxels=region,
            )
        )
    state.monitors = evolved


def _stage_freeze(state: WorldState, cfg: EngineConfig, window_start: int):
    """Frozen-memory variant of the evolve stage: clouds held at their last
    lifted state, clocks advanced for bookkeeping only."""
    from .types import DynamicCloudSequence

    frozen = []
    for mon in state.monitors:
        held = mon.current_cloud()
        seq = DynamicCloudSequence(frames=[held] * cfg.T, start_clock=window_start)
        frozen.append(
            replace(mon, dynamic_clouds=seq, local_clock=window_start + cfg.T - 1)
        )
    state.monitors = frozen


def _finish_round(
    state: WorldState,
    poses,
    intr: Intrinsics,
    cfg: EngineConfig,
    backends: BackendSet,
    window_start: int,
) -> List[Frame]:
    refs = retrieve_references(state, poses, intr, cfg)
    projections = compose_state_projection(state, poses, intr, start_clock=window_start)
    frames = render_observation(projections, refs, backends.render, cfg)
    for f, p in zip(frames, poses):
        state.history.append((f, p))
    state.global_clock = window_start + cfg.T - 1
    # Registered monitors covered the window; drop spawns the registry took over.
    still_pending = []
    monitored = {eid for m in state.monitors for eid in m.entity_ids()}
    for s in state.pending_spawns:
        if s.entity_id not in monitored:
            still_pending.append(s)
    state.pending_spawns = still_pending
    return frames


def step_world(
    state: WorldState,
    poses: Sequence[CameraPose],
    intr: Intrinsics,
    scene_text: str,
    cfg: EngineConfig,
    backends: BackendSet,
) -> Tuple[List[Frame], WorldState]:
    """Run one full evolve-then-render round; returns (frames, new state).

    The input state is not mutated. scene_text is carried for logging and
    generative backends; the reference pipeline does not consume it.
    """
    _validate_step_inputs(state, poses, cfg)
    st = state.shallow_clone()
    window_start = st.global_clock + 1

    _stage_accumulate(st, intr, cfg)
    _stage_detect_register(st, intr, cfg, backends)
    _stage_evolve(st, cfg, backends, window_start)
    frames = _finish_round(st, poses, intr, cfg, backends, window_start)
    if len(st.monitors) > cfg.M:
        raise ValidationError("monitor capacity exceeded after round")
    for mon in st.monitors:
        if mon.local_clock != st.global_clock:
            raise ValidationError(
                f"monitor {mon.id} not synchronized after round "
                f"({mon.local_clock} != {st.global_clock})"
            )
    return frames, st


def freeze_baseline_step(
    state: WorldState,
    poses: Sequence[CameraPose],
    intr: Intrinsics,
    cfg: EngineConfig,
    backends: BackendSet,
) -> Tuple[List[Frame], WorldState]:
    """Ablation tick: identical pipeline but monitors keep their last lifted
    cloud instead of evolving (the frozen-memory comparison mode)."""
    _validate_step_inputs(state, poses, cfg)
    st = state.shallow_clone()
    window_start = st.global_clock + 1

    _stage_accumulate(st, intr, cfg)
    _stage_detect_register(st, intr, cfg, backends)
    _stage_freeze(st, cfg, window_start)
    frames = _finish_round(st, poses, intr, cfg, backends, window_start)
    return frames, st


def summon_entity(state: WorldState, entity) -> WorldState:
    """Queue a scripted entity so the renderer shows it from the next window
    until the detector hands it to a monitor."""
    st = state.shallow_clone()
    st.pending_spawns = st.pending_spawns + [entity]
    return st
