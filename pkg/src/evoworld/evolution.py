"""Out-of-sight entity evolution at a monitor's fixed anchor pose.

The backend contract is generative-video shaped: given the anchor
background, the tracked entities and their scripts, produce local frames
for a clock range. The reference backend moves the anchor-lifted clouds
rigidly along the shared kinematic interpreter and re-projects them over
the anchor background, which is enough to exercise the protocol under
test: out-of-sight progression, synchronization and lifting.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from . import geometry
from .renderer import compose_layers
from .storyline import Storyline, StorylineStep, script_state
from .types import (
    CameraPose,
    ColoredPointCloud,
    DynamicCloudSequence,
    EngineConfig,
    Frame,
    Intrinsics,
    ProjectionLayer,
    ValidationError,
    yaw_rotation,
)


class BackendError(RuntimeError):
    """An evolution/render backend failed; carries monitor and step context."""


class EvolutionBackend:
    def evolve(
        self,
        mon,
        start_clock: int,
        n_frames: int,
        provider,
        intr: Intrinsics,
        cfg: EngineConfig,
    ) -> List[Frame]:
        raise NotImplementedError


def transform_base_cloud(
    base: ColoredPointCloud,
    storyline: Storyline,
    epoch: int,
    p_init: np.ndarray,
    base_clock: int,
    target_clock: int,
) -> ColoredPointCloud:
    """Rigidly carry an anchor-lifted cloud from its lift clock to a target
    clock using script states, so there is no integration drift."""
    st_b = script_state(storyline, p_init, base_clock - epoch)
    st_t = script_state(storyline, p_init, target_clock - epoch)
    rel = yaw_rotation(st_t.yaw) @ yaw_rotation(st_b.yaw).T
    pts = (base.points - st_b.position) @ rel.T + st_t.position
    return ColoredPointCloud(pts, base.colors, base.entity_ids)


class KinematicEvolutionBackend(EvolutionBackend):
    """Reference backend: rigid script motion over the frozen anchor background."""

    def evolve(self, mon, start_clock, n_frames, provider, intr, cfg) -> List[Frame]:
        if n_frames < 1:
            raise ValidationError("n_frames must be >= 1")
        if not mon.base_clouds:
            raise ValidationError(f"monitor {mon.id} has no entity cloud to evolve")

        anchor = mon.anchor_frame
        h, w = anchor.shape
        bg_valid = ~anchor.fg_mask & (anchor.depth > 0)
        bg_layer = ProjectionLayer(
            rgb=anchor.rgb,
            depth=anchor.depth,
            valid=bg_valid,
            source_index=np.full((h, w), -1, dtype=np.int64),
        )

        frames: List[Frame] = []
        for k in range(n_frames):
            clock = start_clock + k
            try:
                fg = ColoredPointCloud.empty()
                for eid in sorted(mon.base_clouds):
                    story, epoch, p_init = provider.get(eid)
                    fg = fg.concat(
                        transform_base_cloud(
                            mon.base_clouds[eid], story, epoch, p_init, mon.base_clock, clock
                        )
                    )
            except Exception as e:
                raise BackendError(
                    f"evolution backend failed for monitor {mon.id} at step {k}: {e}"
                ) from e

            fg_layer = geometry.project(fg, mon.anchor_pose, intr)
            merged, fg_wins = compose_layers(bg_layer, fg_layer)
            ids = np.zeros((h, w), dtype=np.int32)
            ids[fg_wins] = fg.entity_ids[fg_layer.source_index[fg_wins]]
            rgb = merged.rgb.copy()
            depth = merged.depth.copy()
            frames.append(
                Frame(rgb=rgb, depth=depth, fg_mask=ids > 0, entity_ids=ids, timestamp=clock)
            )
        return frames


def evolve_window(
    mon,
    n_frames: int,
    step: StorylineStep,
    intr: Intrinsics,
    cfg: EngineConfig,
    backend: EvolutionBackend,
    provider,
    start_clock: int,
) -> List[Frame]:
    """Generate the monitor's local frames for an upcoming clock window.

    `step` is the storyline step active at the window start; it labels the
    window (and feeds generative backends as text) while the program
    timeline itself runs continuously across step boundaries.
    """
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    if not mon.base_clouds:
        raise ValidationError(f"monitor {mon.id} has no entity cloud")
    del step  # deterministic backend executes the program timeline directly
    return backend.evolve(mon, start_clock, n_frames, provider, intr, cfg)


def lift_dynamic(
    local_frames: Sequence[Frame],
    anchor_pose: CameraPose,
    intr: Intrinsics,
    start_clock: int,
) -> DynamicCloudSequence:
    """Unproject each local frame's foreground into a world-space cloud
    sequence (the monitor's contribution to the dynamic world state)."""
    clouds = []
    for f in local_frames:
        if f.depth is None or f.fg_mask is None:
            raise ValidationError("local frames must carry depth and fg_mask")
        clouds.append(geometry.unproject(f, anchor_pose, intr, f.fg_mask))
    return DynamicCloudSequence(frames=clouds, start_clock=start_clock)
