"""Evolution scripts: parsing, validation and the kinematic interpreter.

A storyline is a small motion program: an ordered list of steps, each with
free text (for logging/UI and future generative backends) and a list of
machine-executable commands. The same interpreter drives both the dense
ground-truth simulator and the monitors' deterministic evolution backend,
so comparing the two pipelines exercises clocks/projection/lifting rather
than two motion models.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .types import ValidationError

VERBS = ("move_to", "dwell", "turn_to")
DEFAULT_MAX_STEPS = 4


class StorylineError(ValidationError):
    """Malformed or invalid storyline document."""


@dataclass(frozen=True)
class MotionCommand:
    verb: str
    duration: int  # frames, >= 1
    target: Optional[Tuple[float, float, float]] = None  # move_to / turn_to

    def __post_init__(self):
        if self.verb not in VERBS:
            raise StorylineError(
                f"unknown verb {self.verb!r}; allowed verbs: {', '.join(VERBS)}"
            )
        if self.duration < 1:
            raise StorylineError("command duration must be >= 1 frame")
        if self.verb in ("move_to", "turn_to"):
            if self.target is None:
                raise StorylineError(f"{self.verb} requires a target")
            if not all(math.isfinite(c) for c in self.target):
                raise StorylineError(f"{self.verb} target must be finite")
        elif self.target is not None:
            raise StorylineError("dwell takes no target")


@dataclass(frozen=True)
class StorylineStep:
    fg_text: str
    program: Tuple[MotionCommand, ...]

    def __post_init__(self):
        if len(self.program) == 0:
            raise StorylineError("step program must not be empty")

    @property
    def duration(self) -> int:
        return sum(c.duration for c in self.program)


@dataclass(frozen=True)
class Storyline:
    scene_text: str
    steps: Tuple[StorylineStep, ...]

    def __post_init__(self):
        if len(self.steps) == 0:
            raise StorylineError("empty steps")

    @property
    def duration(self) -> int:
        return sum(s.duration for s in self.steps)

    def commands(self) -> List[MotionCommand]:
        return [c for s in self.steps for c in s.program]


def _parse_command(d: dict, step_idx: int, cmd_idx: int) -> MotionCommand:
    where = f"step {step_idx}, command {cmd_idx}"
    if not isinstance(d, dict):
        raise StorylineError(f"{where}: command must be an object")
    verb = d.get("verb")
    if verb not in VERBS:
        raise StorylineError(
            f"{where}: unknown verb {verb!r}; allowed verbs: {', '.join(VERBS)}"
        )
    if "duration" not in d:
        raise StorylineError(f"{where}: missing duration")
    duration = d["duration"]
    if not isinstance(duration, int) or duration < 1:
        raise StorylineError(f"{where}: duration must be an integer >= 1 frame")
    target = d.get("target")
    if verb in ("move_to", "turn_to"):
        if target is None:
            raise StorylineError(f"{where}: {verb} requires a 3-vector target")
        target = tuple(float(c) for c in target)
        if len(target) != 3:
            raise StorylineError(f"{where}: target must have 3 components")
    else:
        target = None
    return MotionCommand(verb=verb, duration=duration, target=target)


def parse_storyline_dict(doc: dict, max_steps: int = DEFAULT_MAX_STEPS) -> Storyline:
    if not isinstance(doc, dict):
        raise StorylineError("storyline document must be a JSON object")
    steps_raw = doc.get("steps")
    if not isinstance(steps_raw, list) or len(steps_raw) == 0:
        raise StorylineError("empty steps")
    if len(steps_raw) > max_steps:
        raise StorylineError(
            f"storyline has {len(steps_raw)} steps; at most {max_steps} allowed"
        )
    steps = []
    for si, sd in enumerate(steps_raw):
        if not isinstance(sd, dict):
            raise StorylineError(f"step {si}: must be an object")
        program_raw = sd.get("program")
        if not isinstance(program_raw, list) or len(program_raw) == 0:
            raise StorylineError(f"step {si}: program must be a non-empty list")
        program = tuple(
            _parse_command(cd, si, ci) for ci, cd in enumerate(program_raw)
        )
        steps.append(StorylineStep(fg_text=str(sd.get("fg_text", "")), program=program))
    return Storyline(scene_text=str(doc.get("scene_text", "")), steps=tuple(steps))


def parse_storyline(doc: str, max_steps: int = DEFAULT_MAX_STEPS) -> Storyline:
    """Parse and validate a storyline JSON document."""
    try:
        data = json.loads(doc)
    except json.JSONDecodeError as e:
        raise StorylineError(f"malformed storyline document: {e}") from e
    return parse_storyline_dict(data, max_steps=max_steps)


def storyline_to_dict(s: Storyline) -> dict:
    return {
        "scene_text": s.scene_text,
        "steps": [
            {
                "fg_text": st.fg_text,
                "program": [
                    {
                        "verb": c.verb,
                        "duration": c.duration,
                        **({"target": list(c.target)} if c.target is not None else {}),
                    }
                    for c in st.program
                ],
            }
            for st in s.steps
        ],
    }


# ---------------------------------------------------------------------------
# Kinematic interpretation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptState:
    position: np.ndarray  # (3,) world meters
    yaw: float  # radians about the world vertical axis
    step_index: int  # active step (clamped to the last step after the end)


def _face_yaw(position: np.ndarray, target: np.ndarray) -> float:
    """Yaw that points the entity's forward (+z) axis toward target."""
    d = target - position
    return math.atan2(d[0], d[2])


def script_state(
    storyline: Storyline, p_init: np.ndarray, local_time: float
) -> ScriptState:
    """State of the scripted entity at script-local time `local_time` frames.

    Commands run back to back: move_to interpolates the position linearly
    toward the target, dwell holds, turn_to holds position and interpolates
    yaw toward facing the target. Past the final command the entity rests
    at its last state (clamp-at-end); negative times clamp to the start.
    """
    pos = np.asarray(p_init, dtype=np.float64).copy()
    yaw = 0.0
    tau = max(float(local_time), 0.0)
    t0 = 0.0
    step_index = 0
    for si, step in enumerate(storyline.steps):
        for cmd in step.program:
            t1 = t0 + cmd.duration
            if tau < t1:
                frac = (tau - t0) / cmd.duration
                if cmd.verb == "move_to":
                    pos = pos + frac * (np.asarray(cmd.target) - pos)
                elif cmd.verb == "turn_to":
                    goal = _face_yaw(pos, np.asarray(cmd.target))
                    delta = math.remainder(goal - yaw, 2.0 * math.pi)
                    yaw = yaw + frac * delta
                return ScriptState(position=pos, yaw=yaw, step_index=si)
            # command completed: advance to its end state
            if cmd.verb == "move_to":
                pos = np.asarray(cmd.target, dtype=np.float64).copy()
            elif cmd.verb == "turn_to":
                goal = _face_yaw(pos, np.asarray(cmd.target))
                yaw = yaw + math.remainder(goal - yaw, 2.0 * math.pi)
            t0 = t1
        step_index = si
    return ScriptState(position=pos, yaw=yaw, step_index=step_index)


def step_index_at(storyline: Storyline, local_time: float) -> int:
    return script_state(storyline, np.zeros(3), local_time).step_index
