"""Deterministic persistent world-state engine: the world keeps evolving
out of the observer's sight, and revisits render the elapsed state."""

from .types import (
    CameraPose,
    ColoredPointCloud,
    DynamicCloudSequence,
    EngineConfig,
    Frame,
    Intrinsics,
    ProjectionLayer,
    ValidationError,
)
from .geometry import (
    chamfer_distance,
    project,
    unproject,
    voxel_downsample,
    voxel_iou,
)
from .storyline import MotionCommand, Storyline, StorylineStep, parse_storyline
from .scene import SyntheticScene, generate_scene, initial_frame, oracle_render
from .monitors import (
    EntityDetection,
    Monitor,
    evaluate_registration,
    register_monitor,
    synchronize_monitor,
)
from .evolution import KinematicEvolutionBackend, evolve_window, lift_dynamic
from .renderer import (
    ProjectionColorBackend,
    ReferenceSet,
    StateProjection,
    compose_state_projection,
    render_observation,
    retrieve_references,
)
from .static_memory import accumulate_static
from .engine import (
    BackendSet,
    WorldState,
    freeze_baseline_step,
    init_world,
    step_world,
    summon_entity,
)
from .bench import (
    BenchCase,
    BenchmarkConfig,
    Trajectory,
    assemble_benchmark,
    calibrate_screen_uniform_distance,
    generate_trajectory,
    solve_exit_amplitude,
)
from .metrics import evaluate_sequence, psnr, ssim
from .service import Session, handle_command, load_snapshot, run_case, save_snapshot

__version__ = "0.1.0"
