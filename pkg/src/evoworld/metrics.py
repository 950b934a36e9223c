"""Reference-based evaluation: masked PSNR/SSIM, foreground Chamfer
distance and per-revisit report assembly.

Neural metrics from the wider evaluation protocol (perceptual similarity,
feature-identity, VideoQA, frame-CLIP) are declared in the report schema
but carry the literal value "not-computed": they need learned extractors
that are out of scope here, and keeping the columns lets downstream
tooling consume the report without schema changes.
"""

from __future__ import annotations

import json
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import convolve1d

from . import geometry
from .types import CameraPose, ColoredPointCloud, EngineConfig, Frame, ValidationError

PSNR_CAP_DB = 99.0
NOT_COMPUTED = "not-computed"

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_WIN = 11


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over masked pixels of [0,1] images.

    Identical inputs (zero MSE) are capped at 99 dB.
    """
    if a.shape != b.shape:
        raise ValidationError("psnr: image shapes differ")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ValidationError("psnr: mask shape does not match images")
    if not mask.any():
        raise ValidationError("psnr: empty mask")
    diff = (a - b)[mask]
    mse = float(np.mean(diff * diff))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel_1d(win: int, sigma: float) -> np.ndarray:
    half = (win - 1) / 2.0
    x = np.arange(win) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel on windows fully inside the image whose center
    pixel is masked, then averaged across channels. Dynamic range is 1.
    """
    if a.shape != b.shape:
        raise ValidationError("ssim: image shapes differ")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:2]:
        raise ValidationError("ssim: mask shape does not match images")
    if not mask.any():
        raise ValidationError("ssim: empty mask")

    margin = _SSIM_WIN // 2
    h, w = mask.shape
    if h <= 2 * margin or w <= 2 * margin:
        raise ValidationError("ssim: image smaller than the window")
    center_mask = mask[margin : h - margin, margin : w - margin]
    if not center_mask.any():
        raise ValidationError("ssim: no masked window centers inside the image")

    kernel = _gaussian_kernel_1d(_SSIM_WIN, _SSIM_SIGMA)
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2

    def _smooth(img: np.ndarray) -> np.ndarray:
        out = convolve1d(img, kernel, axis=0, mode="constant")
        out = convolve1d(out, kernel, axis=1, mode="constant")
        return out[margin : h - margin, margin : w - margin]

    vals = []
    for c in range(a.shape[2]):
        ac, bc = a[:, :, c], b[:, :, c]
        mu_a, mu_b = _smooth(ac), _smooth(bc)
        s_aa = _smooth(ac * ac) - mu_a * mu_a
        s_bb = _smooth(bc * bc) - mu_b * mu_b
        s_ab = _smooth(ac * bc) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
        vals.append(float(np.mean((num / den)[center_mask])))
    return float(np.mean(vals))


def revisit_background_mask(
    initial: Frame,
    generated: Frame,
    oracle_initial_fg: np.ndarray,
    oracle_revisit_fg: np.ndarray,
) -> np.ndarray:
    """Background mask for revisit metrics.

    Excludes the union of the two compared frames' entity pixels and the
    reference foreground at both clocks, so no frame's dynamic region
    contaminates the background score.
    """
    union = initial.fg_mask | generated.fg_mask | oracle_initial_fg | oracle_revisit_fg
    return ~union


# ---------------------------------------------------------------------------
# Sequence evaluation
# ---------------------------------------------------------------------------

CloudSource = Callable[[int], ColoredPointCloud]


def revisit_clocks(rounds: int, frames_per_round: int) -> List[int]:
    """Clocks evaluated as revisits: every second round boundary."""
    return [2 * frames_per_round * k for k in range(1, rounds // 2 + 1)]


def _ordinal(i: int) -> str:
    return {1: "1st", 2: "2nd", 3: "3rd"}.get(i, f"{i}th")


def evaluate_sequence(
    case,
    generated_frames: Sequence[Frame],
    generated_poses: Sequence[CameraPose],
    cfg: EngineConfig,
    cloud_source: Optional[CloudSource] = None,
) -> dict:
    """Score one generated sequence against its case references.

    Same-pose cases get masked background PSNR/SSIM of each revisit frame
    against the initial frame plus foreground Chamfer distance against the
    reference dynamic cloud at the same clock; different-pose cases carry
    the Chamfer column only (their image metrics need learned extractors,
    so the geometric score substitutes and is labeled as such).
    """
    from .scene import oracle_render  # local import: scene depends on renderer

    rounds = case.trajectory.rounds
    t_per = case.trajectory.frames_per_round
    if len(generated_frames) != rounds * t_per:
        raise ValidationError(
            f"expected {rounds * t_per} generated frames, got {len(generated_frames)}"
        )
    if len(generated_poses) != len(generated_frames):
        raise ValidationError("generated poses/frames length mismatch")
    by_clock = {f.timestamp: (f, p) for f, p in zip(generated_frames, generated_poses)}

    scene = case.scene
    intr = scene.intrinsics
    same_pose = case.trajectory.family == "same_pose"
    source: CloudSource = cloud_source or scene.dynamic_cloud_at
    initial = oracle_render(scene, case.trajectory.poses[0], 0, cfg)

    rows = []
    for k, clock in enumerate(revisit_clocks(rounds, t_per), start=1):
        if clock not in by_clock:
            raise ValidationError(f"revisit clock {clock} missing from generated frames")
        frame, pose = by_clock[clock]
        oracle_frame = oracle_render(scene, pose, clock, cfg)

        row: Dict[str, object] = {
            "revisit_index": _ordinal(k),
            "clock": clock,
            "lpips_bg": NOT_COMPUTED,
            "dino_fg": NOT_COMPUTED,
            "vqa_acc": NOT_COMPUTED,
            "clip_f": NOT_COMPUTED,
        }
        if same_pose:
            mask = revisit_background_mask(
                initial, frame, initial.fg_mask, oracle_frame.fg_mask
            )
            row["psnr_bg"] = psnr(frame.rgb, initial.rgb, mask)
            row["ssim_bg"] = ssim(frame.rgb, initial.rgb, mask)
        else:
            row["psnr_bg"] = NOT_COMPUTED
            row["ssim_bg"] = NOT_COMPUTED
            row["cd_fg_note"] = "geometric substitute for feature metrics"

        ref_cloud = source(clock)
        gen_fg = geometry.unproject(frame, pose, intr, frame.fg_mask)
        if len(ref_cloud) == 0 and len(gen_fg) == 0:
            row["cd_fg"] = 0.0
        elif len(ref_cloud) == 0 or len(gen_fg) == 0:
            row["cd_fg"] = None
        else:
            row["cd_fg"] = geometry.chamfer_distance(gen_fg, ref_cloud)
        rows.append(row)

    agg: Dict[str, object] = {}
    for key in ("psnr_bg", "ssim_bg", "cd_fg"):
        vals = [r[key] for r in rows if isinstance(r.get(key), float)]
        agg[key] = float(np.mean(vals)) if vals else NOT_COMPUTED

    return {
        "case_id": case.case_id,
        "family": case.trajectory.family,
        "variant": case.trajectory.variant,
        "rows": rows,
        "aggregate": agg,
    }


def report_to_json(report: dict) -> str:
    """Deterministic JSON encoding (stable key order, canonical floats)."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(report_to_json(report))
