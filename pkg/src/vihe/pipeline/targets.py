"""
Supervision targets: truncated Gaussian heatmaps per view, one-hot Euler
bins and binary gripper/collision distributions.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from vihe.core.geometry import CameraRig, EulerBins, compose, euler_encode, inverse, project
from vihe.exceptions import TargetError
from vihe.pipeline.dataset import ActionLabel

logger = logging.getLogger(__name__)

TRUNCATION_SIGMAS = 3.0


def gaussian_heatmap(u: float, v: float, resolution: int, sigma: float) -> np.ndarray:
    """
    Normalized Gaussian around (u, v), zero beyond TRUNCATION_SIGMAS * sigma.

    Pixel (row, col) has its center at (col + 0.5, row + 0.5). When no pixel
    center carries weight (sigma -> 0 off-center) the map is one-hot at the
    pixel containing (u, v).

    Returns:
        (resolution, resolution) float64 summing to 1
    """
    centers = np.arange(resolution) + 0.5
    dx2 = (centers[None, :] - u) ** 2
    dy2 = (centers[:, None] - v) ** 2
    d2 = dx2 + dy2
    if sigma > 0:
        with np.errstate(under='ignore'):
            heat = np.exp(-d2 / (2.0 * sigma * sigma))
        heat[d2 > (TRUNCATION_SIGMAS * sigma) ** 2] = 0.0
    else:
        heat = np.zeros_like(d2)
    total = heat.sum()
    if total <= 0.0:
        heat = np.zeros_like(d2)
        col = min(max(int(np.floor(u)), 0), resolution - 1)
        row = min(max(int(np.floor(v)), 0), resolution - 1)
        heat[row, col] = 1.0
        return heat
    return heat / total


def one_hot(index: int, count: int) -> np.ndarray:
    out = np.zeros(count, dtype=np.float64)
    out[index] = 1.0
    return out


def binary_target(flag: bool) -> np.ndarray:
    """(1, 2) distribution over (false, true)."""
    return np.array([[0.0, 1.0]]) if flag else np.array([[1.0, 0.0]])


@dataclass(frozen=True, eq=False)
class StageTargets:
    """
    Targets of one stage.

    Attributes:
        heatmaps: (views, H * W) rows summing to 1
        rotation: (3, bins) one-hot rows
        bins: the encoded Euler bins
        gripper_open: (1, 2)
        collision: (1, 2)
    """
    stage: int
    heatmaps: np.ndarray
    rotation: np.ndarray
    bins: EulerBins
    gripper_open: np.ndarray
    collision: np.ndarray


@dataclass(frozen=True, eq=False)
class TargetSet:
    stages: List[StageTargets]

    def __len__(self) -> int:
        return len(self.stages)


def rotation_target(action: ActionLabel, rig: CameraRig, relative: bool, bins_per_axis: int) -> EulerBins:
    """
    Stage 0 (or absolute mode): bins of the ground-truth rotation. Refinement
    stages: bins of h = inverse(anchor) * gt, the rotation that right-composed
    onto the rig anchor yields the ground truth.
    """
    if rig.stage == 0 or not relative:
        return euler_encode(action.pose.rotation, bins_per_axis)
    return euler_encode(compose(inverse(rig.anchor), action.pose).rotation, bins_per_axis)


def make_targets(action: ActionLabel, rigs: Sequence[CameraRig], sigma: float = 1.5,
                 relative_refinement: bool = True, bins_per_axis: int = 72) -> TargetSet:
    """
    Build targets for every stage rig.

    Args:
        action: Ground-truth keypose action
        rigs: Rig per stage (stage 0 global, later stages at perturbed ground truth)
        sigma: Gaussian width in pixels
        relative_refinement: Encode refinement-stage rotations relative to the rig anchor
        bins_per_axis: Euler bins per axis

    Returns:
        TargetSet

    Raises:
        TargetError: If the ground-truth translation falls outside a camera's frustum
    """
    point = action.pose.translation
    stages = []
    for rig in rigs:
        res = rig.resolution
        maps = []
        for camera in rig.cameras:
            u, v, depth = project(camera, point)
            if not (0.0 <= u < res and 0.0 <= v < res and camera.near <= depth <= camera.far):
                logger.error(f"Ground truth {point.tolist()} leaves the stage {rig.stage} frustum "
                             f"(u={u:.2f}, v={v:.2f}, depth={depth:.3f})")
                raise TargetError(f"Ground-truth translation {point.tolist()} is outside the "
                                  f"stage {rig.stage} camera frustum")
            maps.append(gaussian_heatmap(u, v, res, sigma).reshape(-1))
        bins = rotation_target(action, rig, relative_refinement, bins_per_axis)
        rotation = np.stack([one_hot(i, bins_per_axis) for i in bins.indices])
        stages.append(StageTargets(
            stage=rig.stage,
            heatmaps=np.stack(maps),
            rotation=rotation,
            bins=bins,
            gripper_open=binary_target(action.gripper_open),
            collision=binary_target(action.collision_allowed),
        ))
    return TargetSet(stages)
