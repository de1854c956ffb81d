"""
Decoding of network outputs into actions.

Translation comes from fusing the five view heatmaps over a 3D candidate
grid; rotation from the per-axis Euler bin argmax. For refinement stages
both are expressed relative to the previous action pose and composed onto it.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from vihe.core.geometry import CameraRig, Pose, compose, euler_decode, inverse, project_points
from vihe.exceptions import ModelError
from vihe.model.network import ActionPrediction

logger = logging.getLogger(__name__)

_SNAP = 1e-6


@dataclass(frozen=True)
class Action:
    """
    A decoded action.

    Attributes:
        pose: Absolute end-effector pose
        gripper_open: Open command
        collision_allowed: Whether the planner may touch objects on the way
        stage: Stage that produced it
        refinement: Relative transform applied to the previous pose (identity-based for stage 0)
    """
    pose: Pose
    gripper_open: bool
    collision_allowed: bool
    stage: int
    refinement: Pose


def candidate_grid(rig: CameraRig, stride: int = 1) -> np.ndarray:
    """
    Regular grid over the rig cube aligned with pixel centers, one candidate
    every stride pixel footprints. Ordered with the rig-frame x index slowest
    and z fastest.

    Returns:
        (ceil(resolution / stride)**3, 3) world points
    """
    if stride < 1:
        raise ModelError(f"candidate stride must be >= 1, got {stride}")
    res = rig.resolution
    pitch = 2.0 * rig.half_extent / res
    offsets = (-rig.half_extent + pitch * (np.arange(res) + 0.5))[(stride - 1) // 2::stride]
    gx, gy, gz = np.meshgrid(offsets, offsets, offsets, indexing='ij')
    local = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    return rig.frame.apply(local)


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) < _SNAP, nearest, coords)


def score_candidates(heatmaps: np.ndarray, rig: CameraRig, candidates: np.ndarray) -> np.ndarray:
    """
    Sum over views of the bilinearly sampled heatmap at each candidate's projection.

    Views where the candidate falls outside the image or the depth range contribute 0.

    Args:
        heatmaps: (views, H, W) probabilities
        rig: Rig the heatmaps were predicted for
        candidates: (N, 3) world points

    Returns:
        (N,) scores
    """
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    if heatmaps.shape != (len(rig.cameras), rig.resolution, rig.resolution):
        raise ModelError(f"Heatmaps {heatmaps.shape} do not match the rig "
                         f"({len(rig.cameras)} x {rig.resolution} x {rig.resolution})")
    res = rig.resolution
    scores = np.zeros(candidates.shape[0], dtype=np.float64)
    for heatmap, camera in zip(heatmaps, rig.cameras):
        uvd = project_points(camera, candidates)
        inside = ((uvd[:, 0] >= 0) & (uvd[:, 0] < res) & (uvd[:, 1] >= 0) & (uvd[:, 1] < res)
                  & (uvd[:, 2] >= camera.near) & (uvd[:, 2] <= camera.far))
        rows = _snap(uvd[:, 1] - 0.5)
        cols = _snap(uvd[:, 0] - 0.5)
        sampled = ndimage.map_coordinates(heatmap, [rows, cols], order=1, mode='nearest')
        scores += np.where(inside, sampled, 0.0)
    return scores


def decode_translation(heatmaps: np.ndarray, rig: CameraRig, candidates: Optional[np.ndarray] = None,
                       stride: int = 1) -> np.ndarray:
    """
    Highest-scoring candidate point; ties go to the first candidate in grid order.

    Raises:
        ModelError: If the candidate set is empty
    """
    candidates = candidate_grid(rig, stride) if candidates is None else np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise ModelError("decode_translation needs a non-empty (N, 3) candidate set")
    scores = score_candidates(heatmaps, rig, candidates)
    return candidates[int(np.argmax(scores))].copy()


def decode_action(prediction: ActionPrediction, previous_pose: Optional[Pose] = None,
                  stage: Optional[int] = None, relative_refinement: bool = True,
                  candidates: Optional[np.ndarray] = None, stride: int = 1) -> Action:
    """
    Turn one stage's prediction into an absolute action.

    Stage 0 decodes absolutely (previous pose = identity). Later stages decode a
    refinement h expressed in the previous pose's frame and return previous * h;
    with relative_refinement off the rotation bins are read as absolute.

    Args:
        prediction: Stage outputs
        previous_pose: Action pose of the previous stage
        stage: Stage index (defaults to the prediction's)
        relative_refinement: Interpret stage >= 1 rotation as relative
        candidates: Optional candidate points (defaults to the rig grid)
        stride: Pixel footprints between grid candidates

    Returns:
        Action
    """
    stage = prediction.stage if stage is None else stage
    previous = Pose.identity() if stage == 0 or previous_pose is None else previous_pose
    point = decode_translation(prediction.heatmaps(), prediction.rig, candidates, stride)
    rotation = euler_decode(prediction.rotation_bins())

    if stage == 0 or relative_refinement:
        local_point = inverse(previous).apply(point)
        refinement = Pose(local_point, rotation)
        pose = compose(previous, refinement)
    else:
        pose = Pose(point, rotation)
        refinement = compose(inverse(previous), pose)
    logger.debug(f"Stage {stage} decoded {pose}")
    return Action(pose, prediction.gripper_open, prediction.collision_allowed, stage, refinement)
