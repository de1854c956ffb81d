"""
Keypose extraction from end-effector trajectories.

A frame is a keypose when the gripper state flips, or when the end-effector
comes to rest (speed below v_eps while both neighbouring steps move). The
final frame is always a keypose.
"""

import logging
from typing import List, Sequence, Union

import numpy as np

from vihe.core.geometry import Pose
from vihe.exceptions import DatasetError

logger = logging.getLogger(__name__)

DEFAULT_V_EPS = 1e-3


def _translations(trajectory: Union[Sequence[Pose], np.ndarray]) -> np.ndarray:
    if isinstance(trajectory, np.ndarray):
        return np.asarray(trajectory, dtype=np.float64).reshape(-1, 3)
    return np.array([pose.translation for pose in trajectory], dtype=np.float64).reshape(-1, 3)


def frame_speeds(trajectory: Union[Sequence[Pose], np.ndarray]) -> np.ndarray:
    """Backward-difference translation speed per frame (m/frame); frame 0 gets NaN."""
    translations = _translations(trajectory)
    speeds = np.full(translations.shape[0], np.nan)
    speeds[1:] = np.linalg.norm(np.diff(translations, axis=0), axis=1)
    return speeds


def extract_keyposes(trajectory: Union[Sequence[Pose], np.ndarray], gripper_open: Sequence[bool],
                     v_eps: float = DEFAULT_V_EPS) -> List[int]:
    """
    Indices of keypose frames.

    Args:
        trajectory: End-effector poses, or an (m, 3) array of translations
        gripper_open: Gripper flag per frame
        v_eps: Rest threshold in meters per frame

    Returns:
        Sorted frame indices

    Raises:
        DatasetError: With fewer than 2 frames or mismatched lengths
    """
    speeds = frame_speeds(trajectory)
    frames = speeds.shape[0]
    gripper = np.asarray(gripper_open, dtype=bool)
    if frames < 2:
        raise DatasetError(f"Keypose extraction needs at least 2 frames, got {frames}")
    if gripper.shape[0] != frames:
        raise DatasetError(f"{frames} poses but {gripper.shape[0]} gripper flags")

    keyposes = set(int(i) for i in np.flatnonzero(gripper[1:] != gripper[:-1]) + 1)
    for t in range(2, frames - 1):
        if speeds[t] < v_eps and speeds[t - 1] >= v_eps and speeds[t + 1] >= v_eps:
            keyposes.add(t)
    keyposes.add(frames - 1)
    result = sorted(keyposes)
    logger.debug(f"Extracted {len(result)} keyposes from {frames} frames")
    return result
