"""
Demonstrations in memory and on disk.

On-disk layout, one directory per demonstration:

    meta.json         instruction, task, frame count, gripper flags, keyposes,
                      actions, observation frames, scene description
    trajectory.bin    end-effector pose per frame, 7 little-endian float64 each
    frame_%04d.ply    observation cloud for every observation frame
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from vihe.core.geometry import Pose, pack_poses, unpack_poses
from vihe.core.renderer import PointCloud
from vihe.exceptions import DatasetError, GeometryError, RenderError
from vihe.model.tokens import Proprioception
from vihe.pipeline.keyposes import DEFAULT_V_EPS, extract_keyposes
from vihe.utils.io_utils import read_ply, write_ply

logger = logging.getLogger(__name__)

DATASET_VERSION = 1
META_FILE = "meta.json"
TRAJECTORY_FILE = "trajectory.bin"

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ActionLabel:
    """Ground-truth keypose action."""
    pose: Pose
    gripper_open: bool
    collision_allowed: bool

    def to_dict(self) -> dict:
        return {'pose': self.pose.to_list(), 'gripper_open': bool(self.gripper_open),
                'collision_allowed': bool(self.collision_allowed)}

    @classmethod
    def from_dict(cls, data: dict) -> "ActionLabel":
        return cls(Pose.from_list(data['pose']), bool(data['gripper_open']), bool(data['collision_allowed']))


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """One supervised pair: observation before keypose j and the action at keypose j."""
    cloud: PointCloud
    instruction: str
    proprio: Proprioception
    action: ActionLabel
    task: str
    demo_index: int
    keypose_index: int


@dataclass(eq=False)
class Demonstration:
    """
    A keypose-labelled demonstration.

    Attributes:
        instruction: Language instruction
        task: Task id
        poses: End-effector pose per frame
        gripper_open: Gripper flag per frame
        keyposes: Keypose frame indices, strictly increasing
        actions: One ActionLabel per keypose
        clouds: Observation cloud per observation frame (frame 0 and every keypose but the last)
        scene: Task-specific scene description used for replay and evaluation
    """
    instruction: str
    task: str
    poses: List[Pose]
    gripper_open: List[bool]
    keyposes: List[int]
    actions: List[ActionLabel]
    clouds: Dict[int, PointCloud]
    scene: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    @property
    def observation_frames(self) -> List[int]:
        return [0] + list(self.keyposes[:-1])

    def validate(self, v_eps: Optional[float] = None) -> None:
        """
        Check structural invariants; with v_eps also check that the labelled
        keyposes are exactly the detected ones.

        Raises:
            DatasetError: Describing the first violated invariant
        """
        if not self.instruction:
            raise DatasetError("Demonstration instruction is empty")
        if len(self.gripper_open) != self.frame_count:
            raise DatasetError(f"{self.frame_count} poses but {len(self.gripper_open)} gripper flags")
        if not self.keyposes:
            raise DatasetError("Demonstration has no keyposes")
        if any(b <= a for a, b in zip(self.keyposes, self.keyposes[1:])):
            raise DatasetError(f"Keyposes are not strictly increasing: {self.keyposes}")
        if self.keyposes[0] < 1 or self.keyposes[-1] != self.frame_count - 1:
            raise DatasetError(f"Keyposes {self.keyposes} must lie in [1, {self.frame_count - 1}] "
                               f"and end on the final frame")
        if len(self.actions) != len(self.keyposes):
            raise DatasetError(f"{len(self.keyposes)} keyposes but {len(self.actions)} actions")
        for k, action in zip(self.keyposes, self.actions):
            if not action.pose.isclose(self.poses[k], atol=1e-6):
                raise DatasetError(f"Action for keypose {k} does not match the trajectory pose")
            if action.gripper_open != self.gripper_open[k]:
                raise DatasetError(f"Action gripper flag for keypose {k} does not match the trajectory")
        missing = sorted(set(self.observation_frames) - set(self.clouds))
        if missing:
            raise DatasetError(f"Missing observation clouds for frames {missing}")
        if v_eps is not None:
            detected = extract_keyposes(self.poses, self.gripper_open, v_eps)
            if detected != list(self.keyposes):
                raise DatasetError(f"Labelled keyposes {self.keyposes} differ from detected {detected}")

    def samples(self, demo_index: int = 0) -> List[TrainingSample]:
        """Training pairs; proprioception timestep is keypose step / number of keyposes."""
        out = []
        count = len(self.keyposes)
        for j, (frame, action) in enumerate(zip(self.observation_frames, self.actions)):
            proprio = Proprioception(bool(self.gripper_open[frame]), j / count, self.poses[frame])
            out.append(TrainingSample(self.clouds[frame], self.instruction, proprio, action,
                                      self.task, demo_index, j))
        return out


def save_demonstration(demo: Demonstration, directory: PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        'version': DATASET_VERSION,
        'instruction': demo.instruction,
        'task': demo.task,
        'frame_count': demo.frame_count,
        'gripper_open': [bool(g) for g in demo.gripper_open],
        'keyposes': [int(k) for k in demo.keyposes],
        'actions': [a.to_dict() for a in demo.actions],
        'observation_frames': demo.observation_frames,
        'scene': demo.scene,
    }
    with open(directory / META_FILE, 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    (directory / TRAJECTORY_FILE).write_bytes(pack_poses(demo.poses))
    for frame in demo.observation_frames:
        write_ply(directory / f"frame_{frame:04d}.ply", demo.clouds[frame])
    logger.debug(f"Saved demonstration '{demo.instruction}' to {directory}")
    return directory


def load_demonstration(directory: PathLike, v_eps: Optional[float] = DEFAULT_V_EPS) -> Demonstration:
    """
    Load and validate one demonstration directory.

    Raises:
        DatasetError: On missing files, malformed records or violated invariants
    """
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise DatasetError(f"No {META_FILE} in {directory}")
    try:
        with open(meta_path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
        poses = unpack_poses((directory / TRAJECTORY_FILE).read_bytes())
        if len(poses) != meta['frame_count']:
            raise DatasetError(f"{directory}: trajectory holds {len(poses)} poses, "
                               f"meta declares {meta['frame_count']}")
        clouds = {int(frame): read_ply(directory / f"frame_{int(frame):04d}.ply")
                  for frame in meta['observation_frames']}
        demo = Demonstration(
            instruction=meta['instruction'],
            task=meta.get('task', ''),
            poses=poses,
            gripper_open=[bool(g) for g in meta['gripper_open']],
            keyposes=[int(k) for k in meta['keyposes']],
            actions=[ActionLabel.from_dict(a) for a in meta['actions']],
            clouds=clouds,
            scene=meta.get('scene', {}),
        )
    except (KeyError, ValueError, TypeError, OSError, GeometryError, RenderError) as e:
        logger.error(f"Failed to load demonstration {directory}: {e}")
        raise DatasetError(f"Malformed demonstration {directory}: {e}") from e
    if v_eps is not None:
        demo.validate(v_eps)
    return demo


def save_dataset(demos: Sequence[Demonstration], root: PathLike) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, demo in enumerate(demos):
        save_demonstration(demo, root / f"{demo.task or 'demo'}_{i:04d}")
    logger.info(f"Wrote {len(demos)} demonstrations to {root}")
    return root


def load_dataset(root: PathLike, v_eps: Optional[float] = DEFAULT_V_EPS) -> List[Demonstration]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory {root} does not exist")
    demos = [load_demonstration(d, v_eps) for d in sorted(root.iterdir()) if (d / META_FILE).exists()]
    if not demos:
        raise DatasetError(f"No demonstrations found under {root}")
    logger.info(f"Loaded {len(demos)} demonstrations from {root}")
    return demos


def build_samples(demos: Sequence[Demonstration]) -> List[TrainingSample]:
    samples = []
    for i, demo in enumerate(demos):
        samples.extend(demo.samples(i))
    return samples
