"""
Demonstration generator for the synthetic tasks.

Scenes are observed by fixed pinhole RGB-D sensors whose frames are fused into
the observation cloud. Trajectories interpolate between oracle keyposes and
pause one frame at every keypose, so keypose extraction recovers exactly the
oracle actions.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation, Slerp
from tqdm import tqdm

from vihe.bench.tasks import Scene, SyntheticTask, get_task
from vihe.bench.world import HOME_POSE, KinematicWorld
from vihe.core.geometry import Pose
from vihe.core.renderer import CameraIntrinsics, PointCloud, capture_rgbd, intrinsics_for_fov, look_at, unproject_rgbd
from vihe.exceptions import RenderError, TaskError
from vihe.pipeline.dataset import ActionLabel, Demonstration, save_dataset
from vihe.pipeline.keyposes import DEFAULT_V_EPS, extract_keyposes

logger = logging.getLogger(__name__)

STEP_LENGTH = 0.02
SENSOR_RESOLUTION = 192
SENSOR_FOV_DEG = 50.0
OBSERVATION_SENSORS = "sensors"
OBSERVATION_DENSE = "dense"


@dataclass(frozen=True)
class Sensor:
    """A fixed pinhole RGB-D camera."""
    name: str
    extrinsics: Pose
    intrinsics: CameraIntrinsics
    shape: Tuple[int, int]

    def capture(self, cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
        return capture_rgbd(cloud, self.intrinsics, self.extrinsics, self.shape)


def default_sensors(resolution: int = SENSOR_RESOLUTION, fov_deg: float = SENSOR_FOV_DEG) -> List[Sensor]:
    """Front, left, right and overhead sensors aimed at the table center."""
    intrinsics = intrinsics_for_fov(resolution, resolution, fov_deg)
    target = (0.0, 0.0, 0.05)
    placements = [
        ('front', (0.9, 0.0, 0.6)),
        ('left', (0.0, 0.9, 0.6)),
        ('right', (0.0, -0.9, 0.6)),
        ('overhead', (0.0, 0.0, 1.2)),
    ]
    return [Sensor(name, look_at(eye, target), intrinsics, (resolution, resolution)) for name, eye in placements]


def observe(world: KinematicWorld, sensors: Optional[Sequence[Sensor]] = None) -> PointCloud:
    """
    Observation cloud of the current world state.

    With sensors, each RGB-D frame is unprojected and the results fused;
    without, the dense surface cloud is returned directly.
    """
    truth = world.cloud()
    if not sensors:
        return truth
    clouds = []
    for sensor in sensors:
        depth, rgb = sensor.capture(truth)
        try:
            clouds.append(unproject_rgbd(depth, rgb, sensor.intrinsics, sensor.extrinsics))
        except RenderError:
            logger.warning(f"Sensor '{sensor.name}' saw nothing")
    if not clouds:
        raise RenderError("No sensor produced a valid depth pixel")
    return PointCloud.concatenate(clouds)


def build_trajectory(start: Pose, start_open: bool, actions: Sequence[ActionLabel],
                     step_length: float = STEP_LENGTH) -> Tuple[List[Pose], List[bool], List[int]]:
    """
    Frame-level trajectory through the keypose actions.

    Every segment moves in roughly step_length increments (at least two
    frames), arrives at the action pose and then pauses one frame; the gripper
    command takes effect on the pause frame, which is the keypose.

    Returns:
        (poses, gripper flags, keypose frame indices)
    """
    poses = [start]
    gripper = [bool(start_open)]
    keyposes = []
    for action in actions:
        previous = poses[-1]
        distance = float(np.linalg.norm(action.pose.translation - previous.translation))
        frames = max(2, int(np.ceil(distance / step_length)))
        slerp = Slerp([0.0, 1.0], Rotation.from_quat(np.stack([previous.rotation[[1, 2, 3, 0]],
                                                               action.pose.rotation[[1, 2, 3, 0]]])))
        for i in range(1, frames):
            t = i / frames
            translation = (1.0 - t) * previous.translation + t * action.pose.translation
            poses.append(Pose(translation, slerp([t]).as_quat()[0][[3, 0, 1, 2]]))
            gripper.append(gripper[-1])
        poses.append(action.pose)
        gripper.append(gripper[-1])
        poses.append(action.pose)
        gripper.append(bool(action.gripper_open))
        keyposes.append(len(poses) - 1)
    return poses, gripper, keyposes


def replay(task: SyntheticTask, scene: Scene, actions: Sequence) -> KinematicWorld:
    """Execute actions in a fresh world and return its final state."""
    world = KinematicWorld(scene)
    for action in actions:
        world.execute(action)
    return world


def generate_demo(task: SyntheticTask, rng: np.random.Generator, sensors: Optional[Sequence[Sensor]] = None,
                  v_eps: float = DEFAULT_V_EPS) -> Demonstration:
    """
    Sample a scene and record the oracle solving it.

    Raises:
        TaskError: If the scene is unsatisfiable, keypose extraction disagrees
            with the oracle or the oracle replay fails its success predicate
    """
    scene = task.sample_scene(rng)
    actions = task.oracle_actions(scene)
    poses, gripper, keyposes = build_trajectory(HOME_POSE, True, actions)
    detected = extract_keyposes(poses, gripper, v_eps)
    if detected != keyposes:
        raise TaskError(f"{task.task_id}: detected keyposes {detected} differ from oracle {keyposes}")

    world = KinematicWorld(scene)
    clouds = {0: observe(world, sensors)}
    for frame, action in zip(keyposes[:-1], actions[:-1]):
        world.execute(action)
        clouds[frame] = observe(world, sensors)
    world.execute(actions[-1])
    if not task.success(world):
        raise TaskError(f"{task.task_id}: oracle replay failed its success predicate")

    return Demonstration(
        instruction=scene.instruction,
        task=task.task_id,
        poses=poses,
        gripper_open=gripper,
        keyposes=keyposes,
        actions=list(actions),
        clouds=clouds,
        scene=scene.to_dict(),
    )


def replay_demonstration(demo: Demonstration) -> bool:
    """Re-run a stored demonstration's actions and apply its task's success predicate."""
    task = get_task(demo.task)
    return task.success(replay(task, Scene.from_dict(demo.scene), demo.actions))


def generate_dataset(tasks: Sequence[Union[str, SyntheticTask]], n: int, seed: int, out: Union[str, Path],
                     observation: str = OBSERVATION_SENSORS, progress: bool = False) -> Path:
    """
    Generate n demonstrations per task into out.

    Demo i of task t uses the generator seeded with [seed, t, i], so the
    dataset is identical for a given seed.

    Raises:
        TaskError: On n < 1 or an unsatisfiable scene
    """
    if n < 1:
        raise TaskError(f"Demonstrations per task must be at least 1, got {n}")
    if observation not in (OBSERVATION_SENSORS, OBSERVATION_DENSE):
        raise TaskError(f"Unknown observation mode '{observation}'")
    resolved = [get_task(t) if isinstance(t, str) else t for t in tasks]
    sensors = default_sensors() if observation == OBSERVATION_SENSORS else None
    jobs = [(t, i) for t in range(len(resolved)) for i in range(n)]
    demos = []
    for t, i in tqdm(jobs, desc="gen-data", disable=not progress):
        rng = np.random.default_rng([seed, t, i])
        demos.append(generate_demo(resolved[t], rng, sensors))
    path = save_dataset(demos, out)
    logger.info(f"Generated {len(demos)} demonstrations for {[t.task_id for t in resolved]} (seed {seed})")
    return path
