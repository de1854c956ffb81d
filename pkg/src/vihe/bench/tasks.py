"""
Synthetic tabletop tasks.

Each task samples a scene of simple objects, words an instruction, emits the
oracle keypose actions that solve it, and judges the final world state.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from vihe.core.geometry import Pose
from vihe.exceptions import TaskError
from vihe.pipeline.dataset import ActionLabel

logger = logging.getLogger(__name__)

COLORS: Dict[str, Tuple[float, float, float]] = {
    'red': (0.90, 0.10, 0.10),
    'green': (0.10, 0.75, 0.20),
    'blue': (0.10, 0.25, 0.90),
    'yellow': (0.95, 0.85, 0.10),
    'purple': (0.60, 0.20, 0.80),
    'orange': (1.00, 0.55, 0.00),
}

MIN_GAP = 0.02
MAX_PLACEMENT_TRIES = 200
PLACEMENT_RANGE = 0.3
APPROACH_HEIGHT = 0.12


def top_down_rotation(yaw_deg: float) -> np.ndarray:
    """Gripper pointing down (-z) with its x axis at yaw_deg about world z, as (w, x, y, z)."""
    xyzw = (Rotation.from_euler('z', yaw_deg, degrees=True) * Rotation.from_euler('x', 180.0, degrees=True)).as_quat()
    return xyzw[[3, 0, 1, 2]]


def heading_deg(pose: Pose) -> float:
    """Yaw of the pose's x axis projected on the table."""
    x_axis = pose.rotation_matrix()[:, 0]
    return float(np.degrees(np.arctan2(x_axis[1], x_axis[0])))


def yaw_error_deg(a: float, b: float, symmetry: float = 90.0) -> float:
    """Smallest angle between two yaws modulo a rotational symmetry."""
    diff = np.mod(a - b, symmetry)
    return float(min(diff, symmetry - diff))


@dataclass(frozen=True)
class SceneObject:
    """
    A rigid object. position is the object's reference point (its center,
    or the hole mouth for a fixture); size is (width, depth, height) in meters.
    """
    name: str
    kind: str
    color: str
    position: Tuple[float, float, float]
    yaw_deg: float
    size: Tuple[float, float, float]

    @property
    def footprint_radius(self) -> float:
        return 0.5 * float(np.hypot(self.size[0], self.size[1]))

    def pose(self) -> Pose:
        xyzw = Rotation.from_euler('z', self.yaw_deg, degrees=True).as_quat()
        return Pose(np.asarray(self.position), xyzw[[3, 0, 1, 2]])

    def to_dict(self) -> dict:
        return {'name': self.name, 'kind': self.kind, 'color': self.color,
                'position': [float(v) for v in self.position], 'yaw_deg': float(self.yaw_deg),
                'size': [float(v) for v in self.size]}

    @classmethod
    def from_dict(cls, data: dict) -> "SceneObject":
        return cls(data['name'], data['kind'], data['color'], tuple(data['position']),
                   float(data['yaw_deg']), tuple(data['size']))


@dataclass(frozen=True)
class Scene:
    """Sampled task instance: objects, the instruction and task-specific roles."""
    task: str
    instruction: str
    objects: Tuple[SceneObject, ...]
    roles: Dict[str, str] = field(default_factory=dict)

    def object(self, name: str) -> SceneObject:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise TaskError(f"Scene has no object '{name}'")

    def role(self, role: str) -> SceneObject:
        return self.object(self.roles[role])

    def to_dict(self) -> dict:
        return {'task': self.task, 'instruction': self.instruction, 'roles': dict(self.roles),
                'objects': [obj.to_dict() for obj in self.objects]}

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        return cls(data['task'], data['instruction'],
                   tuple(SceneObject.from_dict(o) for o in data['objects']), dict(data.get('roles', {})))


def place_objects(rng: np.random.Generator, specs: Sequence[Tuple[str, str, str, Tuple[float, float, float], float]],
                  tries: int = MAX_PLACEMENT_TRIES) -> Tuple[SceneObject, ...]:
    """
    Rejection-sample table positions keeping every pair of footprints MIN_GAP apart.

    Args:
        rng: Random generator
        specs: (name, kind, color, size, reference height) per object

    Raises:
        TaskError: If no valid placement is found within `tries` attempts
    """
    for _ in range(tries):
        placed: List[SceneObject] = []
        for name, kind, color, size, height in specs:
            xy = rng.uniform(-PLACEMENT_RANGE, PLACEMENT_RANGE, size=2)
            yaw = float(rng.uniform(0.0, 90.0))
            placed.append(SceneObject(name, kind, color, (float(xy[0]), float(xy[1]), height), yaw, size))
        ok = all(
            np.hypot(a.position[0] - b.position[0], a.position[1] - b.position[1])
            >= a.footprint_radius + b.footprint_radius + MIN_GAP
            for i, a in enumerate(placed) for b in placed[i + 1:]
        )
        if ok:
            return tuple(placed)
    raise TaskError(f"Could not place {len(specs)} objects {MIN_GAP} m apart after {tries} attempts")


class SyntheticTask:
    """
    Base class of the synthetic tasks.

    Attributes:
        task_id: Stable identifier
        translation_tolerance: Success tolerance in meters
        rotation_tolerance: Success tolerance in degrees (yaw, modulo 90)
    """
    task_id = ""
    translation_tolerance = 0.01
    rotation_tolerance = 15.0

    def __init__(self, placement_tries: int = MAX_PLACEMENT_TRIES):
        self.placement_tries = placement_tries

    def sample_scene(self, rng: np.random.Generator) -> Scene:
        raise NotImplementedError

    def oracle_actions(self, scene: Scene) -> List[ActionLabel]:
        raise NotImplementedError

    def goal(self, scene: Scene) -> Tuple[str, np.ndarray, float]:
        """(object to check, or '' for the end-effector; goal position; goal yaw)."""
        raise NotImplementedError

    def success(self, world) -> bool:
        """Judge the final world state against the goal."""
        name, position, yaw = self.goal(world.scene)
        pose = world.end_effector if not name else world.object_pose(name)
        if np.linalg.norm(pose.translation - position) > self.translation_tolerance:
            return False
        return yaw_error_deg(heading_deg(pose), yaw) <= self.rotation_tolerance

    def vocabulary(self) -> List[str]:
        """Every word the task's instructions can use."""
        raise NotImplementedError


class ReachColor(SyntheticTask):
    """Touch the top of the block of the named color."""
    task_id = "reach-color"
    block = 0.04

    def sample_scene(self, rng: np.random.Generator) -> Scene:
        colors = rng.choice(sorted(COLORS), size=3, replace=False)
        size = (self.block,) * 3
        objects = place_objects(rng, [(f"block_{c}", 'block', str(c), size, self.block / 2) for c in colors],
                                self.placement_tries)
        target = objects[int(rng.integers(3))]
        return Scene(self.task_id, f"reach the {target.color} block", objects, {'target': target.name})

    def _touch_point(self, scene: Scene) -> np.ndarray:
        target = scene.role('target')
        return np.asarray(target.position) + np.array([0.0, 0.0, target.size[2] / 2])

    def oracle_actions(self, scene: Scene) -> List[ActionLabel]:
        target = scene.role('target')
        rotation = top_down_rotation(target.yaw_deg)
        touch = self._touch_point(scene)
        return [
            ActionLabel(Pose(touch + np.array([0.0, 0.0, APPROACH_HEIGHT]), rotation), True, True),
            ActionLabel(Pose(touch, rotation), True, False),
        ]

    def goal(self, scene: Scene):
        return '', self._touch_point(scene), scene.role('target').yaw_deg

    def vocabulary(self) -> List[str]:
        return ['reach', 'the', 'block'] + sorted(COLORS)


class StackOffset(SyntheticTask):
    """Pick the source block and set it on top of the base block, edges aligned."""
    task_id = "stack-offset"
    block = 0.04

    def sample_scene(self, rng: np.random.Generator) -> Scene:
        source, base = rng.choice(sorted(COLORS), size=2, replace=False)
        size = (self.block,) * 3
        objects = place_objects(rng, [(f"block_{source}", 'block', str(source), size, self.block / 2),
                                      (f"block_{base}", 'block', str(base), size, self.block / 2)],
                                self.placement_tries)
        return Scene(self.task_id, f"stack the {source} block on the {base} block", objects,
                     {'source': objects[0].name, 'base': objects[1].name})

    def _place_point(self, scene: Scene) -> np.ndarray:
        base = scene.role('base')
        return np.asarray(base.position) + np.array([0.0, 0.0, base.size[2]])

    def oracle_actions(self, scene: Scene) -> List[ActionLabel]:
        source, base = scene.role('source'), scene.role('base')
        pick_rot = top_down_rotation(source.yaw_deg)
        place_rot = top_down_rotation(base.yaw_deg)
        lift = np.array([0.0, 0.0, APPROACH_HEIGHT])
        grasp = np.asarray(source.position)
        place = self._place_point(scene)
        return [
            ActionLabel(Pose(grasp + lift, pick_rot), True, True),
            ActionLabel(Pose(grasp, pick_rot), False, True),
            ActionLabel(Pose(grasp + lift, pick_rot), False, True),
            ActionLabel(Pose(place + lift, place_rot), False, True),
            ActionLabel(Pose(place, place_rot), True, False),
        ]

    def goal(self, scene: Scene):
        return scene.roles['source'], self._place_point(scene), scene.role('base').yaw_deg

    def vocabulary(self) -> List[str]:
        return ['stack', 'the', 'block', 'on'] + sorted(COLORS)


class PegInsert(SyntheticTask):
    """Insert a 2 cm square peg into the fixture of the named color."""
    task_id = "peg-insert-2cm"
    translation_tolerance = 0.003
    rotation_tolerance = 10.0
    peg = (0.02, 0.02, 0.08)
    fixture = (0.08, 0.08, 0.04)
    hole_width = 0.024
    insert_depth = 0.03

    def sample_scene(self, rng: np.random.Generator) -> Scene:
        peg_color, first, second = rng.choice(sorted(COLORS), size=3, replace=False)
        objects = place_objects(rng, [
            ("peg", 'peg', str(peg_color), self.peg, self.peg[2] / 2),
            (f"fixture_{first}", 'fixture', str(first), self.fixture, self.fixture[2]),
            (f"fixture_{second}", 'fixture', str(second), self.fixture, self.fixture[2]),
        ], self.placement_tries)
        target = objects[1 + int(rng.integers(2))]
        return Scene(self.task_id, f"insert the peg into the {target.color} hole", objects,
                     {'peg': 'peg', 'target': target.name})

    def _insert_point(self, scene: Scene) -> np.ndarray:
        hole = scene.role('target')
        return np.asarray(hole.position) + np.array([0.0, 0.0, self.peg[2] / 2 - self.insert_depth])

    def oracle_actions(self, scene: Scene) -> List[ActionLabel]:
        peg, hole = scene.role('peg'), scene.role('target')
        pick_rot = top_down_rotation(peg.yaw_deg)
        insert_rot = top_down_rotation(hole.yaw_deg)
        lift = np.array([0.0, 0.0, APPROACH_HEIGHT])
        grasp = np.asarray(peg.position)
        insert = self._insert_point(scene)
        above_hole = np.asarray(hole.position) + np.array([0.0, 0.0, self.peg[2] / 2]) + lift
        return [
            ActionLabel(Pose(grasp + lift, pick_rot), True, True),
            ActionLabel(Pose(grasp, pick_rot), False, True),
            ActionLabel(Pose(grasp + lift, pick_rot), False, True),
            ActionLabel(Pose(above_hole, insert_rot), False, True),
            ActionLabel(Pose(insert, insert_rot), True, False),
        ]

    def goal(self, scene: Scene):
        return 'peg', self._insert_point(scene), scene.role('target').yaw_deg

    def vocabulary(self) -> List[str]:
        return ['insert', 'the', 'peg', 'into', 'hole'] + sorted(COLORS)


TASKS = {task.task_id: task for task in (ReachColor, StackOffset, PegInsert)}


def get_task(task_id: str) -> SyntheticTask:
    try:
        return TASKS[task_id]()
    except KeyError:
        raise TaskError(f"Unknown task '{task_id}'; available: {sorted(TASKS)}")


def get_tasks(task_ids: Optional[Sequence[str]] = None) -> List[SyntheticTask]:
    return [get_task(t) for t in (task_ids or sorted(TASKS))]
