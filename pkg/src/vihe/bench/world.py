"""
Kinematic tabletop world.

No physics: the end-effector teleports to commanded poses, a close command
attaches the nearest object within grasp tolerance and an open command
releases it where it is.
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from vihe.bench.tasks import COLORS, PegInsert, Scene, SceneObject, top_down_rotation
from vihe.core.geometry import Pose, compose, inverse
from vihe.core.renderer import PointCloud

logger = logging.getLogger(__name__)

HOME_POSE = Pose(np.array([0.0, 0.0, 0.4]), top_down_rotation(0.0))
GRASP_TOLERANCE = 0.02
SURFACE_SPACING = 0.004
TABLE_SPACING = 0.008
TABLE_HALF_SIZE = 0.45
TABLE_COLOR = (0.5, 0.5, 0.5)


def _face_grid(width: float, height: float, spacing: float) -> np.ndarray:
    """Points covering a centered width x height rectangle, edges included."""
    nu = max(2, int(np.ceil(width / spacing)) + 1)
    nv = max(2, int(np.ceil(height / spacing)) + 1)
    u, v = np.meshgrid(np.linspace(-width / 2, width / 2, nu), np.linspace(-height / 2, height / 2, nv),
                       indexing='ij')
    return np.stack([u.ravel(), v.ravel()], axis=1)


def box_surface(size: Tuple[float, float, float], spacing: float = SURFACE_SPACING,
                hole: float = 0.0) -> np.ndarray:
    """
    Surface samples of an axis-aligned box centered at the origin.

    Args:
        size: (width, depth, height)
        spacing: Grid pitch in meters
        hole: Side of a square opening cut into the top face, with its walls

    Returns:
        (N, 3) local points
    """
    w, d, h = size
    faces = []
    for sign in (-1.0, 1.0):
        xy = _face_grid(w, d, spacing)
        top = np.column_stack([xy, np.full(len(xy), sign * h / 2)])
        if sign > 0 and hole > 0:
            top = top[(np.abs(top[:, 0]) > hole / 2) | (np.abs(top[:, 1]) > hole / 2)]
        faces.append(top)
        yz = _face_grid(d, h, spacing)
        faces.append(np.column_stack([np.full(len(yz), sign * w / 2), yz]))
        xz = _face_grid(w, h, spacing)
        faces.append(np.column_stack([xz[:, 0], np.full(len(xz), sign * d / 2), xz[:, 1]]))
    if hole > 0:
        # opening walls; the bottom face closes it
        for sign in (-1.0, 1.0):
            yz = _face_grid(hole, h, spacing)
            faces.append(np.column_stack([np.full(len(yz), sign * hole / 2), yz]))
            xz = _face_grid(hole, h, spacing)
            faces.append(np.column_stack([xz[:, 0], np.full(len(xz), sign * hole / 2), xz[:, 1]]))
    return np.concatenate(faces)


def object_cloud(obj: SceneObject, pose: Pose, spacing: float = SURFACE_SPACING) -> PointCloud:
    """Surface cloud of an object placed at pose (its reference point)."""
    if obj.kind == 'fixture':
        local = box_surface(obj.size, spacing, hole=PegInsert.hole_width)
        local[:, 2] -= obj.size[2] / 2
    else:
        local = box_surface(obj.size, spacing)
    points = pose.apply(local)
    colors = np.tile(np.asarray(COLORS[obj.color]), (len(points), 1))
    return PointCloud(points, colors)


def table_cloud(half_size: float = TABLE_HALF_SIZE, spacing: float = TABLE_SPACING) -> PointCloud:
    xy = _face_grid(2 * half_size, 2 * half_size, spacing)
    points = np.column_stack([xy, np.zeros(len(xy))])
    return PointCloud(points, np.tile(np.asarray(TABLE_COLOR), (len(points), 1)))


class KinematicWorld:
    """
    Mutable state of one episode.

    Attributes:
        scene: The sampled scene
        end_effector: Current end-effector pose
        gripper_open: Current gripper state
        held: Name of the attached object, if any
    """

    def __init__(self, scene: Scene, grasp_tolerance: float = GRASP_TOLERANCE):
        self.scene = scene
        self.grasp_tolerance = grasp_tolerance
        self.end_effector = HOME_POSE
        self.gripper_open = True
        self.held: Optional[str] = None
        self._held_offset: Optional[Pose] = None
        self._poses: Dict[str, Pose] = {obj.name: obj.pose() for obj in scene.objects}

    def object_pose(self, name: str) -> Pose:
        return self._poses[name]

    def _nearest_graspable(self) -> Optional[str]:
        best, best_distance = None, self.grasp_tolerance
        for obj in self.scene.objects:
            if obj.kind == 'fixture':
                continue
            distance = float(np.linalg.norm(self._poses[obj.name].translation - self.end_effector.translation))
            if distance <= best_distance:
                best, best_distance = obj.name, distance
        return best

    def execute(self, action) -> None:
        """
        Teleport to action.pose, then apply action.gripper_open.

        Args:
            action: Anything with `pose` and `gripper_open` (ActionLabel or decoded Action)
        """
        self.end_effector = action.pose
        if self.held is not None:
            self._poses[self.held] = compose(self.end_effector, self._held_offset)

        if self.gripper_open and not action.gripper_open:
            name = self._nearest_graspable()
            if name is not None:
                self.held = name
                self._held_offset = compose(inverse(self.end_effector), self._poses[name])
                logger.debug(f"Grasped '{name}'")
        elif not self.gripper_open and action.gripper_open and self.held is not None:
            logger.debug(f"Released '{self.held}' at {self._poses[self.held].translation.tolist()}")
            self.held = None
            self._held_offset = None
        self.gripper_open = bool(action.gripper_open)

    def cloud(self, spacing: float = SURFACE_SPACING) -> PointCloud:
        """Dense surface cloud of the table and every object in its current pose."""
        clouds = [table_cloud()]
        clouds.extend(object_cloud(obj, self._poses[obj.name], spacing) for obj in self.scene.objects)
        return PointCloud.concatenate(clouds)
