"""
Geometry module for SE(3) poses and orthographic virtual cameras.

This module provides the pose algebra used for actions and refinements,
the 5-degree Euler rotation bins, orthographic camera projection, and the
mapping from an action pose to the five-camera virtual rig of a stage.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation

from vihe.exceptions import GeometryError, RigDivergenceError

logger = logging.getLogger(__name__)

POSE_RECORD_DTYPE = np.dtype('<f8')
POSE_RECORD_SIZE = 7 * POSE_RECORD_DTYPE.itemsize
DEFAULT_ROTATION_BINS = 72

VIEW_NAMES = ("top", "front", "back", "left", "right")

# Direction from the rig anchor towards each camera, rig frame.
_VIEW_DIRECTIONS = {
    "top": (0.0, 0.0, 1.0),
    "front": (1.0, 0.0, 0.0),
    "back": (-1.0, 0.0, 0.0),
    "left": (0.0, 1.0, 0.0),
    "right": (0.0, -1.0, 0.0),
}
# Image "up" direction of each camera, rig frame.
_VIEW_UP = {
    "top": (1.0, 0.0, 0.0),
    "front": (0.0, 0.0, 1.0),
    "back": (0.0, 0.0, 1.0),
    "left": (0.0, 0.0, 1.0),
    "right": (0.0, 0.0, 1.0),
}


def _as_vector(values: Iterable[float], size: int, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64).reshape(-1)
    if array.shape != (size,):
        raise GeometryError(f"{name} must have {size} components, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise GeometryError(f"{name} contains non-finite values: {array}")
    return array


def normalize_quaternion(quaternion: Iterable[float]) -> np.ndarray:
    """
    Normalize a (w, x, y, z) quaternion and fix its sign so that w >= 0.

    Args:
        quaternion: Four components, any nonzero norm

    Returns:
        Unit quaternion as a float64 array

    Raises:
        GeometryError: If the quaternion has (near) zero norm
    """
    q = _as_vector(quaternion, 4, "quaternion")
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise GeometryError("Cannot normalize a zero quaternion")
    q = q / norm
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b of two (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit (w, x, y, z) quaternion."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(matrix: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion of a 3x3 rotation matrix."""
    xyzw = Rotation.from_matrix(np.asarray(matrix, dtype=np.float64)).as_quat()
    return normalize_quaternion(xyzw[[3, 0, 1, 2]])


def axis_angle_to_quat(axis: Sequence[float], angle_rad: float) -> np.ndarray:
    axis = _as_vector(axis, 3, "axis")
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / norm
    half = 0.5 * angle_rad
    return normalize_quaternion(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def rotation_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle in radians between two unit quaternions."""
    dot = abs(float(np.dot(a, b)))
    return 2.0 * float(np.arccos(min(1.0, dot)))


@dataclass(frozen=True, eq=False)
class Pose:
    """
    Rigid transform: translation in meters (world frame) and unit quaternion (w, x, y, z).

    Poses are immutable; the quaternion is renormalized on construction.
    """
    translation: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self) -> None:
        translation = _as_vector(self.translation, 3, "translation")
        rotation = normalize_quaternion(self.rotation)
        translation.setflags(write=False)
        rotation.setflags(write=False)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "rotation", rotation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "Pose":
        return cls(np.array([x, y, z]))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise GeometryError(f"Homogeneous matrix must be 4x4, got {matrix.shape}")
        return cls(matrix[:3, 3], matrix_to_quat(matrix[:3, :3]))

    @classmethod
    def from_euler_deg(cls, translation: Sequence[float], angles_deg: Sequence[float]) -> "Pose":
        """Pose from a translation and intrinsic XYZ Euler angles in degrees."""
        xyzw = Rotation.from_euler("XYZ", angles_deg, degrees=True).as_quat()
        return cls(np.asarray(translation, dtype=np.float64), xyzw[[3, 0, 1, 2]])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation_matrix()
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "Pose":
        return inverse(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) or (3,) array of points from this frame to the parent frame."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix().T + self.translation

    def isclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        """Equality up to atol on translation and on the rotation (q and -q are equal)."""
        same_translation = np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        dot = abs(float(np.dot(self.rotation, other.rotation)))
        return same_translation and (1.0 - dot) <= atol

    def to_list(self) -> list:
        return [float(v) for v in np.concatenate([self.translation, self.rotation])]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Pose":
        values = _as_vector(values, 7, "pose record")
        return cls(values[:3], values[3:])

    def to_bytes(self) -> bytes:
        """Serialize as 7 little-endian float64 values (tx, ty, tz, qw, qx, qy, qz)."""
        return np.asarray(self.to_list(), dtype=POSE_RECORD_DTYPE).tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> "Pose":
        if len(payload) != POSE_RECORD_SIZE:
            raise GeometryError(f"Pose record must be {POSE_RECORD_SIZE} bytes, got {len(payload)}")
        return cls.from_list(np.frombuffer(payload, dtype=POSE_RECORD_DTYPE))

    def __repr__(self) -> str:
        t = np.array2string(self.translation, precision=4)
        q = np.array2string(self.rotation, precision=4)
        return f"Pose(t={t}, q={q})"


def compose(a: Pose, b: Pose) -> Pose:
    """
    Compose two poses; the result applies b first, then a.

    Args:
        a: Outer transform
        b: Inner transform

    Returns:
        The pose a * b with renormalized rotation
    """
    translation = a.translation + a.rotation_matrix() @ b.translation
    rotation = quat_multiply(a.rotation, b.rotation)
    return Pose(translation, rotation)


def inverse(pose: Pose) -> Pose:
    conjugate = pose.rotation * np.array([1.0, -1.0, -1.0, -1.0])
    rotation_t = pose.rotation_matrix().T
    return Pose(-rotation_t @ pose.translation, conjugate)


def pack_poses(poses: Sequence[Pose]) -> bytes:
    """Concatenate pose records (7 little-endian float64 each)."""
    return b"".join(pose.to_bytes() for pose in poses)


def unpack_poses(payload: bytes) -> list:
    if len(payload) % POSE_RECORD_SIZE:
        raise GeometryError(f"Pose stream length {len(payload)} is not a multiple of {POSE_RECORD_SIZE}")
    records = np.frombuffer(payload, dtype=POSE_RECORD_DTYPE).reshape(-1, 7)
    return [Pose.from_list(row) for row in records]


# ---------------------------------------------------------------------------
# Euler bins
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EulerBins:
    """Per-axis bin indices of intrinsic XYZ Euler angles; bin k is centered on k * width."""
    indices: Tuple[int, int, int]
    bins_per_axis: int = DEFAULT_ROTATION_BINS

    def __post_init__(self) -> None:
        indices = tuple(int(i) for i in self.indices)
        if len(indices) != 3:
            raise GeometryError(f"EulerBins needs 3 indices, got {len(indices)}")
        if any(i < 0 or i >= self.bins_per_axis for i in indices):
            raise GeometryError(f"Bin indices {indices} outside [0, {self.bins_per_axis})")
        object.__setattr__(self, "indices", indices)

    @property
    def bin_width_deg(self) -> float:
        return 360.0 / self.bins_per_axis


def euler_angles_deg(rotation: np.ndarray) -> np.ndarray:
    """
    Intrinsic XYZ Euler angles in degrees of a (w, x, y, z) quaternion.

    At gimbal lock scipy picks the canonical branch (third angle zero).
    """
    q = normalize_quaternion(rotation)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return Rotation.from_quat(q[[1, 2, 3, 0]]).as_euler("XYZ", degrees=True)


def angles_to_bins(angles_deg: np.ndarray, bins_per_axis: int = DEFAULT_ROTATION_BINS) -> np.ndarray:
    """Bin index per angle; exact half-way angles go to the lower index."""
    width = 360.0 / bins_per_axis
    wrapped = np.mod(np.asarray(angles_deg, dtype=np.float64), 360.0)
    return (np.ceil(wrapped / width - 0.5).astype(np.int64)) % bins_per_axis


def bins_to_angles(indices: Sequence[int], bins_per_axis: int = DEFAULT_ROTATION_BINS) -> np.ndarray:
    """Bin centers in degrees, wrapped to (-180, 180]."""
    angles = np.asarray(indices, dtype=np.float64) * (360.0 / bins_per_axis)
    return np.where(angles > 180.0, angles - 360.0, angles)


def euler_encode(rotation: np.ndarray, bins_per_axis: int = DEFAULT_ROTATION_BINS) -> EulerBins:
    indices = angles_to_bins(euler_angles_deg(rotation), bins_per_axis)
    return EulerBins(tuple(int(i) for i in indices), bins_per_axis)


def euler_decode(bins: EulerBins) -> np.ndarray:
    angles = bins_to_angles(bins.indices, bins.bins_per_axis)
    xyzw = Rotation.from_euler("XYZ", angles, degrees=True).as_quat()
    return normalize_quaternion(xyzw[[3, 0, 1, 2]])


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Workspace:
    """Axis-aligned workspace box; virtual cameras treat it as a cube of half_extent."""
    min_corner: Tuple[float, float, float]
    max_corner: Tuple[float, float, float]

    def __post_init__(self) -> None:
        lo = _as_vector(self.min_corner, 3, "workspace min")
        hi = _as_vector(self.max_corner, 3, "workspace max")
        if np.any(hi <= lo):
            raise GeometryError(f"Workspace max {hi} must exceed min {lo} on every axis")
        object.__setattr__(self, "min_corner", tuple(float(v) for v in lo))
        object.__setattr__(self, "max_corner", tuple(float(v) for v in hi))

    @classmethod
    def from_config(cls, config: dict) -> "Workspace":
        ws = config.get('workspace', config)
        return cls(tuple(ws.get('min', (-0.5, -0.5, 0.0))), tuple(ws.get('max', (0.5, 0.5, 1.0))))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.min_corner) + np.asarray(self.max_corner))

    @property
    def half_extent(self) -> float:
        return float(0.5 * np.max(np.asarray(self.max_corner) - np.asarray(self.min_corner)))

    def contains(self, point: np.ndarray, margin: float = 0.0) -> bool:
        point = np.asarray(point, dtype=np.float64)
        return bool(np.all(point >= np.asarray(self.min_corner) - margin)
                    and np.all(point <= np.asarray(self.max_corner) + margin))

    def clamp(self, point: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(point, dtype=np.float64), self.min_corner, self.max_corner)


@dataclass(frozen=True)
class VirtualCamera:
    """
    Orthographic camera. The pose maps camera frame to world frame; the camera looks
    along its +z axis, image u grows with camera x and v grows with camera y.
    """
    pose: Pose
    half_extent: float
    near: float
    far: float
    resolution: int

    def __post_init__(self) -> None:
        if not self.half_extent > 0.0:
            raise GeometryError(f"half_extent must be positive, got {self.half_extent}")
        if not self.near < self.far:
            raise GeometryError(f"near ({self.near}) must be smaller than far ({self.far})")
        if int(self.resolution) < 1:
            raise GeometryError(f"resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "resolution", int(self.resolution))

    @property
    def pixel_size(self) -> float:
        """Side length in meters of one pixel footprint."""
        return 2.0 * self.half_extent / self.resolution

    def transformed(self, transform: Pose) -> "VirtualCamera":
        return VirtualCamera(compose(transform, self.pose), self.half_extent, self.near, self.far,
                             self.resolution)


@njit(cache=True, nogil=True)
def orthographic_project(x, y, z, rotation, translation, half_extent, scale):
    """Pixel u, v and camera depth of one world point (compiled, shared with the renderer)."""
    dx = x - translation[0]
    dy = y - translation[1]
    dz = z - translation[2]
    lx = dx * rotation[0, 0] + dy * rotation[1, 0] + dz * rotation[2, 0]
    ly = dx * rotation[0, 1] + dy * rotation[1, 1] + dz * rotation[2, 1]
    lz = dx * rotation[0, 2] + dy * rotation[1, 2] + dz * rotation[2, 2]
    return (lx + half_extent) * scale, (ly + half_extent) * scale, lz


@njit(cache=True, nogil=True)
def _project_kernel(points, rotation, translation, half_extent, scale, out):
    for i in range(points.shape[0]):
        u, v, d = orthographic_project(points[i, 0], points[i, 1], points[i, 2], rotation, translation,
                                       half_extent, scale)
        out[i, 0] = u
        out[i, 1] = v
        out[i, 2] = d


def camera_projection(camera: VirtualCamera) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """Rotation, translation, half extent and pixels-per-meter scale fed to the compiled projection."""
    rotation = np.ascontiguousarray(camera.pose.rotation_matrix(), dtype=np.float64)
    translation = np.ascontiguousarray(camera.pose.translation, dtype=np.float64)
    return rotation, translation, float(camera.half_extent), camera.resolution / (2.0 * camera.half_extent)


def project_points(camera: VirtualCamera, points: np.ndarray) -> np.ndarray:
    """
    Project world points through an orthographic camera.

    Args:
        camera: Virtual camera
        points: (N, 3) world coordinates

    Returns:
        (N, 3) array of continuous pixel coordinates u, v and camera-frame depth
    """
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    out = np.empty_like(points)
    _project_kernel(points, *camera_projection(camera), out)
    return out


def project(camera: VirtualCamera, point: Sequence[float]) -> Tuple[float, float, float]:
    """Pixel coordinates (u, v) and depth of a single world point."""
    u, v, depth = project_points(camera, np.asarray(point, dtype=np.float64)[None, :])[0]
    return float(u), float(v), float(depth)


def unproject_points(camera: VirtualCamera, uvd: np.ndarray) -> np.ndarray:
    """Inverse of project_points for an (N, 3) array of u, v, depth."""
    uvd = np.asarray(uvd, dtype=np.float64).reshape(-1, 3)
    scale = (2.0 * camera.half_extent) / camera.resolution
    local = np.empty_like(uvd)
    local[:, 0] = uvd[:, 0] * scale - camera.half_extent
    local[:, 1] = uvd[:, 1] * scale - camera.half_extent
    local[:, 2] = uvd[:, 2]
    return local @ camera.pose.rotation_matrix().T + camera.pose.translation


def unproject(camera: VirtualCamera, u: float, v: float, depth: float) -> np.ndarray:
    return unproject_points(camera, np.array([[u, v, depth]]))[0]


def _view_rotation(name: str, look_inward: bool) -> np.ndarray:
    direction = np.asarray(_VIEW_DIRECTIONS[name])
    up = np.asarray(_VIEW_UP[name])
    z_axis = -direction if look_inward else direction
    y_axis = -up
    x_axis = np.cross(y_axis, z_axis)
    return np.stack([x_axis, y_axis, z_axis], axis=1)


@dataclass(frozen=True)
class CameraRig:
    """
    Five orthographic cameras (top, front, back, left, right) around a rig frame.

    anchor is the action pose the rig was built from (composition base for
    refinements); frame is the pose the cameras are arranged around.
    """
    cameras: Tuple[VirtualCamera, ...]
    anchor: Pose
    frame: Pose
    stage: int
    clamped: bool = False

    def __post_init__(self) -> None:
        if len(self.cameras) != len(VIEW_NAMES):
            raise GeometryError(f"A rig has {len(VIEW_NAMES)} cameras, got {len(self.cameras)}")
        resolutions = {camera.resolution for camera in self.cameras}
        if len(resolutions) != 1:
            raise GeometryError(f"Rig cameras disagree on resolution: {sorted(resolutions)}")

    @property
    def half_extent(self) -> float:
        return self.cameras[0].half_extent

    @property
    def resolution(self) -> int:
        return self.cameras[0].resolution

    @property
    def center(self) -> np.ndarray:
        return self.frame.translation

    def camera(self, name: str) -> VirtualCamera:
        return self.cameras[VIEW_NAMES.index(name)]

    def transformed(self, transform: Pose) -> "CameraRig":
        """The same rig moved by a rigid transform applied in the world frame."""
        return CameraRig(
            cameras=tuple(camera.transformed(transform) for camera in self.cameras),
            anchor=compose(transform, self.anchor),
            frame=compose(transform, self.frame),
            stage=self.stage,
            clamped=self.clamped,
        )


def build_rig(frame: Pose, half_extent: float, resolution: int, stage: int,
              anchor: Optional[Pose] = None, look_inward: bool = True,
              clamped: bool = False) -> CameraRig:
    """
    Arrange the five cameras around a rig frame.

    Inward cameras sit 2 * half_extent from the frame origin and clip depth to the
    cube [near, far] = [half_extent, 3 * half_extent]; outward cameras sit at the
    origin and see depth [0, 2 * half_extent].
    """
    cameras = []
    frame_rotation = frame.rotation_matrix()
    for name in VIEW_NAMES:
        local_rotation = _view_rotation(name, look_inward)
        if look_inward:
            offset = 2.0 * half_extent * np.asarray(_VIEW_DIRECTIONS[name])
            near, far = half_extent, 3.0 * half_extent
        else:
            offset = np.zeros(3)
            near, far = 0.0, 2.0 * half_extent
        pose = Pose(frame.translation + frame_rotation @ offset,
                    matrix_to_quat(frame_rotation @ local_rotation))
        cameras.append(VirtualCamera(pose, half_extent, near, far, resolution))
    return CameraRig(tuple(cameras), anchor if anchor is not None else frame, frame, stage, clamped)


def camera_rig_from_action(a_pose: Pose, stage: int, workspace: Workspace, resolution: int = 64,
                           zoom_in: bool = True, follow_rotation: bool = True,
                           look_inward: bool = True, inflation: float = 0.5) -> CameraRig:
    """
    Map an action pose to the virtual camera rig of a stage.

    Stage 0 ignores the pose and returns the fixed global rig around the workspace,
    always looking inward; look_inward only affects the in-hand rigs of later stages.
    Later stages center the rig on the pose translation, orient it by the pose
    rotation (or the world axes when follow_rotation is False) and shrink the
    extent to workspace_half_extent / 2**stage when zoom_in is set.

    Args:
        a_pose: Previous stage action pose
        stage: Stage index (0 = global)
        workspace: Workspace box
        resolution: Image side in pixels
        zoom_in: Halve the extent per stage
        follow_rotation: Orient the rig with the action rotation
        look_inward: Cameras look at the anchor from outside
        inflation: Tolerated excursion outside the workspace, as a fraction of its half extent

    Returns:
        CameraRig for the stage

    Raises:
        GeometryError: For a negative stage
        RigDivergenceError: If the pose lies outside the inflated workspace
    """
    if stage < 0:
        raise GeometryError(f"stage must be non-negative, got {stage}")

    if stage == 0:
        frame = Pose(workspace.center)
        return build_rig(frame, workspace.half_extent, resolution, 0, frame)

    translation = a_pose.translation
    margin = inflation * workspace.half_extent
    if not workspace.contains(translation, margin):
        logger.error(f"Stage {stage} action {translation} left the inflated workspace")
        raise RigDivergenceError(
            f"Action translation {translation.tolist()} is outside the workspace inflated by {margin:.3f} m"
        )
    clamped = not workspace.contains(translation)
    if clamped:
        logger.warning(f"Clamping stage {stage} rig anchor {translation.tolist()} into the workspace")
        translation = workspace.clamp(translation)

    half_extent = workspace.half_extent / (2 ** stage) if zoom_in else workspace.half_extent
    anchor = Pose(translation, a_pose.rotation)
    frame = anchor if follow_rotation else Pose(translation)
    return build_rig(frame, half_extent, resolution, stage, anchor, look_inward, clamped)
