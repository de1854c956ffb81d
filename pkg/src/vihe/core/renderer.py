"""
Renderer module for orthographic point-cloud rasterization.

This module turns a scene point cloud into the 7-channel virtual views
(RGB, depth, world xyz) consumed by the network, and ingests RGB-D frames
from simulated pinhole sensors into point clouds.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numba import njit

from vihe.core.geometry import CameraRig, Pose, VirtualCamera, camera_projection, inverse, orthographic_project
from vihe.exceptions import RenderError

logger = logging.getLogger(__name__)

CHANNELS = 7
DEPTH_QUANTUM = 1e-9


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Scene points (N, 3) in meters, world frame, with colors (N, 3) in [0, 1]."""
    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self) -> None:
        points = np.ascontiguousarray(self.points, dtype=np.float64)
        colors = np.asarray(self.colors, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
            raise RenderError(f"Point cloud needs an (N>=1, 3) array, got {points.shape}")
        if colors.shape != points.shape:
            raise RenderError(f"Colors shape {colors.shape} does not match points {points.shape}")
        if not np.all(np.isfinite(points)):
            raise RenderError("Point cloud contains NaN or infinite coordinates")
        colors = np.ascontiguousarray(np.clip(np.nan_to_num(colors), 0.0, 1.0))
        points.setflags(write=False)
        colors.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return self.points.shape[0]

    def canonical(self) -> "PointCloud":
        """Points sorted lexicographically by (x, y, z, r, g, b)."""
        keys = np.concatenate([self.points, self.colors], axis=1)
        order = np.lexsort(keys.T[::-1])
        return PointCloud(self.points[order], self.colors[order])

    def subset(self, indices: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[indices], self.colors[indices])

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            raise RenderError("Cannot concatenate an empty list of clouds")
        return PointCloud(np.concatenate([c.points for c in clouds]),
                          np.concatenate([c.colors for c in clouds]))


@dataclass(frozen=True, eq=False)
class RenderedView:
    """
    One orthographic view: channels (H, W, 7) hold rgb, camera-frame depth in
    meters and world xyz. Background pixels hold rgb 0, depth = far and
    xyz = origin (the rig anchor position).
    """
    camera: VirtualCamera
    channels: np.ndarray
    hit_mask: np.ndarray
    origin: np.ndarray

    @property
    def rgb(self) -> np.ndarray:
        return self.channels[..., 0:3]

    @property
    def depth(self) -> np.ndarray:
        return self.channels[..., 3]

    @property
    def xyz(self) -> np.ndarray:
        return self.channels[..., 4:7]

    def network_input(self) -> np.ndarray:
        """
        float32 (H, W, 7) network input: depth mapped to [0, 1] over [near, far],
        xyz expressed relative to the origin in units of half_extent.
        """
        camera = self.camera
        out = np.empty(self.channels.shape, dtype=np.float32)
        out[..., 0:3] = self.rgb
        out[..., 3] = np.clip((self.depth - camera.near) / (camera.far - camera.near), 0.0, 1.0)
        out[..., 4:7] = (self.xyz - self.origin) / camera.half_extent
        return out


@dataclass(frozen=True, eq=False)
class RenderedStage:
    """The five views of one stage, rendered from a single rig."""
    views: Tuple[RenderedView, ...]
    stage: int
    rig: CameraRig

    def __post_init__(self) -> None:
        resolutions = {view.channels.shape[0] for view in self.views}
        if len(resolutions) != 1:
            raise RenderError(f"Stage views disagree on resolution: {sorted(resolutions)}")

    @property
    def resolution(self) -> int:
        return self.views[0].channels.shape[0]

    def network_input(self) -> np.ndarray:
        """(views, H, W, 7) float32 stack."""
        return np.stack([view.network_input() for view in self.views])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels; pixel (u, v) has its center at integer coordinates."""
    fx: float
    fy: float
    cx: float
    cy: float


IntrinsicsLike = Union[CameraIntrinsics, Sequence[float]]


def _as_intrinsics(intrinsics: IntrinsicsLike) -> CameraIntrinsics:
    if isinstance(intrinsics, CameraIntrinsics):
        return intrinsics
    values = list(intrinsics)
    if len(values) != 4:
        raise RenderError(f"Intrinsics need fx, fy, cx, cy, got {values}")
    return CameraIntrinsics(*(float(v) for v in values))


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _bucket_nearest(points, rotation, translation, half_extent, scale, near, far, resolution, radius):
    # One bucket per pixel, padded by the splat radius so discs centered just
    # outside the image still reach it. Visiting points in index order and
    # replacing only on a strictly nearer depth keeps the lowest index on ties.
    pad = resolution + 2 * radius
    owner = np.full(pad * pad, -1, np.int64)
    key = np.zeros(pad * pad, np.int64)
    depth = np.zeros(pad * pad, np.float64)
    lo = -radius
    hi = resolution + radius
    for i in range(points.shape[0]):
        u, v, d = orthographic_project(points[i, 0], points[i, 1], points[i, 2], rotation, translation,
                                       half_extent, scale)
        if not (d >= near and d <= far):
            continue
        fu = np.floor(u)
        fv = np.floor(v)
        if fu < lo or fu >= hi or fv < lo or fv >= hi:
            continue
        cell = (np.int64(fv) + radius) * pad + np.int64(fu) + radius
        q = np.int64(np.rint(d / DEPTH_QUANTUM))
        if owner[cell] < 0 or q < key[cell]:
            owner[cell] = i
            key[cell] = q
            depth[cell] = d
    return owner, key, depth


@njit(cache=True, nogil=True)
def _splat_buckets(owner, key, depth, points, colors, far, origin, resolution, radius, channels, hit):
    # Each pixel takes the (depth, index) minimum over the buckets inside its disc.
    pad = resolution + 2 * radius
    r2 = radius * radius
    for y in range(resolution):
        for x in range(resolution):
            best = -1
            best_key = np.int64(0)
            best_depth = 0.0
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if dx * dx + dy * dy > r2:
                        continue
                    cell = (y + dy + radius) * pad + x + dx + radius
                    j = owner[cell]
                    if j < 0:
                        continue
                    if best < 0 or key[cell] < best_key or (key[cell] == best_key and j < best):
                        best = j
                        best_key = key[cell]
                        best_depth = depth[cell]
            if best < 0:
                channels[y, x, 0] = 0.0
                channels[y, x, 1] = 0.0
                channels[y, x, 2] = 0.0
                channels[y, x, 3] = far
                channels[y, x, 4] = origin[0]
                channels[y, x, 5] = origin[1]
                channels[y, x, 6] = origin[2]
                hit[y, x] = False
            else:
                channels[y, x, 0] = colors[best, 0]
                channels[y, x, 1] = colors[best, 1]
                channels[y, x, 2] = colors[best, 2]
                channels[y, x, 3] = best_depth
                channels[y, x, 4] = points[best, 0]
                channels[y, x, 5] = points[best, 1]
                channels[y, x, 6] = points[best, 2]
                hit[y, x] = True


@njit(cache=True, nogil=True)
def _render_kernel(points, colors, rotation, translation, half_extent, scale, near, far, origin,
                   resolution, radius, channels, hit):
    owner, key, depth = _bucket_nearest(points, rotation, translation, half_extent, scale, near, far,
                                        resolution, radius)
    _splat_buckets(owner, key, depth, points, colors, far, origin, resolution, radius, channels, hit)


def _focus_point(camera: VirtualCamera) -> np.ndarray:
    forward = camera.pose.rotation_matrix()[:, 2]
    return camera.pose.translation + forward * 0.5 * (camera.near + camera.far)


def render(cloud: PointCloud, camera: VirtualCamera, splat_radius: int = 1,
           origin: Optional[np.ndarray] = None) -> RenderedView:
    """
    Z-buffered orthographic splatting of a point cloud.

    Points are first reduced to the nearest one per pixel bucket; each pixel
    then takes the nearest bucket winner within splat_radius of it. Ties within
    the depth quantum go to the lowest point index.

    Args:
        cloud: Scene point cloud
        camera: Orthographic camera
        splat_radius: Disc radius in pixels (0 = single pixel)
        origin: World position written to background xyz (defaults to the camera focus point)

    Returns:
        RenderedView with hit mask

    Raises:
        RenderError: If splat_radius is negative
    """
    if splat_radius < 0:
        raise RenderError(f"splat_radius must be >= 0, got {splat_radius}")
    origin = _focus_point(camera) if origin is None else np.asarray(origin, dtype=np.float64)
    res = camera.resolution
    channels = np.empty((res, res, CHANNELS), dtype=np.float64)
    hit = np.empty((res, res), dtype=np.bool_)
    rotation, translation, half_extent, scale = camera_projection(camera)
    _render_kernel(cloud.points, cloud.colors, rotation, translation, half_extent, scale,
                   float(camera.near), float(camera.far), np.ascontiguousarray(origin), res, int(splat_radius),
                   channels, hit)
    if not hit.any():
        logger.debug("Rendered an empty view (no point inside the frustum)")
    return RenderedView(camera, channels, hit, origin)


def render_stage(cloud: PointCloud, rig: CameraRig, splat_radius: int = 1, workers: int = 1) -> RenderedStage:
    """
    Render the five views of a rig.

    Args:
        cloud: Scene point cloud (shared, read-only)
        rig: Camera rig of the stage
        splat_radius: Disc radius in pixels
        workers: Number of threads used to render views concurrently

    Returns:
        RenderedStage
    """
    origin = rig.center

    def _one(camera: VirtualCamera) -> RenderedView:
        return render(cloud, camera, splat_radius, origin)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            views = tuple(pool.map(_one, rig.cameras))
    else:
        views = tuple(_one(camera) for camera in rig.cameras)
    return RenderedStage(views, rig.stage, rig)


# ---------------------------------------------------------------------------
# RGB-D ingestion
# ---------------------------------------------------------------------------

def unproject_rgbd(depth_image: np.ndarray, rgb_image: np.ndarray, intrinsics: IntrinsicsLike,
                   extrinsics: Pose) -> PointCloud:
    """
    Back-project a pinhole RGB-D frame into a world-frame point cloud.

    Args:
        depth_image: (H, W) depth in meters, 0 marks invalid pixels
        rgb_image: (H, W, 3) colors, uint8 or float in [0, 1]
        intrinsics: fx, fy, cx, cy in pixels
        extrinsics: Camera-to-world pose (camera looks along +z)

    Returns:
        PointCloud with one point per valid pixel

    Raises:
        RenderError: On mismatched image dimensions or when no pixel is valid
    """
    depth_image = np.asarray(depth_image, dtype=np.float64)
    rgb_image = np.asarray(rgb_image)
    if depth_image.ndim != 2:
        raise RenderError(f"Depth image must be (H, W), got {depth_image.shape}")
    if rgb_image.shape != depth_image.shape + (3,):
        raise RenderError(f"RGB image shape {rgb_image.shape} does not match depth {depth_image.shape}")
    k = _as_intrinsics(intrinsics)

    colors = rgb_image.astype(np.float64)
    if np.issubdtype(rgb_image.dtype, np.integer):
        colors = colors / 255.0

    valid = np.isfinite(depth_image) & (depth_image > 0.0)
    if not valid.any():
        raise RenderError("Depth image has no valid pixel")
    v, u = np.nonzero(valid)
    z = depth_image[v, u]
    local = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=1)
    return PointCloud(extrinsics.apply(local), colors[v, u])


def capture_rgbd(cloud: PointCloud, intrinsics: IntrinsicsLike, extrinsics: Pose,
                 shape: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Simulated pinhole RGB-D sensor: nearest point per pixel, depth 0 where empty.

    Args:
        cloud: Scene surface samples
        intrinsics: fx, fy, cx, cy in pixels
        extrinsics: Camera-to-world pose (camera looks along +z)
        shape: (H, W) of the sensor

    Returns:
        Tuple (depth (H, W) meters, rgb (H, W, 3) floats)
    """
    k = _as_intrinsics(intrinsics)
    height, width = shape
    local = inverse(extrinsics).apply(cloud.points)
    in_front = local[:, 2] > 1e-6
    z = np.where(in_front, local[:, 2], 1.0)
    u = np.rint(k.fx * local[:, 0] / z + k.cx)
    v = np.rint(k.fy * local[:, 1] / z + k.cy)
    keep = in_front & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    index = np.nonzero(keep)[0]
    pixel = (v[index] * width + u[index]).astype(np.int64)
    order = np.lexsort((index, z[index], pixel))
    pixel_sorted = pixel[order]
    first = np.ones(pixel_sorted.shape[0], dtype=bool)
    first[1:] = pixel_sorted[1:] != pixel_sorted[:-1]
    chosen = index[order[first]]

    depth = np.zeros(height * width)
    rgb = np.zeros((height * width, 3))
    depth[pixel_sorted[first]] = z[chosen]
    rgb[pixel_sorted[first]] = cloud.colors[chosen]
    return depth.reshape(height, width), rgb.reshape(height, width, 3)


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose of a camera at eye looking at target (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    matrix = np.eye(4)
    matrix[:3, :3] = np.stack([right, down, forward], axis=1)
    matrix[:3, 3] = eye
    return Pose.from_matrix(matrix)


def intrinsics_for_fov(width: int, height: int, fov_deg: float) -> CameraIntrinsics:
    focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return CameraIntrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0)
