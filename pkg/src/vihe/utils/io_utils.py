"""
File format utilities for VIHE.

This module provides centralized functionality for:
- Binary little-endian PLY point clouds (x, y, z, red, green, blue)
- PNG dumps of rendered views, one file per channel group
- Raw PPM dumps of the RGB map
- Flat little-endian float32 dumps of full 7-channel tensors
"""

import logging
from pathlib import Path
from typing import Dict, Union

import numpy as np
from PIL import Image

from vihe.core.renderer import PointCloud, RenderedStage, RenderedView
from vihe.core.geometry import VIEW_NAMES
from vihe.exceptions import RenderError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_PLY_VERTEX = np.dtype([
    ('x', '<f4'), ('y', '<f4'), ('z', '<f4'),
    ('red', 'u1'), ('green', 'u1'), ('blue', 'u1'),
])
_PLY_TYPES = {
    'float': '<f4', 'float32': '<f4', 'double': '<f8', 'float64': '<f8',
    'uchar': 'u1', 'uint8': 'u1', 'char': 'i1', 'int8': 'i1',
    'ushort': '<u2', 'uint16': '<u2', 'short': '<i2', 'int16': '<i2',
    'uint': '<u4', 'uint32': '<u4', 'int': '<i4', 'int32': '<i4',
}


def write_ply(path: PathLike, cloud: PointCloud) -> None:
    """
    Write a point cloud as binary little-endian PLY.

    Args:
        path: Output file
        cloud: Point cloud; colors are quantized to 8 bits
    """
    vertices = np.empty(len(cloud), dtype=_PLY_VERTEX)
    vertices['x'], vertices['y'], vertices['z'] = cloud.points.T.astype(np.float32)
    rgb = np.rint(cloud.colors * 255.0).astype(np.uint8)
    vertices['red'], vertices['green'], vertices['blue'] = rgb.T
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, 'wb') as f:
        f.write(header.encode('ascii'))
        f.write(vertices.tobytes())
    logger.debug(f"Wrote {len(cloud)} points to {path}")


def read_ply(path: PathLike) -> PointCloud:
    """
    Read a binary little-endian PLY with x, y, z, red, green, blue vertex properties.

    Raises:
        RenderError: If the file is not a supported PLY
    """
    with open(path, 'rb') as f:
        payload = f.read()
    marker = payload.find(b"end_header\n")
    if not payload.startswith(b"ply") or marker < 0:
        raise RenderError(f"Not a PLY file: {path}")
    header_lines = payload[:marker].decode('ascii').splitlines()
    body = payload[marker + len(b"end_header\n"):]

    count = None
    fields = []
    in_vertex = False
    for line in header_lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == 'format' and parts[1] != 'binary_little_endian':
            raise RenderError(f"Unsupported PLY format '{parts[1]}' in {path}")
        if parts[0] == 'element':
            in_vertex = parts[1] == 'vertex'
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == 'property' and in_vertex:
            if parts[1] == 'list' or parts[1] not in _PLY_TYPES:
                raise RenderError(f"Unsupported PLY property '{line}' in {path}")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    names = {name for name, _ in fields}
    missing = {'x', 'y', 'z', 'red', 'green', 'blue'} - names
    if count is None or missing:
        raise RenderError(f"PLY {path} lacks vertex properties {sorted(missing)}")

    vertices = np.frombuffer(body, dtype=np.dtype(fields), count=count)
    points = np.stack([vertices['x'], vertices['y'], vertices['z']], axis=1).astype(np.float64)
    colors = np.stack([vertices['red'], vertices['green'], vertices['blue']], axis=1).astype(np.float64)
    if np.issubdtype(vertices.dtype['red'], np.integer):
        colors = colors / 255.0
    return PointCloud(points, colors)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_view_images(view: RenderedView, out_dir: PathLike, prefix: str) -> Dict[str, Path]:
    """
    Dump one rendered view: PNG per channel group, PPM for RGB, raw float32 for all 7 channels.

    Args:
        view: Rendered view
        out_dir: Output directory (created if needed)
        prefix: File name prefix, e.g. 'stage1_top'

    Returns:
        Mapping from artifact kind to written path
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    normalized = view.network_input()
    paths = {
        'rgb_png': out_dir / f"{prefix}_rgb.png",
        'depth_png': out_dir / f"{prefix}_depth.png",
        'xyz_png': out_dir / f"{prefix}_xyz.png",
        'rgb_ppm': out_dir / f"{prefix}_rgb.ppm",
        'channels_f32': out_dir / f"{prefix}_channels.f32",
    }
    Image.fromarray(_to_uint8(view.rgb)).save(paths['rgb_png'], format='PNG')
    Image.fromarray(_to_uint8(normalized[..., 3])).save(paths['depth_png'], format='PNG')
    Image.fromarray(_to_uint8(0.5 * (normalized[..., 4:7] + 1.0))).save(paths['xyz_png'], format='PNG')
    Image.fromarray(_to_uint8(view.rgb)).save(paths['rgb_ppm'], format='PPM')
    view.channels.astype('<f4').tofile(paths['channels_f32'])
    return paths


def save_stage_images(stage: RenderedStage, out_dir: PathLike) -> Dict[str, Dict[str, Path]]:
    """Dump the five views of a stage as stage{i}_{view}_* files."""
    written = {}
    for name, view in zip(VIEW_NAMES, stage.views):
        written[name] = save_view_images(view, out_dir, f"stage{stage.stage}_{name}")
    logger.info(f"Wrote stage {stage.stage} views to {out_dir}")
    return written


def read_channels_f32(path: PathLike, resolution: int) -> np.ndarray:
    data = np.fromfile(path, dtype='<f4')
    expected = resolution * resolution * 7
    if data.size != expected:
        raise RenderError(f"{path} holds {data.size} floats, expected {expected}")
    return data.reshape(resolution, resolution, 7)
