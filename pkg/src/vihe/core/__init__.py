"""
Core geometry and rendering.

This module contains:
- geometry: SE(3) poses, Euler bins, workspace and virtual camera rigs
- renderer: Orthographic point-cloud rasterizer and RGB-D ingestion
"""

from .geometry import CameraRig, Pose, VirtualCamera, Workspace, camera_rig_from_action, compose, inverse
from .renderer import PointCloud, RenderedStage, RenderedView, render, render_stage

__all__ = [
    'CameraRig',
    'Pose',
    'VirtualCamera',
    'Workspace',
    'camera_rig_from_action',
    'compose',
    'inverse',
    'PointCloud',
    'RenderedStage',
    'RenderedView',
    'render',
    'render_stage',
]
