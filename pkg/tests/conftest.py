import numpy as np
import pytest

from vihe.core.geometry import Pose, Workspace, camera_rig_from_action
from vihe.core.renderer import PointCloud, render_stage
from vihe.model.config import ModelConfig
from vihe.model.network import VIHENetwork
from vihe.model.tokens import Proprioception


@pytest.fixture
def rng():
    """Deterministic generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def workspace():
    """Default 1 m workspace with the table at z = 0."""
    return Workspace((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0))


@pytest.fixture
def tiny_config():
    """Smallest model that exercises every component (2 stages, 16 px renders)."""
    return ModelConfig(stages=2, image_resolution=16, patch=4, language_tokens=4, layers=1,
                       model_dim=24, heads=2, mlp_ratio=2, vocab_buckets=64, seed=3)


@pytest.fixture
def tiny_network(tiny_config):
    return VIHENetwork(tiny_config)


@pytest.fixture
def scene_cloud(rng):
    """A table plane with a colored box near the center."""
    xy = rng.uniform(-0.45, 0.45, size=(3000, 2))
    table = np.column_stack([xy, np.zeros(len(xy))])
    box = rng.uniform([-0.05, -0.05, 0.0], [0.05, 0.05, 0.1], size=(1500, 3))
    points = np.concatenate([table, box])
    colors = np.concatenate([np.full((len(table), 3), 0.5), np.tile([0.9, 0.1, 0.1], (len(box), 1))])
    return PointCloud(points, colors)


@pytest.fixture
def proprio():
    return Proprioception(True, 0.0, Pose(np.array([0.0, 0.0, 0.4])))


@pytest.fixture
def target_pose():
    """A reachable action pose above the box."""
    return Pose.from_euler_deg([0.02, -0.03, 0.15], [180.0, 0.0, 30.0])


def render_stages(cloud, config, workspace, anchor, count=None):
    """Rendered stages 0..count-1 with refinement rigs anchored at anchor."""
    count = config.stages if count is None else count
    stages = []
    for stage in range(count):
        rig = camera_rig_from_action(Pose.identity() if stage == 0 else anchor, stage, workspace,
                                     config.image_resolution, zoom_in=config.zoom_in,
                                     follow_rotation=config.follow_rotation, look_inward=config.look_inward)
        stages.append(render_stage(cloud, rig))
    return stages


@pytest.fixture
def stage_renderer():
    return render_stages
