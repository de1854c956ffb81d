"""
Tests for PLY, PNG, PPM and raw channel dumps.
"""

import numpy as np
import pytest
from PIL import Image

from vihe.core.geometry import camera_rig_from_action
from vihe.core.renderer import PointCloud, render_stage
from vihe.exceptions import RenderError
from vihe.utils.io_utils import read_channels_f32, read_ply, save_stage_images, save_view_images, write_ply


class TestPly:
    """Binary little-endian PLY round trips."""

    def test_points_roundtrip_at_float32(self, tmp_path, scene_cloud):
        path = tmp_path / "scene.ply"
        write_ply(path, scene_cloud)
        restored = read_ply(path)
        assert len(restored) == len(scene_cloud)
        np.testing.assert_array_equal(restored.points, scene_cloud.points.astype(np.float32).astype(np.float64))
        np.testing.assert_allclose(restored.colors, scene_cloud.colors, atol=0.5 / 255.0)

    def test_header_is_ascii(self, tmp_path, scene_cloud):
        path = tmp_path / "scene.ply"
        write_ply(path, scene_cloud)
        head = path.read_bytes()[:200]
        assert head.startswith(b"ply\nformat binary_little_endian 1.0\n")
        assert f"element vertex {len(scene_cloud)}".encode() in head

    def test_extra_properties_are_tolerated(self, tmp_path):
        header = (b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
                  b"property float x\nproperty float y\nproperty float z\nproperty float nx\n"
                  b"property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
        body = np.array([1.0, 2.0, 3.0, 0.0], dtype='<f4').tobytes() + bytes([255, 0, 0])
        path = tmp_path / "extra.ply"
        path.write_bytes(header + body)
        cloud = read_ply(path)
        np.testing.assert_array_equal(cloud.points, [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(cloud.colors, [[1.0, 0.0, 0.0]])

    def test_ascii_ply_rejected(self, tmp_path):
        path = tmp_path / "ascii.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(RenderError):
            read_ply(path)

    def test_not_a_ply(self, tmp_path):
        path = tmp_path / "junk.ply"
        path.write_bytes(b"hello")
        with pytest.raises(RenderError):
            read_ply(path)

    def test_missing_color_rejected(self, tmp_path):
        header = (b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
                  b"property float x\nproperty float y\nproperty float z\nend_header\n")
        path = tmp_path / "nocolor.ply"
        path.write_bytes(header + np.zeros(3, dtype='<f4').tobytes())
        with pytest.raises(RenderError):
            read_ply(path)


class TestViewImages:
    """Per-view image dumps."""

    @pytest.fixture
    def stage(self, scene_cloud, workspace, target_pose):
        return render_stage(scene_cloud, camera_rig_from_action(target_pose, 1, workspace, 16))

    def test_view_artifacts(self, tmp_path, stage):
        view = stage.views[0]
        paths = save_view_images(view, tmp_path, "stage1_top")
        assert set(paths) == {'rgb_png', 'depth_png', 'xyz_png', 'rgb_ppm', 'channels_f32'}
        assert all(path.exists() for path in paths.values())
        with Image.open(paths['rgb_png']) as image:
            assert image.size == (16, 16) and image.mode == 'RGB'
        with Image.open(paths['depth_png']) as image:
            assert image.mode == 'L'
        with Image.open(paths['rgb_ppm']) as image:
            assert image.format == 'PPM'

    def test_channels_roundtrip(self, tmp_path, stage):
        view = stage.views[2]
        paths = save_view_images(view, tmp_path, "v")
        np.testing.assert_array_equal(read_channels_f32(paths['channels_f32'], 16), view.channels.astype(np.float32))
        with pytest.raises(RenderError):
            read_channels_f32(paths['channels_f32'], 8)

    def test_stage_file_names(self, tmp_path, stage):
        written = save_stage_images(stage, tmp_path)
        assert set(written) == {"top", "front", "back", "left", "right"}
        assert (tmp_path / "stage1_front_rgb.png").exists()
        assert (tmp_path / "stage1_right_channels.f32").exists()


def test_cloud_survives_ply_then_render(tmp_path, workspace, target_pose):
    points = np.array([[0.0, 0.0, 0.05], [0.02, -0.01, 0.1]])
    cloud = PointCloud(points, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    write_ply(tmp_path / "c.ply", cloud)
    rig = camera_rig_from_action(target_pose, 0, workspace, 16)
    assert render_stage(read_ply(tmp_path / "c.ply"), rig).views[0].hit_mask.any()
