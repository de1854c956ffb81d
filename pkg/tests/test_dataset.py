"""
Tests for demonstrations, their on-disk layout and training samples.
"""

import json

import numpy as np
import pytest

from vihe.bench.generate import build_trajectory
from vihe.core.geometry import Pose
from vihe.core.renderer import PointCloud
from vihe.exceptions import DatasetError
from vihe.pipeline.dataset import (
    META_FILE, TRAJECTORY_FILE, ActionLabel, Demonstration, build_samples, load_dataset, load_demonstration,
    save_dataset, save_demonstration,
)


def small_cloud(rng, n=50):
    return PointCloud(rng.uniform(-0.1, 0.1, size=(n, 3)), rng.uniform(size=(n, 3)))


@pytest.fixture
def actions():
    return [
        ActionLabel(Pose.from_euler_deg([0.05, 0.0, 0.2], [180.0, 0.0, 0.0]), True, True),
        ActionLabel(Pose.from_euler_deg([0.05, 0.0, 0.05], [180.0, 0.0, 0.0]), False, False),
    ]


@pytest.fixture
def demo(rng, actions):
    poses, gripper, keyposes = build_trajectory(Pose(np.array([0.0, 0.0, 0.4])), True, actions)
    clouds = {frame: small_cloud(rng) for frame in [0] + keyposes[:-1]}
    return Demonstration("pick up the block", "reach-color", poses, gripper, keyposes, actions, clouds,
                         {"note": "synthetic"})


class TestDemonstration:
    """In-memory invariants."""

    def test_layout(self, demo):
        assert demo.keyposes == [12, 21]
        assert demo.frame_count == 22
        assert demo.observation_frames == [0, 12]
        demo.validate(v_eps=1e-3)

    def test_samples(self, demo, actions):
        samples = demo.samples(demo_index=3)
        assert len(samples) == 2
        assert [s.proprio.timestep for s in samples] == [0.0, 0.5]
        assert samples[0].cloud is demo.clouds[0]
        assert samples[1].proprio.pose.isclose(actions[0].pose)
        assert samples[1].action is actions[1]
        assert all(s.demo_index == 3 for s in samples)

    def test_empty_instruction(self, demo):
        demo.instruction = ""
        with pytest.raises(DatasetError):
            demo.validate()

    def test_keyposes_must_end_on_final_frame(self, demo):
        demo.keyposes = [12, 20]
        with pytest.raises(DatasetError):
            demo.validate()

    def test_action_must_match_trajectory(self, demo, actions):
        demo.actions = [actions[1], actions[1]]
        with pytest.raises(DatasetError):
            demo.validate()

    def test_missing_cloud(self, demo):
        del demo.clouds[12]
        with pytest.raises(DatasetError):
            demo.validate()

    def test_labels_must_match_detection(self, demo, actions):
        demo.keyposes = [21]
        demo.actions = [actions[1]]
        demo.validate()
        with pytest.raises(DatasetError, match="differ from detected"):
            demo.validate(v_eps=1e-3)


class TestStorage:
    """meta.json, trajectory.bin and per-frame PLY files."""

    def test_roundtrip(self, tmp_path, demo):
        save_demonstration(demo, tmp_path / "d0")
        assert {p.name for p in (tmp_path / "d0").iterdir()} == {
            META_FILE, TRAJECTORY_FILE, "frame_0000.ply", "frame_0012.ply"}
        loaded = load_demonstration(tmp_path / "d0")
        assert loaded.instruction == demo.instruction and loaded.task == demo.task
        assert loaded.keyposes == demo.keyposes
        assert loaded.gripper_open == demo.gripper_open
        assert loaded.scene == {"note": "synthetic"}
        assert all(a.isclose(b, atol=1e-12) for a, b in zip(loaded.poses, demo.poses))
        np.testing.assert_array_equal(loaded.clouds[12].points, demo.clouds[12].points.astype(np.float32))

    def test_trajectory_record_size(self, tmp_path, demo):
        save_demonstration(demo, tmp_path / "d0")
        assert (tmp_path / "d0" / TRAJECTORY_FILE).stat().st_size == 56 * demo.frame_count

    def test_missing_meta(self, tmp_path):
        with pytest.raises(DatasetError):
            load_demonstration(tmp_path)

    def test_truncated_trajectory(self, tmp_path, demo):
        path = save_demonstration(demo, tmp_path / "d0")
        payload = (path / TRAJECTORY_FILE).read_bytes()
        (path / TRAJECTORY_FILE).write_bytes(payload[:-10])
        with pytest.raises(DatasetError):
            load_demonstration(path)

    def test_frame_count_mismatch(self, tmp_path, demo):
        path = save_demonstration(demo, tmp_path / "d0")
        meta = json.loads((path / META_FILE).read_text())
        meta["frame_count"] += 1
        (path / META_FILE).write_text(json.dumps(meta))
        with pytest.raises(DatasetError):
            load_demonstration(path)

    def test_missing_ply(self, tmp_path, demo):
        path = save_demonstration(demo, tmp_path / "d0")
        (path / "frame_0012.ply").unlink()
        with pytest.raises(DatasetError):
            load_demonstration(path)

    def test_dataset_roundtrip(self, tmp_path, demo):
        root = save_dataset([demo, demo], tmp_path / "data")
        assert sorted(p.name for p in root.iterdir()) == ["reach-color_0000", "reach-color_0001"]
        demos = load_dataset(root)
        samples = build_samples(demos)
        assert len(samples) == 4
        assert [s.demo_index for s in samples] == [0, 0, 1, 1]

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "absent")
