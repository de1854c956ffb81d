"""
Tests for the synthetic tasks, the kinematic world and demonstration generation.
"""

import numpy as np
import pytest

from vihe.bench.generate import (
    OBSERVATION_DENSE, build_trajectory, default_sensors, generate_dataset, generate_demo, observe, replay,
    replay_demonstration,
)
from vihe.bench.tasks import MIN_GAP, TASKS, PegInsert, ReachColor, StackOffset, get_task, place_objects, yaw_error_deg
from vihe.bench.world import HOME_POSE, KinematicWorld, box_surface
from vihe.core.geometry import Pose
from vihe.exceptions import TaskError
from vihe.pipeline.dataset import ActionLabel, load_dataset
from vihe.pipeline.keyposes import extract_keyposes


@pytest.fixture(params=sorted(TASKS))
def task(request):
    return get_task(request.param)


class TestTasks:
    """Scene sampling and oracle actions."""

    def test_objects_keep_their_distance(self, task):
        for seed in range(5):
            scene = task.sample_scene(np.random.default_rng(seed))
            objects = scene.objects
            for i, a in enumerate(objects):
                for b in objects[i + 1:]:
                    gap = np.hypot(a.position[0] - b.position[0], a.position[1] - b.position[1])
                    assert gap - a.footprint_radius - b.footprint_radius >= MIN_GAP

    def test_oracle_solves_scene(self, task):
        for seed in range(3):
            scene = task.sample_scene(np.random.default_rng(seed))
            world = replay(task, scene, task.oracle_actions(scene))
            assert task.success(world)

    def test_instruction_uses_task_vocabulary(self, task):
        scene = task.sample_scene(np.random.default_rng(0))
        assert set(scene.instruction.split()) <= set(task.vocabulary())

    def test_trajectory_keyposes_match_detection(self, task):
        scene = task.sample_scene(np.random.default_rng(11))
        actions = task.oracle_actions(scene)
        poses, gripper, keyposes = build_trajectory(HOME_POSE, True, actions)
        assert len(keyposes) == len(actions)
        assert extract_keyposes(poses, gripper) == keyposes
        for frame, action in zip(keyposes, actions):
            assert poses[frame].isclose(action.pose)
            assert gripper[frame] == action.gripper_open

    def test_unplaceable(self):
        specs = [("a", 'block', 'red', (1.0, 1.0, 0.1), 0.05), ("b", 'block', 'blue', (1.0, 1.0, 0.1), 0.05)]
        with pytest.raises(TaskError):
            place_objects(np.random.default_rng(0), specs, tries=3)

    def test_unknown_task(self):
        with pytest.raises(TaskError):
            get_task("fold-laundry")

    def test_wrong_pose_fails(self):
        task = ReachColor()
        scene = task.sample_scene(np.random.default_rng(2))
        actions = task.oracle_actions(scene)
        missed = ActionLabel(Pose(actions[-1].pose.translation + [0.05, 0.0, 0.0], actions[-1].pose.rotation),
                             True, False)
        assert not task.success(replay(task, scene, actions[:-1] + [missed]))


def test_yaw_error_is_symmetric_modulo_quarter_turn():
    assert yaw_error_deg(10.0, 100.0) == pytest.approx(0.0)
    assert yaw_error_deg(5.0, -5.0) == pytest.approx(10.0)
    assert yaw_error_deg(-5.0, 5.0) == pytest.approx(10.0)
    assert yaw_error_deg(0.0, 45.0) == pytest.approx(45.0)


class TestKinematicWorld:
    """Grasp, carry and release."""

    def test_grasp_and_release(self):
        task = StackOffset()
        scene = task.sample_scene(np.random.default_rng(4))
        actions = task.oracle_actions(scene)
        source = scene.roles['source']
        world = KinematicWorld(scene)

        world.execute(actions[0])
        assert world.held is None
        world.execute(actions[1])
        assert world.held == source and not world.gripper_open
        world.execute(actions[2])
        assert world.object_pose(source).translation[2] == pytest.approx(scene.role('source').position[2] + 0.12)
        world.execute(actions[3])
        world.execute(actions[4])
        assert world.held is None and world.gripper_open
        np.testing.assert_allclose(world.object_pose(source).translation, actions[4].pose.translation, atol=1e-9)

    def test_closing_far_from_objects_grasps_nothing(self):
        scene = ReachColor().sample_scene(np.random.default_rng(0))
        world = KinematicWorld(scene)
        world.execute(ActionLabel(Pose(np.array([0.0, 0.0, 0.6])), False, True))
        assert world.held is None and not world.gripper_open

    def test_fixture_has_an_opening(self):
        points = box_surface(PegInsert.fixture, hole=PegInsert.hole_width)
        top = points[np.isclose(points[:, 2], PegInsert.fixture[2] / 2)]
        inside = (np.abs(top[:, 0]) < PegInsert.hole_width / 2) & (np.abs(top[:, 1]) < PegInsert.hole_width / 2)
        assert not inside.any()


class TestGeneration:
    """Demonstrations and datasets."""

    def test_dense_demo_is_valid(self, task):
        demo = generate_demo(task, np.random.default_rng(3))
        demo.validate(v_eps=1e-3)
        assert sorted(demo.clouds) == demo.observation_frames
        assert replay_demonstration(demo)

    def test_sensor_observation(self):
        scene = ReachColor().sample_scene(np.random.default_rng(1))
        world = KinematicWorld(scene)
        cloud = observe(world, default_sensors(resolution=48))
        assert len(cloud) > 0
        assert np.all(np.abs(cloud.points[:, :2]) < 0.5)
        assert cloud.points[:, 2].min() > -0.03  # half-pixel ray error

    def test_dataset_is_reproducible(self, tmp_path):
        first = generate_dataset(["reach-color"], 1, 5, tmp_path / "a", observation=OBSERVATION_DENSE)
        second = generate_dataset(["reach-color"], 1, 5, tmp_path / "b", observation=OBSERVATION_DENSE)
        files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
        for name in files:
            assert (first / name).read_bytes() == (second / name).read_bytes()
        demos = load_dataset(first)
        assert len(demos) == 1 and demos[0].task == "reach-color"

    def test_seed_changes_dataset(self, tmp_path):
        first = generate_dataset(["reach-color"], 1, 5, tmp_path / "a", observation=OBSERVATION_DENSE)
        second = generate_dataset(["reach-color"], 1, 6, tmp_path / "b", observation=OBSERVATION_DENSE)
        assert load_dataset(first)[0].scene != load_dataset(second)[0].scene

    def test_tampered_demo_fails_replay(self):
        demo = generate_demo(ReachColor(), np.random.default_rng(8))
        last = demo.actions[-1]
        demo.actions[-1] = ActionLabel(Pose(last.pose.translation + [0.0, 0.1, 0.0], last.pose.rotation),
                                       last.gripper_open, last.collision_allowed)
        assert not replay_demonstration(demo)

    @pytest.mark.parametrize("n, observation", [(0, OBSERVATION_DENSE), (1, "lidar")])
    def test_invalid_arguments(self, tmp_path, n, observation):
        with pytest.raises(TaskError):
            generate_dataset(["reach-color"], n, 0, tmp_path, observation=observation)
