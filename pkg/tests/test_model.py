"""
Tests for tokens, the stage mask, rotary attention, the network and decoding.
"""

import numpy as np
import pytest

from vihe.bench.tasks import TASKS, get_task
from vihe.core.geometry import Pose, camera_rig_from_action, compose, euler_angles_deg, inverse, project
from vihe.core.renderer import render_stage
from vihe.diffcore import functional as F
from vihe.diffcore.gradcheck import numerical_gradient, relative_error
from vihe.diffcore.tensor import Tensor
from vihe.exceptions import ConfigMismatchError, ModelError
from vihe.model.attention import AttentionBlock, rope_angles
from vihe.model.config import ModelConfig
from vihe.model.decode import candidate_grid, decode_action, decode_translation, score_candidates
from vihe.model.network import ActionPrediction, VIHENetwork, checkpoint_summary
from vihe.model.tokens import (
    KIND_IMAGE, KIND_LANGUAGE, KIND_PROPRIO, MASK_BLOCKED, PAD_TOKEN, Proprioception, StageMask, assemble_tokens,
    tokenize_language, word_bucket,
)


@pytest.fixture
def stages(scene_cloud, tiny_config, workspace, target_pose, stage_renderer):
    return stage_renderer(scene_cloud, tiny_config, workspace, target_pose)


class TestTokens:
    """Language hashing and token bookkeeping."""

    def test_tokenize_is_stable_and_case_insensitive(self):
        a = tokenize_language("Reach the RED block", 6, 64)
        b = tokenize_language("reach the red block!", 6, 64)
        np.testing.assert_array_equal(a, b)
        assert np.all(a[:4] >= 1) and np.all(a[:4] < 64)
        np.testing.assert_array_equal(a[4:], [0, 0])

    def test_tokenize_truncates(self):
        ids = tokenize_language("one two three four five", 3, 64)
        np.testing.assert_array_equal(ids, tokenize_language("one two three", 3, 64))

    def test_proprio_timestep_range(self):
        with pytest.raises(ModelError):
            Proprioception(True, 1.5, Pose.identity())

    def test_proprio_features(self, proprio):
        np.testing.assert_allclose(proprio.features(), [1, 0, 0, 0, 0.4, 1, 0, 0, 0])

    def test_empty_instruction_is_all_padding(self):
        np.testing.assert_array_equal(tokenize_language("", 4, 64), [PAD_TOKEN] * 4)
        np.testing.assert_array_equal(tokenize_language(" ?! ", 4, 64), [PAD_TOKEN] * 4)

    def test_task_vocabulary_has_no_bucket_collisions(self):
        words = sorted({word for task_id in TASKS for word in get_task(task_id).vocabulary()})
        buckets = [word_bucket(word, ModelConfig().vocab_buckets) for word in words]
        assert len(set(buckets)) == len(words)
        assert min(buckets) >= 1

    def test_gripper_flag_changes_proprio_token(self, tiny_network, proprio):
        closed = Proprioception(False, proprio.timestep, proprio.pose)
        opened = tiny_network.embedder.proprioception(proprio).data
        assert not np.array_equal(opened, tiny_network.embedder.proprioception(closed).data)

    def test_zeroed_proprio_mlp_gives_zero_token(self, tiny_config, proprio):
        network = VIHENetwork(tiny_config)
        for param in network.embedder.proprio_mlp.parameters():
            param.data[...] = 0.0
        token = network.embedder.proprioception(proprio).data
        assert token.shape == (1, tiny_config.model_dim)
        np.testing.assert_array_equal(token, np.zeros_like(token))

    def test_proprio_mlp_receives_gradient(self, tiny_config, stages, proprio):
        network = VIHENetwork(tiny_config)
        network.zero_grad()
        total = None
        for p in network(stages, "reach the red block", proprio):
            term = F.cross_entropy(p.rotation_logits, np.eye(72)[[0, 36, 6]])
            total = term if total is None else total + term
        total.backward()
        for name, param in network.embedder.proprio_mlp.named_parameters():
            assert param.grad is not None, name
            assert np.all(np.isfinite(param.grad)), name
        assert np.any(network.embedder.proprio_mlp.fc1.weight.grad != 0.0)
        assert np.any(network.embedder.proprio_mlp.fc2.weight.grad != 0.0)

    def test_token_layout(self, tiny_network, tiny_config, stages, proprio):
        ids = tokenize_language("reach the red block", tiny_config.language_tokens, tiny_config.vocab_buckets)
        tokens = assemble_tokens(tiny_network.embedder, stages, ids, proprio)
        assert len(tokens) == tiny_config.tokens_for(2) == 4 + 1 + 2 * 5 * 16
        assert tokens.embeddings.shape == (len(tokens), tiny_config.model_dim)
        assert list(tokens.kinds[:5]) == [KIND_LANGUAGE] * 4 + [KIND_PROPRIO]
        assert tokens.image_slice(1) == slice(85, 165)
        assert np.all(tokens.kinds[5:] == KIND_IMAGE)
        assert np.all(np.isfinite(tokens.positions[5:]))
        assert np.all(np.isnan(tokens.positions[:5]))

    def test_too_many_stages(self, tiny_network, tiny_config, stages, proprio):
        with pytest.raises(ModelError):
            tiny_network(stages + stages[:1], "reach the red block", proprio)

    def test_wrong_resolution(self, tiny_network, scene_cloud, workspace, proprio):
        wrong = render_stage(scene_cloud, camera_rig_from_action(Pose.identity(), 0, workspace, 8))
        with pytest.raises(ModelError):
            tiny_network([wrong], "reach", proprio)


class TestStageMask:
    """Visibility between stages."""

    @pytest.fixture
    def tokens(self, tiny_network, tiny_config, stages, proprio):
        ids = tokenize_language("reach", tiny_config.language_tokens, tiny_config.vocab_buckets)
        return assemble_tokens(tiny_network.embedder, stages, ids, proprio)

    def test_cross_stage_is_causal(self, tokens):
        mask = StageMask.build(tokens).values
        s0, s1 = tokens.image_slice(0), tokens.image_slice(1)
        assert np.all(mask[s1, s0] == 0.0)
        assert np.all(mask[s0, s1] == np.float32(MASK_BLOCKED))
        assert np.all(mask[:5, s1] == np.float32(MASK_BLOCKED))
        assert np.all(mask[:, :5] == 0.0)

    def test_without_cross_stage(self, tokens):
        mask = StageMask.build(tokens, cross_stage=False).values
        s0, s1 = tokens.image_slice(0), tokens.image_slice(1)
        assert np.all(mask[s1, s0] == np.float32(MASK_BLOCKED))
        assert np.all(mask[s1, s1] == 0.0)
        assert np.all(mask[s1, :5] == 0.0)

    def test_earlier_stages_ignore_later_renders(self, tiny_network, tiny_config, scene_cloud, workspace,
                                                 target_pose, stage_renderer, proprio):
        stages = stage_renderer(scene_cloud, tiny_config, workspace, target_pose)
        moved = Pose.from_euler_deg([-0.1, 0.1, 0.3], [180.0, 10.0, -40.0])
        altered = stage_renderer(scene_cloud, tiny_config, workspace, moved)
        assert not np.array_equal(stages[1].network_input(), altered[1].network_input())
        a = tiny_network(stages, "reach the red block", proprio)
        b = tiny_network([stages[0], altered[1]], "reach the red block", proprio)
        np.testing.assert_array_equal(a[0].heatmap_logits.data, b[0].heatmap_logits.data)
        np.testing.assert_array_equal(a[0].rotation_logits.data, b[0].rotation_logits.data)
        assert not np.array_equal(a[1].heatmap_logits.data, b[1].heatmap_logits.data)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_three_stage_outputs_are_causal(self, seed, tiny_config, scene_cloud, workspace, target_pose,
                                            stage_renderer, proprio):
        config = tiny_config.replace(stages=3)
        network = VIHENetwork(config)
        rng = np.random.default_rng(seed)
        stages = stage_renderer(scene_cloud, config, workspace, target_pose)
        moved = Pose.from_euler_deg(rng.uniform([-0.1, -0.1, 0.05], [0.1, 0.1, 0.2]),
                                    [180.0, *rng.uniform(-20.0, 20.0, size=2)])
        altered = stage_renderer(scene_cloud, config, workspace, moved)[2]
        assert not np.array_equal(stages[2].network_input(), altered.network_input())
        instruction = ["reach the red block", "stack the blue block on the green block", "insert the peg"][seed]
        a = network(stages, instruction, proprio)
        b = network([stages[0], stages[1], altered], instruction, proprio)
        for stage in (0, 1):
            np.testing.assert_array_equal(a[stage].heatmap_logits.data, b[stage].heatmap_logits.data)
            np.testing.assert_array_equal(a[stage].rotation_logits.data, b[stage].rotation_logits.data)
            np.testing.assert_array_equal(a[stage].open_logit.data, b[stage].open_logit.data)
        assert not np.array_equal(a[2].heatmap_logits.data, b[2].heatmap_logits.data)


class TestRotaryAttention:
    """Attention logits between image tokens depend only on relative position."""

    def test_scores_invariant_to_shared_translation(self, tiny_config, rng):
        block = AttentionBlock(tiny_config, np.random.default_rng(5)).to_dtype(np.float64)
        x = Tensor(rng.normal(size=(6, tiny_config.model_dim)))
        positions = rng.uniform(-0.3, 0.3, size=(6, 3))
        shifted = positions + np.array([0.12, -0.07, 0.2])
        mask = np.zeros((6, 6))
        a = block.scores(x, mask, Tensor(rope_angles(positions, tiny_config)))
        b = block.scores(x, mask, Tensor(rope_angles(shifted, tiny_config)))
        np.testing.assert_allclose(a.data, b.data, atol=1e-4)

    def test_scores_change_with_relative_offset(self, tiny_config, rng):
        block = AttentionBlock(tiny_config, np.random.default_rng(5)).to_dtype(np.float64)
        x = Tensor(rng.normal(size=(2, tiny_config.model_dim)))
        mask = np.zeros((2, 2))
        near = np.array([[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]])
        far = np.array([[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]])
        a = block.scores(x, mask, Tensor(rope_angles(near, tiny_config)))
        b = block.scores(x, mask, Tensor(rope_angles(far, tiny_config)))
        assert not np.allclose(a.data[:, 0, 1], b.data[:, 0, 1])

    def test_angle_layout(self, tiny_config):
        angles = rope_angles(np.array([[1.0, 0.0, 0.0]]), tiny_config)
        assert angles.shape == (1, tiny_config.head_dim // 2)
        assert angles[0, 0] == pytest.approx(tiny_config.rope_scale)
        np.testing.assert_array_equal(angles[0, 2:], 0.0)


class TestNetwork:
    """Forward pass, gradients and persistence."""

    def test_outputs(self, tiny_network, tiny_config, stages, proprio):
        predictions = tiny_network(stages, "reach the red block", proprio)
        assert [p.stage for p in predictions] == [0, 1]
        for p in predictions:
            assert p.heatmap_logits.shape == (5, 256)
            assert p.rotation_logits.shape == (3, 72)
            heatmaps = p.heatmaps()
            assert heatmaps.shape == (5, 16, 16)
            np.testing.assert_allclose(heatmaps.sum(axis=(1, 2)), 1.0, atol=1e-9)
            assert isinstance(p.gripper_open, bool)

    def test_single_stage_forward(self, tiny_network, stages, proprio):
        assert len(tiny_network(stages[:1], "reach", proprio)) == 1

    def test_same_seed_same_weights(self, tiny_config):
        a, b = VIHENetwork(tiny_config), VIHENetwork(tiny_config)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_shared_heads(self, tiny_config):
        shared = VIHENetwork(tiny_config.replace(share_stage_heads=True))
        assert len(shared.action_heads) == 1
        assert len(VIHENetwork(tiny_config).action_heads) == 2

    def test_float64_gradients_match_finite_differences(self, tiny_config, stages, proprio, rng):
        network = VIHENetwork(tiny_config).to_dtype(np.float64)
        heat_target = np.zeros((5, 256))
        heat_target[np.arange(5), rng.integers(256, size=5)] = 1.0
        rot_target = np.eye(72)[[0, 36, 6]]

        def loss():
            predictions = network(stages, "reach the red block", proprio)
            total = None
            for p in predictions:
                term = F.cross_entropy(p.heatmap_logits, heat_target) + F.cross_entropy(p.rotation_logits, rot_target)
                total = term if total is None else total + term
            return total

        network.zero_grad()
        loss().backward()
        params = dict(network.named_parameters())
        for name in ("embedder.patch_weight", "blocks.0.qkv.weight", "rope.phase", "action_heads.1.fc2.weight"):
            tensor = params[name]
            picks = rng.choice(tensor.data.size, size=4, replace=False)
            numeric = numerical_gradient(loss, tensor, h=1e-5, indices=picks)
            analytic = tensor.grad.reshape(-1)[picks]
            assert relative_error(analytic, numeric.reshape(-1)[picks]) < 1e-3, name

    def test_save_and_load(self, tmp_path, tiny_network, tiny_config):
        path = tmp_path / "model.ckpt"
        tiny_network.save(path, extra={"steps": 3})
        restored = VIHENetwork.load(path, expected=tiny_config)
        for (_, p), (_, q) in zip(tiny_network.named_parameters(), restored.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data)
        summary = checkpoint_summary(path)
        assert summary["metadata"]["steps"] == 3
        assert summary["metadata"]["model_config"] == tiny_config.to_dict()
        assert summary["parameter_count"] == tiny_network.num_parameters()

    def test_load_refuses_other_config(self, tmp_path, tiny_network, tiny_config):
        path = tmp_path / "model.ckpt"
        tiny_network.save(path)
        with pytest.raises(ConfigMismatchError):
            VIHENetwork.load(path, expected=tiny_config.replace(layers=2))


def one_hot_prediction(rig, point, stage, bins=(0, 0, 6), open_logit=1.0, collision_logit=-1.0):
    """Prediction whose heatmaps peak where point projects and whose rotation bins are fixed."""
    res = rig.resolution
    logits = np.zeros((len(rig.cameras), res * res))
    for i, camera in enumerate(rig.cameras):
        u, v, _ = project(camera, point)
        logits[i, int(np.floor(v)) * res + int(np.floor(u))] = 50.0
    rotation = np.zeros((3, 72))
    rotation[[0, 1, 2], list(bins)] = 1.0
    return ActionPrediction(stage, rig, Tensor(logits), Tensor(rotation),
                            Tensor([[open_logit]]), Tensor([[collision_logit]]))


def brute_force_scores(heatmaps, rig, candidates):
    """Per-candidate sum of clamped bilinear heatmap samples, one point and one view at a time."""
    res = rig.resolution
    scores = np.zeros(len(candidates))
    for i, point in enumerate(candidates):
        for heatmap, camera in zip(heatmaps, rig.cameras):
            u, v, depth = project(camera, point)
            if not (0 <= u < res and 0 <= v < res and camera.near <= depth <= camera.far):
                continue
            row = min(max(v - 0.5, 0.0), res - 1.0)
            col = min(max(u - 0.5, 0.0), res - 1.0)
            r0, c0 = int(np.floor(row)), int(np.floor(col))
            r1, c1 = min(r0 + 1, res - 1), min(c0 + 1, res - 1)
            fr, fc = row - r0, col - c0
            scores[i] += ((1 - fr) * (1 - fc) * heatmap[r0, c0] + (1 - fr) * fc * heatmap[r0, c1]
                          + fr * (1 - fc) * heatmap[r1, c0] + fr * fc * heatmap[r1, c1])
    return scores


class TestDecode:
    """Heatmap fusion and relative action decoding."""

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_brute_force_fusion(self, seed, workspace, target_pose):
        rng = np.random.default_rng(seed)
        rig = camera_rig_from_action(target_pose, 1, workspace, 16)
        heatmaps = rng.random((5, 16, 16))
        local = rng.uniform(-1.2, 1.2, size=(1000, 3)) * rig.half_extent
        candidates = rig.frame.apply(local)
        expected = brute_force_scores(heatmaps, rig, candidates)
        np.testing.assert_allclose(score_candidates(heatmaps, rig, candidates), expected, atol=1e-5)
        best = decode_translation(heatmaps, rig, candidates)
        index = int(np.flatnonzero(np.all(candidates == best, axis=1))[0])
        assert expected[index] >= expected.max() - 1e-5

    def test_grid_matches_brute_force_fusion(self, workspace, rng):
        rig = camera_rig_from_action(Pose.identity(), 0, workspace, 10)
        heatmaps = rng.random((5, 10, 10))
        candidates = candidate_grid(rig)
        assert candidates.shape == (1000, 3)
        expected = brute_force_scores(heatmaps, rig, candidates)
        np.testing.assert_allclose(score_candidates(heatmaps, rig, candidates), expected, atol=1e-5)

    def test_strided_grid_is_a_subset(self, workspace, target_pose):
        rig = camera_rig_from_action(target_pose, 1, workspace, 16)
        full = candidate_grid(rig).reshape(16, 16, 16, 3)
        strided = candidate_grid(rig, 3)
        assert strided.shape == (125, 3)
        np.testing.assert_allclose(strided, full[1::3, 1::3, 1::3].reshape(-1, 3), atol=1e-12)

    def test_full_scale_stride_candidate_count(self, workspace):
        config = ModelConfig.full_scale()
        rig = camera_rig_from_action(Pose.identity(), 0, workspace, config.image_resolution)
        assert candidate_grid(rig, config.candidate_stride).shape == (22 ** 3, 3)

    def test_stride_must_be_positive(self, workspace):
        rig = camera_rig_from_action(Pose.identity(), 0, workspace, 8)
        with pytest.raises(ModelError):
            candidate_grid(rig, 0)

    def test_strided_decode_recovers_candidate(self, workspace, target_pose):
        rig = camera_rig_from_action(target_pose, 1, workspace, 16)
        point = candidate_grid(rig, 3)[57]
        action = decode_action(one_hot_prediction(rig, point, 1), target_pose, stride=3)
        np.testing.assert_allclose(action.pose.translation, point, atol=1e-12)

    def test_candidate_grid(self, workspace, target_pose):
        rig = camera_rig_from_action(target_pose, 1, workspace, 8)
        grid = candidate_grid(rig)
        assert grid.shape == (512, 3)
        local = inverse(rig.frame).apply(grid)
        assert np.abs(local).max() < rig.half_extent

    def test_peaked_heatmaps_recover_candidate(self, workspace, target_pose):
        rig = camera_rig_from_action(target_pose, 1, workspace, 16)
        candidates = candidate_grid(rig)
        point = candidates[1234]
        prediction = one_hot_prediction(rig, point, 1)
        np.testing.assert_array_equal(decode_translation(prediction.heatmaps(), rig), point)

    def test_ties_go_to_first_candidate(self, workspace, target_pose):
        rig = camera_rig_from_action(target_pose, 1, workspace, 8)
        uniform = np.full((5, 8, 8), 1.0 / 64)
        np.testing.assert_array_equal(decode_translation(uniform, rig), candidate_grid(rig)[0])

    def test_empty_candidates(self, workspace):
        rig = camera_rig_from_action(Pose.identity(), 0, workspace, 8)
        with pytest.raises(ModelError):
            decode_translation(np.full((5, 8, 8), 1.0 / 64), rig, np.zeros((0, 3)))

    def test_heatmap_shape_checked(self, workspace):
        rig = camera_rig_from_action(Pose.identity(), 0, workspace, 8)
        with pytest.raises(ModelError):
            decode_translation(np.full((5, 4, 4), 1.0 / 16), rig)

    def test_relative_refinement(self, workspace, target_pose):
        rig = camera_rig_from_action(target_pose, 1, workspace, 16)
        point = candidate_grid(rig)[2000]
        action = decode_action(one_hot_prediction(rig, point, 1), target_pose)
        assert action.stage == 1 and action.gripper_open and not action.collision_allowed
        np.testing.assert_allclose(action.pose.translation, point, atol=1e-9)
        expected = compose(target_pose, Pose(np.zeros(3), Pose.from_euler_deg([0, 0, 0], [0, 0, 30]).rotation))
        assert abs(float(np.dot(action.pose.rotation, expected.rotation))) == pytest.approx(1.0, abs=1e-9)
        assert compose(target_pose, action.refinement).isclose(action.pose, atol=1e-9)

    def test_absolute_rotation(self, workspace, target_pose):
        rig = camera_rig_from_action(target_pose, 1, workspace, 16)
        point = candidate_grid(rig)[2000]
        action = decode_action(one_hot_prediction(rig, point, 1), target_pose, relative_refinement=False)
        np.testing.assert_allclose(euler_angles_deg(action.pose.rotation), [0.0, 0.0, 30.0], atol=1e-9)
        assert compose(target_pose, action.refinement).isclose(action.pose, atol=1e-9)

    def test_stage_zero_ignores_previous_pose(self, workspace, target_pose):
        rig = camera_rig_from_action(Pose.identity(), 0, workspace, 16)
        point = candidate_grid(rig)[100]
        action = decode_action(one_hot_prediction(rig, point, 0), target_pose)
        np.testing.assert_allclose(action.pose.translation, point, atol=1e-12)
        np.testing.assert_allclose(euler_angles_deg(action.pose.rotation), [0.0, 0.0, 30.0], atol=1e-9)
