"""
Tests for episode rollouts and evaluation reports.
"""

import copy
import json

import numpy as np
import pytest

from vihe.bench.evaluate import (
    EpisodeResult, EvalReport, OraclePolicy, aggregate, evaluate, evaluate_model, run_episode, validate_report,
)
from vihe.bench.tasks import ReachColor, get_task
from vihe.exceptions import ReportError, RigDivergenceError


class DivergingPolicy:
    """Fails on its first call the way a prediction leaving the workspace does."""

    def act(self, *args):
        raise RigDivergenceError("prediction left the workspace")


class LateDivergingPolicy:
    """Stage 0 reproduces the oracle, stage 1 leaves the workspace."""

    def act(self, cloud, instruction, proprio, task, scene, step):
        raise RigDivergenceError("stage 1 left the workspace", [task.oracle_actions(scene)[step]])


@pytest.fixture(scope="module")
def oracle_report():
    return evaluate(OraclePolicy(), ["reach-color", "stack-offset", "peg-insert-2cm"], episodes=2, seed=0,
                    executed_stages=(0, 2))


class TestOracleEvaluation:
    """The scripted policy solves every task."""

    def test_full_success(self, oracle_report):
        for task in ["reach-color", "stack-offset", "peg-insert-2cm"]:
            assert oracle_report.success_rate(task, 0) == 1.0
            assert oracle_report.success_rate(task, 2) == 1.0
        assert oracle_report.average_success(2) == 1.0

    def test_zero_errors(self, oracle_report):
        entry = oracle_report.errors["peg-insert-2cm"]["stage1"]
        assert entry['count'] == 2 * 2 * 5
        assert entry['translation_m']['max'] == 0.0
        assert entry['rotation_deg']['max'] == pytest.approx(0.0, abs=1e-5)
        assert oracle_report.median_translation_error("reach-color", 2) == 0.0

    def test_report_is_valid(self, oracle_report):
        validate_report(oracle_report.to_dict())
        assert oracle_report.executed_stages == [0, 2]
        assert set(oracle_report.timing) == {'wall_clock_s', 'episode_mean_s', 'episode_max_s'}

    def test_deterministic(self, oracle_report):
        again = evaluate(OraclePolicy(), ["reach-color", "stack-offset", "peg-insert-2cm"], episodes=2, seed=0,
                         executed_stages=(0, 2), workers=2)
        assert again.deterministic_dict() == oracle_report.deterministic_dict()
        assert 'timing' not in again.deterministic_dict()


def test_divergence_is_a_failure():
    task = ReachColor()
    scene = task.sample_scene(np.random.default_rng(0))
    result = run_episode(task, scene, DivergingPolicy(), executed_stage=1)
    assert result.diverged and not result.success
    assert result.translation_errors == {}


def test_divergence_keeps_earlier_stage_errors():
    task = ReachColor()
    scene = task.sample_scene(np.random.default_rng(0))
    result = run_episode(task, scene, LateDivergingPolicy(), executed_stage=1)
    assert result.diverged and not result.success
    assert result.translation_errors == {0: [0.0]}
    assert result.rotation_errors[0] == pytest.approx([0.0], abs=1e-5)
    assert 1 not in result.rotation_errors


def test_aggregate_counts():
    results = [
        EpisodeResult("reach-color", 0, 0, True, translation_errors={0: [0.01, 0.03]}, rotation_errors={0: [1.0, 3.0]}),
        EpisodeResult("reach-color", 1, 0, False, diverged=True),
    ]
    success, errors = aggregate(results, ["reach-color"], [0, 1])
    assert success["reach-color"]["stage0"] == {'episodes': 2, 'successes': 1, 'diverged': 1, 'success_rate': 0.5}
    assert success["reach-color"]["stage1"]['success_rate'] == 0.0
    assert errors["reach-color"]["stage0"]['count'] == 2
    assert errors["reach-color"]["stage0"]['translation_m']['p50'] == pytest.approx(0.02)


def test_model_evaluation(tiny_network, workspace):
    report = evaluate_model(tiny_network, workspace, ["reach-color"], episodes=1, seed=3)
    assert report.executed_stages == [0, 1]
    assert len(report.config_hash) > 0
    assert not tiny_network.training
    validate_report(report.to_dict())
    assert report.success["reach-color"]["stage1"]['episodes'] == 1


class TestReportValidation:
    """Schema checks on report dictionaries."""

    @pytest.fixture
    def data(self, oracle_report):
        return copy.deepcopy(oracle_report.to_dict())

    def test_missing_field(self, data):
        del data['errors']
        with pytest.raises(ReportError, match="errors"):
            validate_report(data)

    def test_wrong_version(self, data):
        data['version'] = 99
        with pytest.raises(ReportError):
            validate_report(data)

    def test_boolean_is_not_an_integer(self, data):
        data['seed'] = True
        with pytest.raises(ReportError):
            validate_report(data)

    def test_successes_exceed_episodes(self, data):
        data['success']['reach-color']['stage0']['successes'] = 5
        with pytest.raises(ReportError):
            validate_report(data)

    def test_rate_out_of_range(self, data):
        data['success']['reach-color']['stage0']['success_rate'] = 1.5
        with pytest.raises(ReportError):
            validate_report(data)

    def test_missing_quantile(self, data):
        del data['errors']['reach-color']['stage0']['rotation_deg']['p75']
        with pytest.raises(ReportError, match="p75"):
            validate_report(data)

    def test_roundtrip(self, tmp_path, oracle_report):
        path = oracle_report.save(tmp_path / "out" / "report.json")
        loaded = EvalReport.load(path)
        assert loaded.deterministic_dict() == json.loads(json.dumps(oracle_report.deterministic_dict()))

    def test_save_rejects_invalid(self, tmp_path, oracle_report):
        broken = copy.deepcopy(oracle_report)
        broken.episodes = "two"
        with pytest.raises(ReportError):
            broken.save(tmp_path / "report.json")
        assert not (tmp_path / "report.json").exists()


def test_oracle_policy_repeats_action():
    task = get_task("stack-offset")
    scene = task.sample_scene(np.random.default_rng(0))
    actions = OraclePolicy(stages=3).act(None, scene.instruction, None, task, scene, 1)
    assert len(actions) == 3 and all(a is actions[0] for a in actions)
