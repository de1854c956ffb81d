"""
Episode rollouts and evaluation reports.

An episode samples a scene, then for every oracle keypose step observes the
world, asks the policy for its per-stage actions, records each stage's error
against the oracle action and executes the output of one chosen stage.
Success is judged on the final world state.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from vihe.bench.generate import Sensor, observe
from vihe.bench.tasks import Scene, SyntheticTask, get_task
from vihe.bench.world import KinematicWorld
from vihe.config import config_hash
from vihe.core.geometry import Workspace, rotation_angle
from vihe.core.renderer import PointCloud
from vihe.exceptions import ReportError, RigDivergenceError
from vihe.model.network import VIHENetwork
from vihe.model.tokens import Proprioception
from vihe.pipeline.agent import Agent

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
EVAL_SEED_TAG = 0xE7A1
QUANTILES = (0.25, 0.5, 0.75)


class OraclePolicy:
    """Returns the scripted action for the current step at every stage."""

    def __init__(self, stages: int = 3):
        self.stages = stages

    def act(self, cloud: PointCloud, instruction: str, proprio: Proprioception, task: SyntheticTask,
            scene: Scene, step: int) -> List:
        action = task.oracle_actions(scene)[step]
        return [action] * self.stages


class AgentPolicy:
    """Adapter running staged inference of a trained network."""

    def __init__(self, agent: Agent):
        self.agent = agent

    @property
    def stages(self) -> int:
        return self.agent.model.config.stages

    def act(self, cloud: PointCloud, instruction: str, proprio: Proprioception, task: SyntheticTask,
            scene: Scene, step: int) -> List:
        return self.agent.infer(cloud, instruction, proprio).actions


@dataclass
class EpisodeResult:
    task: str
    episode: int
    executed_stage: int
    success: bool
    diverged: bool = False
    translation_errors: Dict[int, List[float]] = field(default_factory=dict)
    rotation_errors: Dict[int, List[float]] = field(default_factory=dict)
    seconds: float = 0.0


def episode_rng(seed: int, task_index: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, task_index, episode, EVAL_SEED_TAG])


def _record_errors(result: EpisodeResult, actions: Sequence, expected) -> None:
    for stage, action in enumerate(actions):
        result.translation_errors.setdefault(stage, []).append(
            float(np.linalg.norm(action.pose.translation - expected.pose.translation)))
        result.rotation_errors.setdefault(stage, []).append(
            float(np.degrees(rotation_angle(action.pose.rotation, expected.pose.rotation))))


def run_episode(task: SyntheticTask, scene: Scene, policy, executed_stage: int,
                sensors: Optional[Sequence[Sensor]] = None, episode: int = 0) -> EpisodeResult:
    """
    Roll out one episode executing the chosen stage's action at every step.

    A rig divergence ends the episode as a failure; the errors of the stages
    decoded before it are still recorded.
    """
    start = time.perf_counter()
    oracle = task.oracle_actions(scene)
    horizon = len(oracle)
    world = KinematicWorld(scene)
    result = EpisodeResult(task.task_id, episode, executed_stage, success=False)
    try:
        for step, expected in enumerate(oracle):
            cloud = observe(world, sensors)
            proprio = Proprioception(world.gripper_open, step / horizon, world.end_effector)
            try:
                actions = policy.act(cloud, scene.instruction, proprio, task, scene, step)
            except RigDivergenceError as e:
                _record_errors(result, e.completed_actions, expected)
                raise
            _record_errors(result, actions, expected)
            world.execute(actions[min(executed_stage, len(actions) - 1)])
        result.success = task.success(world)
    except RigDivergenceError as e:
        logger.warning(f"{task.task_id} episode {episode} (stage {executed_stage}) diverged: {e}")
        result.diverged = True
    result.seconds = time.perf_counter() - start
    return result


def _quantiles(values: Sequence[float]) -> dict:
    data = np.asarray(values, dtype=np.float64)
    out = {f"p{int(q * 100)}": float(np.quantile(data, q)) for q in QUANTILES}
    out['mean'] = float(data.mean())
    out['max'] = float(data.max())
    return out


@dataclass
class EvalReport:
    """
    Aggregated evaluation results.

    Attributes:
        success: task -> "stage{k}" -> {episodes, successes, diverged, success_rate}
            for every executed stage k
        errors: task -> "stage{i}" -> {count, translation_m, rotation_deg} quantiles
            of every predicting stage i, pooled over all rollouts
        timing: wall-clock statistics; excluded from determinism comparisons
    """
    seed: int
    config_hash: str
    episodes: int
    executed_stages: List[int]
    success: Dict[str, Dict[str, dict]]
    errors: Dict[str, Dict[str, dict]]
    timing: Dict[str, float] = field(default_factory=dict)

    def success_rate(self, task: str, stage: int) -> float:
        return self.success[task][f"stage{stage}"]['success_rate']

    def average_success(self, stage: int) -> float:
        rates = [self.success_rate(task, stage) for task in self.success]
        return float(np.mean(rates)) if rates else 0.0

    def median_translation_error(self, task: str, stage: int) -> float:
        return self.errors[task][f"stage{stage}"]['translation_m']['p50']

    def to_dict(self) -> dict:
        return {
            'version': REPORT_VERSION,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'episodes': self.episodes,
            'executed_stages': list(self.executed_stages),
            'success': self.success,
            'errors': self.errors,
            'timing': self.timing,
        }

    def deterministic_dict(self) -> dict:
        data = self.to_dict()
        data.pop('timing')
        return data

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.to_dict()
        validate_report(data)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True)
        logger.info(f"Wrote evaluation report to {path}")
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        validate_report(data)
        return cls(int(data['seed']), data['config_hash'], int(data['episodes']), list(data['executed_stages']),
                   data['success'], data['errors'], data.get('timing', {}))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalReport":
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ReportError(message)


def validate_report(data: dict) -> None:
    """
    Check a report dictionary against the report schema.

    Raises:
        ReportError: Naming the first offending field
    """
    _require(isinstance(data, dict), "Report must be a JSON object")
    for key, kind in (('version', int), ('seed', int), ('config_hash', str), ('episodes', int),
                      ('executed_stages', list), ('success', dict), ('errors', dict)):
        _require(key in data, f"Report is missing '{key}'")
        value = data[key]
        _require(isinstance(value, kind) and not (kind is int and isinstance(value, bool)),
                 f"Report field '{key}' must be {kind.__name__}")
    _require(data['version'] == REPORT_VERSION, f"Unsupported report version {data['version']}")
    for task, stages in data['success'].items():
        _require(isinstance(stages, dict), f"success['{task}'] must be an object")
        for stage, entry in stages.items():
            where = f"success['{task}']['{stage}']"
            for key in ('episodes', 'successes', 'diverged', 'success_rate'):
                _require(key in entry, f"{where} is missing '{key}'")
            _require(0 <= entry['successes'] <= entry['episodes'], f"{where}: successes exceed episodes")
            _require(0 <= entry['diverged'] <= entry['episodes'], f"{where}: diverged exceed episodes")
            _require(0.0 <= entry['success_rate'] <= 1.0, f"{where}: success_rate outside [0, 1]")
    for task, stages in data['errors'].items():
        for stage, entry in stages.items():
            where = f"errors['{task}']['{stage}']"
            _require('count' in entry and entry['count'] >= 1, f"{where} needs a positive count")
            for metric in ('translation_m', 'rotation_deg'):
                _require(metric in entry, f"{where} is missing '{metric}'")
                values = entry[metric]
                for key in [f"p{int(q * 100)}" for q in QUANTILES] + ['mean', 'max']:
                    _require(key in values and np.isfinite(values[key]) and values[key] >= 0.0,
                             f"{where}['{metric}'] has no valid '{key}'")


def aggregate(results: Sequence[EpisodeResult], tasks: Sequence[str], executed_stages: Sequence[int]) -> tuple:
    success: Dict[str, Dict[str, dict]] = {}
    errors: Dict[str, Dict[str, dict]] = {}
    for task in tasks:
        task_results = [r for r in results if r.task == task]
        success[task] = {}
        for stage in executed_stages:
            rows = [r for r in task_results if r.executed_stage == stage]
            count = len(rows)
            wins = sum(r.success for r in rows)
            success[task][f"stage{stage}"] = {
                'episodes': count,
                'successes': int(wins),
                'diverged': int(sum(r.diverged for r in rows)),
                'success_rate': wins / count if count else 0.0,
            }
        translation: Dict[int, List[float]] = {}
        rotation: Dict[int, List[float]] = {}
        for r in task_results:
            for stage, values in r.translation_errors.items():
                translation.setdefault(stage, []).extend(values)
            for stage, values in r.rotation_errors.items():
                rotation.setdefault(stage, []).extend(values)
        errors[task] = {
            f"stage{stage}": {'count': len(translation[stage]),
                              'translation_m': _quantiles(translation[stage]),
                              'rotation_deg': _quantiles(rotation[stage])}
            for stage in sorted(translation)
        }
    return success, errors


def evaluate(policy, tasks: Sequence[Union[str, SyntheticTask]], episodes: int, seed: int,
             executed_stages: Sequence[int] = (0, 1, 2), sensors: Optional[Sequence[Sensor]] = None,
             workers: int = 1, config_hash: str = "", progress: bool = False) -> EvalReport:
    """
    Evaluate a policy on freshly sampled scenes.

    Episode e of task t uses the scene sampled from [seed, t, e, tag]; every
    executed stage replays the same scenes. Rollouts run in a thread pool and
    are aggregated in a fixed order.

    Args:
        policy: OraclePolicy, AgentPolicy or anything with the same `act`
        tasks: Task ids or instances
        episodes: Episodes per task
        seed: Root seed
        executed_stages: Stages whose output is executed, one rollout each
        sensors: Observation sensors (None for the dense cloud)
        workers: Thread pool size
        config_hash: Hash of the model configuration under test

    Returns:
        EvalReport
    """
    started = time.perf_counter()
    resolved = [get_task(t) if isinstance(t, str) else t for t in tasks]
    jobs = []
    for t, task in enumerate(resolved):
        for e in range(episodes):
            scene = task.sample_scene(episode_rng(seed, t, e))
            for stage in executed_stages:
                jobs.append((task, scene, stage, e))

    def _run(job) -> EpisodeResult:
        task, scene, stage, e = job
        return run_episode(task, scene, policy, stage, sensors, e)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_run, jobs), total=len(jobs), desc="eval", disable=not progress))
    else:
        results = [_run(job) for job in tqdm(jobs, desc="eval", disable=not progress)]

    success, errors = aggregate(results, [t.task_id for t in resolved], list(executed_stages))
    durations = [r.seconds for r in results] or [0.0]
    report = EvalReport(
        seed=int(seed),
        config_hash=config_hash,
        episodes=int(episodes),
        executed_stages=[int(s) for s in executed_stages],
        success=success,
        errors=errors,
        timing={'wall_clock_s': time.perf_counter() - started,
                'episode_mean_s': float(np.mean(durations)),
                'episode_max_s': float(np.max(durations))},
    )
    for task in success:
        rates = ", ".join(f"{k}={v['success_rate']:.2f}" for k, v in success[task].items())
        logger.info(f"{task}: {rates}")
    return report


def evaluate_model(model: VIHENetwork, workspace: Workspace, tasks: Sequence[Union[str, SyntheticTask]],
                   episodes: int, seed: int, executed_stages: Optional[Sequence[int]] = None,
                   splat_radius: int = 1, inflation: float = 0.5, sensors: Optional[Sequence[Sensor]] = None,
                   workers: int = 1, progress: bool = False) -> EvalReport:
    """Evaluate a network through the staged inference agent."""
    model.eval()
    agent = Agent(model, workspace, splat_radius, inflation)
    stages = list(range(model.config.stages)) if executed_stages is None else list(executed_stages)
    stages = [s for s in stages if s < model.config.stages]
    return evaluate(AgentPolicy(agent), tasks, episodes, seed, stages, sensors, workers,
                    config_hash(model.config.to_dict()), progress)
