"""
Training: stochastic rig perturbation, per-stage losses and optimizer steps.

For every sample the stage-0 views come from the fixed global rig; stages
1 and above are rendered from rigs placed at the ground-truth action pose
perturbed by a random rigid offset, so the network sees imperfect previous
predictions during training.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from vihe.core.geometry import (CameraRig, Pose, Workspace, axis_angle_to_quat, camera_rig_from_action,
                                quat_multiply)
from vihe.core.renderer import RenderedStage, render_stage
from vihe.diffcore import functional as F
from vihe.diffcore.optim import OptimizerState, optimizer_step
from vihe.diffcore.tensor import Tensor, concat
from vihe.exceptions import TrainingError
from vihe.model.network import ActionPrediction, VIHENetwork
from vihe.pipeline.dataset import TrainingSample
from vihe.pipeline.targets import StageTargets, TargetSet, make_targets

logger = logging.getLogger(__name__)

RIG_SOURCE_TRAINING = "perturbed_ground_truth"
LOSS_COMPONENTS = ("pose", "open", "collision")


@dataclass(frozen=True)
class PerturbationSpec:
    """
    Random offsets applied to the ground truth before placing refinement rigs.

    Translation is uniform in a ball of radius translation_fraction *
    stage_scale[i] * half_extent(stage i); rotation is a uniform random axis
    with an angle uniform in [0, max_rotation_deg * stage_scale[i]].
    """
    translation_fraction: float = 0.15
    max_rotation_deg: float = 10.0
    stage_scale: Tuple[float, ...] = (0.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_scale", tuple(float(s) for s in self.stage_scale))
        if self.translation_fraction < 0 or self.max_rotation_deg < 0:
            raise TrainingError("Perturbation bounds must be non-negative")
        for i, scale in enumerate(self.stage_scale):
            if scale < 0 or self.translation_fraction * scale >= 1.0:
                raise TrainingError(f"Stage {i} translation bound must stay below the rig half extent "
                                    f"(fraction {self.translation_fraction} x scale {scale})")

    @classmethod
    def from_config(cls, section: dict) -> "PerturbationSpec":
        return cls(float(section.get('translation_fraction', 0.15)),
                   float(section.get('max_rotation_deg', 10.0)),
                   tuple(section.get('stage_scale', (0.0, 1.0, 1.0))))

    @classmethod
    def zero(cls) -> "PerturbationSpec":
        return cls(0.0, 0.0, (0.0, 0.0, 0.0))

    def scale(self, stage: int) -> float:
        return self.stage_scale[min(stage, len(self.stage_scale) - 1)]

    def sample(self, stage: int, half_extent: float, rng: np.random.Generator) -> Pose:
        """Random rigid offset for a stage; identity when the bounds are zero."""
        scale = self.scale(stage)
        radius = self.translation_fraction * scale * half_extent
        max_angle = np.deg2rad(self.max_rotation_deg * scale)
        direction = rng.standard_normal(3)
        direction /= max(np.linalg.norm(direction), 1e-12)
        translation = direction * radius * rng.random() ** (1.0 / 3.0)
        axis = rng.standard_normal(3)
        angle = max_angle * rng.random()
        rotation = axis_angle_to_quat(axis, angle) if angle > 0 else np.array([1.0, 0.0, 0.0, 0.0])
        return Pose(translation, rotation)

    def perturb(self, pose: Pose, offset: Pose) -> Pose:
        """Offset translation in the world frame, rotation in the pose's frame."""
        return Pose(pose.translation + offset.translation, quat_multiply(pose.rotation, offset.rotation))


@dataclass(frozen=True, eq=False)
class PreparedSample:
    sample: TrainingSample
    stages: List[RenderedStage]
    targets: TargetSet
    rig_source: str = RIG_SOURCE_TRAINING


@dataclass
class StepResult:
    step: int
    loss: float
    components: Dict[str, float] = field(default_factory=dict)


def binary_logits(logit: Tensor) -> Tensor:
    """(1, 2) logits [0, z] so that softmax gives (1 - sigmoid(z), sigmoid(z))."""
    zero = Tensor(np.zeros((1, 1), dtype=logit.dtype))
    return concat([zero, logit.reshape(1, 1)], axis=1)


def stage_losses(prediction: ActionPrediction, target: StageTargets) -> Dict[str, Tensor]:
    """
    Pose, open and collision losses of one stage. The pose loss sums the
    cross-entropy of the five view heatmaps and of the three rotation axes.
    """
    views = prediction.heatmap_logits.shape[0]
    translation = F.cross_entropy(prediction.heatmap_logits, target.heatmaps) * float(views)
    rotation = F.cross_entropy(prediction.rotation_logits, target.rotation) * 3.0
    return {
        'pose': translation + rotation,
        'open': F.cross_entropy(binary_logits(prediction.open_logit), target.gripper_open),
        'collision': F.cross_entropy(binary_logits(prediction.collision_logit), target.collision),
    }


def action_loss(predictions: Sequence[ActionPrediction], targets: TargetSet) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Sum of the per-stage pose, open and collision losses.

    Returns:
        (total, components) with components keyed 'stage{i}/{name}'
    """
    components: Dict[str, Tensor] = {}
    for prediction, target in zip(predictions, targets.stages):
        for name, value in stage_losses(prediction, target).items():
            components[f"stage{prediction.stage}/{name}"] = value
    total = None
    for value in components.values():
        total = value if total is None else total + value
    return total, components


class Trainer:
    """
    Runs training steps for a VIHENetwork.

    Rendering and target construction for the samples of a batch run in a
    thread pool; forward, backward and the optimizer step are serialized.
    """

    def __init__(self, model: VIHENetwork, workspace: Workspace, perturbation: PerturbationSpec,
                 lr: float = 1e-3, warmup_steps: int = 100, sigma_px: float = 1.5, splat_radius: int = 1,
                 inflation: float = 0.5, workers: int = 1, seed: int = 0):
        self.model = model
        self.workspace = workspace
        self.perturbation = perturbation
        self.sigma_px = sigma_px
        self.splat_radius = splat_radius
        self.inflation = inflation
        self.workers = max(1, int(workers))
        self.seed = int(seed)
        self.state = OptimizerState(lr=lr, warmup_steps=warmup_steps)
        self.params = model.named_parameters()
        logger.info(f"Trainer ready: lr={lr}, warmup={warmup_steps}, sigma={sigma_px}px, workers={self.workers}")

    @classmethod
    def from_config(cls, model: VIHENetwork, config: dict) -> "Trainer":
        training = config['training']
        return cls(model, Workspace.from_config(config), PerturbationSpec.from_config(config['perturbation']),
                   lr=float(training['lr']), warmup_steps=int(training['warmup_steps']),
                   sigma_px=float(training['sigma_px']), splat_radius=int(config['rendering']['splat_radius']),
                   inflation=float(config['workspace'].get('inflation', 0.5)),
                   workers=int(training.get('workers', 1)), seed=int(training['seed']))

    def sample_rng(self, step: int, index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, step, index])

    def training_rigs(self, sample: TrainingSample, rng: np.random.Generator) -> List[CameraRig]:
        """Stage 0 global rig plus rigs at perturbed ground truth for later stages."""
        config = self.model.config
        gt = sample.action.pose
        rigs = []
        for stage in range(config.stages):
            if stage == 0:
                anchor = Pose.identity()
            else:
                half_extent = self.workspace.half_extent / (2 ** stage if config.zoom_in else 1)
                anchor = self.perturbation.perturb(gt, self.perturbation.sample(stage, half_extent, rng))
            rigs.append(camera_rig_from_action(
                anchor, stage, self.workspace, config.image_resolution, zoom_in=config.zoom_in,
                follow_rotation=config.follow_rotation, look_inward=config.look_inward,
                inflation=self.inflation))
        return rigs

    def prepare(self, sample: TrainingSample, rng: np.random.Generator) -> PreparedSample:
        config = self.model.config
        rigs = self.training_rigs(sample, rng)
        stages = [render_stage(sample.cloud, rig, self.splat_radius) for rig in rigs]
        targets = make_targets(sample.action, rigs, self.sigma_px, config.relative_refinement,
                               config.rotation_bins)
        return PreparedSample(sample, stages, targets)

    def prepare_batch(self, batch: Sequence[TrainingSample], step: int) -> List[PreparedSample]:
        jobs = [(sample, self.sample_rng(step, i)) for i, sample in enumerate(batch)]
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(lambda job: self.prepare(*job), jobs))
        return [self.prepare(*job) for job in jobs]

    def sample_loss(self, prepared: PreparedSample) -> Tuple[Tensor, Dict[str, Tensor]]:
        sample = prepared.sample
        predictions = self.model(prepared.stages, sample.instruction, sample.proprio)
        return action_loss(predictions, prepared.targets)

    def compute_gradients(self, batch: Sequence[TrainingSample], step: int = 0
                          ) -> Tuple[float, Dict[str, float], Dict[str, np.ndarray]]:
        """
        Sum the losses of a batch and accumulate their gradients.

        Returns:
            (mean loss, mean component losses, summed gradients by parameter name)

        Raises:
            TrainingError: On a non-finite loss, with batch diagnostics
        """
        if not self.model.training:
            raise TrainingError("Model must be in training mode")
        prepared = self.prepare_batch(batch, step)
        self.model.zero_grad()
        total = 0.0
        sums: Dict[str, float] = {}
        for i, item in enumerate(prepared):
            loss, components = self.sample_loss(item)
            value = loss.item()
            if not np.isfinite(value):
                details = {k: v.item() for k, v in components.items()}
                sample = item.sample
                logger.error(f"Non-finite loss at step {step}, batch index {i}: {details}")
                raise TrainingError(
                    f"Non-finite loss {value} at step {step} (batch index {i}, task '{sample.task}', "
                    f"demo {sample.demo_index}, keypose {sample.keypose_index}); components {details}")
            loss.backward()
            total += value
            for name, component in components.items():
                sums[name] = sums.get(name, 0.0) + component.item()
        grads = {name: p.grad for name, p in self.params if p.grad is not None}
        count = max(len(prepared), 1)
        return total / count, {k: v / count for k, v in sums.items()}, grads

    def training_step(self, batch: Sequence[TrainingSample]) -> StepResult:
        """One optimizer step over a batch."""
        step = self.state.step
        loss, components, grads = self.compute_gradients(batch, step)
        optimizer_step(self.params, grads, self.state)
        self.model.zero_grad()
        logger.debug(f"step {step}: loss {loss:.4f}")
        return StepResult(step + 1, loss, components)

    def fit(self, samples: Sequence[TrainingSample], steps: int, batch_size: int = 4,
            progress: bool = False) -> List[StepResult]:
        """Run `steps` optimizer steps over batches drawn with the trainer seed."""
        if steps <= 0:
            return []
        if not samples:
            raise TrainingError("No training samples")
        rng = np.random.default_rng([self.seed, 0x5EED])
        history = []
        bar = tqdm(range(steps), desc="train", disable=not progress)
        for _ in bar:
            indices = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
            result = self.training_step([samples[i] for i in sorted(indices)])
            history.append(result)
            bar.set_postfix(loss=f"{result.loss:.3f}")
        logger.info(f"Trained {steps} steps, final loss {history[-1].loss:.4f}")
        return history


def evaluate_loss(trainer: Trainer, samples: Sequence[TrainingSample], step: int = 0) -> float:
    """Mean loss without touching parameters or optimizer state."""
    loss, _, _ = trainer.compute_gradients(samples, step)
    trainer.model.zero_grad()
    return loss
