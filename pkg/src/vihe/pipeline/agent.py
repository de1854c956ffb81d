"""
Staged inference: render the global rig, predict, move the rig to the
prediction, render again and refine, for every stage.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

from vihe.core.geometry import CameraRig, Pose, Workspace, camera_rig_from_action
from vihe.core.renderer import PointCloud, RenderedStage, render_stage
from vihe.diffcore.tensor import no_grad
from vihe.exceptions import RigDivergenceError
from vihe.model.decode import Action, decode_action
from vihe.model.network import ActionPrediction, VIHENetwork
from vihe.model.tokens import Proprioception

logger = logging.getLogger(__name__)

RIG_SOURCE_INFERENCE = "prediction"


@dataclass(frozen=True, eq=False)
class InferenceResult:
    """
    Actions of every stage; the last one is the executed action.

    Attributes:
        actions: Decoded action per stage
        predictions: Raw stage outputs
        rigs: Rig each stage was rendered from
        rendered: Rendered stages
        rig_source: Where refinement rigs came from ("prediction" at inference)
    """
    actions: List[Action]
    predictions: List[ActionPrediction]
    rigs: List[CameraRig]
    rendered: List[RenderedStage]
    rig_source: str = RIG_SOURCE_INFERENCE

    @property
    def final(self) -> Action:
        return self.actions[-1]

    def stage_action(self, stage: int) -> Action:
        return self.actions[stage]


class Agent:
    """Wraps a trained network with the rendering loop."""

    def __init__(self, model: VIHENetwork, workspace: Workspace, splat_radius: int = 1,
                 inflation: float = 0.5, render_workers: int = 1):
        self.model = model
        self.workspace = workspace
        self.splat_radius = splat_radius
        self.inflation = inflation
        self.render_workers = render_workers

    def rig_for(self, previous: Pose, stage: int) -> CameraRig:
        config = self.model.config
        return camera_rig_from_action(previous, stage, self.workspace, config.image_resolution,
                                      zoom_in=config.zoom_in, follow_rotation=config.follow_rotation,
                                      look_inward=config.look_inward, inflation=self.inflation)

    def infer(self, cloud: PointCloud, instruction: str, proprio: Proprioception,
              stages: Optional[int] = None) -> InferenceResult:
        """
        Autoregressive refinement over the configured number of stages.

        Each stage re-runs the network on all stages rendered so far; the stage
        mask keeps earlier outputs unchanged.

        Raises:
            RigDivergenceError: If a prediction leaves the inflated workspace; it carries
                the actions of the stages decoded so far
        """
        config = self.model.config
        stages = config.stages if stages is None else stages
        previous = Pose.identity()
        rendered: List[RenderedStage] = []
        rigs: List[CameraRig] = []
        actions: List[Action] = []
        predictions: List[ActionPrediction] = []
        with no_grad():
            for stage in range(stages):
                try:
                    rig = self.rig_for(previous, stage)
                except RigDivergenceError as e:
                    e.completed_actions = list(actions)
                    raise
                rigs.append(rig)
                rendered.append(render_stage(cloud, rig, self.splat_radius, self.render_workers))
                prediction = self.model(rendered, instruction, proprio)[stage]
                action = decode_action(prediction, previous, stage, config.relative_refinement,
                                       stride=config.candidate_stride)
                predictions.append(prediction)
                actions.append(action)
                previous = action.pose
        logger.debug(f"Inferred {len(actions)} stage actions; final {actions[-1].pose}")
        return InferenceResult(actions, predictions, rigs, rendered)


def infer(cloud: PointCloud, instruction: str, proprio: Proprioception, model: VIHENetwork,
          workspace: Optional[Workspace] = None, splat_radius: int = 1) -> InferenceResult:
    """Functional form of Agent.infer with the default workspace."""
    workspace = workspace or Workspace((-0.5, -0.5, 0.0), (0.5, 0.5, 1.0))
    return Agent(model, workspace, splat_radius).infer(cloud, instruction, proprio)
