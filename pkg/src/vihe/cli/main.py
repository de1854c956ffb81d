"""
Command-line entry points: gen-data, train, eval, render and inspect.

Exit codes: 0 on success, 2 on usage errors (click), 3 when the package
raises a VIHEError.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import click

from vihe import __version__
from vihe.bench.evaluate import OraclePolicy, evaluate, evaluate_model, validate_report
from vihe.bench.generate import OBSERVATION_DENSE, OBSERVATION_SENSORS, default_sensors, generate_dataset
from vihe.bench.tasks import TASKS
from vihe.config import ConfigManager, config_hash
from vihe.core.geometry import Pose, Workspace, camera_rig_from_action
from vihe.core.renderer import render_stage
from vihe.exceptions import VIHEError
from vihe.model.config import ModelConfig
from vihe.model.network import VIHENetwork, checkpoint_summary
from vihe.pipeline.agent import Agent
from vihe.pipeline.dataset import build_samples, load_dataset, load_demonstration
from vihe.pipeline.trainer import Trainer
from vihe.utils.io_utils import save_stage_images

logger = logging.getLogger(__name__)

EXIT_INVARIANT = 3
CHECKPOINT_FILE = "model.ckpt"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
FULL_SCALE_KEYS = ('image_resolution', 'patch', 'language_tokens', 'layers', 'model_dim', 'heads',
                   'candidate_stride')


class VIHEGroup(click.Group):
    """Command group mapping package errors to exit code 3."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except VIHEError as e:
            logger.debug("Command failed", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            ctx.exit(EXIT_INVARIANT)


@dataclass
class RunContext:
    config: ConfigManager
    model_config: ModelConfig
    seed: int
    out: Optional[Path]

    @property
    def workspace(self) -> Workspace:
        return Workspace.from_config(self.config.section('workspace'))


def setup_logging(level: str, log_file: Optional[str], verbose: bool) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(level=logging.DEBUG if verbose else getattr(logging, str(level).upper(), logging.INFO),
                        format=LOG_FORMAT, handlers=handlers, force=True)


def model_config_for(config: ConfigManager, full_scale: bool) -> ModelConfig:
    model_config = ModelConfig.from_dict(config.section('model'))
    if full_scale:
        full = ModelConfig.full_scale().to_dict()
        model_config = model_config.replace(**{k: full[k] for k in FULL_SCALE_KEYS})
    return model_config


def common_options(func):
    """--seed, --config, --out, --paper-scale and --verbose, shared by every command."""
    func = click.option('--verbose', '-v', is_flag=True, help='Debug logging.')(func)
    func = click.option('--paper-scale', '--full-scale', 'full_scale', is_flag=True,
                        help='Full-size model (110 px views, 77 language tokens).')(func)
    func = click.option('--out', 'out', type=click.Path(file_okay=False), default=None, help='Output directory.')(func)
    func = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None,
                        help='YAML configuration file (defaults are used when omitted).')(func)
    func = click.option('--seed', type=int, default=None, help='Root seed (defaults to training.seed).')(func)
    return func


def make_context(seed: Optional[int], config_path: Optional[str], out: Optional[str], full_scale: bool,
                 verbose: bool) -> RunContext:
    config = ConfigManager(config_path, create_missing=False)
    logging_section = config.section('logging')
    setup_logging(logging_section.get('level', 'INFO'), logging_section.get('file'), verbose)
    seed = int(config.get('training.seed', 0)) if seed is None else int(seed)
    return RunContext(config, model_config_for(config, full_scale), seed, Path(out) if out else None)


@click.group(cls=VIHEGroup)
@click.version_option(version=__version__, prog_name="vihe")
def cli():
    """Virtual in-hand view rendering and multi-stage action refinement."""


@cli.command('gen-data')
@common_options
@click.option('--task', 'tasks', multiple=True, type=click.Choice(sorted(TASKS)),
              help='Task to generate (repeatable; all tasks by default).')
@click.option('--demos', type=click.IntRange(min=1), default=10, show_default=True, help='Demonstrations per task.')
@click.option('--observation', type=click.Choice([OBSERVATION_SENSORS, OBSERVATION_DENSE]),
              default=OBSERVATION_SENSORS, show_default=True)
def gen_data(seed, config_path, out, full_scale, verbose, tasks, demos, observation):
    """Generate oracle demonstrations."""
    run = make_context(seed, config_path, out, full_scale, verbose)
    root = run.out or Path("data")
    path = generate_dataset(list(tasks) or sorted(TASKS), demos, run.seed, root, observation, progress=verbose)
    click.echo(str(path))


@cli.command()
@common_options
@click.option('--data', 'data_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--steps', type=click.IntRange(min=0), default=1000, show_default=True)
@click.option('--batch-size', type=click.IntRange(min=1), default=None)
@click.option('--resume', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Checkpoint to continue from.')
def train(seed, config_path, out, full_scale, verbose, data_dir, steps, batch_size, resume):
    """Train a network; --steps 0 writes an untrained checkpoint."""
    run = make_context(seed, config_path, out, full_scale, verbose)
    settings = run.config.resolved()
    settings['training']['seed'] = run.seed
    settings['model'] = run.model_config.to_dict()
    out_dir = run.out or Path("runs")
    out_dir.mkdir(parents=True, exist_ok=True)

    demos = load_dataset(data_dir, settings['training'].get('v_eps'))
    samples = build_samples(demos)
    model = VIHENetwork.load(resume, run.model_config) if resume else VIHENetwork(run.model_config, seed=run.seed)
    model.train()
    trainer = Trainer.from_config(model, settings)
    history = trainer.fit(samples, steps, batch_size or int(settings['training']['batch_size']), progress=verbose)

    checkpoint = out_dir / CHECKPOINT_FILE
    model.save(checkpoint, {'steps': steps, 'seed': run.seed, 'samples': len(samples),
                            'final_loss': history[-1].loss if history else None})
    with open(out_dir / "history.json", 'w', encoding='utf-8') as f:
        json.dump([{'step': r.step, 'loss': r.loss, 'components': r.components} for r in history], f, indent=2)
    click.echo(str(checkpoint))


@cli.command('eval')
@common_options
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--oracle', is_flag=True, help='Evaluate the scripted oracle instead of a checkpoint.')
@click.option('--task', 'tasks', multiple=True, type=click.Choice(sorted(TASKS)))
@click.option('--episodes', type=click.IntRange(min=1), default=None)
@click.option('--stage', 'stages', multiple=True, type=click.IntRange(min=0),
              help='Executed stage (repeatable; evaluation.stages by default).')
@click.option('--observation', type=click.Choice([OBSERVATION_SENSORS, OBSERVATION_DENSE]),
              default=OBSERVATION_SENSORS, show_default=True)
@click.option('--report', 'report_format', type=click.Choice(['json', 'text']), default='text', show_default=True)
def eval_command(seed, config_path, out, full_scale, verbose, checkpoint, oracle, tasks, episodes, stages,
                 observation, report_format):
    """Roll out episodes and report success and per-stage errors."""
    if not checkpoint and not oracle:
        raise click.UsageError("Pass --checkpoint or --oracle")
    run = make_context(seed, config_path, out, full_scale, verbose)
    section = run.config.section('evaluation')
    episodes = episodes or int(section['episodes'])
    stages = list(stages) or [int(s) for s in section['stages']]
    task_ids = list(tasks) or sorted(TASKS)
    sensors = default_sensors() if observation == OBSERVATION_SENSORS else None
    workers = int(section.get('workers', 1))

    if oracle:
        report = evaluate(OraclePolicy(run.model_config.stages), task_ids, episodes, run.seed, stages, sensors,
                          workers, config_hash(run.model_config.to_dict()), progress=verbose)
    else:
        model = VIHENetwork.load(checkpoint, run.model_config)
        rendering = run.config.section('rendering')
        report = evaluate_model(model, run.workspace, task_ids, episodes, run.seed, stages,
                                int(rendering['splat_radius']), float(run.config.get('workspace.inflation', 0.5)),
                                sensors, workers, progress=verbose)

    if run.out:
        report.save(run.out / "report.json")
    if report_format == 'json':
        validate_report(report.to_dict())
        click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        for task, by_stage in report.success.items():
            for stage, entry in by_stage.items():
                click.echo(f"{task} {stage}: {entry['successes']}/{entry['episodes']} "
                           f"({entry['success_rate']:.0%})")
            for stage, entry in report.errors.get(task, {}).items():
                click.echo(f"{task} {stage} error: median {entry['translation_m']['p50'] * 100:.2f} cm, "
                           f"{entry['rotation_deg']['p50']:.1f} deg")


@cli.command()
@common_options
@click.option('--demo', 'demo_dir', type=click.Path(exists=True, file_okay=False), required=True,
              help='Demonstration directory.')
@click.option('--keypose', type=click.IntRange(min=0), default=0, show_default=True,
              help='Keypose step whose observation is rendered.')
@click.option('--stage', 'stages', multiple=True, type=click.IntRange(min=0),
              help='Stage to dump (repeatable; all by default).')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Place refinement rigs at model predictions instead of the ground truth.')
def render(seed, config_path, out, full_scale, verbose, demo_dir, keypose, stages, checkpoint):
    """Dump the per-stage virtual views of a demonstration frame."""
    run = make_context(seed, config_path, out, full_scale, verbose)
    demo = load_demonstration(demo_dir)
    samples = demo.samples()
    if keypose >= len(samples):
        raise click.BadParameter(f"demo has {len(samples)} keyposes", param_hint='--keypose')
    sample = samples[keypose]
    model_config = run.model_config
    wanted = sorted(set(stages)) or list(range(model_config.stages))
    if wanted[-1] >= model_config.stages:
        raise click.BadParameter(f"model has {model_config.stages} stages", param_hint='--stage')
    splat_radius = int(run.config.get('rendering.splat_radius', 1))
    inflation = float(run.config.get('workspace.inflation', 0.5))

    if checkpoint:
        model = VIHENetwork.load(checkpoint, model_config)
        model.eval()
        rendered = Agent(model, run.workspace, splat_radius, inflation).infer(
            sample.cloud, sample.instruction, sample.proprio).rendered
    else:
        rendered = []
        for stage in range(wanted[-1] + 1):
            anchor = Pose.identity() if stage == 0 else sample.action.pose
            rig = camera_rig_from_action(anchor, stage, run.workspace, model_config.image_resolution,
                                         zoom_in=model_config.zoom_in, follow_rotation=model_config.follow_rotation,
                                         look_inward=model_config.look_inward, inflation=inflation)
            rendered.append(render_stage(sample.cloud, rig, splat_radius))

    out_dir = run.out or Path("renders")
    for stage in wanted:
        save_stage_images(rendered[stage], out_dir)
    click.echo(str(out_dir))


@cli.command()
@common_options
@click.argument('checkpoint', type=click.Path(exists=True, dir_okay=False))
def inspect(seed, config_path, out, full_scale, verbose, checkpoint):
    """Print a checkpoint's header and configuration."""
    run = make_context(seed, config_path, out, full_scale, verbose)
    summary = checkpoint_summary(checkpoint)
    stored = summary['metadata'].get('model_config', {})
    summary['matches_config'] = config_hash(stored) == config_hash(run.model_config.to_dict())
    text = json.dumps(summary, indent=2, sort_keys=True)
    if run.out:
        run.out.mkdir(parents=True, exist_ok=True)
        (run.out / "checkpoint.json").write_text(text, encoding='utf-8')
    click.echo(text)
