"""
Command-line tests driven through click's CliRunner.
"""

import json

import pytest
import yaml
from click.testing import CliRunner
from PIL import Image

from vihe.cli.main import CHECKPOINT_FILE, EXIT_INVARIANT, cli

TINY_CONFIG = {
    'model': {'stages': 2, 'image_resolution': 16, 'patch': 4, 'language_tokens': 4, 'layers': 1,
              'model_dim': 24, 'heads': 2, 'mlp_ratio': 2, 'vocab_buckets': 64, 'seed': 3},
    'training': {'batch_size': 1, 'warmup_steps': 1},
    'logging': {'level': 'ERROR'},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Config, a one-demo dataset and an untrained checkpoint shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.yaml"
    config.write_text(yaml.safe_dump(TINY_CONFIG), encoding='utf-8')
    runner = CliRunner()
    result = runner.invoke(cli, ['gen-data', '--config', str(config), '--out', str(root / "data"),
                                 '--task', 'reach-color', '--demos', '1', '--observation', 'dense', '--seed', '4'])
    assert result.exit_code == 0, result.output
    result = runner.invoke(cli, ['train', '--config', str(config), '--data', str(root / "data"),
                                 '--steps', '0', '--out', str(root / "runs")])
    assert result.exit_code == 0, result.output
    return root


def test_version():
    result = CliRunner().invoke(cli, ['--version'])
    assert result.exit_code == 0
    assert "vihe" in result.output


def test_gen_data_layout(workdir):
    demo = workdir / "data" / "reach-color_0000"
    assert (demo / "meta.json").exists()
    assert (demo / "trajectory.bin").exists()
    assert (demo / "frame_0000.ply").exists()


def test_gen_data_defaults_to_every_task(tmp_path, mocker):
    generate = mocker.patch("vihe.cli.main.generate_dataset", return_value=tmp_path)
    result = CliRunner().invoke(cli, ['gen-data', '--out', str(tmp_path), '--demos', '2', '--seed', '1'])
    assert result.exit_code == 0, result.output
    tasks, demos, seed = generate.call_args.args[:3]
    assert tasks == ["peg-insert-2cm", "reach-color", "stack-offset"]
    assert (demos, seed) == (2, 1)


def test_train_writes_checkpoint_and_history(workdir):
    assert (workdir / "runs" / CHECKPOINT_FILE).exists()
    assert json.loads((workdir / "runs" / "history.json").read_text()) == []


def test_train_one_step(workdir, tmp_path):
    result = CliRunner().invoke(cli, ['train', '--config', str(workdir / "config.yaml"), '--data',
                                      str(workdir / "data"), '--steps', '1', '--out', str(tmp_path)])
    assert result.exit_code == 0, result.output
    history = json.loads((tmp_path / "history.json").read_text())
    assert len(history) == 1 and history[0]['step'] == 1
    assert set(history[0]['components']) >= {"stage0/pose", "stage1/pose"}


def test_inspect(workdir, tmp_path):
    result = CliRunner().invoke(cli, ['inspect', '--config', str(workdir / "config.yaml"), '--out', str(tmp_path),
                                      str(workdir / "runs" / CHECKPOINT_FILE)])
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "checkpoint.json").read_text())
    assert summary['matches_config'] is True
    assert summary['metadata']['steps'] == 0
    assert summary['tensor_count'] > 0


def test_oracle_eval(workdir, tmp_path):
    result = CliRunner().invoke(cli, ['eval', '--oracle', '--config', str(workdir / "config.yaml"),
                                      '--task', 'reach-color', '--episodes', '1', '--stage', '0', '--stage', '1',
                                      '--observation', 'dense', '--out', str(tmp_path)])
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "report.json").read_text())
    assert report['success']['reach-color']['stage0']['success_rate'] == 1.0
    assert report['success']['reach-color']['stage1']['success_rate'] == 1.0
    assert "reach-color stage0: 1/1" in result.output


def test_checkpoint_eval(workdir, tmp_path):
    result = CliRunner().invoke(cli, ['eval', '--checkpoint', str(workdir / "runs" / CHECKPOINT_FILE),
                                      '--config', str(workdir / "config.yaml"), '--task', 'reach-color',
                                      '--episodes', '1', '--observation', 'dense', '--out', str(tmp_path)])
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "report.json").read_text())
    assert report['executed_stages'] == [0, 1]
    assert report['success']['reach-color']['stage1']['episodes'] == 1


def test_render(workdir, tmp_path):
    result = CliRunner().invoke(cli, ['render', '--config', str(workdir / "config.yaml"),
                                      '--demo', str(workdir / "data" / "reach-color_0000"), '--keypose', '1',
                                      '--out', str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "stage0_top_rgb.png").exists()
    assert (tmp_path / "stage1_top_channels.f32").exists()


@pytest.mark.parametrize("flag", ['--paper-scale', '--full-scale'])
def test_render_full_size_views(workdir, tmp_path, flag):
    result = CliRunner().invoke(cli, ['render', '--config', str(workdir / "config.yaml"),
                                      '--demo', str(workdir / "data" / "reach-color_0000"), '--keypose', '1',
                                      '--stage', '1', flag, '--out', str(tmp_path)])
    assert result.exit_code == 0, result.output
    with Image.open(tmp_path / "stage1_top_rgb.png") as image:
        assert image.size == (110, 110)


def test_render_rejects_missing_stage(workdir, tmp_path):
    result = CliRunner().invoke(cli, ['render', '--config', str(workdir / "config.yaml"),
                                      '--demo', str(workdir / "data" / "reach-color_0000"), '--stage', '5',
                                      '--out', str(tmp_path)])
    assert result.exit_code == 2


def test_eval_needs_a_policy():
    result = CliRunner().invoke(cli, ['eval'])
    assert result.exit_code == 2
    assert "--checkpoint or --oracle" in result.output


def test_config_mismatch_exits_with_invariant_code(workdir):
    result = CliRunner().invoke(cli, ['eval', '--checkpoint', str(workdir / "runs" / CHECKPOINT_FILE),
                                      '--task', 'reach-color', '--episodes', '1', '--observation', 'dense'])
    assert result.exit_code == EXIT_INVARIANT
    assert "Error:" in result.output


def test_empty_dataset_exits_with_invariant_code(workdir, tmp_path):
    result = CliRunner().invoke(cli, ['train', '--config', str(workdir / "config.yaml"), '--data', str(tmp_path),
                                      '--steps', '0', '--out', str(tmp_path / "runs")])
    assert result.exit_code == EXIT_INVARIANT
