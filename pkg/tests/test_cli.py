import json

import pandas as pd
import pytest
from click.testing import CliRunner

from pathkernel.cli import cli

from tests.conftest import tiny_transformer_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = tiny_transformer_config(output_dir=str(root / "out"))
    config_path = root / "tiny.json"
    config_path.write_text(json.dumps(config.model_dump(mode='json')))
    result = CliRunner().invoke(cli, ["--log-level", "WARNING", "train", "--config", str(config_path)])
    assert result.exit_code == 0, result.output
    return config_path, root / "out" / "tiny"


def run(config_path, *args):
    command, rest = args[0], list(args[1:])
    return CliRunner().invoke(cli, ["--log-level", "WARNING", command, "--config", str(config_path)] + rest)


def test_train_writes_the_run_directory(workspace):
    _, run_dir = workspace
    for name in ("trajectory.epk", "curves.csv", "curves.svg", "dataset.csv", "manifest-train.json"):
        assert (run_dir / name).exists()
    manifest = json.loads((run_dir / "manifest-train.json").read_text())
    assert manifest['command'] == "train"
    assert "trajectory.epk" in manifest['outputs']
    assert manifest['seeds'] == {'init': 0, 'batches': 0, 'dataset': 0}
    curves = pd.read_csv(run_dir / "curves.csv")
    assert curves['step'].tolist() == [0, 1, 2, 3, 4]


def test_epk_verify(workspace):
    config_path, run_dir = workspace
    result = run(config_path, "epk-verify", "--T", "2")
    assert result.exit_code == 0, result.output
    report = json.loads((run_dir / "fidelity.json").read_text())
    assert report['replay_ok'] is True
    assert [r['T'] for r in report['results']] == [2]
    assert "T=2" in result.output
    assert all("seconds" not in key for r in report['results'] for key in r)
    manifest = json.loads((run_dir / "manifest-epk-verify.json").read_text())
    assert set(manifest['timings_seconds']) == {"T=2"}


@pytest.mark.parametrize("command, outputs", [
    ("scores", ["scores_kernel.csv", "scores_reg.csv", "scores_components.csv"]),
    ("kernel-matrix", ["kernel_decoder_1-2.csv", "kernel_decoder_3-4.svg", "kernel_matrix.json"]),
    ("similarity", ["similarity.csv", "similarity.svg", "similarity.json"]),
    ("step-importance", ["step_importance.csv", "step_importance_reg.svg", "step_importance_D.svg"]),
    ("prune", ["parameter_scores.csv", "prune.csv", "prune_summary.csv", "prune.json"]),
    ("swap", ["confusion_step2.csv", "swap.csv"]),
    ("reinit-train", ["reinit_curves.csv", "reinit_summary.csv", "reinit.svg"]),
])
def test_analysis_commands(workspace, command, outputs):
    config_path, run_dir = workspace
    result = run(config_path, command)
    assert result.exit_code == 0, result.output
    for name in outputs:
        assert (run_dir / name).exists(), name
    assert (run_dir / f"manifest-{command}.json").exists()


def test_scores_components_cover_every_window(workspace):
    config_path, run_dir = workspace
    assert run(config_path, "scores").exit_code == 0
    frame = pd.read_csv(run_dir / "scores_components.csv")
    assert list(frame.columns) == ['component', 'window_start', 'window_end', 'psi', 'psi_reg']
    assert len(frame) == 6 * 2


def test_lasso_with_a_fixed_penalty(workspace):
    config_path, run_dir = workspace
    result = run(config_path, "lasso", "--penalty", "1.0")
    assert result.exit_code == 0, result.output
    report = json.loads((run_dir / "lasso.json").read_text())
    assert report['penalty'] == 1.0
    assert report['dominant'] is None
    assert len(pd.read_csv(run_dir / "lasso_predictions.csv")) == 15


def test_report(workspace):
    config_path, run_dir = workspace
    result = run(config_path, "report")
    assert result.exit_code == 0, result.output
    report = json.loads((run_dir / "report.json").read_text())
    assert report['threshold'] == 0.99
    assert "memorization step" in result.output


def test_missing_trajectory_exits_with_2(tmp_path):
    config = tiny_transformer_config(output_dir=str(tmp_path))
    config_path = tmp_path / "tiny.json"
    config_path.write_text(json.dumps(config.model_dump(mode='json')))
    result = run(config_path, "scores")
    assert result.exit_code == 2
    assert "trajectory not found" in result.output


def test_corrupt_trajectory_exits_with_2(workspace, tmp_path):
    config_path, _ = workspace
    broken = tmp_path / "broken.epk"
    broken.write_bytes(b"not a trajectory")
    result = run(config_path, "epk-verify", "--trajectory", str(broken))
    assert result.exit_code == 2


def test_malformed_override_exits_with_1(workspace):
    config_path, _ = workspace
    assert run(config_path, "scores", "--set", "epk.T").exit_code == 1


def test_unknown_component_exits_with_1(workspace):
    config_path, _ = workspace
    result = run(config_path, "scores", "--set", 'epk.components=["nope"]')
    assert result.exit_code == 1
    assert "unknown component 'nope'" in result.output


def test_missing_config_file_exits_with_2(tmp_path):
    result = run(tmp_path / "absent.json", "report")
    assert result.exit_code == 2
