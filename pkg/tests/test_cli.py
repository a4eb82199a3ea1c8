import csv
import filecmp
import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from massedit import cli, io, lm, pipeline
from massedit.hypernet import HyperNetwork

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    """The committed tiny config shrunk further so each command takes about a second."""
    with open(os.path.join(ROOT, "configs", "tiny.json")) as f:
        cfg = json.load(f)
    cfg["editor"].update(steps=2, m_edits=4, sub_batch_size=4)
    cfg["task"].update(num_facts=64, num_unrelated=16)
    cfg["model"].update(width=8, hidden=16, epochs=3)
    path = tmp_path_factory.mktemp("cfg") / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def invoke(*args, ok=True):
    result = CliRunner().invoke(cli.main, [str(a) for a in args], catch_exceptions=False)
    if ok:
        assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def task_dir(config_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("task")
    invoke("gen-task", "--config", config_path, "--out", out, "--deterministic")
    return str(out)


@pytest.fixture(scope="module")
def editor_path(config_path, task_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("editor")
    invoke("train-editor", "--config", config_path, "--task", task_dir, "--out", out, "--deterministic")
    (name,) = [p for p in os.listdir(out) if p.startswith("editor-")]
    return str(out / name)


def _hash(config_path):
    return pipeline.ExperimentConfig.load(config_path).hash()


def test_gradcheck_passes_and_reports(tmp_path):
    result = invoke("gradcheck", "--out", tmp_path)
    assert "FAIL" not in result.output and result.output.count("PASS") >= 5
    (report,) = [p for p in os.listdir(tmp_path) if p.startswith("gradcheck-")]
    data = json.load(open(tmp_path / report))
    assert data["passed"] is True


def test_oracle_eval_is_perfect(config_path, task_dir, tmp_path):
    invoke("eval", "--config", config_path, "--task", task_dir, "--oracle", "--out", tmp_path)
    with open(tmp_path / f"metrics-{_hash(config_path)}.csv") as f:
        (row,) = list(csv.DictReader(f))
    assert row["method"] == "oracle" and float(row["es"]) == 1.0 and float(row["gs"]) == 1.0


def test_zero_steps_checkpoint_is_the_initialization(config_path, task_dir, tmp_path):
    cfg = json.load(open(config_path))
    cfg["editor"]["steps"] = 0
    path = tmp_path / "zero.json"
    path.write_text(json.dumps(cfg))
    invoke("train-editor", "--config", path, "--task", task_dir, "--out", tmp_path / "out", "--deterministic")
    (name,) = [p for p in os.listdir(tmp_path / "out") if p.startswith("editor-")]
    saved = HyperNetwork.load(tmp_path / "out" / name)
    config = pipeline.ExperimentConfig.load(path)
    with open(os.path.join(task_dir, "task-manifest.json")) as f:
        base = lm.EditableModel.load(os.path.join(task_dir, json.load(f)["base_model"]))
    _, init = pipeline.prepare_editor(cli._editable(base, cli.Run("x", config, str(tmp_path / "o2"), 0, True, False)),
                                      config.editor)
    assert saved.params.keys() == init.params.keys()
    for k in init.params:
        np.testing.assert_array_equal(saved.params[k], init.params[k])


def test_refuses_to_clobber_and_writes_error_record(config_path, task_dir, tmp_path):
    args = ("eval", "--config", config_path, "--task", task_dir, "--out", tmp_path)
    invoke(*args)
    result = invoke(*args, ok=False)
    assert result.exit_code != 0 and "--force" in result.output
    err = json.load(open(tmp_path / f"error-eval-{_hash(config_path)}.json"))
    assert err["status"] == "failed" and err["config_hash"] == _hash(config_path)
    invoke(*args, "--force")


def test_failure_exit_status_and_record(config_path, task_dir, tmp_path):
    cfg = json.load(open(config_path))
    cfg["editor"].update(lambda_init=1e-300, steps=1)
    path = tmp_path / "noreg.json"
    path.write_text(json.dumps(cfg))
    result = invoke("train-editor", "--config", path, "--task", task_dir, "--out", tmp_path / "o", ok=False)
    assert result.exit_code != 0
    (name,) = [p for p in os.listdir(tmp_path / "o") if p.startswith("error-train-editor-")]
    err = json.load(open(tmp_path / "o" / name))
    assert err["error_type"] == "SingularMatrixError" and "step 0" in err["message"]


def test_invalid_config_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"editor": {"rnak": 3}}))
    result = invoke("gradcheck", "--config", path, "--out", tmp_path / "o", ok=False)
    assert result.exit_code != 0


def test_artifacts_embed_hash_and_seed(config_path, task_dir, editor_path, tmp_path):
    invoke("edit", "--config", config_path, "--task", task_dir, "--editor", editor_path, "--out", tmp_path,
           "--seed", 7)
    config = pipeline.ExperimentConfig.load(config_path).with_seed(7)
    manifest = json.load(open(tmp_path / f"manifest-edit-{config.hash()}.json"))
    assert manifest["config_hash"] == config.hash() and manifest["seed"] == 7
    meta, _ = io.load_arrays(tmp_path / f"post_model-{config.hash()}.bin")
    assert meta["config_hash"] == config.hash() and meta["seed"] == 7
    with open(os.path.join(task_dir, "task-manifest.json")) as f:
        assert json.load(f)["config_hash"] == _hash(config_path)


def _twice(tmp_path, *args):
    dirs = []
    for name in ("a", "b"):
        out = tmp_path / name
        invoke(*args, "--out", out, "--deterministic")
        dirs.append(out)
    return dirs


def _identical(a, b):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only
    for name in cmp.common_files:
        assert open(a / name, "rb").read() == open(b / name, "rb").read(), name
    for sub in cmp.common_dirs:
        _identical(a / sub, b / sub)


@pytest.mark.parametrize("command", ["gen-task", "train-editor", "edit", "eval", "scaling-curve", "ablate",
                                     "gradcheck"])
def test_deterministic_artifacts_are_byte_identical(command, config_path, task_dir, editor_path, tmp_path):
    extra = {
        "gen-task": (),
        "train-editor": ("--task", task_dir),
        "edit": ("--task", task_dir, "--editor", editor_path),
        "eval": ("--task", task_dir, "--editor", editor_path),
        "scaling-curve": ("--task", task_dir, "--m-grid", "2,4", "--seeds", "0,1,2"),
        "ablate": ("--task", task_dir, "--seeds", "0", "--m", "4"),
        "gradcheck": (),
    }[command]
    a, b = _twice(tmp_path, command, "--config", config_path, *extra)
    assert os.listdir(a)
    _identical(a, b)
