"""Command line driver: outputs, exit codes, determinism."""

import subprocess
import sys

import numpy as np
import pytest

from flowagg.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_IO,
    EXIT_OK,
    EXIT_VERIFY,
    main,
)
from flowagg.containers import read_container, write_container
from flowagg.scenegen import SCENE_TENSORS

LIGHT_CFG = """
scene.n_clusters = 2
scene.points_per_cluster = 25
scene.occlusion_fraction = 0.3
scene.occlusion_mode = local
scene.context_scale = 4.0
scene.context_dim = 12
scene.motion_dim = 12
module.context_dim = 12
module.motion_dim = 12
module.qk_dim = 6
module.disp_dim = 4
module.k = 4
train.steps = 12
train.learning_rate = 0.02
"""


@pytest.fixture
def light_cfg(tmp_path):
    path = tmp_path / "light.cfg"
    path.write_text(LIGHT_CFG)
    return str(path)


def test_gen_writes_scene_container(tmp_path, light_cfg, capsys):
    out = tmp_path / "scene.gtc"
    assert main(["gen", "--config", light_cfg, "--out", str(out)]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "n_points=50" in stdout
    assert "n_occluded=15" in stdout
    named = read_container(out)
    assert set(named) == set(SCENE_TENSORS)
    assert named["frame1"].shape == (50, 3)


def test_gen_is_byte_identical_across_runs(tmp_path, light_cfg):
    a, b = tmp_path / "a.gtc", tmp_path / "b.gtc"
    main(["gen", "--config", light_cfg, "--out", str(a)])
    main(["gen", "--config", light_cfg, "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_train_writes_report_and_params(tmp_path, light_cfg, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", light_cfg, "--out", str(out)]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "final_loss=" in stdout
    assert "final_epe_occluded=" in stdout
    assert "wall_time_s=" in stdout
    report = (out / "report.txt").read_text()
    assert "wall_time" not in report
    params = read_container(out / "params.gtc")
    assert "qk_proj" in params and "decoder.weight" in params


def test_train_reruns_are_byte_identical(tmp_path, light_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["train", "--config", light_cfg, "--out", str(a)])
    main(["train", "--config", light_cfg, "--out", str(b)])
    assert (a / "report.txt").read_bytes() == (b / "report.txt").read_bytes()
    assert (a / "params.gtc").read_bytes() == (b / "params.gtc").read_bytes()


def test_train_on_pregenerated_scene(tmp_path, light_cfg):
    scene = tmp_path / "scene.gtc"
    main(["gen", "--config", light_cfg, "--out", str(scene)])
    out = tmp_path / "run"
    assert main(["train", "--config", light_cfg, "--scene", str(scene),
                 "--out", str(out)]) == EXIT_OK


def test_eval_scores_prediction(tmp_path, light_cfg, capsys):
    scene_path = tmp_path / "scene.gtc"
    main(["gen", "--config", light_cfg, "--out", str(scene_path)])
    capsys.readouterr()
    named = read_container(scene_path)
    pred = tmp_path / "pred.gtc"
    write_container(pred, [("flow", named["gt_flow"])])
    assert main(["eval", "--pred", str(pred), "--scene", str(scene_path)]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "epe_all=0.0" in stdout
    assert "n_points_occluded=15" in stdout
    assert "acc_strict_all=1.0" in stdout


def test_eval_rejects_missing_flow_tensor(tmp_path, light_cfg):
    scene_path = tmp_path / "scene.gtc"
    main(["gen", "--config", light_cfg, "--out", str(scene_path)])
    pred = tmp_path / "pred.gtc"
    write_container(pred, [("speed", np.zeros((50, 3)))])
    assert main(["eval", "--pred", str(pred), "--scene", str(scene_path)]) == EXIT_CONFIG


def test_eval_rejects_point_count_mismatch(tmp_path, light_cfg):
    scene_path = tmp_path / "scene.gtc"
    main(["gen", "--config", light_cfg, "--out", str(scene_path)])
    pred = tmp_path / "pred.gtc"
    write_container(pred, [("flow", np.zeros((7, 3)))])
    assert main(["eval", "--pred", str(pred), "--scene", str(scene_path)]) == EXIT_CONFIG


def test_gradcheck_passes_on_default(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    stdout = capsys.readouterr().out
    assert "gradcheck=pass" in stdout


def test_gradcheck_detects_corruption(capsys):
    assert main(["gradcheck", "--corrupt"]) == EXIT_VERIFY
    assert "gradcheck=fail" in capsys.readouterr().out


def test_ablate_writes_table_and_reports(tmp_path, light_cfg, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", light_cfg, "--out", str(out)]) == EXIT_OK
    table = (out / "ablation.txt").read_text()
    for variant in ("full", "plain_aggregator", "no_local", "no_global",
                    "backbone_only"):
        assert variant in table
        assert (out / f"report_{variant}.txt").exists()
    assert capsys.readouterr().out == table


def test_defaults_round_trips(tmp_path, capsys):
    assert main(["defaults"]) == EXIT_OK
    text = capsys.readouterr().out
    path = tmp_path / "d.cfg"
    path.write_text(text)
    out = tmp_path / "scene.gtc"
    assert main(["gen", "--config", str(path), "--out", str(out)]) == EXIT_OK


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("scene.wibble = 3\n")
    out = tmp_path / "x.gtc"
    assert main(["gen", "--config", str(bad), "--out", str(out)]) == EXIT_CONFIG


def test_missing_input_file_exits_3(tmp_path):
    assert main(["eval", "--pred", str(tmp_path / "nope.gtc"),
                 "--scene", str(tmp_path / "nope2.gtc")]) == EXIT_IO


def test_malformed_container_exits_2(tmp_path, light_cfg):
    junk = tmp_path / "junk.gtc"
    junk.write_bytes(b"not a container")
    assert main(["eval", "--pred", str(junk), "--scene", str(junk)]) == EXIT_CONFIG


def test_divergence_exits_4(tmp_path):
    cfg = tmp_path / "steep.cfg"
    steep = LIGHT_CFG.replace("train.learning_rate = 0.02",
                              "train.learning_rate = 1e9")
    cfg.write_text(steep + "train.optimizer = sgd\n")
    out = tmp_path / "run"
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_DIVERGED


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["gen"])  # --out is required
    assert exc.value.code == EXIT_CONFIG


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "flowagg.cli", "defaults"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_OK
    assert "scene.n_clusters" in proc.stdout
