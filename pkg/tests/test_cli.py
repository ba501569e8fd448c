import csv
import json
import shutil

import numpy as np
import pytest

from asl import parallel
from asl.cli import main
from asl.pipeline import ConfigError, RunConfig, parse_config, read_pgm, write_pgm

TINY = """
[run]
seed = 3
[corpus]
num_train = 16
num_val = 1
num_test = 4
height = 16
width = 16
[model]
layer_dims = 8
[pretrain]
epochs = 20
lr = 0.2
[mgu]
per_class_budget = 1
[aaft]
epochs = 2
[eval]
delta_step = 0.25
[pilot]
pretrain_epochs = 20
epochs = 2
alpha = 0.5
"""

STAGES = ["gen-data", "train", "mgu", "finetune", "eval", "sweep", "pilot"]


def _write(tmp_path, text=TINY, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _pipeline(cfg, run, stages=STAGES):
    for stage in stages:
        assert main([stage, "--config", str(cfg), "--run", str(run)]) == 0, stage


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = _write(root)
    _pipeline(cfg, root / "run")
    return cfg, root / "run"


def test_full_pipeline_outputs(tiny_run):
    _, run = tiny_run
    with open(run / "eval/finetuned/metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "value"] and len(rows) == 5
    assert (run / "eval/pretrained/metrics.csv").exists()
    heatmaps = sorted((run / "eval/finetuned/heatmaps").iterdir())
    assert len(heatmaps) == 4
    img = read_pgm(heatmaps[0])
    assert img.shape == (16, 16)
    assert heatmaps[0].read_bytes().startswith(b"P5\n16 16\n255\n")
    with open(run / "sweep/curves.csv") as fh:
        assert len(list(csv.reader(fh))) == 6
    assert (run / "pilot/pilot.csv").exists() and (run / "pilot/pilot_anomaly.csv").exists()
    assert (run / "model/finetune.csv").exists()
    assert len(list((run / "aux/traces").iterdir())) == 12
    assert not (run / ".lock").exists()


def test_manifest_inventory(tiny_run):
    _, run = tiny_run
    man = json.loads((run / "run_manifest.json").read_text())
    assert set(man["stages"]) == set(STAGES)
    assert man["seed"] == 3 and man["version"]
    assert "model/finetuned.aslm" in man["files"]
    assert len(man["files"]["model/finetuned.aslm"]) == 64
    assert parse_config(man["config"]).run.seed == 3


def test_rerun_is_digest_identical(tiny_run, tmp_path):
    cfg, run = tiny_run
    _pipeline(cfg, tmp_path / "again")
    first = json.loads((run / "run_manifest.json").read_text())["files"]
    second = json.loads((tmp_path / "again/run_manifest.json").read_text())["files"]
    assert first == second


def test_seed_override_changes_corpus(tiny_run, tmp_path):
    cfg, run = tiny_run
    assert main(["gen-data", "--config", str(cfg), "--run", str(tmp_path / "s"), "--seed", "18446744073709551615"]) == 0
    a = (run / "corpus/train/00000.aseg").read_bytes()
    b = (tmp_path / "s/corpus/train/00000.aseg").read_bytes()
    assert a != b


def test_heatmap_scaling(tmp_path):
    write_pgm(tmp_path / "h.pgm", np.array([[0.0, 0.5], [1.0, 0.2]]))
    np.testing.assert_array_equal(read_pgm(tmp_path / "h.pgm"), [[0, 128], [255, 51]])


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "none.ini"), "--run", str(tmp_path / "r")]) == 2
    assert "none.ini" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


@pytest.mark.parametrize("text, needle", [
    ("[corpus]\nnum_clases = 3\n", "num_clases"),
    ("[bogus]\n", "bogus"),
    ("[pretrain]\nlr = -1\n", "lr"),
    ("[pretrain]\nlr = fast\n", "fast"),
    ("[mgu]\nclip_lo = 2\n", "clip_lo"),
    ("[aaft]\nloss = L2\n", "KL or ER"),
    ("[eval]\ndelta_step = 0.3\n", "delta_step"),
    ("[corpus]\nlayout = spiral\n", "layout"),
    ("[pilot]\nsubsets = 20\n", "subsets"),
    ("not a config", "config"),
])
def test_bad_config_exit_2_without_side_effects(tmp_path, capsys, text, needle):
    cfg = _write(tmp_path, text)
    assert main(["gen-data", "--config", str(cfg), "--run", str(tmp_path / "r")]) == 2
    assert needle in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["fly", "--config", "x", "--run", "y"]) == 2
    assert main(["train", "--config", "x"]) == 2
    assert main(["train", "--config", "x", "--run", "y", "--seed", "-1"]) == 2
    assert main(["train", "--config", "x", "--run", "y", "--seed", str(2**64)]) == 2


def test_eval_before_train_names_checkpoint(tmp_path, capsys):
    cfg = _write(tmp_path)
    assert main(["gen-data", "--config", str(cfg), "--run", str(tmp_path / "r")]) == 0
    assert main(["eval", "--config", str(cfg), "--run", str(tmp_path / "r")]) == 1
    assert "pretrained.aslm" in capsys.readouterr().err


def test_finetune_needs_auxiliary_set(tiny_run, tmp_path, capsys):
    cfg, run = tiny_run
    assert main(["finetune", "--config", str(cfg), "--run", str(tmp_path / "empty")]) == 1
    assert "pretrained.aslm" in capsys.readouterr().err
    assert not (tmp_path / "empty").exists()
    shutil.copytree(run / "corpus", tmp_path / "r/corpus")
    shutil.copytree(run / "model", tmp_path / "r/model")
    assert main(["finetune", "--config", str(cfg), "--run", str(tmp_path / "r")]) == 1
    assert "aux/manifest.txt" in capsys.readouterr().err


def test_zero_test_scenes_refused(tmp_path, capsys):
    cfg = _write(tmp_path, TINY.replace("num_test = 4", "num_test = 0"))
    run = tmp_path / "r"
    _pipeline(cfg, run, ["gen-data", "train"])
    assert main(["eval", "--config", str(cfg), "--run", str(run)]) == 1
    assert "no test scenes" in capsys.readouterr().err


def test_corrupt_checkpoint_reports_offset(tiny_run, tmp_path, capsys):
    cfg, run = tiny_run
    copy = tmp_path / "r"
    shutil.copytree(run / "corpus", copy / "corpus")
    (copy / "model").mkdir()
    (copy / "model/pretrained.aslm").write_bytes(b"ASLM\x02" + b"\x00" * 30)
    assert main(["eval", "--config", str(cfg), "--run", str(copy)]) == 1
    assert "byte 4" in capsys.readouterr().err


def test_locked_run_dir_refused(tiny_run, tmp_path, capsys):
    cfg, _ = tiny_run
    (tmp_path / "r").mkdir()
    (tmp_path / "r/.lock").write_text("123")
    assert main(["gen-data", "--config", str(cfg), "--run", str(tmp_path / "r")]) == 1
    assert "locked" in capsys.readouterr().err
    assert not (tmp_path / "r/corpus").exists()


def test_gradcheck_modes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.strip().splitlines()[-1].startswith("PASS")
    assert main(["gradcheck", "--inject-fault", "tanh"]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert main(["gradcheck", "--primitives", ""]) == 0
    assert "PASS: 0 graphs" in capsys.readouterr().out
    assert main(["gradcheck", "--primitives", "tanh,cosh"]) == 2
    assert main(["gradcheck"]) == 0  # the injected fault did not leak


def test_config_text_round_trip():
    cfg = RunConfig()
    cfg.run.seed = 99
    cfg.corpus.class_sigma_scale = tuple(np.linspace(0.5, 1.5, 12))
    cfg.aaft.regularizer = 0.02
    back = parse_config(cfg.to_text())
    assert back == cfg
    back.validate()


def test_config_error_type():
    with pytest.raises(ConfigError):
        parse_config("[run]\nseed = x\n")


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("ASL_THREADS", "2")
    assert parallel.worker_count(8) == 2
    assert parallel.worker_count(None) == 2
    monkeypatch.delenv("ASL_THREADS")
    assert parallel.worker_count(3) == 3
    assert parallel.parallel_map(lambda x: x * x, range(5), 3) == [0, 1, 4, 9, 16]
