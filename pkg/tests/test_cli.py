import json

import numpy as np
import pytest

from conftest import tiny_config
from seqseg.cli import run
from seqseg.synthdata import Volume, generate_suite, read_volume, save_dataset


def test_unknown_flag_is_usage_error(capsys, tmp_path):
    assert run(["synth", "--out-dir", str(tmp_path), "--bogus"]) == 1
    assert capsys.readouterr().err.startswith("usage:")
    assert run(["frobnicate"]) == 1
    assert run([]) == 1


def test_missing_required_flag(capsys):
    assert run(["train", "--data-dir", "x"]) == 1
    assert "--out-ckpt" in capsys.readouterr().err


def test_synth_writes_deterministic_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["synth", "--count", "4", "--out-dir", str(a), "--seed", "9"]) == 0
    assert run(["synth", "--count", "4", "--out-dir", str(b), "--seed", "9"]) == 0
    files = sorted(p.name for p in a.iterdir())
    assert len(files) == 8
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_environment_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("SEQSEG_SEED", "9")
    assert run(["synth", "--count", "1", "--out-dir", str(tmp_path / "e")]) == 0
    assert run(["synth", "--count", "1", "--out-dir", str(tmp_path / "f"), "--seed", "9"]) == 0
    name = "case_000_image.svol"
    assert (tmp_path / "e" / name).read_bytes() == (tmp_path / "f" / name).read_bytes()
    monkeypatch.setenv("SEQSEG_SEED", "nine")
    assert run(["synth", "--count", "1", "--out-dir", str(tmp_path / "g")]) == 1


def test_config_file_and_printed_defaults(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"dims": [6, 32, 32], "radius_range": [2.5, 3.5],
                                        "elongation_range": [1.5, 2.5], "distractor_radius": [1.5, 2.5]}}))
    assert run(["synth", "--config", str(cfg), "--count", "1", "--out-dir", str(tmp_path / "d")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# data: ") and '"dims": [6, 32, 32]' in out and '"noise_sigma": 0.12' in out
    assert read_volume(tmp_path / "d" / "case_000_image.svol").dims == (6, 32, 32)
    cfg.write_text(json.dumps({"data": {"wobble": 1}}))
    assert run(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / "x")]) == 1
    cfg.write_text("{not json")
    assert run(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / "x")]) == 1


def test_gradcheck_losses(capsys):
    assert run(["gradcheck", "--module", "losses", "--seeds", "3"]) == 0
    out = capsys.readouterr().out
    assert "jaccard_loss" in out and "max_rel_error=" in out


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.sckp"
    bad.write_bytes(b"garbage")
    d = tmp_path / "d"
    d.mkdir()
    assert run(["eval", "--ckpt", str(bad), "--data-dir", str(d)]) == 2
    assert capsys.readouterr().err.startswith("data:")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    save_dataset(root / "data", generate_suite(3, tiny_config(), seed=11))
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"train": {"K": 1, "width": 4, "max_epochs": 2, "batch_size": 4,
                                         "rnn_warmup_epochs": 1, "finetune_epochs": 1}}))
    assert run(["train", "--data-dir", str(root / "data"), "--config", str(cfg),
                "--out-ckpt", str(root / "a.sckp"), "--history", str(root / "h.csv")]) == 0
    assert run(["finetune-rnn", "--ckpt", str(root / "a.sckp"), "--data-dir", str(root / "data"),
                "--out-ckpt", str(root / "b.sckp")]) == 0
    return root


def test_train_writes_history(pipeline):
    assert (pipeline / "h.csv").read_text().startswith("stage,epoch,train_loss,val_loss\n1,0,")


def test_infer_eval_sweep(pipeline, capsys):
    out = pipeline / "p.svol"
    assert run(["infer", "--ckpt", str(pipeline / "b.sckp"), "--volume",
                str(pipeline / "data" / "case_000_image.svol"), "--out-prob", str(out)]) == 0
    prob = read_volume(out)
    assert isinstance(prob, Volume) and prob.dims == (6, 32, 32)
    assert np.all((prob.voxels >= 0) & (prob.voxels <= 1))
    for i in (1, 2):
        assert run(["eval", "--ckpt", str(pipeline / "b.sckp"), "--data-dir", str(pipeline / "data"),
                    "--report", str(pipeline / f"r{i}.csv")]) == 0
    assert (pipeline / "r1.csv").read_bytes() == (pipeline / "r2.csv").read_bytes()
    assert len((pipeline / "r1.csv").read_text().splitlines()) == 4
    assert run(["sweep", "--ckpt", str(pipeline / "b.sckp"), "--data-dir", str(pipeline / "data"),
                "--out-csv", str(pipeline / "s.csv")]) == 0
    assert len((pipeline / "s.csv").read_text().splitlines()) == 20
    assert "birnn cases: 3" in capsys.readouterr().out


def test_parallel_eval_matches_serial(pipeline):
    args = ["eval", "--ckpt", str(pipeline / "b.sckp"), "--data-dir", str(pipeline / "data")]
    assert run(args + ["--report", str(pipeline / "s1.csv")]) == 0
    assert run(args + ["--report", str(pipeline / "p2.csv"), "--threads", "2"]) == 0
    assert (pipeline / "s1.csv").read_bytes() == (pipeline / "p2.csv").read_bytes()


def test_infer_rejects_mask_input(pipeline, capsys):
    assert run(["infer", "--ckpt", str(pipeline / "a.sckp"), "--volume",
                str(pipeline / "data" / "case_000_mask.svol"), "--out-prob", str(pipeline / "q.svol")]) == 2
    assert "mask" in capsys.readouterr().err
