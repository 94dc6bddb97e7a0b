import json

import pytest

from mtil.cli import main, parse_config_file, ConfigError
from mtil.data import read_dataset
from mtil.policy import load_checkpoint


def test_gen_data_train_eval_report(tmp_path, capsys):
    data, ckpt, rep = tmp_path / "demos.mtilds", tmp_path / "ckpt", tmp_path / "r.json"
    assert main(["gen-data", "--env", "two-stage-reach", "--n", "100", "--seed", "7", "--out", str(data)]) == 0
    assert len(read_dataset(data)) == 100
    assert main(["train", "--data", str(data), "--preset", "desk", "--K", "8", "--epochs", "1",
                 "--out", str(ckpt)]) == 0
    pol, meta = load_checkpoint(ckpt)
    assert pol.config.chunk_K == 8 and meta["env"] == "two-stage-reach"
    assert (tmp_path / "ckpt.log.csv").read_text().startswith("epoch,loss,lr,seconds")
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ckpt), "--episodes", "3", "--out", str(rep)]) == 0
    out = capsys.readouterr().out
    assert "two-stage-reach" in out and "ci_lo" in out
    assert json.loads(rep.read_text())["results"][0]["episodes"] == 3
    assert main(["report", str(rep), "--csv", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().count("\n") == 2


def test_config_file_and_flag_override(tmp_path):
    data, ckpt, cfg = tmp_path / "d.mtilds", tmp_path / "c", tmp_path / "t.cfg"
    main(["gen-data", "--env", "cue-recall:L=2", "--n", "4", "--out", str(data)])
    cfg.write_text("# toy\nepochs = 1\nd_model = 8\nn_layers = 1\nchunk_K = 2\nhistory_reset_interval = none\n")
    assert main(["train", "--data", str(data), "--config", str(cfg), "--K", "3", "--out", str(ckpt)]) == 0
    pol, meta = load_checkpoint(ckpt)
    assert (pol.config.d_model, pol.config.n_layers, pol.config.chunk_K) == (8, 1, 3)
    assert meta["train"]["epochs"] == 1


def test_gmm_training_via_cli(tmp_path):
    data, ckpt = tmp_path / "d.mtilds", tmp_path / "g"
    main(["gen-data", "--env", "cue-recall:L=2", "--n", "3", "--out", str(data)])
    assert main(["train", "--data", str(data), "--head", "gmm", "--epochs", "1", "--out", str(ckpt)]) == 0
    pol, meta = load_checkpoint(ckpt)
    assert pol.config.head_kind == "gmm" and meta["train"]["loss"] == "gmm-nll"
    assert main(["eval", "--ckpt", str(ckpt), "--episodes", "2"]) == 0


def test_ablate_emits_one_row_per_regime(tmp_path, capsys):
    rep = tmp_path / "a.json"
    assert main(["ablate", "--env", "cue-recall:L=2", "--demos", "3", "--epochs", "1", "--episodes", "2",
                 "--K", "2", "--out", str(rep)]) == 0
    methods = [r["method"] for r in json.loads(rep.read_text())["results"]]
    assert methods == ["full", "reset-10", "markov-mlp"]


def test_lifelong_command(tmp_path):
    rep, cfg = tmp_path / "l.json", tmp_path / "c.cfg"
    cfg.write_text("d_model=8\nn_layers=1\nchunk_K=1\n")
    assert main(["lifelong", "--tasks", "cue-recall:L=2:m=+1,cue-recall:L=2:m=-1", "--demos", "3",
                 "--episodes", "4", "--epochs", "1", "--config", str(cfg), "--out", str(rep)]) == 0
    runs = json.loads(rep.read_text())["lifelong"]
    assert [r["ewc"] for r in runs] == [False, True]
    assert all(len(r["A"]) == 2 for r in runs)


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--bogus"]) == 2
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = many\n")
    data = tmp_path / "d.mtilds"
    main(["gen-data", "--env", "cue-recall:L=2", "--n", "2", "--out", str(data)])
    capsys.readouterr()
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "x"), "--config", str(bad)]) == 3
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "x"), "--K", "0"]) == 3
    assert main(["eval", "--ckpt", str(data)]) == 1
    assert main(["gen-data", "--env", "maze", "--out", str(tmp_path / "m")]) == 1
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "invalid config" in captured.err and "error" in captured.err


def test_parse_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("lr0 = 1e-3  # comment\n\nbackbone=mlp\n")
    assert parse_config_file(p) == {"lr0": 1e-3, "backbone": "mlp"}
    p.write_text("colour = blue\n")
    with pytest.raises(ConfigError):
        parse_config_file(p)
    p.write_text("just words\n")
    with pytest.raises(ConfigError):
        parse_config_file(p)
