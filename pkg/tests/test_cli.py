import json

import pytest

from structdrop.cli import build_parser, run


def test_no_subcommand_is_usage_error(capsys):
    assert run([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert run(["verify-kernels", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("cmd", ["train", "eval", "bench", "gradcheck", "verify-kernels", "synth-corpus"])
def test_help_documents_flags(cmd, capsys):
    assert run([cmd, "--help"]) == 0
    out = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in out
    if cmd == "gradcheck":
        assert "default: 8" in out


def test_verify_kernels(capsys):
    assert run(["verify-kernels", "--trials", "10", "--seed", "1"]) == 0
    assert "30/30 kernel checks passed" in capsys.readouterr().out


def test_gradcheck_small(capsys):
    assert run(["gradcheck", "--h", "4", "--b", "2", "--t", "3", "--layers", "1", "--mode", "nr-st"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_train_eval_roundtrip(tmp_path, small_corpus, capsys):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"corpus_path": str(small_corpus), "batch_size": 4, "unroll_steps": 10,
                               "epochs": 1, "lr": 5.0, "out_dir": str(tmp_path / "a"),
                               "model": {"embed_dim": 8, "hidden": 8, "layers": 1}}))
    out = tmp_path / "b"
    assert run(["train", "--config", str(cfg), "--seed", "3", "--out", str(out), "--mode", "nr-st",
                "--precision", "f64"]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["config"]["seed"] == 3 and doc["config"]["precision"] == "double"
    assert doc["config"]["model"]["mode_label"] == "nr-st"
    capsys.readouterr()
    assert run(["eval", "--checkpoint", str(out / "model.sdlm"), "--config", str(cfg), "--split", "valid"]) == 0
    line = capsys.readouterr().out
    assert line.startswith("valid loss")
    loss = float(line.split()[2])
    assert loss == pytest.approx(doc["epochs"][0]["valid_loss"], rel=1e-9)


def test_io_and_config_errors(tmp_path, capsys):
    assert run(["train", "--config", str(tmp_path / "missing.json")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert run(["train", "--config", str(bad)]) == 3
    assert run(["eval", "--checkpoint", str(tmp_path / "x"), "--config", str(bad)]) == 3
    bench_bad = tmp_path / "bench.json"
    bench_bad.write_text('{"repetitions": 1}')
    assert run(["bench", "--config", str(bench_bad)]) == 3


def test_bench_command(tmp_path, capsys):
    cfg = tmp_path / "bench.json"
    out = tmp_path / "bench.csv"
    cfg.write_text(json.dumps({"H": [32], "B": [4], "T": [2], "p": [0.5], "repetitions": 3,
                               "modes": ["nr-rh-st"], "out": str(out)}))
    assert run(["bench", "--config", str(cfg), "--threads", "1"]) == 0
    assert len(out.read_text().splitlines()) == 5
    assert "overall" in capsys.readouterr().out


def test_synth_corpus(tmp_path):
    p = tmp_path / "c.txt"
    assert run(["synth-corpus", "--out", str(p), "--bytes", "5000", "--seed", "2"]) == 0
    data = p.read_bytes()
    assert len(data) == 5000
    run(["synth-corpus", "--out", str(tmp_path / "d.txt"), "--bytes", "5000", "--seed", "2"])
    assert (tmp_path / "d.txt").read_bytes() == data
