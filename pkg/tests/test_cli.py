import json

import pytest

from ammobilenet.cli import build_parser, run

from conftest import SEED

SUBCOMMANDS = ["train", "sweep-margin", "eval", "bench", "info", "synth"]


def toy_train_args(manifest, out, *extra):
    return ["--manifest", str(manifest), "--out", str(out), "--arch", "toy", "--window-ms", "8",
            "--hop-ms", "4", "--epochs", "2", "--batch-size", "64", "--eval-every", "1", *extra]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    assert run(["synth", "--speakers", "3", "--utterances", "4", "--seconds", "0.5", "--rate", "8000",
                "--seed", str(SEED), "--out", str(out)]) == 0
    return out / "manifest.csv"


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_lists_defaults(command, capsys):
    with pytest.raises(SystemExit) as info:
        run([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert "default" in text


def test_train_help_shows_training_defaults(capsys):
    with pytest.raises(SystemExit):
        run(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for fragment in ("(default: 30.0)", "(default: 0.5)", "(default: 0.001)", "(default: 0.95)",
                     "(default: 360)", "(default: 1234)", "(default: 200.0)", "(default: 10.0)",
                     "(default: 128)", "(default: 1e-07)", "(default: 1e-11)"):
        assert fragment in text


def test_every_flag_has_help():
    parser = build_parser()
    for sub in parser._subparsers._group_actions[0].choices.values():
        for action in sub._actions:
            assert action.help, (sub.prog, action.dest)


def test_unknown_flag_is_validation_error(capsys):
    assert run(["synth", "--out", "x", "--bogus"]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_missing_subcommand(capsys):
    assert run([]) == 1


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    assert run(["info", str(tmp_path / "none.amn")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_bad_margin_is_validation_error(corpus, tmp_path):
    assert run(["train", *toy_train_args(corpus, tmp_path / "r", "--margin", "3")]) == 1


def test_train_writes_run_directory(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", *toy_train_args(corpus, out, "--dump-config")]) == 0
    records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]
    assert {"fer", "cer"} <= set(records[-1])
    assert (out / "config.json").exists() and (out / "final.amn").exists()
    summary = json.loads(capsys.readouterr().out)
    assert summary["final"] == records[-1]


def test_identical_argv_gives_identical_outputs(corpus, tmp_path):
    for name in ("a", "b"):
        assert run(["train", *toy_train_args(corpus, tmp_path / name)]) == 0
    for f in ("metrics.jsonl", "final.amn", "eval_report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_and_info(corpus, tmp_path, capsys):
    run(["train", *toy_train_args(corpus, tmp_path / "run")])
    capsys.readouterr()
    ckpt = tmp_path / "run" / "final.amn"
    assert run(["eval", "--checkpoint", str(ckpt), "--manifest", str(corpus), "--window-ms", "8",
                "--hop-ms", "4", "--full"]) == 0
    report = json.loads(capsys.readouterr().out)
    stored = json.loads((tmp_path / "run" / "eval_report.json").read_text())
    assert report["per_utterance"] == stored["per_utterance"]
    assert run(["info", str(ckpt)]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["params_delta"] == d["params_total"] - 2_825_942


def test_eval_window_mismatch(corpus, tmp_path):
    run(["train", *toy_train_args(corpus, tmp_path / "run")])
    assert run(["eval", "--checkpoint", str(tmp_path / "run" / "final.amn"),
                "--manifest", str(corpus)]) == 1


def test_sweep_margin(corpus, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert run(["sweep-margin", "--values", "0.35,0.5", *toy_train_args(corpus, out)]) == 0
    rows = json.loads((out / "comparison.json").read_text())["runs"]
    assert [r["margin"] for r in rows] == [0.35, 0.5]
    assert (out / "m0.35" / "metrics.jsonl").exists() and (out / "m0.5" / "final.amn").exists()
    assert len((out / "comparison.tsv").read_text().splitlines()) == 3
    assert not (out / "m0.35" / "config.json").exists()


def test_bench_small(tmp_path, capsys):
    assert run(["bench", "--arch", "toy", "--classes", "2", "--batches", "3", "--batch-size", "2",
                "--warmup", "1", "--out", str(tmp_path / "b.json")]) == 0
    captured = capsys.readouterr()
    report = json.loads(captured.out)
    assert report["batches"] == 3 and report["std_ms"] >= 0
    assert "ms per batch of 2" in captured.err
    assert json.loads((tmp_path / "b.json").read_text()) == report
