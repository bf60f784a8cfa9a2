import hashlib
import io
import json

import numpy as np
import pytest

from ammobilenet.checkpoint import load_checkpoint, to_bytes
from ammobilenet.errors import NonFiniteLossError, ValidationError
from ammobilenet.layers import build_mobilenet1d
from ammobilenet.pipeline import (TrainConfig, evaluate, load_corpus, pool_utterance,
                                  run_training, score_utterances, train)

from conftest import SEED


def toy_cfg(**kw):
    """8 ms windows at 8 kHz give the toy preset's 64-sample input."""
    base = dict(arch="toy", window_ms=8.0, hop_ms=4.0, epochs=3, batch_size=64, eval_every=2, seed=SEED)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def small_corpus(small_manifest):
    return load_corpus(small_manifest, toy_cfg())


def toy_model(corpus, cfg):
    return build_mobilenet1d(cfg.model_config(len(corpus["label_map"]), corpus["sample_rate"]), cfg.seed)


def one_hot_table(pred, n_classes):
    lp = np.full((len(pred), n_classes), -5.0)
    lp[np.arange(len(pred)), pred] = -0.1
    return lp


class TestScoring:
    def test_counting_example(self):
        pred = [0] * 7 + [1] * 3
        report = score_utterances([("u", 0, one_hot_table(pred, 2))])
        assert report.fer == pytest.approx(0.3) and report.cer == 0.0
        assert (report.frames, report.frame_errors) == (10, 3)

    def test_hand_pooling(self):
        lp = np.array([[-0.1, -2.4], [-3.0, -0.05]])
        assert lp.sum(axis=0).tolist() == pytest.approx([-3.1, -2.45])
        assert pool_utterance(lp) == 1

    def test_all_tied_goes_to_class_zero(self):
        assert pool_utterance(np.full((5, 4), -np.log(4))) == 0
        assert pool_utterance(np.zeros((3, 3)), "vote") == 0

    def test_frame_order_invariance(self, rng):
        lp = rng.normal(size=(40, 6))
        for _ in range(5):
            assert pool_utterance(lp[rng.permutation(40)]) == pool_utterance(lp)

    def test_vote_rule(self):
        lp = one_hot_table([2, 2, 1, 0, 2], 3)
        assert pool_utterance(lp, "vote") == 2

    def test_unknown_rule(self):
        with pytest.raises(ValidationError):
            pool_utterance(np.zeros((1, 2)), "max")

    def test_empty_utterance_is_skipped(self):
        report = score_utterances([("a", 0, np.zeros((0, 2))), ("b", 1, one_hot_table([1], 2))])
        assert report.skipped == ["a"] and report.cer == 0.0 and report.frames == 1

    def test_matches_brute_force(self):
        for trial in range(100):
            tables = random_tables(np.random.default_rng([SEED, trial]))
            report = score_utterances(tables)
            assert (report.fer, report.cer) == brute_force(tables)


def random_tables(rng):
    """Dyadic log-probs (multiples of 1/8) keep every sum exact, so ties are real ties."""
    n_classes = int(rng.integers(2, 6))
    tables = []
    for u in range(int(rng.integers(1, 21))):
        n = int(rng.integers(1, 21))
        tables.append((f"u{u}", int(rng.integers(0, n_classes)),
                       -rng.integers(0, 16, size=(n, n_classes)) / 8.0))
    return tables


def brute_force(tables):
    frames = wrong_frames = wrong_utts = 0
    for _, label, lp in tables:
        totals = [0.0] * lp.shape[1]
        for row in lp.tolist():
            best = 0
            for c in range(len(row)):
                if row[c] > row[best]:
                    best = c
                totals[c] += row[c]
            frames += 1
            wrong_frames += best != label
        decision = 0
        for c in range(len(totals)):
            if totals[c] > totals[decision]:
                decision = c
        wrong_utts += decision != label
    return wrong_frames / frames, wrong_utts / len(tables)


class TestEvaluate:
    def test_does_not_mutate_model(self, small_corpus):
        model = toy_model(small_corpus, toy_cfg())
        before = hashlib.sha256(to_bytes(model)).hexdigest()
        evaluate(model, small_corpus["test"])
        evaluate(model, small_corpus["test"], batch_size=7)
        assert hashlib.sha256(to_bytes(model)).hexdigest() == before

    def test_batch_size_does_not_change_decisions(self, small_corpus):
        model = toy_model(small_corpus, toy_cfg())
        a = evaluate(model, small_corpus["test"], batch_size=256)
        b = evaluate(model, small_corpus["test"], batch_size=5)
        assert a.per_utterance == b.per_utterance and a.fer == b.fer

    def test_report_fields(self, small_corpus):
        report = evaluate(toy_model(small_corpus, toy_cfg()), small_corpus["test"])
        assert 0.0 <= report.fer <= 1.0 and 0.0 <= report.cer <= 1.0
        assert len(report.per_utterance) == 3 and np.isfinite(report.mean_loss)
        json.dumps(report.to_dict())


class TestTrain:
    def test_epochs_zero(self, small_corpus, tmp_path):
        cfg = toy_cfg(epochs=0)
        model = toy_model(small_corpus, cfg)
        result = train(model, small_corpus["train"], small_corpus["test"], cfg, run_dir=tmp_path)
        assert result.log == [] and result.checkpoint == tmp_path / "final.amn"
        assert to_bytes(load_checkpoint(result.checkpoint)) == to_bytes(model)

    def test_metric_log_format(self, small_corpus, tmp_path):
        cfg = toy_cfg(epochs=3, eval_every=2)
        sink = io.StringIO()
        result = train(toy_model(small_corpus, cfg), small_corpus["train"], small_corpus["test"],
                       cfg, run_dir=tmp_path, sink=sink)
        records = [json.loads(line) for line in sink.getvalue().splitlines()]
        assert records == result.log
        assert [r["epoch"] for r in records] == [1, 2, 3]
        assert set(records[0]) == {"epoch", "train_loss"}
        assert set(records[1]) == set(records[2]) == {"epoch", "train_loss", "fer", "cer"}
        assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch0002.amn", "epoch0003.amn",
                                                             "final.amn"]

    def test_seeded_runs_are_bit_identical(self, small_corpus):
        logs = []
        for _ in range(2):
            cfg = toy_cfg(epochs=2)
            sink = io.StringIO()
            model = toy_model(small_corpus, cfg)
            train(model, small_corpus["train"], small_corpus["test"], cfg, sink=sink)
            logs.append((sink.getvalue(), to_bytes(model)))
        assert logs[0] == logs[1]

    def test_non_finite_loss_aborts(self, small_corpus):
        cfg = toy_cfg(epochs=1)
        model = toy_model(small_corpus, cfg)
        bad = [(uid, lab, np.full_like(f, np.nan)) for uid, lab, f in small_corpus["train"]]
        with pytest.raises(NonFiniteLossError) as info:
            train(model, bad, [], cfg)
        assert (info.value.epoch, info.value.batch) == (1, 0)

    def test_loss_decreases(self, small_corpus):
        # The 0.2x oracle on the 10-speaker corpus lives in the acceptance suite.
        cfg = toy_cfg(epochs=20, eval_every=0)
        result = train(toy_model(small_corpus, cfg), small_corpus["train"], [], cfg)
        assert result.log[-1]["train_loss"] < 0.8 * result.log[0]["train_loss"]

    def test_run_training_fills_run_dir(self, small_manifest, tmp_path):
        model, result = run_training(small_manifest, tmp_path / "run", toy_cfg(epochs=2))
        names = {p.name for p in (tmp_path / "run").iterdir()}
        assert {"config.json", "metrics.jsonl", "eval_report.json", "final.amn"} <= names
        resolved = json.loads((tmp_path / "run" / "config.json").read_text())
        assert resolved["train"]["seed"] == SEED and resolved["model"]["window_samples"] == 64

    def test_save_load_evaluate_is_bit_identical(self, small_corpus, tmp_path):
        cfg = toy_cfg(epochs=2)
        model = toy_model(small_corpus, cfg)
        result = train(model, small_corpus["train"], small_corpus["test"], cfg, run_dir=tmp_path)
        a = evaluate(load_checkpoint(result.checkpoint), small_corpus["test"])
        b = evaluate(load_checkpoint(result.checkpoint), small_corpus["test"])
        assert a.to_dict() == b.to_dict()


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.lr, c.alpha, c.eps, c.seed) == (360, 128, 1e-3, 0.95, 1e-7, 1234)
        assert (c.scale_s, c.margin_m, c.loss_eps, c.window_ms, c.hop_ms) == (30.0, 0.5, 1e-11, 200.0, 10.0)

    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"lr": -1.0}, {"alpha": 1.0},
                                    {"margin_m": 2.0}, {"pooling": "max"}, {"epochs": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw).validate()
