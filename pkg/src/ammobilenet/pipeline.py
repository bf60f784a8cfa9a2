"""Training loop, FER/CER evaluation, and run-directory orchestration."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import flatten_utterances, load_manifest, load_split, batch_frames, read_wav
from .checkpoint import save_checkpoint
from .errors import NonFiniteLossError, ValidationError
from .layers import ModelConfig, build_mobilenet1d
from .losses import frame_log_probs, model_loss
from .optim import RMSprop
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

POOLING_RULES = ("sum", "vote")


@dataclass
class TrainConfig:
    epochs: int = 360
    batch_size: int = 128
    lr: float = 1e-3
    alpha: float = 0.95
    eps: float = 1e-7
    eps_inside_sqrt: bool = False
    seed: int = 1234
    loss: str = "am_softmax"
    scale_s: float = 30.0
    margin_m: float = 0.5
    loss_eps: float = 1e-11
    window_ms: float = 200.0
    hop_ms: float = 10.0
    eval_every: int = 10
    pooling: str = "sum"
    normalize: bool = True
    trim: bool = False
    trim_ratio: float = 0.05
    arch: str = "default"

    def validate(self):
        bad = [n for n in ("batch_size", "lr", "eps", "window_ms", "hop_ms", "scale_s", "loss_eps")
               if not getattr(self, n) > 0]
        if self.epochs < 0:
            bad.append("epochs")
        if self.eval_every < 0:
            bad.append("eval_every")
        if not 0.0 <= self.alpha < 1.0:
            bad.append("alpha")
        if not 0.0 <= self.margin_m <= 1.0:
            bad.append("margin_m")
        if self.pooling not in POOLING_RULES:
            bad.append("pooling")
        if bad:
            raise ValidationError("invalid TrainConfig field(s): " + ", ".join(bad))
        return self

    def model_config(self, num_classes, sample_rate, **overrides):
        window = int(round(self.window_ms * sample_rate / 1000.0))
        return ModelConfig.preset(
            self.arch, num_classes=num_classes, window_samples=window, loss=self.loss,
            scale_s=self.scale_s, margin_m=self.margin_m, loss_eps=self.loss_eps, **overrides)


@dataclass
class EvalReport:
    fer: float
    cer: float
    mean_loss: float
    per_utterance: list = field(default_factory=list)   # (utterance_id, true, predicted)
    skipped: list = field(default_factory=list)
    frames: int = 0
    frame_errors: int = 0

    def to_dict(self):
        d = asdict(self)
        d["per_utterance"] = [list(r) for r in self.per_utterance]
        return d


@dataclass
class TrainResult:
    log: list
    reports: dict
    checkpoint: Optional[Path] = None


# ---------------------------------------------------------------- scoring

def pool_utterance(log_probs, rule="sum"):
    """Utterance decision from per-frame log-probabilities [n_frames, classes].

    ``sum``: argmax of summed log-probs. ``vote``: most frequent frame argmax.
    Ties resolve to the lowest class index; the result does not depend on
    frame order (columns are sorted before summation).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if rule == "sum":
        return int(np.argmax(np.sort(lp, axis=0).sum(axis=0)))
    if rule == "vote":
        counts = np.bincount(np.argmax(lp, axis=1), minlength=lp.shape[1])
        return int(np.argmax(counts))
    raise ValidationError(f"unknown pooling rule {rule!r}")


def score_utterances(tables, pooling="sum", mean_loss=float("nan")):
    """FER/CER from ``(utterance_id, true_label, log_probs[n, C])`` triples."""
    frames = frame_errors = 0
    per_utt, skipped = [], []
    for uid, label, lp in tables:
        lp = np.asarray(lp, dtype=np.float64)
        if lp.shape[0] == 0:
            skipped.append(uid)
            continue
        frames += lp.shape[0]
        frame_errors += int(np.count_nonzero(np.argmax(lp, axis=1) != label))
        per_utt.append((uid, int(label), pool_utterance(lp, pooling)))
    fer = frame_errors / frames if frames else 0.0
    cer = sum(t != p for _, t, p in per_utt) / len(per_utt) if per_utt else 0.0
    return EvalReport(fer, cer, mean_loss, per_utt, skipped, frames, frame_errors)


def evaluate(model, utterances, batch_size=256, pooling="sum"):
    """Eval-mode FER/CER over ``(utterance_id, label, frames[n, window])`` triples."""
    tables = []
    loss_sum, loss_n = 0.0, 0
    for uid, label, frames in utterances:
        frames = np.asarray(frames, dtype=np.float64)
        chunks = []
        for start in range(0, frames.shape[0], batch_size):
            x = frames[start:start + batch_size][:, None, :]
            out = model.forward(Tensor(x), mode="eval")
            targets = np.full(x.shape[0], label, dtype=np.int64)
            loss_sum += model_loss(model, out, targets).item() * x.shape[0]
            loss_n += x.shape[0]
            chunks.append(frame_log_probs(model, out))
        lp = np.concatenate(chunks, axis=0) if chunks else np.empty((0, model.config.num_classes))
        tables.append((uid, label, lp))
    return score_utterances(tables, pooling, loss_sum / loss_n if loss_n else float("nan"))


# ---------------------------------------------------------------- training

def train(model, train_data, test_data, cfg, run_dir=None, sink=None, label_map=None):
    """Train ``model`` in place with RMSprop.

    ``train_data``/``test_data`` are lists of ``(utterance_id, label, frames)``.
    Each epoch appends one record to the metric log (and writes it as a JSON
    line to ``sink`` when given). Every ``eval_every`` epochs, and at the
    last epoch, the test split is scored and a checkpoint is written to
    ``run_dir``.
    """
    cfg.validate()
    run_dir = Path(run_dir) if run_dir is not None else None
    if label_map is not None:
        model.label_map = dict(label_map)
    opt = RMSprop(model.parameters(), lr=cfg.lr, alpha=cfg.alpha, eps=cfg.eps,
                  eps_inside_sqrt=cfg.eps_inside_sqrt)
    metric_log, reports = [], {}
    final = None
    if run_dir is not None and cfg.epochs == 0:
        final = run_dir / "final.amn"
        save_checkpoint(model, final)
    if cfg.epochs == 0:
        return TrainResult(metric_log, reports, final)

    frames, labels, _ = flatten_utterances(train_data)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for bi, batch in enumerate(batch_frames(frames, labels, cfg.batch_size, rng=rng)):
            with Tape() as tape:
                out = model.forward(Tensor(batch.frames), mode="train")
                loss = model_loss(model, out, batch.labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(epoch, bi, value)
            backward(loss, tape)
            del tape
            opt.step()
            total += value * batch.labels.shape[0]
            count += batch.labels.shape[0]
        record = {"epoch": epoch, "train_loss": total / count}
        if test_data and ((cfg.eval_every and epoch % cfg.eval_every == 0) or epoch == cfg.epochs):
            report = evaluate(model, test_data, pooling=cfg.pooling)
            record["fer"] = report.fer
            record["cer"] = report.cer
            reports[epoch] = report
            if run_dir is not None:
                save_checkpoint(model, run_dir / f"epoch{epoch:04d}.amn")
        metric_log.append(record)
        log.info("epoch %d %s", epoch, record)
        if sink is not None:
            sink.write(json.dumps(record, sort_keys=False) + "\n")
            sink.flush()
    if run_dir is not None:
        final = run_dir / "final.amn"
        save_checkpoint(model, final)
    return TrainResult(metric_log, reports, final)


def load_corpus(manifest, cfg):
    entries, label_map = load_manifest(manifest)
    if not entries:
        raise ValidationError(f"{manifest}: manifest has no rows")
    rate = read_wav(entries[0].path).sample_rate
    kwargs = dict(window_ms=cfg.window_ms, hop_ms=cfg.hop_ms, normalize=cfg.normalize,
                  trim=cfg.trim, trim_ratio=cfg.trim_ratio)
    train_utts, train_skipped = load_split(entries, label_map, "train", **kwargs)
    test_utts, test_skipped = load_split(entries, label_map, "test", **kwargs)
    return {"label_map": label_map, "sample_rate": rate, "train": train_utts, "test": test_utts,
            "skipped": train_skipped + test_skipped}


def run_training(manifest, out_dir, cfg, model_overrides=None, dump_config=True):
    """Load a manifest, build the model, train, and fill ``out_dir``.

    The run directory receives ``metrics.jsonl``, checkpoints, ``config.json``
    (when ``dump_config``), and ``eval_report.json`` for the last evaluation.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(manifest, cfg)
    if not corpus["train"]:
        raise ValidationError("no training frames: every train utterance is shorter than the window")
    model_cfg = cfg.model_config(len(corpus["label_map"]), corpus["sample_rate"],
                                 **(model_overrides or {}))
    model = build_mobilenet1d(model_cfg, seed=cfg.seed)
    if dump_config:
        resolved = {"train": asdict(cfg), "model": model_cfg.to_dict(), "manifest": str(manifest),
                    "label_map": corpus["label_map"], "skipped_utterances": corpus["skipped"]}
        (out_dir / "config.json").write_text(json.dumps(resolved, indent=2) + "\n")
    with (out_dir / "metrics.jsonl").open("w") as sink:
        result = train(model, corpus["train"], corpus["test"], cfg, run_dir=out_dir, sink=sink,
                       label_map=corpus["label_map"])
    if result.reports:
        last = result.reports[max(result.reports)]
        (out_dir / "eval_report.json").write_text(json.dumps(last.to_dict(), indent=2) + "\n")
    return model, result
