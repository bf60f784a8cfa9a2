"""Command-line entry point: ``ammobilenet <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error, 2 runtime error. Errors go to
stderr prefixed with ``error:``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .audio import make_synthetic_corpus
from .bench import PROTOCOL_BATCH_SIZE, PROTOCOL_BATCHES, info, measure_inference
from .checkpoint import load_checkpoint
from .errors import AmMobileNetError, ValidationError
from .layers import BottleneckSpec, ModelConfig, build_mobilenet1d
from .pipeline import TrainConfig, evaluate, load_corpus, run_training


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt():
    return lambda prog: argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=36)


def parse_bottlenecks(text):
    """``"1,16,1,1;6,24,2,2"`` -> tuple of BottleneckSpec."""
    specs = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            t, c, n, s = (int(v) for v in part.split(","))
        except ValueError:
            raise UsageError(f"bad bottleneck spec {part!r}; expected t,c,n,s")
        specs.append(BottleneckSpec(t, c, n, s))
    if not specs:
        raise UsageError("empty --bottlenecks")
    return tuple(specs)


def _add_arch_flags(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--arch", choices=["default", "compact", "toy"], default="default",
                   help="architecture preset (default = MobileNetV2 stage table in 1D)")
    g.add_argument("--stem-channels", type=int, default=None, help="override stem width")
    g.add_argument("--head-channels", type=int, default=None, help="override 1x1 head width")
    g.add_argument("--kernel-size", type=int, default=None, help="override depthwise kernel size")
    g.add_argument("--bottlenecks", type=parse_bottlenecks, default=None,
                   help='override stage table, e.g. "1,16,1,1;6,24,2,2" (t,c,n,s per stage)')


def _arch_overrides(args):
    out = {}
    for flag, key in (("stem_channels", "stem_channels"), ("head_channels", "head_channels"),
                      ("kernel_size", "kernel_size"), ("bottlenecks", "bottlenecks")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _add_data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--manifest", type=Path, required=True, help="CSV with header path,speaker,split")
    g.add_argument("--window-ms", type=float, default=200.0, help="frame length in ms")
    g.add_argument("--hop-ms", type=float, default=10.0, help="frame shift in ms")
    g.add_argument("--no-normalize", action="store_true", help="skip per-utterance max-abs normalization")
    g.add_argument("--trim", action="store_true", help="strip low-energy leading/trailing audio")
    g.add_argument("--trim-ratio", type=float, default=0.05, help="trim threshold relative to peak 10 ms RMS")
    g.add_argument("--pooling", choices=["sum", "vote"], default="sum",
                   help="utterance decision: summed frame log-probs or majority vote")


def _add_train_flags(p, with_margin=True):
    _add_data_flags(p)
    g = p.add_argument_group("training")
    g.add_argument("--out", type=Path, required=True, help="run directory")
    g.add_argument("--loss", choices=["softmax", "am_softmax"], default="am_softmax", help="classifier loss")
    g.add_argument("--scale", type=float, default=30.0, help="AM-Softmax scale s")
    if with_margin:
        g.add_argument("--margin", type=float, default=0.5, help="AM-Softmax additive margin m")
    g.add_argument("--loss-eps", type=float, default=1e-11, help="epsilon inside the L2-norm denominators")
    g.add_argument("--epochs", type=int, default=360, help="training epochs")
    g.add_argument("--batch-size", type=int, default=128, help="mini-batch size")
    g.add_argument("--lr", type=float, default=1e-3, help="RMSprop learning rate")
    g.add_argument("--alpha", type=float, default=0.95, help="RMSprop smoothing constant")
    g.add_argument("--eps", type=float, default=1e-7, help="RMSprop epsilon (added to sqrt(v))")
    g.add_argument("--eps-inside-sqrt", action="store_true", help="use sqrt(v + eps) instead")
    g.add_argument("--seed", type=int, default=1234, help="seed for weights and shuffling")
    g.add_argument("--eval-every", type=int, default=10, help="evaluate the test split every N epochs")
    g.add_argument("--dump-config", action="store_true", help="write resolved config.json into the run directory")
    _add_arch_flags(p)


def _train_config(args, margin=None):
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, alpha=args.alpha, eps=args.eps,
        eps_inside_sqrt=args.eps_inside_sqrt, seed=args.seed, loss=args.loss, scale_s=args.scale,
        margin_m=args.margin if margin is None else margin, loss_eps=args.loss_eps,
        window_ms=args.window_ms, hop_ms=args.hop_ms, eval_every=args.eval_every,
        pooling=args.pooling, normalize=not args.no_normalize, trim=args.trim,
        trim_ratio=args.trim_ratio, arch=args.arch,
    ).validate()


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        Path(out).write_text(text + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_train(args):
    cfg = _train_config(args)
    _, result = run_training(args.manifest, args.out, cfg, _arch_overrides(args), args.dump_config)
    summary = {"run_dir": str(args.out), "epochs": cfg.epochs,
               "final": result.log[-1] if result.log else None}
    _emit(summary)
    return 0


def cmd_sweep_margin(args):
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated floats, got {args.values!r}")
    if not values:
        raise UsageError("--values is empty")
    args.loss = "am_softmax"
    rows = []
    for m in values:
        cfg = _train_config(args, margin=m)
        run_dir = Path(args.out) / f"m{m:g}"
        _, result = run_training(args.manifest, run_dir, cfg, _arch_overrides(args), args.dump_config)
        last = result.log[-1] if result.log else {}
        rows.append({"margin": m, "run_dir": str(run_dir), "epochs": cfg.epochs,
                     "train_loss": last.get("train_loss"), "fer": last.get("fer"),
                     "cer": last.get("cer")})
    out = Path(args.out)
    with (out / "comparison.tsv").open("w") as fh:
        fh.write("margin\tepochs\ttrain_loss\tfer\tcer\n")
        for r in rows:
            fh.write(f"{r['margin']:g}\t{r['epochs']}\t{r['train_loss']}\t{r['fer']}\t{r['cer']}\n")
    _emit({"runs": rows}, out / "comparison.json")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    cfg = TrainConfig(window_ms=args.window_ms, hop_ms=args.hop_ms, normalize=not args.no_normalize,
                      trim=args.trim, trim_ratio=args.trim_ratio, pooling=args.pooling).validate()
    corpus = load_corpus(args.manifest, cfg)
    if model.label_map and model.label_map != corpus["label_map"]:
        raise ValidationError("manifest speakers do not match the checkpoint's label map")
    window = int(round(args.window_ms * corpus["sample_rate"] / 1000.0))
    if window != model.config.window_samples:
        raise ValidationError(
            f"--window-ms gives {window} samples, checkpoint expects {model.config.window_samples}")
    report = evaluate(model, corpus[args.split], pooling=args.pooling)
    d = report.to_dict()
    d["skipped"] = d["skipped"] + [u for u in corpus["skipped"]]
    _emit(d if args.full else {k: d[k] for k in ("fer", "cer", "mean_loss", "frames", "skipped")},
          args.out)
    return 0


def cmd_bench(args):
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
    else:
        cfg = ModelConfig.preset(args.arch, num_classes=args.classes, loss=args.loss,
                                 **_arch_overrides(args))
        model = build_mobilenet1d(cfg, seed=args.seed)
    report = measure_inference(model, batches=args.batches, batch_size=args.batch_size,
                               warmup=args.warmup, seed=args.seed, threads=args.threads)
    print(report.summary(), file=sys.stderr)
    _emit(report.to_dict(), args.out)
    return 0


def cmd_info(args):
    _emit(info(args.checkpoint), args.out)
    return 0


def cmd_synth(args):
    manifest = make_synthetic_corpus(args.speakers, args.utterances, args.seconds, args.rate,
                                     args.seed, args.out)
    _emit({"manifest": str(manifest), "speakers": args.speakers,
           "utterances": args.speakers * args.utterances})
    return 0


def build_parser():
    p = _Parser(prog="ammobilenet", description="MobileNet1D / AM-MobileNet1D speaker identification",
                formatter_class=_fmt())
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a manifest", formatter_class=_fmt())
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep-margin", help="train one AM-Softmax run per margin value",
                       formatter_class=_fmt())
    s.add_argument("--values", default="0.35,0.5,0.8", help="comma-separated margins")
    _add_train_flags(s, with_margin=False)
    s.set_defaults(func=cmd_sweep_margin, margin=0.5)

    e = sub.add_parser("eval", help="FER/CER of a checkpoint on a manifest split", formatter_class=_fmt())
    e.add_argument("--checkpoint", type=Path, required=True, help="checkpoint file (.amn)")
    _add_data_flags(e)
    e.add_argument("--split", choices=["train", "test"], default="test", help="manifest split to score")
    e.add_argument("--full", action="store_true", help="include per-utterance decisions")
    e.add_argument("--out", type=Path, default=None, help="also write the report to this file")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="inference latency per batch", formatter_class=_fmt())
    b.add_argument("--checkpoint", type=Path, default=None,
                   help="checkpoint to time; omit to time a freshly built --arch model")
    b.add_argument("--classes", type=int, default=462, help="class count when building a fresh model")
    b.add_argument("--loss", choices=["softmax", "am_softmax"], default="am_softmax",
                   help="head kind when building a fresh model")
    b.add_argument("--batches", type=int, default=PROTOCOL_BATCHES, help="timed batches")
    b.add_argument("--batch-size", type=int, default=PROTOCOL_BATCH_SIZE, help="frames per batch")
    b.add_argument("--warmup", type=int, default=10, help="untimed warmup batches")
    b.add_argument("--seed", type=int, default=1234, help="seed for the random input frames")
    b.add_argument("--threads", type=int, default=1, help="concurrent inference threads")
    b.add_argument("--out", type=Path, default=None, help="also write the report to this file")
    _add_arch_flags(b)
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("info", help="parameter count and size of a checkpoint", formatter_class=_fmt())
    i.add_argument("checkpoint", type=Path, help="checkpoint file (.amn)")
    i.add_argument("--out", type=Path, default=None, help="also write the report to this file")
    i.set_defaults(func=cmd_info)

    y = sub.add_parser("synth", help="write a synthetic speaker corpus", formatter_class=_fmt())
    y.add_argument("--speakers", type=int, default=10, help="number of speakers")
    y.add_argument("--utterances", type=int, default=10, help="utterances per speaker")
    y.add_argument("--seconds", type=float, default=2.0, help="utterance duration")
    y.add_argument("--rate", type=int, default=16000, help="sample rate in Hz")
    y.add_argument("--seed", type=int, default=1234, help="corpus seed")
    y.add_argument("--out", type=Path, required=True, help="output directory")
    y.set_defaults(func=cmd_synth)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AmMobileNetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
