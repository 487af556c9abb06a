"""Command-line entry point: ``aflnet <command> ...``.

Configs are JSON objects whose keys mirror :class:`ScenarioConfig` or
:class:`TrainConfig`.  Datasets are directories written by ``synth``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from aflnet import pipeline
from aflnet.metrics import METRIC_HEADER, TimelineError, emit_rttm, parse_rttm
from aflnet.scoring import DataError
from aflnet.synthdata import (
    ConfigError,
    ScenarioConfig,
    generate_dataset,
    load_config,
    load_dataset,
    save_dataset,
)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _train_config(args) -> pipeline.TrainConfig:
    data = load_config(args.config) if args.config else {}
    cfg = pipeline.TrainConfig.from_dict(data)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg.validate()


def _model_and_threshold(args):
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    threshold = ckpt.threshold if args.threshold is None else args.threshold
    return ckpt, threshold


def cmd_synth(args) -> int:
    cfg = ScenarioConfig.from_dict(load_config(args.config) if args.config else {})
    recs = generate_dataset(cfg, args.count, args.seed, args.prefix)
    save_dataset(recs, args.out)
    print(f"wrote {len(recs)} recordings to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    result = pipeline.train(load_dataset(args.train_dir), load_dataset(args.val_dir), cfg)
    pipeline.save_checkpoint(result.checkpoint, args.out)
    print(
        f"checkpoint {args.out}: iteration {result.checkpoint.iteration}, "
        f"validation DER {pipeline.der_percent(result.checkpoint.val_der)}%, threshold {result.threshold:.2f}"
    )
    return 0


def cmd_diarize(args) -> int:
    ckpt, threshold = _model_and_threshold(args)
    model = ckpt.to_model()
    hyps = [pipeline.diarize(rec, model, threshold) for rec in load_dataset(args.input)]
    text = emit_rttm(hyps)
    if args.rttm_out:
        Path(args.rttm_out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    ckpt, threshold = _model_and_threshold(args)
    refs = {tl.recording_id: tl for tl in parse_rttm(Path(args.ref_rttm).read_text())}
    report = pipeline.evaluate(load_dataset(args.input), ckpt, threshold, references=refs)
    print(METRIC_HEADER)
    print("\n".join(report.records()))
    return 0


def cmd_sweep(args) -> int:
    ckpt, threshold = _model_and_threshold(args)
    rows = pipeline.missing_rate_sweep(load_dataset(args.input), ckpt, threshold, args.rates, args.seeds)
    sys.stdout.write(pipeline.sweep_table(rows))
    return 0


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    result, report = pipeline.run_arm(
        args.arm, load_dataset(args.train_dir), load_dataset(args.val_dir), load_dataset(args.test_dir), cfg
    )
    if args.out:
        pipeline.save_checkpoint(result.checkpoint, args.out)
    print(f"# arm {args.arm}, threshold {result.threshold:.2f}")
    print(METRIC_HEADER)
    print("\n".join(report.records()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aflnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic recordings")
    p.add_argument("--config", help="scenario JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="root seed (default: config seed)")
    p.add_argument("--prefix", default="rec")
    p.set_defaults(func=cmd_synth)

    def training_flags(p):
        p.add_argument("--config", help="training JSON")
        p.add_argument("--train-dir", required=True)
        p.add_argument("--val-dir", required=True)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a scorer and pick a threshold")
    training_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.set_defaults(func=cmd_train)

    def model_flags(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--threshold", type=float, default=None, help="default: the checkpoint's tuned value")
        p.add_argument("--in", dest="input", required=True, help="dataset directory")

    p = sub.add_parser("diarize", help="write hypothesis RTTM")
    model_flags(p)
    p.add_argument("--rttm-out", help="default: stdout")
    p.set_defaults(func=cmd_diarize)

    p = sub.add_parser("eval", help="score against a reference RTTM")
    model_flags(p)
    p.add_argument("--ref-rttm", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="DER versus visual missing rate")
    model_flags(p)
    p.add_argument("--rates", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train and test one ablation arm")
    p.add_argument("--arm", required=True, choices=sorted(pipeline.ARMS))
    training_flags(p)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--out", help="optional checkpoint path")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, TimelineError, pipeline.TrainingError, OSError, ValueError) as exc:
        print(f"aflnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
