"""Command-line entry point: ``seqseg <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure. Errors go to standard error prefixed ``usage:``, ``data:`` or
``numeric:``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import losses
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import MODULES, run_suite
from .pnet import ConfigError
from .synthdata import (FormatError, GenConfig, GenerationError, Volume, ct_config, generate_suite,
                        load_dataset, mri_config, read_volume, save_dataset, write_volume)
from .tensor import NumericError
from .trainer import (TrainConfig, TrainingDiverged, evaluate, finetune_birnn, predict_volume, train_staged,
                      write_history_csv)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "SEQSEG_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path: str | None) -> dict:
    """Read a JSON config file with optional ``data`` and ``train`` sections."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict) or set(cfg) - {"data", "train"}:
        raise UsageError("config file must be an object with optional 'data' and 'train' sections")
    return cfg


def _seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


def _build(cls, section: dict, overrides: dict):
    known = {f.name for f in fields(cls)}
    bad = set(section) - known
    if bad:
        raise UsageError(f"unknown {cls.__name__} keys in config: {sorted(bad)}")
    values = dict(section)
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values) if cls is TrainConfig else replace(cls(), **values)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _print_config(name: str, obj) -> None:
    print(f"# {name}: " + json.dumps(asdict(obj), sort_keys=True))


def _dataset(path: str):
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"data directory {path} does not exist")
    return load_dataset(d)


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    base = ct_config() if args.modality == "ct" else mri_config()
    section = dict(cfg.get("data", {}))
    seed = _seed(args)
    gen = _build(GenConfig, {**asdict(base), **section}, {"seed": seed})
    _print_config("data", gen)
    cases = generate_suite(args.count, gen, seed=gen.seed)
    paths = save_dataset(args.out_dir, cases)
    print(f"wrote {len(paths)} files to {args.out_dir}")
    return EXIT_OK


def _train_config(args, extra: dict | None = None) -> TrainConfig:
    cfg = _load_config(args.config)
    overrides = {"seed": _seed(args), **(extra or {})}
    tc = _build(TrainConfig, cfg.get("train", {}), overrides)
    _print_config("train", tc)
    return tc


def cmd_train(args) -> int:
    tc = _train_config(args, {"loss": args.loss, "K": args.K, "width": args.width, "max_epochs": args.max_epochs})
    data = _dataset(args.data_dir)
    try:
        ck = train_staged(data, tc)
    except TrainingDiverged as e:
        save_checkpoint(args.out_ckpt, e.checkpoint)
        raise
    save_checkpoint(args.out_ckpt, ck)
    if args.history:
        write_history_csv(args.history, ck.history)
    print(f"trained {ck.stage} stages over {ck.epoch} epochs; checkpoint {args.out_ckpt}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    ck = load_checkpoint(args.ckpt)
    section = _load_config(args.config).get("train")
    base = ck.config if section is None else _build(TrainConfig, section, {})
    tc = replace(base, **{k: v for k, v in {"seed": _seed(args), "rnn_warmup_epochs": args.warmup_epochs,
                                             "finetune_epochs": args.epochs}.items() if v is not None})
    _print_config("train", tc)
    data = _dataset(args.data_dir)
    try:
        out = finetune_birnn(ck, data, tc)
    except TrainingDiverged as e:
        save_checkpoint(args.out_ckpt, e.checkpoint)
        raise
    save_checkpoint(args.out_ckpt, out)
    if args.history:
        write_history_csv(args.history, out.history)
    print(f"fine-tuned checkpoint {args.out_ckpt}")
    return EXIT_OK


def cmd_infer(args) -> int:
    ck = load_checkpoint(args.ckpt)
    vol = read_volume(args.volume)
    if not isinstance(vol, Volume):
        raise FormatError(f"{args.volume} holds a mask, not an image volume", 6)
    pred = predict_volume(ck, vol)
    prob = pred.cnn if (pred.rnn is None or args.cnn_only) else pred.rnn
    write_volume(args.out_prob, Volume(prob, vol.spacing_mm))
    print(f"wrote {'CNN' if prob is pred.cnn else 'BiRNN'} probabilities to {args.out_prob}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    data = _dataset(args.data_dir)
    result = evaluate(ck, data, args.threshold, threads=args.threads)
    report = result.final
    if args.report:
        Path(args.report).write_text(report.to_csv())
    if result.rnn is not None:
        sys.stdout.write(result.cnn.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_sweep(args) -> int:
    ck = load_checkpoint(args.ckpt)
    data = _dataset(args.data_dir)
    preds, truths = [], []
    for _, img, mask in data:
        p = predict_volume(ck, img)
        preds.append(p.cnn if (p.rnn is None or args.cnn_only) else p.rnn)
        truths.append(mask.voxels)
    rows = losses.dataset_sweep(preds, truths)
    losses.write_sweep_csv(args.out_csv, rows)
    print(f"DSC range over thresholds: {losses.dsc_range(rows):.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.module, args.seeds)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"random seed (fallback: ${SEED_ENV})")
    common.add_argument("--threads", type=int, default=1, help="worker processes for evaluation")
    common.add_argument("--config", default=None, help="JSON config with 'data'/'train' sections")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="seqseg", description="Slice-sequence segmentation: PNet-MSA + BiRNN.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--modality", choices=("ct", "mri"), default="ct")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="staged PNet-MSA training")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-ckpt", required=True)
    s.add_argument("--history", default=None, help="write the loss history CSV here")
    s.add_argument("--loss", choices=sorted(losses.LOSSES), default=None)
    s.add_argument("--K", type=int, default=None)
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--max-epochs", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune-rnn", parents=[common], help="attach and fine-tune the BiRNN")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-ckpt", required=True)
    s.add_argument("--history", default=None)
    s.add_argument("--warmup-epochs", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("infer", parents=[common], help="probability volume for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--out-prob", required=True)
    s.add_argument("--cnn-only", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="metrics report on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--report", default=None, help="write the per-case CSV here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference oracle suite")
    s.add_argument("--module", choices=("all",) + MODULES, default="all")
    s.add_argument("--seeds", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", parents=[common], help="DSC over output thresholds")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--cnn-only", action="store_true")
    s.set_defaults(func=cmd_sweep)
    return p


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as e:
        print(f"usage: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as e:
        print(f"numeric: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, GenerationError, ConfigError, FileNotFoundError, ValueError) as e:
        print(f"data: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
