"""Command-line entry point: ``hsd <subcommand> [--config ...] [--out-dir ...]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..ann import AnnModel
from ..conversion import convert, fidelity_check
from ..events import EventFormatError
from ..snn import SnnModel
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, apply_overrides, load_config
from .data import build_datasets, load_dataset, write_dataset
from .pipeline import (PipelineError, comparison_table, compare_modes, evaluate, finetune_snn, pretrain,
                       run_pipeline, sweep_quantization, write_outputs)

log = logging.getLogger("hsd")

DEFAULT_L = 16


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


def _config(args) -> TrainConfig:
    cfg = load_config(args.config, os.environ)
    over = _parse_set(args.set)
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.out_dir is not None:
        over["out_dir"] = args.out_dir
    return apply_overrides(cfg, over).validate()


def _datasets(cfg: TrainConfig, data_dir):
    if data_dir is None:
        return build_datasets(cfg)
    return tuple(load_dataset(data_dir, split, cfg.T, cfg.normalize) for split in ("train", "test"))


def _out(cfg: TrainConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, cfg):
    root = _out(cfg) / "data"
    counts = write_dataset(cfg, root)
    print(f"wrote {counts['train']} train and {counts['test']} test streams under {root}")


def cmd_train_ann(args, cfg):
    train, test = _datasets(cfg, args.data)
    ann, hist = pretrain(cfg, train, test)
    out = _out(cfg)
    save_checkpoint(ann, out / "ann.ckpt")
    hist.to_csv(out / "ann_log.csv")
    (out / "config.txt").write_text(cfg.to_text())
    last = hist.last("val") or hist.last("train")
    print(f"ann {last.split} accuracy {last.accuracy:.4f}; checkpoint {out / 'ann.ckpt'}")


def cmd_convert(args, cfg):
    out = _out(cfg)
    ann = load_checkpoint(args.ann or out / "ann.ckpt", expect="ann")
    snn = convert(ann, cfg.surrogate)
    dest = Path(args.output) if args.output else out / "snn_converted.ckpt"
    save_checkpoint(snn, dest)
    if args.t_as:
        _, test = _datasets(cfg, args.data)
        probes = test.segment(0, cfg.t1).materialize().mean(axis=1)
        rep = fidelity_check(ann, snn, probes, args.t_as)
        rep.to_csv(out / "conversion.csv")
        for layer, dev in zip(rep.layers, rep.max_abs_deviation):
            print(f"layer {layer}: max |phi - a| = {dev:.6g}")
    print(f"converted snn written to {dest}")


def cmd_finetune(args, cfg):
    out = _out(cfg)
    ann = load_checkpoint(args.ann or out / "ann.ckpt", expect="ann")
    snn = load_checkpoint(args.snn, expect="snn") if args.snn else convert(ann, cfg.surrogate)
    train, _ = _datasets(cfg, args.data)
    from ..ann import teacher_predict
    teacher = teacher_predict(ann, train.segment(0, cfg.t1).materialize(), cfg.temperature)
    use_teacher = cfg.loss_mode != "none" and cfg.lambda_skd > 0
    hist = finetune_snn(snn, train.segment(cfg.t1, cfg.T).materialize(), train.labels,
                        teacher.probs if use_teacher else None, cfg)
    save_checkpoint(snn, out / "snn.ckpt")
    hist.to_csv(out / "snn_log.csv")
    print(f"snn train accuracy {hist.last('train').accuracy:.4f}; checkpoint {out / 'snn.ckpt'}")


def cmd_eval(args, cfg):
    out = _out(cfg)
    snn = load_checkpoint(args.checkpoint or out / "snn.ckpt", expect="snn")
    _, test = _datasets(cfg, args.data)
    report = evaluate(snn, test, cfg.t2)
    report.extra["test_frames_read"] = sorted(test.access_log)
    report.to_json(out / "report.json")
    report.per_step_csv(out / "per_step_accuracy.csv")
    print(f"top-1 {report.accuracy:.4f} on {report.n_samples} samples using frames {cfg.t1}..{cfg.T - 1}")


def cmd_pipeline(args, cfg):
    out = _out(cfg)
    datasets = _datasets(cfg, args.data)
    if args.compare:
        reports = compare_modes(cfg, out_dir=out, datasets=datasets)
        print(comparison_table(reports))
        return
    res = run_pipeline(cfg, out_dir=out, datasets=datasets)
    r = res.report
    print(f"ann {res.ann_test_accuracy:.4f} converted {r.extra['converted_accuracy']:.4f} "
          f"snn {r.accuracy:.4f} in {r.wall_clock_s:.1f}s; report {out / 'report.json'}")


def cmd_sweep_l(args, cfg):
    out = _out(cfg)
    Ls = [int(v) for v in args.Ls.split(",") if v.strip()]
    if not Ls or min(Ls) < 1:
        raise ConfigError("--Ls must list positive integers")
    rows = sweep_quantization(cfg, Ls, out_csv=out / "sweep.csv", datasets=_datasets(cfg, args.data))
    for L, acc in rows:
        print(f"L={L:<3d} accuracy {acc:.4f}{'  (default)' if L == DEFAULT_L else ''}")


def cmd_dump_spikes(args, cfg):
    out = _out(cfg)
    snn = load_checkpoint(args.checkpoint or out / "snn.ckpt", expect="snn")
    _, test = _datasets(cfg, args.data)
    if not 0 <= args.sample < len(test):
        raise ConfigError(f"--sample must be in [0, {len(test)})")
    x = test.segment(cfg.t1, cfg.T)[np.array([args.sample])]
    _, rec = snn.forward(x, record=True)
    dest = Path(args.output) if args.output else out / "spikes.csv"
    rec.to_csv(dest)
    print(f"spike trace of test sample {args.sample} written to {dest}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "write the synthetic event dataset as EVT1 files"),
    "train-ann": (cmd_train_ann, "pre-train the QCFS ANN on the first segment"),
    "convert": (cmd_convert, "convert an ANN checkpoint into an SNN checkpoint"),
    "finetune": (cmd_finetune, "fine-tune the converted SNN with the distillation loss"),
    "eval": (cmd_eval, "evaluate an SNN checkpoint on the inference segment"),
    "pipeline": (cmd_pipeline, "run every phase end to end"),
    "sweep-l": (cmd_sweep_l, "run the pipeline for several quantization steps"),
    "dump-spikes": (cmd_dump_spikes, "write the spike trace of one test sample as CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsd", description="Hybrid ANN/SNN training on event streams.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default="default", help="preset name or key = value config file")
        p.add_argument("--out-dir", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name not in ("gen-data",):
            p.add_argument("--data", help="dataset directory written by gen-data (default: generate)")
        if name in ("convert", "finetune"):
            p.add_argument("--ann", help="ANN checkpoint (default: <out-dir>/ann.ckpt)")
        if name == "convert":
            p.add_argument("--output", help="destination checkpoint")
            p.add_argument("--t-as", type=int, default=0, help="also write a fidelity report at this horizon")
        if name == "finetune":
            p.add_argument("--snn", help="start from this SNN checkpoint instead of converting")
        if name in ("eval", "dump-spikes"):
            p.add_argument("--checkpoint", help="SNN checkpoint (default: <out-dir>/snn.ckpt)")
        if name == "dump-spikes":
            p.add_argument("--sample", type=int, default=0)
            p.add_argument("--output", help="destination CSV")
        if name == "pipeline":
            p.add_argument("--compare", action="store_true", help="also fine-tune with lambda = 0 and compare")
        if name == "sweep-l":
            p.add_argument("--Ls", default="4,8,16,32", help="comma separated quantization steps")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command][0](args, cfg)
    except (ConfigError, CheckpointError, EventFormatError, PipelineError, FileNotFoundError,
            ValueError) as exc:
        print(f"hsd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
