"""Pre-train the QCFS ANN, convert, fine-tune the SNN with step-wise KD, evaluate."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import tensor as tn
from ..ann import (AnnModel, EpochLog, TeacherOutput, TrainHistory, TrainingDivergedError,
                   iterate_minibatches, teacher_predict, tinynet_spec, train_ann)
from ..conversion import convert
from ..distill import LossConfig, combined_loss
from ..optim import make_optimizer
from ..snn import SnnModel
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import FrameDataset, build_datasets

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase {phase!r} failed: {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class EvalReport:
    accuracy: float
    per_step_accuracy: list[float]
    confusion: list[list[int]]
    n_samples: int
    t2: int
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def per_step_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,accuracy\n")
            for t, a in enumerate(self.per_step_accuracy, start=1):
                fh.write(f"{t},{a:.10g}\n")

    def comparable(self) -> dict:
        """All fields except wall-clock time."""
        d = self.to_dict()
        d.pop("wall_clock_s")
        return d


def evaluate(snn: SnnModel, dataset: FrameDataset, t2: int, batch_size: int = 64) -> EvalReport:
    """Classify from the last ``t2`` frames of each sample only.

    The prediction after step t is the argmax of the mean of the per-step
    softmax outputs up to t; the headline accuracy is the one at t = t2.
    """
    start_time = time.perf_counter()
    t1 = dataset.T - t2
    if t1 < 0:
        raise ValueError(f"t2={t2} exceeds the {dataset.T} frames per sample")
    seg = dataset.segment(t1, dataset.T)
    n, classes = len(dataset), snn.spec.class_count
    correct = np.zeros(t2, dtype=np.int64)
    confusion = np.zeros((classes, classes), dtype=np.int64)
    with tn.no_grad():
        for idx in iterate_minibatches(n, batch_size, None):
            outs = snn.forward(seg[idx])
            z = np.stack([o.data for o in outs])          # (t2, B, classes)
            z = z - z.max(axis=-1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            cum = np.cumsum(p, axis=0) / np.arange(1, t2 + 1)[:, None, None]
            pred = cum.argmax(axis=-1)
            y = dataset.labels[idx]
            correct += (pred == y[None]).sum(axis=1)
            np.add.at(confusion, (y, pred[-1]), 1)
    per_step = (correct / n).tolist()
    return EvalReport(accuracy=per_step[-1], per_step_accuracy=per_step,
                      confusion=confusion.tolist(), n_samples=n, t2=t2,
                      wall_clock_s=time.perf_counter() - start_time)


def finetune_snn(snn: SnnModel, segment, labels, teacher_probs: np.ndarray | None,
                 cfg: TrainConfig, loss_cfg: LossConfig | None = None,
                 on_epoch: Callable[[EpochLog], None] | None = None) -> TrainHistory:
    """BPTT over the fine-tuning segment with CE + lambda * distillation."""
    loss_cfg = loss_cfg or cfg.loss
    oc = cfg.snn_optim()
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    opt = make_optimizer(oc.optimizer, snn.parameters(), oc.lr, oc.momentum, oc.weight_decay)
    rng = np.random.default_rng(oc.seed)
    history = TrainHistory()
    for epoch in range(1, oc.epochs + 1):
        tot, correct = 0.0, 0
        for idx in iterate_minibatches(n, oc.batch_size, rng):
            opt.zero_grad()
            outs = snn.forward(segment[idx])
            teacher = None if teacher_probs is None else teacher_probs[idx]
            loss = combined_loss(outs, labels[idx], teacher, loss_cfg)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDivergedError(f"SNN loss became {lv} at epoch {epoch}")
            loss.backward()
            opt.step()
            tot += lv * len(idx)
            z = np.stack([o.data for o in outs])
            z = np.exp(z - z.max(axis=-1, keepdims=True))
            p = (z / z.sum(axis=-1, keepdims=True)).mean(axis=0)
            correct += int((p.argmax(axis=-1) == labels[idx]).sum())
        row = EpochLog(epoch, "train", tot / n, correct / n)
        history.rows.append(row)
        log.info("snn epoch %d loss=%.4f acc=%.4f", epoch, row.loss, row.accuracy)
        if on_epoch is not None:
            on_epoch(row)
    return history


@dataclass
class PipelineResult:
    report: EvalReport
    ann: AnnModel
    snn: SnnModel
    converted_report: EvalReport
    ann_history: TrainHistory
    snn_history: TrainHistory
    teacher: TeacherOutput
    ann_test_accuracy: float


def _phase(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # re-raised with the phase attached
        raise PipelineError(name, exc) from exc


def pretrain(cfg: TrainConfig, train: FrameDataset, test: FrameDataset | None = None):
    spec = tinynet_spec((2, cfg.height, cfg.width), cfg.num_classes, cfg.L)
    ann = AnnModel(spec, seed=cfg.seed, lambda_init=cfg.lambda_init)
    seg = train.segment(0, cfg.t1).materialize()
    val = None
    if test is not None:
        val = (test.segment(0, cfg.t1).materialize(), test.labels)
    history = train_ann(ann, seg, train.labels, cfg.ann_optim(), val=val)
    return ann, history


def ann_test_accuracy(ann: AnnModel, test: FrameDataset, t1: int) -> float:
    from ..ann import ann_accuracy
    return ann_accuracy(ann, test.segment(0, t1).materialize(), test.labels)[1]


def run_finetune_phase(cfg: TrainConfig, ann: AnnModel, train: FrameDataset, test: FrameDataset,
                       loss_cfg: LossConfig | None = None):
    """Convert ``ann``, fine-tune the copy, evaluate on the inference segment."""
    loss_cfg = loss_cfg or cfg.loss
    snn = _phase("convert", convert, ann, cfg.surrogate)
    converted = _phase("evaluate", evaluate, snn, test, cfg.t2)
    teacher = _phase("teacher", teacher_predict, ann, train.segment(0, cfg.t1).materialize(), cfg.temperature)
    seg = train.segment(cfg.t1, cfg.T)
    # materialize once; fine-tuning touches the same frames every epoch
    seg_frames = seg.materialize()
    probs = teacher.probs if loss_cfg.mode != "none" and loss_cfg.lambda_skd > 0 else None
    hist = _phase("finetune", finetune_snn, snn, seg_frames, train.labels, probs, cfg, loss_cfg)
    test.access_log.clear()
    report = _phase("evaluate", evaluate, snn, test, cfg.t2)
    report.extra.update(loss_mode=loss_cfg.mode, lambda_skd=loss_cfg.lambda_skd,
                        temperature=loss_cfg.temperature, L=cfg.L,
                        converted_accuracy=converted.accuracy,
                        test_frames_read=sorted(test.access_log))
    return snn, report, converted, hist, teacher


def run_pipeline(cfg: TrainConfig, out_dir=None, datasets=None) -> PipelineResult:
    """Data -> frames -> partition -> ANN (first segment) -> convert -> fine-tune -> evaluate."""
    cfg.validate()
    t0 = time.perf_counter()
    train, test = datasets if datasets is not None else _phase("data", build_datasets, cfg)
    ann, ann_hist = _phase("pretrain", pretrain, cfg, train)
    ann_acc = _phase("pretrain", ann_test_accuracy, ann, test, cfg.t1)
    snn, report, converted, snn_hist, teacher = run_finetune_phase(cfg, ann, train, test)
    report.extra["ann_test_accuracy"] = ann_acc
    report.wall_clock_s = time.perf_counter() - t0
    result = PipelineResult(report, ann, snn, converted, ann_hist, snn_hist, teacher, ann_acc)
    if out_dir is not None:
        write_outputs(result, cfg, out_dir)
    return result


def write_outputs(result: PipelineResult, cfg: TrainConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    save_checkpoint(result.ann, out / "ann.ckpt")
    save_checkpoint(result.snn, out / "snn.ckpt")
    result.ann_history.to_csv(out / "ann_log.csv")
    result.snn_history.to_csv(out / "snn_log.csv")
    result.report.to_json(out / "report.json")
    result.report.per_step_csv(out / "per_step_accuracy.csv")


def compare_modes(cfg: TrainConfig, modes: Sequence[tuple[str, float]] = (("skd", None), ("none", 0.0)),
                  out_dir=None, datasets=None) -> dict[str, EvalReport]:
    """Fine-tune the same pre-trained ANN under several loss settings.

    The ANN phase is deterministic given the seed, so sharing it is the
    same as running the full pipeline once per setting.
    """
    cfg.validate()
    t0 = time.perf_counter()
    train, test = datasets if datasets is not None else _phase("data", build_datasets, cfg)
    ann, ann_hist = _phase("pretrain", pretrain, cfg, train)
    ann_acc = _phase("pretrain", ann_test_accuracy, ann, test, cfg.t1)
    pretrain_s = time.perf_counter() - t0
    reports = {}
    for mode, lam in modes:
        t1 = time.perf_counter()
        lc = LossConfig(mode, cfg.lambda_skd if lam is None else lam, cfg.temperature)
        snn, report, converted, hist, _ = run_finetune_phase(cfg, ann, train, test, lc)
        report.extra["ann_test_accuracy"] = ann_acc
        # pipeline time for this setting = shared pre-training + its own fine-tuning
        report.wall_clock_s = pretrain_s + (time.perf_counter() - t1)
        key = f"{mode}(lambda={lc.lambda_skd:g})"
        reports[key] = report
        if out_dir is not None:
            d = Path(out_dir) / key.replace("(", "_").replace(")", "").replace("=", "")
            write_outputs(PipelineResult(report, ann, snn, converted, ann_hist, hist, None, ann_acc), cfg, d)
    if out_dir is not None:
        with open(Path(out_dir) / "comparison.csv", "w") as fh:
            fh.write("setting,accuracy,converted_accuracy\n")
            for k, r in reports.items():
                fh.write(f"{k},{r.accuracy:.10g},{r.extra['converted_accuracy']:.10g}\n")
    return reports


def comparison_table(reports: dict[str, EvalReport]) -> str:
    lines = [f"{'setting':<22} {'top1':>7} {'converted':>10}"]
    for k, r in reports.items():
        lines.append(f"{k:<22} {r.accuracy:>7.4f} {r.extra.get('converted_accuracy', float('nan')):>10.4f}")
    return "\n".join(lines)


def sweep_quantization(cfg: TrainConfig, Ls: Sequence[int] = (4, 8, 16, 32), out_csv=None,
                       datasets=None) -> list[tuple[int, float]]:
    """Full pipeline once per quantization step; returns (L, accuracy) rows."""
    datasets = datasets if datasets is not None else _phase("data", build_datasets, cfg)
    rows = []
    for L in Ls:
        res = run_pipeline(cfg.replace(L=int(L)), datasets=datasets)
        rows.append((int(L), res.report.accuracy))
        log.info("sweep L=%d accuracy=%.4f", L, res.report.accuracy)
    accs = [a for _, a in rows]
    if len(accs) > 2:
        monotone = all(np.diff(accs) >= 0) or all(np.diff(accs) <= 0)
        log.info("accuracy %s monotone in L", "is" if monotone else "is not")
    if out_csv is not None:
        with open(out_csv, "w") as fh:
            fh.write("L,accuracy\n")
            for L, a in rows:
                fh.write(f"{L},{a:.10g}\n")
    return rows
