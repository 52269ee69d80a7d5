"""QCFS-activated 2D classifier trained frame-by-frame on the first segment."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .optim import CosineSchedule, make_optimizer
from .tensor import Tensor

log = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-3
LAYER_KINDS = ("conv2d", "avgpool2d", "maxpool2d", "dense", "qcfs", "relu", "flatten", "if")


class TrainingDivergedError(RuntimeError):
    pass


# QCFS ------------------------------------------------------------------------

def qcfs_forward(z, L: int, lam: float) -> np.ndarray:
    """(lam/L) * clip(floor(z*L/lam + 1/2), 0, L)."""
    z = np.asarray(z, dtype=np.float64)
    k = np.clip(np.floor(z * L / lam + 0.5), 0, L)
    return lam * k / L


def qcfs_backward(upstream, z, L: int, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through gradient for z, index-held-constant gradient for lam.

    Returns elementwise ``(grad_z, grad_lambda)``; the caller reduces
    ``grad_lambda`` to the shape of the threshold.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    s = z * L / lam + 0.5
    inside = (s > 0) & (s < L)
    k = np.clip(np.floor(s), 0, L)
    return upstream * inside, upstream * (k / L)


def qcfs(z: Tensor, lam: Tensor, L: int) -> Tensor:
    """Differentiable QCFS with a trainable scalar threshold tensor.

    Same arithmetic as :func:`qcfs_forward` / :func:`qcfs_backward`, fused so
    the quantization index is computed once per call.
    """
    lv = float(lam.data)
    s = z.data * L
    s /= lv
    s += 0.5
    k = np.floor(s)
    np.maximum(k, 0, out=k)
    np.minimum(k, L, out=k)

    def bw(g):
        inside = (s > 0) & (s < L)
        return g * inside, np.asarray(np.vdot(g, k) / L).reshape(lam.shape)

    return tn._make(lv * k / L, (z, lam), bw)


@dataclass
class QcfsActivation:
    L: int
    lam: Tensor

    def __call__(self, z: Tensor) -> Tensor:
        return qcfs(z, self.lam, self.L)

    @property
    def levels(self) -> np.ndarray:
        lam = float(self.lam.data)
        return lam * np.arange(self.L + 1) / self.L


# model description -----------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    k: int = 0
    L: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def __str__(self) -> str:
        if self.kind == "conv2d":
            return f"conv2d({self.out},{self.k})"
        if self.kind in ("avgpool2d", "maxpool2d"):
            return f"{self.kind}({self.k})"
        if self.kind == "dense":
            return f"dense({self.out})"
        if self.kind in ("qcfs", "if"):
            return f"{self.kind}(L={self.L})"
        return self.kind


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    class_count: int

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer."""
        shape: tuple[int, ...] = tuple(self.input_shape)
        out = []
        for i, ls in enumerate(self.layers):
            if ls.kind == "conv2d":
                if len(shape) != 3:
                    raise ValueError(f"layer {i} conv2d expects (C, H, W) input, got {shape}")
                shape = (ls.out, shape[1], shape[2])
            elif ls.kind in ("avgpool2d", "maxpool2d"):
                if len(shape) != 3 or shape[1] % ls.k or shape[2] % ls.k:
                    raise ValueError(f"layer {i} {ls.kind}({ls.k}) cannot pool shape {shape}")
                shape = (shape[0], shape[1] // ls.k, shape[2] // ls.k)
            elif ls.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif ls.kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"layer {i} dense expects flat input, got {shape}")
                shape = (ls.out,)
            out.append(shape)
        return out

    def with_layers(self, layers: Sequence[LayerSpec]) -> "ModelSpec":
        return replace(self, layers=tuple(layers))


def tinynet_spec(input_shape=(2, 32, 32), class_count: int = 4, L: int = 16) -> ModelSpec:
    layers = (
        LayerSpec("conv2d", out=16, k=3), LayerSpec("qcfs", L=L), LayerSpec("avgpool2d", k=2),
        LayerSpec("conv2d", out=32, k=3), LayerSpec("qcfs", L=L), LayerSpec("avgpool2d", k=2),
        LayerSpec("flatten"),
        LayerSpec("dense", out=128), LayerSpec("qcfs", L=L),
        LayerSpec("dense", out=class_count),
    )
    return ModelSpec(layers, tuple(input_shape), class_count)


def init_params(spec: ModelSpec, seed: int = 0, lambda_init: float = 1.0) -> list[dict[str, Tensor]]:
    """Kaiming-uniform weights, zero biases, constant thresholds."""
    rng = np.random.default_rng(seed)
    params: list[dict[str, Tensor]] = []
    prev = tuple(spec.input_shape)
    for ls, shape in zip(spec.layers, spec.shapes()):
        p: dict[str, Tensor] = {}
        if ls.kind == "conv2d":
            fan_in = prev[0] * ls.k * ls.k
            bound = math.sqrt(6.0 / fan_in)
            p["W"] = Tensor(rng.uniform(-bound, bound, (ls.out, prev[0], ls.k, ls.k)), requires_grad=True)
            p["b"] = Tensor(np.zeros(ls.out), requires_grad=True)
        elif ls.kind == "dense":
            fan_in = prev[0]
            bound = math.sqrt(6.0 / fan_in)
            p["W"] = Tensor(rng.uniform(-bound, bound, (ls.out, fan_in)), requires_grad=True)
            p["b"] = Tensor(np.zeros(ls.out), requires_grad=True)
        elif ls.kind in ("qcfs", "if"):
            p["lambda"] = Tensor(np.array(float(lambda_init)), requires_grad=True)
        params.append(p)
        prev = shape
    return params


def apply_linear(ls: LayerSpec, p: dict[str, Tensor], x: Tensor) -> Tensor:
    """Forward of a non-activation layer; shared by the ANN and the SNN."""
    if ls.kind == "conv2d":
        return tn.conv2d(x, p["W"], p["b"])
    if ls.kind == "dense":
        return tn.dense(x, p["W"], p["b"])
    if ls.kind == "avgpool2d":
        return tn.avgpool2d(x, ls.k)
    if ls.kind == "flatten":
        return tn.flatten(x)
    if ls.kind == "relu":
        return tn.relu(x)
    if ls.kind == "maxpool2d":
        raise NotImplementedError("maxpool2d is not supported; use avgpool2d")
    raise ValueError(f"{ls.kind} is not a linear layer")


class AnnModel:
    """Sequential 2D network whose nonlinearities are QCFS (or ReLU, pre-replacement)."""

    kind = "ann"

    def __init__(self, spec: ModelSpec, params: list[dict[str, Tensor]] | None = None,
                 seed: int = 0, lambda_init: float = 1.0):
        spec.shapes()
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed, lambda_init)
        if len(self.params) != len(spec.layers):
            raise ValueError("parameter list does not match layer list")

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return self.spec.layers

    def parameters(self) -> list[Tensor]:
        return [t for p in self.params for t in p.values()]

    def thresholds(self) -> list[float]:
        return [float(p["lambda"].data) for ls, p in zip(self.layers, self.params) if ls.kind == "qcfs"]

    def clamp_thresholds(self) -> None:
        for ls, p in zip(self.layers, self.params):
            if ls.kind == "qcfs":
                np.maximum(p["lambda"].data, LAMBDA_FLOOR, out=p["lambda"].data)

    def forward(self, x, return_activations: bool = False):
        x = tn.as_tensor(x)
        acts = []
        for ls, p in zip(self.layers, self.params):
            if ls.kind == "qcfs":
                x = qcfs(x, p["lambda"], ls.L)
                acts.append(x.data)
            else:
                x = apply_linear(ls, p, x)
        return (x, acts) if return_activations else x

    __call__ = forward

    def frame_logits(self, frames) -> Tensor:
        """Apply the network to every frame independently: (B, T, C, H, W) -> (B, T, classes)."""
        frames = np.asarray(frames, dtype=np.float64)
        b, t = frames.shape[:2]
        out = self.forward(Tensor(frames.reshape(b * t, *frames.shape[2:])))
        return tn.reshape(out, (b, t, out.shape[-1]))


def average_ce_loss(frame_logits: Tensor, labels) -> Tensor:
    """Cross-entropy of the frame-averaged logits."""
    return tn.cross_entropy(tn.mean(frame_logits, axis=1), labels)


@dataclass
class OptimConfig:
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 30
    cosine: bool = True
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    split: str
    loss: float
    accuracy: float


@dataclass
class TrainHistory:
    rows: list[EpochLog] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,split,loss,accuracy\n")
            for r in self.rows:
                fh.write(f"{r.epoch},{r.split},{r.loss:.10g},{r.accuracy:.10g}\n")

    def last(self, split: str) -> EpochLog | None:
        rows = [r for r in self.rows if r.split == split]
        return rows[-1] if rows else None


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def ann_accuracy(model: AnnModel, frames: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> tuple[float, float]:
    """(mean loss, accuracy) of frame-averaged logits."""
    losses, correct = 0.0, 0
    with tn.no_grad():
        for idx in iterate_minibatches(len(labels), batch_size, None):
            logits = model.frame_logits(frames[idx])
            losses += average_ce_loss(logits, labels[idx]).item() * len(idx)
            correct += int((logits.data.mean(axis=1).argmax(axis=1) == labels[idx]).sum())
    return losses / len(labels), correct / len(labels)


def train_ann(model: AnnModel, frames, labels, cfg: OptimConfig,
              val: tuple[np.ndarray, np.ndarray] | None = None,
              on_epoch: Callable[[EpochLog], None] | None = None) -> TrainHistory:
    """Minimise average cross-entropy over the first-segment frames.

    ``frames`` has shape (N, T1, 2, H, W) (or is any object whose
    ``__getitem__`` returns such batches for an index array).
    """
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    sched = CosineSchedule(opt, cfg.epochs) if cfg.cosine else None
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    for epoch in range(1, cfg.epochs + 1):
        tot_loss, correct = 0.0, 0
        for idx in iterate_minibatches(n, cfg.batch_size, rng):
            opt.zero_grad()
            logits = model.frame_logits(frames[idx])
            loss = average_ce_loss(logits, labels[idx])
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDivergedError(
                    f"ANN loss became {lv} at epoch {epoch}; thresholds={model.thresholds()}, lr={opt.lr}")
            loss.backward()
            opt.step()
            model.clamp_thresholds()
            tot_loss += lv * len(idx)
            correct += int((logits.data.mean(axis=1).argmax(axis=1) == labels[idx]).sum())
        if sched is not None:
            sched.step()
        rows = [EpochLog(epoch, "train", tot_loss / n, correct / n)]
        if val is not None:
            vl, va = ann_accuracy(model, val[0], np.asarray(val[1], dtype=int))
            rows.append(EpochLog(epoch, "val", vl, va))
        for r in rows:
            history.rows.append(r)
            log.info("ann epoch %d %s loss=%.4f acc=%.4f", r.epoch, r.split, r.loss, r.accuracy)
            if on_epoch is not None:
                on_epoch(r)
    return history


@dataclass
class TeacherOutput:
    logits: np.ndarray   # (B, T1, classes) per-frame logits
    probs: np.ndarray    # (B, classes) softmax(mean logits / tau)
    temperature: float


def softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def teacher_predict(model: AnnModel, frames_t1, temperature: float = 4.0,
                    batch_size: int = 64) -> TeacherOutput:
    """Frozen soft labels from the frame-averaged logits at temperature ``temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    frames_t1 = np.asarray(frames_t1, dtype=np.float64)
    chunks = []
    with tn.no_grad():
        for s in range(0, len(frames_t1), batch_size):
            chunks.append(model.frame_logits(frames_t1[s:s + batch_size]).data)
    logits = np.concatenate(chunks, axis=0)
    probs = softmax_np(logits.mean(axis=1) / temperature, axis=-1)
    return TeacherOutput(logits, probs, float(temperature))
