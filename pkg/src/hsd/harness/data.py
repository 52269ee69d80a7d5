"""Synthetic dataset construction and frame access with an audit log."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..events import EventStream, generate_synthetic, integrate_frames, read_events, write_events
from .config import TrainConfig

SPLITS = {"train": 0, "test": 1}


def sample_seed(base_seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), SPLITS[split], int(index)]).generate_state(1)[0])


def generate_split(cfg: TrainConfig, split: str) -> list[EventStream]:
    per_class = cfg.train_per_class if split == "train" else cfg.test_per_class
    n = per_class * cfg.num_classes
    return [generate_synthetic(i % cfg.num_classes, sample_seed(cfg.seed, split, i),
                               cfg.geometry, cfg.event_budget) for i in range(n)]


@dataclass
class FrameDataset:
    """Raw per-sample counts (N, T, 2, H, W) plus labels.

    Every read goes through :meth:`frames`, which records the frame
    indices touched so callers can prove which segment a phase consumed.
    """

    counts: np.ndarray
    labels: np.ndarray
    normalize: str = "max"
    access_log: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.counts) != len(self.labels):
            raise ValueError("counts and labels differ in length")

    @classmethod
    def from_streams(cls, streams: list[EventStream], T: int, normalize: str = "max") -> "FrameDataset":
        counts = np.stack([integrate_frames(s, T).data for s in streams]).astype(np.float32)
        return cls(counts, np.array([s.label for s in streams]), normalize)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def T(self) -> int:
        return self.counts.shape[1]

    def frames(self, idx, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.T if stop is None else stop
        if not 0 <= start < stop <= self.T:
            raise IndexError(f"frame range [{start}, {stop}) outside [0, {self.T})")
        self.access_log.update(range(start, stop))
        x = self.counts[idx, start:stop].astype(np.float64)
        if self.normalize == "max":
            peak = x.max(axis=(-3, -2, -1), keepdims=True)
            x = np.minimum(x / np.where(peak > 0, peak, 1.0), 1.0)
        return x

    def segment(self, start: int, stop: int | None = None) -> "Segment":
        return Segment(self, start, self.T if stop is None else stop)


@dataclass
class Segment:
    """Index-able view over frames [start, stop) of every sample."""

    dataset: FrameDataset
    start: int
    stop: int

    def __len__(self) -> int:
        return len(self.dataset)

    @property
    def steps(self) -> int:
        return self.stop - self.start

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels

    def __getitem__(self, idx) -> np.ndarray:
        return self.dataset.frames(idx, self.start, self.stop)

    def materialize(self) -> np.ndarray:
        return self[np.arange(len(self))]


def build_datasets(cfg: TrainConfig) -> tuple[FrameDataset, FrameDataset]:
    return tuple(FrameDataset.from_streams(generate_split(cfg, split), cfg.T, cfg.normalize)
                 for split in ("train", "test"))


def write_dataset(cfg: TrainConfig, root) -> dict[str, int]:
    """Write every generated stream as ``root/<split>/<index>.evt``."""
    root = Path(root)
    written = {}
    for split in SPLITS:
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        streams = generate_split(cfg, split)
        for i, s in enumerate(streams):
            write_events(s, d / f"{i:05d}.evt")
        written[split] = len(streams)
    return written


def load_dataset(root, split: str, T: int, normalize: str = "max") -> FrameDataset:
    d = Path(root) / split
    files = sorted(d.glob("*.evt"))
    if not files:
        raise FileNotFoundError(f"no .evt files under {d}")
    return FrameDataset.from_streams([read_events(f) for f in files], T, normalize)
