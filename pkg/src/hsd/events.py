"""Event streams: EVT1/CSV I/O, synthetic generation, frame integration.

A stream is kept as structured numpy columns rather than a Python list of
records; :class:`Event` exists for per-event access and construction.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

EVT_MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sHHHHQ")
RECORD_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u4"), ("p", "u1"), ("pad", "u1")])


class EventFormatError(ValueError):
    """Base class for malformed event files or streams."""


class BadMagicError(EventFormatError):
    pass


class TruncatedRecordError(EventFormatError):
    pass


class UnsortedTimestampsError(EventFormatError):
    pass


class PolarityError(EventFormatError):
    pass


class OutOfBoundsError(EventFormatError):
    pass


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True, eq=False)
class EventStream:
    width: int
    height: int
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    label: int = 0

    def __post_init__(self):
        cols = {}
        for name, dt in (("x", np.int64), ("y", np.int64), ("t", np.int64), ("p", np.int64)):
            arr = np.asarray(getattr(self, name), dtype=dt).reshape(-1)
            arr.setflags(write=False)
            cols[name] = arr
            object.__setattr__(self, name, arr)
        n = len(cols["x"])
        if any(len(c) != n for c in cols.values()):
            raise EventFormatError("event columns have different lengths")
        self.validate()

    @classmethod
    def from_events(cls, events: Iterable[Event | tuple], width: int, height: int,
                    label: int = 0) -> "EventStream":
        rows = [tuple(e) for e in events]
        arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
        return cls(width, height, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], label)

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise EventFormatError(f"invalid sensor geometry {self.width}x{self.height}")
        if self.label < 0:
            raise EventFormatError(f"label must be >= 0, got {self.label}")
        if len(self):
            bad_p = ~np.isin(self.p, (0, 1))
            if bad_p.any():
                i = int(np.argmax(bad_p))
                raise PolarityError(f"event {i}: polarity {int(self.p[i])} not in {{0, 1}}")
            oob = (self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)
            if oob.any():
                i = int(np.argmax(oob))
                raise OutOfBoundsError(
                    f"event {i}: pixel ({int(self.x[i])}, {int(self.y[i])}) outside "
                    f"{self.width}x{self.height} sensor")
            if (self.t < 0).any():
                raise EventFormatError("negative timestamp")
            dec = np.diff(self.t) < 0
            if dec.any():
                i = int(np.argmax(dec)) + 1
                raise UnsortedTimestampsError(f"event {i}: timestamp {int(self.t[i])} < previous "
                                              f"{int(self.t[i - 1])}")

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width, self.height, self.label) == (other.width, other.height, other.label) \
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "xytp")

    @property
    def events(self) -> list[Event]:
        return list(self)


@dataclass(frozen=True)
class PartitionSpec:
    t1: int
    t2: int

    def __post_init__(self):
        if self.t1 < 1 or self.t2 < 1:
            raise ValueError(f"partition needs t1 >= 1 and t2 >= 1, got ({self.t1}, {self.t2})")

    @property
    def total(self) -> int:
        return self.t1 + self.t2


@dataclass
class FrameTensor:
    """Event counts of shape (T, 2, H, W); channel 0 is OFF, channel 1 is ON."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise ValueError(f"frame tensor must have shape (T, 2, H, W), got {self.data.shape}")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def slice_bounds(n_events: int, T: int) -> np.ndarray:
    """Return T+1 boundaries; slice j holds events [b[j], b[j+1])."""
    j = np.arange(T + 1, dtype=np.int64)
    return (j * n_events) // T


def integrate_frames(stream: EventStream, T: int) -> FrameTensor:
    """Accumulate the stream into T equal-count slices of per-polarity pixel counts."""
    n = len(stream)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if n == 0:
        raise ValueError("cannot integrate an empty event stream")
    if T > n:
        raise ValueError(f"more slices than events: T={T} > N={n}")
    bounds = slice_bounds(n, T)
    slice_of = np.repeat(np.arange(T), np.diff(bounds))
    h, w = stream.height, stream.width
    flat = ((slice_of * 2 + stream.p) * h + stream.y) * w + stream.x
    counts = np.bincount(flat, minlength=T * 2 * h * w)
    return FrameTensor(counts.reshape(T, 2, h, w).astype(np.float64))


def partition(frames: FrameTensor, spec: PartitionSpec) -> tuple[FrameTensor, FrameTensor]:
    if spec.total != frames.T:
        raise ValueError(f"partition ({spec.t1}, {spec.t2}) does not sum to T={frames.T}")
    return FrameTensor(frames.data[:spec.t1].copy()), FrameTensor(frames.data[spec.t1:].copy())


# synthetic data --------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticGeometry:
    width: int = 32
    height: int = 32
    num_classes: int = 4
    duration_us: int = 100_000
    noise_fraction: float = 0.1


def generate_synthetic(class_id: int, seed: int, geometry: SyntheticGeometry | tuple[int, int] = None,
                       event_budget: int = 2000) -> EventStream:
    """A bar sweeping across the sensor, oriented by class.

    Class ``c`` of ``C`` draws a bar at angle ``pi * c / C`` that translates
    perpendicular to its long axis.  The leading edge emits ON events, the
    trailing edge OFF events; a fraction of uniformly placed noise events of
    random polarity is mixed in.  Output is a pure function of
    ``(class_id, seed, geometry, event_budget)``.
    """
    if geometry is None:
        geometry = SyntheticGeometry()
    elif not isinstance(geometry, SyntheticGeometry):
        geometry = SyntheticGeometry(width=int(geometry[0]), height=int(geometry[1]))
    if not 0 <= class_id < geometry.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {geometry.num_classes})")
    if event_budget < 1:
        raise ValueError("event_budget must be positive")
    rng = np.random.default_rng([int(seed), int(class_id), 0x45565431])
    w, h = geometry.width, geometry.height
    size = min(w, h)

    angle = np.pi * class_id / geometry.num_classes + rng.normal(0.0, 0.05)
    along = np.array([np.cos(angle), np.sin(angle)])
    normal = np.array([-along[1], along[0]])
    if rng.random() < 0.5:
        normal = -normal
    centre = np.array([w / 2.0, h / 2.0]) + rng.uniform(-0.1, 0.1, 2) * size
    travel = size * rng.uniform(0.45, 0.65)
    length = size * rng.uniform(0.5, 0.8)
    thickness = size * 0.08

    n_noise = int(round(event_budget * geometry.noise_fraction))
    n_sig = 3 * (event_budget - n_noise)  # oversample, then thin to budget after bounds check
    ts = rng.uniform(0.0, 1.0, n_sig)
    pos_along = rng.uniform(-0.5, 0.5, n_sig) * length
    pol = rng.integers(0, 2, n_sig)
    edge = np.where(pol == 1, 0.5, -0.5) * thickness
    offset = (ts - 0.5) * travel + edge + rng.normal(0.0, 0.5, n_sig)
    xy = centre + pos_along[:, None] * along + offset[:, None] * normal
    xi = np.floor(xy[:, 0]).astype(np.int64)
    yi = np.floor(xy[:, 1]).astype(np.int64)
    keep = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    idx = np.flatnonzero(keep)
    want = event_budget - n_noise
    if len(idx) > want:
        idx = np.sort(rng.choice(idx, size=want, replace=False))

    nx = rng.integers(0, w, n_noise)
    ny = rng.integers(0, h, n_noise)
    nt = rng.uniform(0.0, 1.0, n_noise)
    npol = rng.integers(0, 2, n_noise)

    x = np.concatenate([xi[idx], nx])
    y = np.concatenate([yi[idx], ny])
    t = np.floor(np.concatenate([ts[idx], nt]) * (geometry.duration_us - 1)).astype(np.int64)
    p = np.concatenate([pol[idx], npol])
    order = np.argsort(t, kind="stable")
    return EventStream(w, h, x[order], y[order], t[order], p[order], label=int(class_id))


# file formats ----------------------------------------------------------------

def write_events(stream: EventStream, path) -> None:
    """Write an EVT1 file (little-endian header + 10-byte records)."""
    if max(stream.width, stream.height, stream.label) > 0xFFFF:
        raise EventFormatError("geometry/label exceed u16 range")
    if len(stream) and int(stream.t[-1]) > 0xFFFFFFFF:
        raise EventFormatError("timestamp exceeds u32 range")
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EVT_MAGIC, stream.width, stream.height, stream.label, 0, len(stream)))
        fh.write(rec.tobytes())


def read_events(path) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != EVT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {EVT_MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedRecordError(f"{path}: header truncated ({len(raw)} bytes)")
    _, w, h, label, _reserved, n = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    need = n * RECORD_DTYPE.itemsize
    if len(body) < need:
        got = len(body) // RECORD_DTYPE.itemsize
        raise TruncatedRecordError(f"{path}: header declares {n} events, file holds {got} complete records")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE, count=n)
    return EventStream(w, h, rec["x"], rec["y"], rec["t"], rec["p"], label=label)


def read_csv(path, width: int, height: int, label: int = 0) -> EventStream:
    """Import a hand-made ``x,y,t,p`` CSV fixture."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [c.strip() for c in next(reader, [])]
        if header != ["x", "y", "t", "p"]:
            raise EventFormatError(f"{path}: expected header x,y,t,p, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 4:
                raise EventFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            rows.append([int(v) for v in row])
    return EventStream.from_events(rows, width, height, label)
