"""Event streams: parsing, temporal splitting, frame stacking, synthetic data.

A stream is held column-wise (x, y, t, p arrays) rather than as a list of
points; ``EventStream.points()`` yields ``EventPoint`` tuples when needed.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, EmptyInputError

EVS_MAGIC = "EVS1"
CLASS_NAMES = ("up", "down", "left", "right")


class EventPoint(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(eq=False)
class EventStream:
    width: int
    height: int
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        n = self.x.size
        if not (self.y.size == self.t.size == self.p.size == n):
            raise DataError("event columns have different lengths")
        if n:
            bad = np.flatnonzero((self.p != 1) & (self.p != -1))
            if bad.size:
                raise DataError(f"polarity must be +1 or -1: {self.point(bad[0])}")
            bad = np.flatnonzero((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height))
            if bad.size:
                raise DataError(f"event outside {self.width}x{self.height} sensor: {self.point(bad[0])}")
            if self.t[0] < 0 or np.any(np.diff(self.t) < 0):
                raise DataError("timestamps must be non-negative and non-decreasing")

    @classmethod
    def from_points(cls, points: Sequence, width: int, height: int, label=None) -> "EventStream":
        """Build from (x, y, t, p) tuples; sorts by t, keeping ties in input order."""
        arr = np.asarray(list(points), dtype=np.int64).reshape(-1, 4)
        order = np.argsort(arr[:, 2], kind="stable")
        arr = arr[order]
        return cls(width, height, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], label)

    def __len__(self) -> int:
        return int(self.t.size)

    def point(self, i: int) -> EventPoint:
        return EventPoint(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def points(self) -> Iterator[EventPoint]:
        for i in range(len(self)):
            yield self.point(i)

    def subset(self, index) -> "EventStream":
        return EventStream(self.width, self.height, self.x[index], self.y[index],
                           self.t[index], self.p[index], self.label)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and self.label == other.label
                and all(np.array_equal(getattr(self, k), getattr(other, k)) for k in "xytp"))


@dataclass
class FrameStack:
    """(M, 2, H, W) stacked event frames; channel 0 positive, 1 negative."""

    tensor: np.ndarray
    frame_duration: float

    @property
    def num_frames(self) -> int:
        return self.tensor.shape[0]


# -- splitting and rasterization -----------------------------------------

def window_index(t: np.ndarray, t_first: int, t_last: int, m: int) -> np.ndarray:
    """Window id for each timestamp: m equal-duration windows over [t_first, t_last]."""
    duration = t_last - t_first
    if duration <= 0:
        return np.zeros(t.shape, dtype=np.int64)
    # exact integer arithmetic so boundary events land deterministically
    return np.minimum((t - t_first) * m // duration, m - 1)


def split_stream(stream: EventStream, m: int) -> list[EventStream]:
    """Split into ``m`` half-open equal-duration windows; the last is closed.

    A zero-duration stream puts every event in the first window.
    """
    if m < 1:
        raise ConfigError(f"split count must be >= 1, got {m}")
    if len(stream) == 0:
        raise EmptyInputError("cannot split an empty event stream")
    idx = window_index(stream.t, int(stream.t[0]), int(stream.t[-1]), m)
    # idx is non-decreasing because t is sorted, so windows are contiguous runs
    bounds = np.searchsorted(idx, np.arange(1, m))
    return [stream.subset(slice(a, b)) for a, b in zip(np.r_[0, bounds], np.r_[bounds, len(stream)])]


def rasterize(tube: EventStream, h: int, w: int, normalize: bool = True) -> np.ndarray:
    """Count events per pixel into a (2, h, w) float32 frame.

    With ``normalize`` the counts are divided by max(frame max count, 1).
    """
    out_of_bounds = np.flatnonzero((tube.x < 0) | (tube.x >= w) | (tube.y < 0) | (tube.y >= h))
    if out_of_bounds.size:
        raise DataError(f"event outside {w}x{h} frame: {tube.point(out_of_bounds[0])}")
    channel = (tube.p < 0).astype(np.int64)
    flat = np.bincount((channel * h + tube.y) * w + tube.x, minlength=2 * h * w)
    frame = flat.reshape(2, h, w).astype(np.float32)
    if normalize:
        frame /= max(frame.max(initial=0.0), 1.0)
    return frame


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic interpolation matrix with half-pixel centre alignment."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


def resize_frames(frames: FrameStack, h: int, w: int) -> FrameStack:
    """Bilinear resize of every frame and channel to (h, w)."""
    if h < 1 or w < 1:
        raise ConfigError(f"target size must be positive, got {h}x{w}")
    data = frames.tensor
    if data.shape[-2:] == (h, w):
        return FrameStack(data.copy(), frames.frame_duration)
    rh = _bilinear_matrix(h, data.shape[-2])
    rw = _bilinear_matrix(w, data.shape[-1])
    out = np.einsum("ij,mcjk,lk->mcil", rh, data.astype(np.float64), rw)
    return FrameStack(np.maximum(out, 0.0).astype(data.dtype), frames.frame_duration)


def stack_frames(stream: EventStream, m: int, size: Optional[tuple] = None,
                 normalize: bool = True) -> FrameStack:
    """Stream -> M rasterized frames at sensor resolution, optionally resized."""
    tubes = split_stream(stream, m)
    data = np.stack([rasterize(tube, stream.height, stream.width, normalize) for tube in tubes])
    duration = (int(stream.t[-1]) - int(stream.t[0])) / m
    frames = FrameStack(data, duration)
    if size is not None:
        frames = resize_frames(frames, *size)
    return frames


def frames_to_arrays(streams: Sequence[EventStream], m: int, size: Optional[tuple] = None):
    """Model-ready batch: X of shape (n, 2, M, H, W) float32 and integer labels."""
    if not streams:
        raise EmptyInputError("no event streams given")
    x = np.stack([stack_frames(s, m, size).tensor.transpose(1, 0, 2, 3) for s in streams])
    labels = np.array([-1 if s.label is None else s.label for s in streams], dtype=np.int64)
    return np.ascontiguousarray(x, dtype=np.float32), labels


# -- .evs files -----------------------------------------------------------

def write_evs(path, stream: EventStream) -> None:
    lines = [f"{EVS_MAGIC} {stream.width} {stream.height} {len(stream)}"]
    lines.extend(f"{t} {x} {y} {p}" for x, y, t, p in zip(stream.x.tolist(), stream.y.tolist(),
                                                          stream.t.tolist(), stream.p.tolist()))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_evs(path, label: Optional[int] = None) -> EventStream:
    try:
        with open(path, "r", encoding="ascii", newline="") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not an ASCII .evs file") from exc
    lines = text.split("\n")
    header = lines[0].split(" ")
    if len(header) != 4 or header[0] != EVS_MAGIC:
        raise DataError(f"{path}: bad header {lines[0]!r}")
    try:
        width, height, count = (int(v) for v in header[1:])
    except ValueError:
        raise DataError(f"{path}: bad header {lines[0]!r}") from None
    body = [ln for ln in lines[1:] if ln]
    if len(body) != count:
        raise DataError(f"{path}: header declares {count} events, found {len(body)}")
    try:
        arr = np.array([[int(v) for v in ln.split(" ")] for ln in body], dtype=np.int64).reshape(-1, 4)
    except ValueError:
        raise DataError(f"{path}: malformed event line") from None
    t, x, y, p = arr.T
    try:
        return EventStream(width, height, x, y, t, p, label)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_manifest(path, entries: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(entries)


def read_manifest(path) -> list[EventStream]:
    """Load every stream listed in a ``path,label`` manifest (paths relative to it)."""
    root = Path(path).parent
    streams = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label"]:
            raise DataError(f"{path}: expected header 'path,label'")
        for row in reader:
            streams.append(read_evs(root / row["path"], label=int(row["label"])))
    if not streams:
        raise EmptyInputError(f"{path}: manifest lists no streams")
    return streams


# -- synthetic moving-bar generator ----------------------------------------

@dataclass
class SynthConfig:
    """Moving-bar generator settings.

    Each class is a bar sweeping across the sensor in one direction.  Pixels
    the bar crosses fire a +1 event at the leading edge and a -1 event at the
    trailing edge (as a pair, with probability ``fire_prob``); every pixel
    also emits a random-polarity noise event with probability ``noise_rate``.
    """

    num_classes: int = 4
    width: int = 64
    height: int = 64
    duration_us: int = 100_000
    bar_width: tuple = (3, 6)
    bar_length: tuple = (0.4, 1.0)
    fire_prob: float = 0.8
    noise_rate: float = 0.002
    max_events: int = 20_000

    def __post_init__(self):
        self.bar_width = tuple(self.bar_width)
        self.bar_length = tuple(self.bar_length)
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must be in 1..{len(CLASS_NAMES)}, got {self.num_classes}")
        if self.width < 2 or self.height < 2 or self.duration_us < 1:
            raise ConfigError("sensor extents must be >= 2 and duration >= 1")
        if not (0 < self.fire_prob <= 1 and 0 <= self.noise_rate <= 1):
            raise ConfigError("fire_prob must be in (0, 1] and noise_rate in [0, 1]")
        if not 1 <= self.bar_width[0] <= self.bar_width[1]:
            raise ConfigError(f"bad bar_width range {self.bar_width}")
        if not 0 < self.bar_length[0] <= self.bar_length[1] <= 1:
            raise ConfigError(f"bad bar_length range {self.bar_length}")
        if self.max_events < 2:
            raise ConfigError("max_events must be >= 2")


def synth_stream(class_id: int, seed: int, cfg: Optional[SynthConfig] = None) -> EventStream:
    """Deterministic moving-bar stream for ``(class_id, seed)``."""
    cfg = cfg or SynthConfig()
    if not 0 <= class_id < cfg.num_classes:
        raise ConfigError(f"class id {class_id} outside 0..{cfg.num_classes - 1}")
    rng = np.random.default_rng([int(seed), int(class_id)])
    direction = CLASS_NAMES[class_id]
    horizontal = direction in ("left", "right")
    along = cfg.width if horizontal else cfg.height
    across = cfg.height if horizontal else cfg.width

    bar_w = int(rng.integers(cfg.bar_width[0], cfg.bar_width[1] + 1))
    length = max(1, int(round(across * rng.uniform(*cfg.bar_length))))
    offset = int(rng.integers(0, across - length + 1))
    sweep = cfg.duration_us * rng.uniform(0.6, 1.0)
    start = rng.uniform(0.0, cfg.duration_us - sweep)
    step = sweep / (along + bar_w)

    # coordinate along the motion, counted from where the bar enters
    pos = np.arange(along)
    cross = np.arange(offset, offset + length)
    pos_grid, cross_grid = np.meshgrid(pos, cross, indexing="ij")
    pos_grid, cross_grid = pos_grid.ravel(), cross_grid.ravel()
    fires = rng.random(pos_grid.size) < cfg.fire_prob
    pos_grid, cross_grid = pos_grid[fires], cross_grid[fires]
    jitter_on = rng.uniform(0, step / 4, pos_grid.size)
    jitter_off = rng.uniform(0, step / 4, pos_grid.size)
    t_on = np.floor(start + pos_grid * step + jitter_on)
    t_off = np.floor(start + (pos_grid + bar_w) * step + jitter_off)

    forward_coord = pos_grid if direction in ("right", "down") else along - 1 - pos_grid
    if horizontal:
        px, py = forward_coord, cross_grid
    else:
        px, py = cross_grid, forward_coord

    n_pairs = px.size
    if 2 * n_pairs > cfg.max_events:
        keep = np.sort(rng.choice(n_pairs, size=cfg.max_events // 2, replace=False))
        px, py, t_on, t_off = px[keep], py[keep], t_on[keep], t_off[keep]
        n_pairs = px.size
    xs = [px, px]
    ys = [py, py]
    ts = [t_on, t_off]
    ps = [np.ones(n_pairs, np.int64), -np.ones(n_pairs, np.int64)]

    budget = cfg.max_events - 2 * n_pairs
    noisy = np.flatnonzero(rng.random(cfg.width * cfg.height) < cfg.noise_rate)[:budget]
    if noisy.size:
        xs.append(noisy % cfg.width)
        ys.append(noisy // cfg.width)
        ts.append(np.floor(rng.uniform(0, cfg.duration_us, noisy.size)))
        ps.append(np.where(rng.random(noisy.size) < 0.5, 1, -1))

    x, y, t, p = (np.concatenate(v).astype(np.int64) for v in (xs, ys, ts, ps))
    order = np.argsort(t, kind="stable")
    return EventStream(cfg.width, cfg.height, x[order], y[order], t[order], p[order], label=class_id)


def synth_dataset(per_class: int, seed: int, cfg: Optional[SynthConfig] = None) -> list[EventStream]:
    """``per_class`` streams of every class, interleaved by class, seeds derived from ``seed``."""
    cfg = cfg or SynthConfig()
    return [synth_stream(c, seed * 1_000_003 + i, cfg)
            for i in range(per_class) for c in range(cfg.num_classes)]


def write_synth_tree(out_dir, per_class: int, seed: int, cfg: Optional[SynthConfig] = None) -> Path:
    """Write .evs files plus ``labels.csv``; returns the manifest path."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    entries = []
    for i, stream in enumerate(synth_dataset(per_class, seed, cfg)):
        name = f"sample_{i:05d}_c{stream.label}.evs"
        write_evs(out / name, stream)
        entries.append((name, stream.label))
    manifest = out / "labels.csv"
    write_manifest(manifest, entries)
    return manifest
