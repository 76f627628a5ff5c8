"""Dump per-block CNN feature maps (8-bit PGM) and token norms (CSV)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError
from .model import UAMobileFormer


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit graymap."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)


def quantize(values: np.ndarray) -> tuple:
    """Min-max scale to 0..255; returns (uint8 image, lo, hi)."""
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        q = np.rint((values - lo) / (hi - lo) * 255.0)
    else:
        q = np.zeros_like(values)
    return q.astype(np.uint8), lo, hi


def dequantize(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + image.astype(np.float64) / 255.0 * (hi - lo)


def export_feature_maps(model: UAMobileFormer, frames, path) -> Path:
    """Write channel-mean maps for every block, sample and time step.

    Files: ``block{i}_s{b}_t{t}.pgm`` plus ``maps.csv`` (the min/max needed
    to undo the 8-bit scaling) and ``token_norms.csv``.  The model's mode and
    parameters are left untouched.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            result = model(frames)
    finally:
        model.train(was_training)

    rows = []
    for i, feat in enumerate(result.features):
        maps = feat.data.mean(axis=1)  # (B, T, H, W)
        for b in range(maps.shape[0]):
            for t in range(maps.shape[1]):
                name = f"block{i:02d}_s{b:03d}_t{t:02d}.pgm"
                image, lo, hi = quantize(maps[b, t])
                write_pgm(out / name, image)
                rows.append([name, i, b, t, maps.shape[2], maps.shape[3], repr(lo), repr(hi)])
    with open(out / "maps.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file", "block", "sample", "t", "height", "width", "min", "max"])
        writer.writerows(rows)

    with open(out / "token_norms.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["block", "sample", "token", "norm"])
        for i, z in enumerate(result.block_tokens):
            if z is None:
                continue
            norms = np.linalg.norm(z.data, axis=-1)
            for b in range(norms.shape[0]):
                for k in range(norms.shape[1]):
                    writer.writerow([i, b, k, repr(float(norms[b, k]))])
    return out
