"""Synthetic datasets, splits and file ingestion.

2-D point clouds (blobs, moons, spiral) are either kept as two tabular
features or rasterized onto an 8x8 grid as a Gaussian bump centred on the
point, which gives the toy vision task. ``token-parity`` produces binary
token sequences labelled by the parity of their ones.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng

KINDS = ("blobs", "moons", "spiral", "token-parity")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)

# point-cloud extent mapped onto the raster
_EXTENT = {"blobs": 4.5, "moons": 2.0, "spiral": 1.2, "shifted-blobs": 4.5}


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    kind: str = "custom"
    layout: str = "tabular"          # tabular | grid | tokens
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise KeyError(f"dataset has no split {name!r}; available {sorted(self.splits)}")
        idx = self.splits[name]
        return self.features[idx], self.labels[idx]


def _blobs(n: int, rng, centers: np.ndarray, std: float = 0.6):
    y = np.arange(n) % len(centers)
    rng.shuffle(y)
    pts = centers[y] + rng.normal(0.0, std, size=(n, 2))
    return pts, y


def blob_centers(radius: float = 3.0) -> np.ndarray:
    ang = np.deg2rad([90.0, 210.0, 330.0])
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _moons(n: int, rng, noise: float = 0.1):
    y = np.arange(n) % 2
    rng.shuffle(y)
    theta = rng.uniform(0.0, np.pi, size=n)
    outer = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    inner = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    pts = np.where(y[:, None] == 0, outer, inner) - np.array([0.5, 0.25])
    return pts + rng.normal(0.0, noise, size=(n, 2)), y


def _spiral(n: int, rng, arms: int = 3, noise: float = 0.05):
    y = np.arange(n) % arms
    rng.shuffle(y)
    r = rng.uniform(0.1, 1.0, size=n)
    theta = 2.0 * np.pi * y / arms + 3.0 * r
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return pts + rng.normal(0.0, noise, size=(n, 2)), y


def rasterize(points: np.ndarray, extent: float, size: int = 8, width: float = 0.9) -> np.ndarray:
    """Gaussian bump at each point's grid location; returns [n, size, size]."""
    grid = (np.clip(points / extent, -1.0, 1.0) + 1.0) * 0.5 * (size - 1)
    ax = np.arange(size, dtype=np.float64)
    gy = np.exp(-0.5 * ((ax[None, :] - grid[:, 1:2]) / width) ** 2)
    gx = np.exp(-0.5 * ((ax[None, :] - grid[:, 0:1]) / width) ** 2)
    return gy[:, :, None] * gx[:, None, :]


def make_splits(n: int, seed: int, fractions=SPLIT_FRACTIONS) -> dict[str, np.ndarray]:
    perm = make_rng(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {"train": np.sort(perm[:n_train]),
            "val": np.sort(perm[n_train:n_train + n_val]),
            "test": np.sort(perm[n_train + n_val:])}


def gen_data(kind: str, n: int, seed: int = 0, layout: str | None = None,
             image_size: int = 8, seq_len: int = 16) -> Dataset:
    """Deterministic synthetic dataset of ``n`` records with train/val/test splits."""
    if kind not in KINDS and kind != "shifted-blobs":
        raise ValueError(f"unknown data kind {kind!r}; choose from {', '.join(KINDS)}")
    if n < 10:
        raise ValueError(f"need at least 10 records, got {n}")
    rng = make_rng(seed, "data", kind)
    if kind == "token-parity":
        X = rng.integers(0, 2, size=(n, seq_len))
        y = X.sum(axis=1) % 2
        return Dataset(X.astype(np.int64), y.astype(np.int64), 2, kind, "tokens",
                       make_splits(n, seed))
    if kind == "blobs":
        pts, y = _blobs(n, rng, blob_centers())
        n_classes = 3
    elif kind == "shifted-blobs":
        pts, y = _blobs(n, rng, np.zeros((1, 2)))
        y = np.full(n, -1)
        n_classes = 3
    elif kind == "moons":
        pts, y = _moons(n, rng)
        n_classes = 2
    else:
        pts, y = _spiral(n, rng)
        n_classes = 3
    layout = layout or "grid"
    feats = rasterize(pts, _EXTENT[kind], image_size) if layout == "grid" else pts
    return Dataset(feats, y.astype(np.int64), n_classes, kind, layout, make_splits(n, seed))


def shifted_blobs(n: int, seed: int = 0, layout: str = "grid", image_size: int = 8) -> np.ndarray:
    """OOD inputs: one blob at the centroid of the three training centres."""
    return gen_data("shifted-blobs", n, seed, layout=layout, image_size=image_size).features


# -- ingestion ----------------------------------------------------------------
def _flat(features: np.ndarray) -> np.ndarray:
    return features.reshape(len(features), -1)


def save_csv(dataset: Dataset, path) -> None:
    F = _flat(dataset.features)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f_{i}" for i in range(F.shape[1])] + ["label"])
        for row, label in zip(F, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def _from_records(feats: np.ndarray, labels: np.ndarray, seed: int, image_size: int | None,
                  kind: str) -> Dataset:
    layout = "tabular"
    if image_size is not None:
        feats = feats.reshape(len(feats), image_size, image_size)
        layout = "grid"
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    if np.any(labels < 0):
        raise ValueError("labels must be non-negative integers")
    return Dataset(feats, labels, n_classes, kind, layout, make_splits(len(labels), seed))


def load_csv(path, seed: int = 0, image_size: int | None = None) -> Dataset:
    """Read ``f_0..f_{k-1},label`` rows."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "label" or any(h != f"f_{i}" for i, h in enumerate(header[:-1])):
            raise ValueError(f"{path}: expected header f_0..f_{{k-1}},label")
        rows = [r for r in reader if r]
    feats = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return _from_records(feats, labels, seed, image_size, Path(path).stem)


def load_jsonl(path, seed: int = 0, image_size: int | None = None) -> Dataset:
    """Read one ``{"features": [...], "label": int}`` object per line."""
    feats, labels = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                feats.append(rec["features"])
                labels.append(int(rec["label"]))
    return _from_records(np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int64),
                         seed, image_size, Path(path).stem)
