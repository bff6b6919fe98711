"""Datasets, stratified splits, CSV loading and the pre-trained starting network."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError
from .nnet import Batch, LayerSpec, MaskedNetwork, dense, init_network, replace_layer, train_epoch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def batch(self) -> Batch:
        return Batch(self.features, self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.classes, self.provenance)


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    indices: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


def generate_synthetic(classes: int, per_class: int, dims: int = 2, spread: float = 0.2,
                       seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs around class centres on the unit sphere.

    In 2-D the centres are evenly spaced on the unit circle starting from a
    seeded angle; in higher dimensions they are seeded random unit vectors.
    Rows come out grouped by class.
    """
    if classes < 2 or per_class < 1 or dims < 2:
        raise ValueError("need classes >= 2, per_class >= 1, dims >= 2")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    if dims == 2:
        theta = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(classes) / classes
        centres = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    else:
        centres = rng.standard_normal((classes, dims))
        centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    noise = rng.standard_normal((classes, per_class, dims)) * spread
    feats = (centres[:, None, :] + noise).reshape(-1, dims)
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(feats, labels, classes, "synthetic")


def split(ds: Dataset, ratios: Sequence[float] = (0.5, 0.25, 0.25), seed: int = 0) -> Splits:
    """Stratified train/val/test split.

    Each class is permuted with its own seeded shuffle and sliced contiguously;
    split sizes are rounded per class with the test split taking the rest.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 4:
            raise ValueError(f"class {c} has {len(idx)} rows; at least 4 needed to stratify")
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(ratios[0] * len(idx)))
        n_val = int(round(ratios[1] * len(idx)))
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    tr, va, te = (np.sort(np.concatenate(p)) for p in parts)
    return Splits(ds.subset(tr), ds.subset(va), ds.subset(te), (tr, va, te))


def standardize(splits: Splits) -> Splits:
    """Scale features with mean/std taken from the training split only."""
    mu = splits.train.features.mean(axis=0)
    sd = splits.train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)

    def apply(d: Dataset) -> Dataset:
        return Dataset((d.features - mu) / sd, d.labels, d.classes, d.provenance)

    return Splits(apply(splits.train), apply(splits.val), apply(splits.test), splits.indices)


def load_csv(path, label_column: str) -> Dataset:
    """Read a headered, comma-separated numeric file.

    Features are returned raw; standardize after splitting.  Row numbers in
    errors are 1-based file lines (the header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: no data rows", row=1)
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ParseError(f"{path}: label column {label_column!r} not in header {header}",
                             row=1, column=label_column)
        li = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}",
                                 row=lineno)
            vals = []
            for j, cell in enumerate(row):
                if j == li:
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: non-numeric value {cell!r} in column "
                                     f"{header[j]!r}", row=lineno, column=header[j]) from None
                if not np.isfinite(v):
                    raise ParseError(f"{path}:{lineno}: non-finite value in column {header[j]!r}",
                                     row=lineno, column=header[j])
                vals.append(v)
            try:
                lab = int(row[li])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: label {row[li]!r} is not an integer",
                                 row=lineno, column=label_column) from None
            if lab < 0:
                raise ParseError(f"{path}:{lineno}: negative label {lab}", row=lineno,
                                 column=label_column)
            feats.append(vals)
            labels.append(lab)
    if not labels:
        raise ParseError(f"{path}: no data rows", row=2)
    labels = np.array(labels, dtype=np.int64)
    return Dataset(np.array(feats, dtype=np.float64), labels, int(labels.max()) + 1, "csv")


def pretrain(spec: Sequence[LayerSpec], source: Dataset, epochs: int, lr: float, seed: int,
             target_classes: int | None = None, batch_size: int = 16) -> MaskedNetwork:
    """Train on ``source`` and then swap the output layer for a fresh one.

    The new head has ``target_classes`` outputs (defaults to the source class
    count) and is initialized from ``seed + 1``.
    """
    net = train_source(spec, source, epochs, lr, seed, batch_size)
    retarget(net, target_classes or source.classes, seed + 1)
    return net


def train_source(spec: Sequence[LayerSpec], source: Dataset, epochs: int, lr: float, seed: int,
                 batch_size: int = 16) -> MaskedNetwork:
    """The training half of :func:`pretrain`, with the source head still attached."""
    spec = list(spec)
    if spec[-1].out_size != source.classes:
        raise ValueError(
            f"network emits {spec[-1].out_size} classes but source data has {source.classes}"
        )
    net = init_network(spec, seed)
    rng = np.random.default_rng([seed, 1])
    batch = source.batch()
    for _ in range(epochs):
        train_epoch(net, batch, lr, batch_size, rng)
    return net


def retarget(net: MaskedNetwork, classes: int, seed: int) -> None:
    last = net.spec[-1]
    if last.kind != "dense":
        raise ValueError("only dense output layers can be retargeted")
    replace_layer(net, len(net.spec) - 1, dense(last.in_dim, classes, last.activation), seed)


@dataclass(frozen=True)
class TransferTask:
    source: Dataset
    target: Dataset
    splits: Splits


def transfer_task(source_classes: int = 6, target_classes: int = 3, per_class: int = 100,
                  spread: float = 0.2, dims: int = 2, seed: int = 0,
                  ratios: Sequence[float] = (0.5, 0.25, 0.25)) -> TransferTask:
    """Source blobs plus a differently-seeded (rotated) target task with fewer classes.

    Target splits are standardized with training statistics.
    """
    source = generate_synthetic(source_classes, per_class, dims, spread, seed)
    target = generate_synthetic(target_classes, per_class, dims, spread, seed + 7919)
    return TransferTask(source, target, standardize(split(target, ratios, seed)))
