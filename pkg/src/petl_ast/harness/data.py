"""Synthetic spectrogram classification tasks, few-shot subsets, k-fold splits.

Two pattern families stand in for pretraining and downstream audio:

* ``bands``: each class is a set of steady horizontal tones (frequency band
  plus tone count), loosely like a stationary sound event.
* ``chirp``: each class is a frequency sweep with its own centre and slope
  sign. Up- and down-sweeps around the same centre have identical frequency
  and time marginals, so they are only separable from local time structure.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..backbone import SpectrogramBatch
from ..checkpoint import load_records, save_records

FAMILIES = ("bands", "chirp")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_classes: int = 6
    samples_per_class: int = 200
    freq_bins: int = 32
    time_bins: int = 32
    family: str = "chirp"
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown pattern family {self.family!r}; choose from {FAMILIES}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.samples_per_class < 3:
            raise ValueError("need at least 3 samples per class for train/val/test")


@dataclass
class Dataset:
    train: SpectrogramBatch
    val: SpectrogramBatch
    test: SpectrogramBatch
    n_classes: int

    def split(self, name: str) -> SpectrogramBatch:
        return getattr(self, name)


def class_patterns(spec: SyntheticTaskSpec) -> list[dict]:
    """Per-class (centre, slope, tones) parameters in spectrogram bins."""
    f = spec.freq_bins
    out = []
    if spec.family == "bands":
        centres = np.linspace(0.15 * f, 0.85 * f, spec.n_classes)
        for c in range(spec.n_classes):
            out.append({"centre": centres[c], "slope": 0.0, "tones": 1 + c % 2})
    else:
        n_centres = (spec.n_classes + 1) // 2
        centres = np.linspace(0.25 * f, 0.75 * f, n_centres)
        sweep = 0.4 * f / spec.time_bins
        for c in range(spec.n_classes):
            out.append({"centre": centres[c // 2], "slope": sweep if c % 2 == 0 else -sweep,
                        "tones": 1})
    return out


def _render(p: dict, spec: SyntheticTaskSpec, rng, jitter: bool) -> np.ndarray:
    f, t = spec.freq_bins, spec.time_bins
    fr = np.arange(f)[:, None]
    tt = np.arange(t)[None, :] - (t - 1) / 2.0
    centre, slope = p["centre"], p["slope"]
    amp = 1.0
    if jitter:
        centre = centre + rng.uniform(-1.0, 1.0)
        slope = slope * rng.uniform(0.9, 1.1)
        amp = rng.uniform(0.8, 1.2)
    img = np.zeros((f, t))
    for tone in range(p["tones"]):
        track = centre + slope * tt + tone * 0.25 * f
        img += np.exp(-0.5 * ((fr - track) / 1.2) ** 2)
    return amp * img


def gen_synthetic_task(spec: SyntheticTaskSpec) -> Dataset:
    """Balanced, seeded dataset split 70/15/15 per class."""
    rng = np.random.default_rng(spec.seed)
    pats = class_patterns(spec)
    n = spec.samples_per_class
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    parts: dict[str, tuple[list, list]] = {k: ([], []) for k in ("train", "val", "test")}
    for c, p in enumerate(pats):
        xs = np.stack([_render(p, spec, rng, jitter=True) for _ in range(n)])
        xs = xs + rng.normal(0.0, spec.noise_std, size=xs.shape) if spec.noise_std > 0 else xs
        for name, sl in (("train", slice(0, n_train)), ("val", slice(n_train, n_train + n_val)),
                         ("test", slice(n_train + n_val, n))):
            parts[name][0].append(xs[sl])
            parts[name][1].append(np.full(xs[sl].shape[0], c, dtype=np.int64))
    batches = {}
    for name, (xs, ys) in parts.items():
        batches[name] = SpectrogramBatch(np.concatenate(xs), np.concatenate(ys))
    return Dataset(batches["train"], batches["val"], batches["test"], spec.n_classes)


def nearest_centroid_accuracy(ds: Dataset, split: str = "test") -> float:
    """Fit class means on train, score ``split`` by Euclidean nearest mean."""
    tr = ds.train
    flat = tr.x.reshape(len(tr), -1)
    cents = np.stack([flat[tr.labels == c].mean(axis=0) for c in range(ds.n_classes)])
    ev = ds.split(split)
    q = ev.x.reshape(len(ev), -1)
    dist = ((q[:, None, :] - cents[None]) ** 2).sum(axis=-1)
    return float((dist.argmin(axis=1) == ev.labels).mean())


def few_shot_subsample(ds: Dataset, shots: int, seed: int) -> Dataset:
    """Keep exactly ``shots`` training items per class; val/test unchanged."""
    if shots < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.train.labels == c)
        if idx.size < shots:
            raise ValueError(f"class {c} has only {idx.size} training items, {shots} requested")
        keep.append(np.sort(rng.choice(idx, size=shots, replace=False)))
    keep = np.concatenate(keep)
    tr = SpectrogramBatch(ds.train.x[keep], ds.train.labels[keep])
    return replace(ds, train=tr)


def kfold_split(batch: SpectrogramBatch, k: int, seed: int = 0) -> list[tuple[SpectrogramBatch, SpectrogramBatch]]:
    """Stratified k folds; each item lands in exactly one test fold.

    Items are dealt round-robin class by class, so fold sizes differ by at
    most one and each fold's class counts are within one of the global share.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = np.asarray(batch.labels)
    classes, counts = np.unique(labels, return_counts=True)
    if k > counts.min():
        raise ValueError(f"k={k} exceeds the smallest class count ({counts.min()})")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.size, dtype=np.int64)
    dealt = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = (dealt + np.arange(idx.size)) % k
        dealt += idx.size
    out = []
    for f in range(k):
        te, tr = fold_of == f, fold_of != f
        out.append((SpectrogramBatch(batch.x[tr], labels[tr]), SpectrogramBatch(batch.x[te], labels[te])))
    return out


def save_dataset(path, ds: Dataset):
    recs = {"n_classes": np.array([ds.n_classes], dtype=np.float64)}
    for name in ("train", "val", "test"):
        b = ds.split(name)
        recs[f"{name}.x"] = b.x
        recs[f"{name}.labels"] = b.labels.astype(np.float64)
    return save_records(path, recs)


def load_dataset(path) -> Dataset:
    recs = load_records(path)
    parts = {name: SpectrogramBatch(recs[f"{name}.x"], recs[f"{name}.labels"].astype(np.int64))
             for name in ("train", "val", "test")}
    return Dataset(parts["train"], parts["val"], parts["test"], int(recs["n_classes"][0]))
