"""Data sets: LIBSVM / CSV ingestion, splitting, standardisation, synthetic control data."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import NetworkSpec, predict

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
TASKS = ("binary", "multiclass", "regression")
BUILTIN = {
    "ionosphere": ("ionosphere.libsvm", 33),
    "wine": ("wine.libsvm", 13),
    "glass": ("glass.libsvm", 9),
}


@dataclass(frozen=True)
class Dataset:
    """Inputs ``X`` (d_x, N) and outputs ``Y`` (d_y, N).

    ``split`` holds one entry of :data:`SPLITS` per sample (``None`` before
    splitting).  ``labels`` keeps the integer class index of every sample for
    classification tasks; ``classes`` the original label values.
    """

    X: np.ndarray
    Y: np.ndarray
    task: str
    n_classes: int | None = None
    labels: np.ndarray | None = None
    classes: tuple | None = None
    split: np.ndarray | None = None
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[1] != self.Y.shape[1]:
            raise DataError(f"inconsistent shapes X{self.X.shape} Y{self.Y.shape}")
        if self.task == "binary" and (self.Y.shape[0] != 1 or not np.isin(self.Y, (0.0, 1.0)).all()):
            raise DataError("binary outputs must be a single row of 0/1 values")
        if self.task == "multiclass" and not (np.isin(self.Y, (0.0, 1.0)).all() and np.all(self.Y.sum(axis=0) == 1)):
            raise DataError("multiclass outputs must be one-hot columns")
        if self.split is not None and len(self.split) != self.n_samples:
            raise DataError("split assignment length does not match the number of samples")

    @property
    def n_samples(self) -> int:
        return self.X.shape[1]

    @property
    def input_dim(self) -> int:
        return self.X.shape[0]

    @property
    def output_dim(self) -> int:
        return self.Y.shape[0]

    @property
    def likelihood(self) -> str:
        return {"binary": "bernoulli", "multiclass": "multinomial", "regression": "gaussian"}[self.task]

    def indices(self, name: str) -> np.ndarray:
        if self.split is None:
            if name == "train":
                return np.arange(self.n_samples)
            raise DataError("data set has not been split")
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return np.flatnonzero(self.split == name)

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(name)
        return self.X[:, idx], self.Y[:, idx]

    def class_counts(self, name: str | None = None) -> np.ndarray:
        if self.labels is None:
            raise DataError("class counts are only defined for classification tasks")
        labels = self.labels if name is None else self.labels[self.indices(name)]
        return np.bincount(labels, minlength=self.n_classes)


def _from_labels(X: np.ndarray, raw_labels, source: dict) -> Dataset:
    classes = tuple(sorted(set(raw_labels)))
    if len(classes) < 2:
        raise DataError("classification data needs at least two distinct labels")
    lookup = {c: i for i, c in enumerate(classes)}
    labels = np.array([lookup[v] for v in raw_labels], dtype=int)
    if len(classes) == 2:
        Y = labels[None, :].astype(float)
        task = "binary"
    else:
        Y = np.eye(len(classes))[:, labels]
        task = "multiclass"
    return Dataset(X, Y, task, len(classes), labels, classes, None, source)


def parse_libsvm(path, n_features: int | None = None) -> Dataset:
    """Read a LIBSVM sparse text file (``label idx:val ...``, 1-based indices) into a dense data set.

    Labels are remapped to ``0..C-1`` in sorted order of their values.
    """
    path = Path(path)
    labels, rows = [], []
    max_index = 0
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                label = float(parts[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad label {parts[0]!r}") from None
            row = {}
            for item in parts[1:]:
                try:
                    idx_s, val_s = item.split(":")
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: malformed feature {item!r}") from None
                if idx < 1:
                    raise DataError(f"{path}:{lineno}: feature index {idx} is not 1-based")
                if idx in row:
                    raise DataError(f"{path}:{lineno}: duplicate feature index {idx}")
                if n_features is not None and idx > n_features:
                    raise DataError(f"{path}:{lineno}: feature index {idx} exceeds n_features={n_features}")
                row[idx] = val
                max_index = max(max_index, idx)
            labels.append(int(label) if label.is_integer() else label)
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no samples")
    d = n_features if n_features is not None else max_index
    X = np.zeros((d, len(rows)))
    for n, row in enumerate(rows):
        for idx, val in row.items():
            X[idx - 1, n] = val
    return _from_labels(X, labels, {"format": "libsvm", "path": str(path), "n_features": d})


def parse_csv_regression(path, target_column, header: bool = True, delimiter: str = ",") -> Dataset:
    """Numeric table -> regression data set; ``target_column`` is a header name or a 0-based index."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh, delimiter=delimiter) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    names = None
    if header:
        if not rows:
            raise DataError(f"{path}: empty file")
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    if isinstance(target_column, str) and not target_column.lstrip("-").isdigit():
        if names is None or target_column not in names:
            raise DataError(f"{path}: no column named {target_column!r}")
        col = names.index(target_column)
    else:
        col = int(target_column)
    width = len(names) if names is not None else len(rows[0])
    if not -width <= col < width:
        raise DataError(f"{path}: target column {col} out of range")
    col %= width
    table = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i + 1 + header} has {len(r)} cells, expected {width}")
        for j, cell in enumerate(r):
            try:
                table[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {i + 1 + header}, column {j}") from None
    X = np.delete(table, col, axis=1).T
    Y = table[:, col][None, :]
    return Dataset(X, Y, "regression", source={"format": "csv", "path": str(path), "target": target_column})


def load_builtin(name: str) -> Dataset:
    """Bundled UCI tables in LIBSVM format: ``ionosphere``, ``wine``, ``glass``."""
    if name not in BUILTIN:
        raise DataError(f"unknown bundled data set {name!r}; choose from {sorted(BUILTIN)}")
    fname, d = BUILTIN[name]
    with resources.as_file(resources.files("pmcnet.datasets") / fname) as path:
        ds = parse_libsvm(path, d)
    return replace(ds, source={"format": "builtin", "name": name, "n_features": d})


def _apportion(total: int, weights: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``weights`` (largest remainder) bounded by ``caps``."""
    if total == 0:
        return np.zeros(len(weights), dtype=int)
    exact = total * weights / weights.sum()
    alloc = np.minimum(np.floor(exact).astype(int), caps)
    order = np.argsort(-(exact - np.floor(exact)), kind="stable")
    while alloc.sum() < total:
        progressed = False
        for i in order:
            if alloc.sum() == total:
                break
            if alloc[i] < caps[i]:
                alloc[i] += 1
                progressed = True
        if not progressed:
            break
    return alloc


def split_sizes(n: int, ratios) -> tuple[int, int, int]:
    """Floor for train and validation, remainder to test."""
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split(dataset: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0, stratified: bool = False) -> Dataset:
    """Random train/validation/test assignment with the requested ratios.

    Split sizes use floor for train and validation and give the remainder to
    test.  In stratified mode each split's total is apportioned over the
    classes in proportion to the class sizes.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    n = dataset.n_samples
    sizes = split_sizes(n, ratios)
    if ratios[2] == 0:
        sizes = (sizes[0], sizes[1] + sizes[2], 0) if ratios[1] > 0 else (n, 0, 0)
    for name, size, r in zip(SPLITS, sizes, ratios):
        if r > 0 and size == 0:
            raise DataError(f"split {name!r} would receive no samples")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=object)
    if stratified and dataset.labels is not None:
        counts = np.bincount(dataset.labels, minlength=dataset.n_classes)
        per_train = _apportion(sizes[0], counts.astype(float), counts)
        per_val = _apportion(sizes[1], counts.astype(float), counts - per_train)
        for c in range(dataset.n_classes):
            idx = rng.permutation(np.flatnonzero(dataset.labels == c))
            a, b = per_train[c], per_train[c] + per_val[c]
            assignment[idx[:a]] = "train"
            assignment[idx[a:b]] = "validation"
            assignment[idx[b:]] = "test"
    else:
        perm = rng.permutation(n)
        a, b = sizes[0], sizes[0] + sizes[1]
        assignment[perm[:a]] = "train"
        assignment[perm[a:b]] = "validation"
        assignment[perm[b:]] = "test"
    assignment = assignment.astype(str)
    source = {**dataset.source, "split": {"ratios": ratios.tolist(), "seed": seed, "stratified": stratified}}
    return replace(dataset, split=assignment, source=source)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean[:, None]) / self.scale[:, None]

    def inverse_transform(self, X: np.ndarray) -> np.ndarray:
        return X * self.scale[:, None] + self.mean[:, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


def standardize(dataset: Dataset) -> tuple[Dataset, Standardizer]:
    """Z-score every feature with statistics of the train split; constant features are only centred."""
    Xtr, _ = dataset.subset("train")
    if Xtr.shape[1] == 0:
        raise DataError("cannot standardise: empty train split")
    mean = Xtr.mean(axis=1)
    scale = Xtr.std(axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    st = Standardizer(mean, scale)
    return replace(dataset, X=st.transform(dataset.X)), st


def generate_control_dataset(layer_sizes=(3, 3, 1), weight_std: float = 2.0, n_train: int = 400,
                             n_test: int = 400, seed: int = 0, labels: str = "threshold",
                             min_class_fraction: float = 0.1) -> tuple[Dataset, np.ndarray]:
    """Synthetic binary task labelled by a random tanh/sigmoid teacher network.

    Teacher parameters are i.i.d. ``N(0, weight_std^2)`` and inputs i.i.d.
    ``N(0, 1)``.  ``labels="threshold"`` gives ``1{Phi > 0.5}``;
    ``labels="bernoulli"`` samples ``Ber(Phi)``.  A teacher whose train split
    has a class below ``min_class_fraction`` is redrawn from a new sub-seed.

    Returns the split data set (train/test only) and the teacher parameters.
    """
    if labels not in ("threshold", "bernoulli"):
        raise ConfigError("labels must be 'threshold' or 'bernoulli'")
    if n_train < 1 or n_test < 0:
        raise ConfigError("n_train must be positive and n_test non-negative")
    spec = NetworkSpec(tuple(layer_sizes), "tanh", "bernoulli")
    n = n_train + n_test
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        theta = weight_std * rng.standard_normal(spec.n_params)
        X = rng.standard_normal((spec.input_dim, n))
        p = predict(spec, theta, X)[0, 0]
        if labels == "threshold":
            y = (p > 0.5).astype(float)
        else:
            y = (rng.random(n) < p).astype(float)
        frac = y[:n_train].mean()
        if min_class_fraction <= frac <= 1 - min_class_fraction:
            break
        log.debug("teacher %d degenerate (positive fraction %.3f); redrawing", attempt, frac)
    else:
        raise DataError("could not draw a non-degenerate teacher network")
    split_labels = np.array(["train"] * n_train + ["test"] * n_test)
    source = {"format": "control", "layer_sizes": list(spec.layer_sizes), "weight_std": weight_std,
              "n_train": n_train, "n_test": n_test, "seed": seed, "labels": labels, "attempt": attempt}
    ds = Dataset(X, y[None, :], "binary", 2, y.astype(int), (0, 1), split_labels, source)
    return ds, theta


def write_manifest(path, dataset: Dataset, standardizer: Standardizer | None = None, **extra) -> dict:
    manifest = {
        "source": dataset.source,
        "task": dataset.task,
        "n_samples": dataset.n_samples,
        "input_dim": dataset.input_dim,
        "output_dim": dataset.output_dim,
        "standardization": standardizer.to_dict() if standardizer else None,
        **extra,
    }
    if dataset.split is not None:
        manifest["split_sizes"] = {s: int(np.sum(dataset.split == s)) for s in SPLITS}
        if dataset.labels is not None:
            manifest["class_counts"] = {s: dataset.class_counts(s).tolist() for s in SPLITS}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
