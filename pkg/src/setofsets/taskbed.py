"""Tasks, synthetic and CSV-backed suites, joint pretraining, fitness.

A task is a label subset of one shared classification problem.  Its head is
the slice of the shared softmax layer belonging to its classes, so the
evaluation-time loss only ever sees those logits.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import network as nn
from .network import Architecture, Batch, ReferenceNet, TrainHyper

EVAL_SUBSET_MAX = 512
TRAIN_FRACTION = 0.8


class SuiteError(ValueError):
    pass


class CSVParseError(SuiteError):
    def __init__(self, message: str, row: int, column: str | None = None):
        where = f"row {row}" + (f", column {column!r}" if column is not None else "")
        super().__init__(f"{where}: {message}")
        self.row = row
        self.column = column


@dataclass(frozen=True)
class Task:
    id: int
    train: Batch
    test: Batch
    label_subspace: tuple[int, ...]
    eval_index: np.ndarray = field(repr=False)
    loss_kind: str = "cross_entropy"

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def eval_batch(self) -> Batch:
        return self.train.subset(self.eval_index)


@dataclass(frozen=True)
class SuiteData:
    train: Batch
    test: Batch
    n_classes: int

    @property
    def input_dim(self) -> int:
        return self.train.inputs.shape[1]


@dataclass(frozen=True)
class SuiteSpec:
    generator: str = "gaussian_clusters"
    n_classes: int = 10
    samples_per_class: int = 200
    input_dim: int = 16
    cluster_spread: float = 0.7
    task_splits: tuple[tuple[int, ...], ...] = ((0, 2, 4, 6, 8), (1, 3, 5, 7, 9))
    seed: int = 0
    csv_path: str | None = None

    def __post_init__(self):
        splits = tuple(tuple(int(c) for c in s) for s in self.task_splits)
        object.__setattr__(self, "task_splits", splits)
        if self.generator not in ("gaussian_clusters", "csv"):
            raise SuiteError(f"suite.generator: unknown generator {self.generator!r}")
        if self.generator == "csv" and not self.csv_path:
            raise SuiteError("suite.csv_path: required for the csv generator")
        if not splits:
            raise SuiteError("suite.task_splits: need at least one task")
        seen: set[int] = set()
        for i, split in enumerate(splits):
            if not split:
                raise SuiteError(f"suite.task_splits[{i}]: empty split")
            if seen & set(split):
                raise SuiteError(f"suite.task_splits[{i}]: overlaps an earlier split")
            seen |= set(split)
        if self.generator == "gaussian_clusters":
            if self.n_classes < 1 or self.samples_per_class < 1 or self.input_dim < 1:
                raise SuiteError("suite: n_classes, samples_per_class and input_dim must be positive")
            if self.cluster_spread <= 0:
                raise SuiteError("suite.cluster_spread: must be positive")
            if max(seen) >= self.n_classes or min(seen) < 0:
                raise SuiteError("suite.task_splits: class index outside 0..n_classes-1")

    @property
    def n_tasks(self) -> int:
        return len(self.task_splits)

    def to_dict(self) -> dict:
        return {
            "generator": self.generator,
            "n_classes": self.n_classes,
            "samples_per_class": self.samples_per_class,
            "input_dim": self.input_dim,
            "cluster_spread": self.cluster_spread,
            "task_splits": [list(s) for s in self.task_splits],
            "seed": self.seed,
            "csv_path": self.csv_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteSpec":
        d = dict(d)
        if "task_splits" in d:
            d["task_splits"] = tuple(tuple(s) for s in d["task_splits"])
        return cls(**d)


def stratified_split(labels: np.ndarray, fraction: float = TRAIN_FRACTION) -> np.ndarray:
    """Boolean train flags: the first rows of each class, in row order.

    The train count is ``floor(fraction * N)`` overall; each class receives
    ``floor(fraction * n_c)`` and the leftover goes to the classes with the
    largest fractional parts (lowest class id on ties).
    """
    classes, counts = np.unique(labels, return_counts=True)
    exact = fraction * counts
    quota = np.floor(exact).astype(int)
    leftover = int(math.floor(fraction * len(labels))) - int(quota.sum())
    order = sorted(range(len(classes)), key=lambda k: (-(exact[k] - quota[k]), classes[k]))
    for k in order[:leftover]:
        quota[k] += 1
    flags = np.zeros(len(labels), dtype=bool)
    for c, q in zip(classes, quota):
        flags[np.flatnonzero(labels == c)[:q]] = True
    return flags


def _eval_index(n: int, rng: np.random.Generator) -> np.ndarray:
    if n <= EVAL_SUBSET_MAX:
        return np.arange(n)
    return np.sort(rng.choice(n, EVAL_SUBSET_MAX, replace=False))


def _build_tasks(data: SuiteData, task_splits, seed: int) -> list[Task]:
    rng = np.random.default_rng([seed, 7919])
    tasks = []
    for i, split in enumerate(task_splits, start=1):
        classes = tuple(sorted(split))
        tr = np.isin(data.train.labels, classes)
        te = np.isin(data.test.labels, classes)
        if not tr.any():
            raise SuiteError(f"task {i} has no training rows")
        train = data.train.subset(np.flatnonzero(tr))
        test = data.test.subset(np.flatnonzero(te))
        tasks.append(Task(i, train, test, classes, _eval_index(len(train), rng)))
    return tasks


def _split_rows(x: np.ndarray, y: np.ndarray, n_classes: int) -> SuiteData:
    flags = stratified_split(y)
    return SuiteData(Batch(x[flags], y[flags]), Batch(x[~flags], y[~flags]), n_classes)


def generate_suite(spec: SuiteSpec) -> tuple[list[Task], SuiteData]:
    """Gaussian clusters: one mean per class drawn uniformly from
    ``[-1, 1]^d``, isotropic noise of standard deviation ``cluster_spread``."""
    if spec.generator == "csv":
        return load_csv_suite(spec.csv_path, spec.task_splits, seed=spec.seed)
    rng = np.random.default_rng(spec.seed)
    means = rng.uniform(-1.0, 1.0, size=(spec.n_classes, spec.input_dim))
    y = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    x = means[y] + spec.cluster_spread * rng.standard_normal((len(y), spec.input_dim))
    order = rng.permutation(len(y))
    data = _split_rows(x[order], y[order], spec.n_classes)
    return _build_tasks(data, spec.task_splits, spec.seed), data


def export_csv(data: SuiteData, path) -> None:
    """Train rows first, then test rows; reloading reproduces the split."""
    dim = data.input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(dim)] + ["label"])
        for batch in (data.train, data.test):
            for row, label in zip(batch.inputs, batch.labels):
                w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv_suite(path, task_splits, seed: int = 0) -> tuple[list[Task], SuiteData]:
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError("file is empty", 1) from None
        if len(header) < 2:
            raise CSVParseError("need at least one feature column and a label column", 1)
        for line_no, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise CSVParseError(f"expected {len(header)} fields, got {len(record)}", line_no)
            feats = []
            for name, cell in zip(header[:-1], record[:-1]):
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise CSVParseError(f"non-numeric value {cell!r}", line_no, name) from None
            try:
                label = int(record[-1])
            except ValueError:
                raise CSVParseError(f"label {record[-1]!r} is not an integer", line_no, header[-1]) from None
            if label < 0:
                raise CSVParseError("negative label", line_no, header[-1])
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise SuiteError(f"{path}: no data rows")
    x = np.array(rows, dtype=np.float64)
    y = np.array(labels, dtype=np.int64)
    present = set(int(v) for v in np.unique(y))
    for i, split in enumerate(task_splits):
        unknown = set(split) - present
        if unknown:
            raise SuiteError(f"task_splits[{i}] names labels {sorted(unknown)} absent from {path}")
    data = _split_rows(x, y, int(y.max()) + 1)
    return _build_tasks(data, task_splits, seed), data


def suite_manifest(spec: SuiteSpec, tasks: Sequence[Task], data: SuiteData) -> dict:
    return {
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "n_train": len(data.train),
        "n_test": len(data.test),
        "tasks": [
            {
                "task_id": t.id,
                "label_subspace": list(t.label_subspace),
                "n_train": len(t.train),
                "n_test": len(t.test),
                "eval_index": [int(i) for i in t.eval_index],
            }
            for t in tasks
        ],
    }


def pretrain_jat(arch: Architecture, data: SuiteData, hyper: TrainHyper, init_seed: int | None = None) -> ReferenceNet:
    """Train one network on the union of every task's data."""
    if arch.output_dim < data.n_classes:
        raise SuiteError(f"arch output dim {arch.output_dim} < {data.n_classes} classes")
    if arch.input_dim != data.input_dim:
        raise SuiteError(f"arch input dim {arch.input_dim} != data dim {data.input_dim}")
    start = ReferenceNet.initialize(arch, hyper.seed if init_seed is None else init_seed)
    return nn.train(start, None, data.train, hyper)


def evaluate(mask, jat: ReferenceNet, task: Task) -> float:
    """Mean restricted-head loss of the masked JAT on the task's eval subset."""
    value = nn.loss(jat, mask, task.eval_batch, task.loss_kind, head=task.label_subspace)
    if not math.isfinite(value):
        raise nn.NumericError(f"non-finite loss on task {task.id}")
    return value


def task_metrics(net: ReferenceNet, mask, task: Task, split: str = "test") -> dict:
    batch = task.test if split == "test" else task.train
    out = {"loss": nn.loss(net, mask, batch, task.loss_kind, head=task.label_subspace)}
    if task.loss_kind == "cross_entropy":
        out["accuracy"] = nn.accuracy(net, mask, batch, head=task.label_subspace)
    return out


def nearest_centroid_accuracy(train: Batch, test: Batch) -> float:
    classes = np.unique(train.labels)
    centroids = np.stack([train.inputs[train.labels == c].mean(axis=0) for c in classes])
    d = ((test.inputs[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return float((classes[d.argmin(axis=1)] == test.labels).mean())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
