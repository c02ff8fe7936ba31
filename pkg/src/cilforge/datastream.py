"""Class-incremental data streams.

Class order comes from a SplitMix64-seeded Fisher-Yates shuffle so the same
``(num_classes, seed)`` gives the same permutation in any language.

The manager relabels every class once, by its position in the shuffled order,
so task ``t`` owns the contiguous ids ``[known, total)``.  There is no per-task
relabeling: every view carries these stream-wide ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PRNG_ID = "splitmix64-fisher-yates"
_MASK = (1 << 64) - 1


class SplitError(ValueError):
    pass


class FormatError(ValueError):
    pass


class SplitMix64:
    """64-bit SplitMix generator (Steele, Lea & Flood constants)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)


def permutation(n: int, seed: int) -> list[int]:
    """Fisher-Yates from the top: for i = n-1..1 swap i with ``next() % (i+1)``."""
    items = list(range(n))
    gen = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = gen.next() % (i + 1)
        items[i], items[j] = items[j], items[i]
    return items


def derive_seed(*parts: int) -> int:
    """Mix integers into one 64-bit seed through SplitMix64 steps."""
    state = 0
    for p in parts:
        state = SplitMix64(state ^ (p & _MASK)).next()
    return state


@dataclass(frozen=True)
class ClassOrder:
    order: tuple[int, ...]
    seed: int

    def __len__(self):
        return len(self.order)


def shuffle_class_order(num_classes: int, seed: int = 1993) -> ClassOrder:
    if num_classes < 1:
        raise SplitError("num_classes must be >= 1")
    return ClassOrder(tuple(permutation(num_classes, seed)), seed)


@dataclass(frozen=True)
class TaskSplit:
    init_cls: int
    increment: int
    tasks: tuple[tuple[int, ...], ...]

    @property
    def nb_tasks(self) -> int:
        return len(self.tasks)

    def classes_up_to(self, t: int) -> list[int]:
        return [c for task in self.tasks[:t + 1] for c in task]


def build_task_splits(num_classes: int, init_cls: int, increment: int,
                      order: ClassOrder | None = None) -> TaskSplit:
    """Cut the (permuted) class list into an initial task and equal increments."""
    if init_cls < 1 or increment < 1:
        raise SplitError("init_cls and increment must be >= 1")
    if init_cls > num_classes:
        raise SplitError(f"init_cls={init_cls} exceeds num_classes={num_classes}")
    rest = num_classes - init_cls
    if rest % increment:
        raise SplitError(f"{rest} classes after the initial task do not divide into "
                         f"increments of {increment}")
    classes = list(order.order) if order is not None else list(range(num_classes))
    tasks = [tuple(classes[:init_cls])]
    for s in range(init_cls, num_classes, increment):
        tasks.append(tuple(classes[s:s + increment]))
    return TaskSplit(init_cls, increment, tuple(tasks))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    # position of each row in the source dataset; exemplar stores keep these
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.index is None:
            self.index = np.arange(len(self.y))

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, mask_or_idx) -> Dataset:
        return Dataset(self.x[mask_or_idx], self.y[mask_or_idx], self.num_classes,
                       self.index[mask_or_idx])

    def select_classes(self, classes) -> Dataset:
        return self.subset(np.isin(self.y, np.asarray(list(classes), dtype=np.int64)))

    def labels(self) -> set[int]:
        return set(int(c) for c in np.unique(self.y))


@dataclass
class DatasetPair:
    train: Dataset
    test: Dataset

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


def synth_blobs(num_classes: int, per_class_n: int, dim: int, spread: float = 0.5,
                seed: int = 0, test_per_class: int | None = None,
                center_scale: float = 1.0) -> DatasetPair:
    """Gaussian cluster per class around a seeded N(0, center_scale^2 I) center."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    test_per_class = per_class_n if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, (num_classes, dim))

    def draw(n):
        ys = np.repeat(np.arange(num_classes), n)
        xs = centers[ys] + spread * rng.normal(size=(len(ys), dim))
        return Dataset(xs, ys, num_classes)

    train = draw(per_class_n)
    test = draw(test_per_class)
    return DatasetPair(train, test)


# ----------------------------------------------------------------- CLDS files

def write_table_dataset(ds: Dataset, path) -> None:
    lines = [f"clds v1 dim={ds.dim} classes={ds.num_classes}"]
    for xi, yi in zip(ds.x, ds.y):
        lines.append(",".join([str(int(yi))] + [repr(float(v)) for v in xi]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_table_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise FormatError(f"{path}:1: empty file")
    head = text[0].split()
    try:
        if head[:2] != ["clds", "v1"]:
            raise ValueError
        meta = dict(tok.split("=", 1) for tok in head[2:])
        dim, classes = int(meta["dim"]), int(meta["classes"])
    except (ValueError, KeyError):
        raise FormatError(f"{path}:1: bad header {text[0]!r}; expected 'clds v1 dim=<d> classes=<C>'")
    xs, ys = [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise FormatError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(parts)}")
        try:
            label = int(parts[0])
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric field")
        if label < 0 or not all(math.isfinite(v) for v in vals):
            raise FormatError(f"{path}:{lineno}: invalid label or value")
        ys.append(label)
        xs.append(vals)
    if not ys:
        raise FormatError(f"{path}: no examples")
    inferred = max(ys) + 1
    present = set(ys)
    if present != set(range(inferred)):
        missing = sorted(set(range(inferred)) - present)
        first_bad = next(i for i, y in enumerate(ys, start=2) if y > missing[0])
        raise FormatError(f"{path}:{first_bad}: labels not contiguous; missing {missing}")
    if inferred > classes:
        raise FormatError(f"{path}: header declares {classes} classes but labels reach {inferred - 1}")
    return Dataset(np.array(xs).reshape(-1, dim), np.array(ys), inferred)


# ----------------------------------------------------------------- the manager

class DataManager:
    """Seeded class order, task split and per-task views over a dataset pair."""

    def __init__(self, data: DatasetPair, init_cls: int, increment: int, seed: int = 1993,
                 shuffle: bool = True):
        self.seed = seed
        n = data.num_classes
        self.class_order = shuffle_class_order(n, seed) if shuffle else ClassOrder(tuple(range(n)), seed)
        self.split = build_task_splits(n, init_cls, increment, self.class_order)
        # raw class order[i] becomes stream class i
        self.to_stream = np.empty(n, dtype=np.int64)
        self.to_stream[list(self.class_order.order)] = np.arange(n)
        self.data = DatasetPair(self._relabel(data.train), self._relabel(data.test))
        bounds = np.cumsum([0] + [len(t) for t in self.split.tasks])
        self.task_classes = tuple(tuple(range(bounds[i], bounds[i + 1]))
                                  for i in range(len(self.split.tasks)))

    def _relabel(self, ds: Dataset) -> Dataset:
        return Dataset(ds.x, self.to_stream[ds.y], ds.num_classes, ds.index)

    @property
    def nb_tasks(self) -> int:
        return self.split.nb_tasks

    @property
    def num_classes(self) -> int:
        return self.data.num_classes

    def task_size(self, t: int) -> int:
        return len(self.task_classes[t])

    def classes_of(self, t: int) -> tuple[int, ...]:
        return self.task_classes[t]

    def raw_class(self, c: int) -> int:
        return self.class_order.order[c]

    def get_dataset(self, task: int, source: str = "train", scope: str = "current") -> Dataset:
        if not 0 <= task < self.nb_tasks:
            raise IndexError(f"task {task} outside [0, {self.nb_tasks})")
        if source not in ("train", "test"):
            raise ValueError(f"source must be 'train' or 'test', not {source!r}")
        if scope not in ("current", "cumulative"):
            raise ValueError(f"scope must be 'current' or 'cumulative', not {scope!r}")
        base = self.data.train if source == "train" else self.data.test
        if scope == "current":
            classes = self.task_classes[task]
        else:
            classes = [c for tc in self.task_classes[:task + 1] for c in tc]
        return base.select_classes(classes)

    def batch_order(self, n: int, task: int, epoch: int) -> list[int]:
        """Per-(seed, task, epoch) shuffle of ``range(n)``."""
        return permutation(n, derive_seed(self.seed, task, epoch))
