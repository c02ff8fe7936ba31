"""Common machinery for incremental learners."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from ..backbone import TinyTransformer
from ..datastream import Dataset, derive_seed, permutation
from ..memory import ExemplarStore, MemoryPolicy, build_exemplars, rehearsal_dataset
from ..numkernel import Optimizer, Tensor, backward, matmul, no_grad

log = logging.getLogger(__name__)


class LearnerConfigError(ValueError):
    pass


class LearnerStateError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 4
    lr: float = 1e-3
    optimizer: str = "adam"
    lr_decay: float = 0.1
    weight_decay: float = 0.0
    milestones: list[int] = field(default_factory=list)
    temperature: float = 2.0


@dataclass
class LearnerSettings:
    backbone: TinyTransformer
    nb_tasks: int
    seed: int = 1993
    train: TrainConfig = field(default_factory=TrainConfig)
    params: dict = field(default_factory=dict)
    policy: MemoryPolicy = field(default_factory=MemoryPolicy)
    store: ExemplarStore | None = None


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    idx: np.ndarray | None = None  # rows of the task's training set, for caches
    epoch: int = 0
    epochs: int = 1


class LinearHead:
    """``f @ W + b`` that grows by whole class blocks."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.W = Tensor(rng.normal(0.0, 0.02, (in_dim, out_dim)), True)
        self.b = Tensor(np.zeros(out_dim), True)

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def clone(self, trainable: bool = True) -> LinearHead:
        out = LinearHead.__new__(LinearHead)
        out.W = Tensor(self.W.data.copy(), trainable)
        out.b = Tensor(self.b.data.copy(), trainable)
        return out

    def expand(self, out_dim: int, rng: np.random.Generator, in_dim: int | None = None) -> None:
        """Widen to ``out_dim`` classes (and optionally ``in_dim`` features),
        keeping the old block in the top-left corner."""
        old_in, old_out = self.W.shape
        in_dim = old_in if in_dim is None else in_dim
        W = rng.normal(0.0, 0.02, (in_dim, out_dim))
        W[:old_in, :old_out] = self.W.data
        if in_dim > old_in:
            W[old_in:, :old_out] = 0.0
        b = np.zeros(out_dim)
        b[:old_out] = self.b.data
        self.W = Tensor(W, True)
        self.b = Tensor(b, True)

    def __call__(self, f: Tensor) -> Tensor:
        return matmul(f, self.W) + self.b

    def freeze(self) -> None:
        self.W.requires_grad = False
        self.b.requires_grad = False


def digest_tensors(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.data.tobytes())
    return h.hexdigest()


class Learner:
    """observe a task -> update state -> classify over all seen classes.

    Subclasses implement ``prepare_task`` (build per-task state),
    ``trainable_parameters``, ``composite_loss`` and ``scores``; the default
    ``observe`` runs the shared epoch loop between them.
    """

    name = "base"
    uses_exemplars = False
    PARAMS: dict = {}
    DECISIONS: tuple[str, ...] = ()

    def __init__(self, settings: LearnerSettings):
        unknown = set(settings.params) - set(self.PARAMS)
        if unknown:
            raise LearnerConfigError(
                f"{self.name} does not accept model_specific keys {sorted(unknown)}; "
                f"known: {sorted(self.PARAMS)}")
        self.settings = settings
        self.ptm = settings.backbone
        self.cfg = settings.train
        self.p = {**self.PARAMS, **settings.params}
        self.seed = settings.seed
        self.nb_tasks = settings.nb_tasks
        self.known_classes = 0
        self.total_classes = 0
        self.cur_task = -1
        self.loss_history: dict[int, list[float]] = {}
        self._cache: dict[str, np.ndarray] = {}
        if settings.store is None:
            settings.store = ExemplarStore()
        self._store = settings.store
        if not self.uses_exemplars:
            log.info("%s is exemplar-free; memory parameters are not used", self.name)

    # ------------------------------------------------------------ plumbing
    @property
    def store(self) -> ExemplarStore:
        if not self.uses_exemplars:
            raise LearnerStateError(f"{self.name} does not use exemplar memory")
        return self._store

    def rng(self, *salt: int) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, self.cur_task, *salt))

    @property
    def embed_dim(self) -> int:
        return self.ptm.embed_dim

    def decisions(self) -> list[str]:
        return list(self.DECISIONS)

    def cached(self, name: str, batch: Batch, fn) -> np.ndarray:
        """Frozen per-row quantities, computed once per task's training set."""
        if batch.idx is not None and name in self._cache:
            return self._cache[name][batch.idx]
        with no_grad():
            return fn(batch.x)

    def fill_cache(self, name: str, x: np.ndarray, fn, batch_size: int = 256) -> None:
        out = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                out.append(np.asarray(fn(x[s:s + batch_size])))
        self._cache[name] = np.concatenate(out) if out else np.zeros((0,))

    # ----------------------------------------------------------- training
    def fit(self, data: Dataset, loss_fn, params, epochs: int | None = None, lr: float | None = None,
            salt: int = 0) -> list[float]:
        """Mini-batch training over ``data``; returns mean loss per epoch."""
        cfg = self.cfg
        epochs = cfg.epochs if epochs is None else epochs
        params = [p for p in params if p.requires_grad]
        opt = Optimizer(params, kind="adam" if cfg.optimizer == "adam" else "sgd_momentum",
                        lr=cfg.lr if lr is None else lr, weight_decay=cfg.weight_decay,
                        milestones=cfg.milestones, decay=cfg.lr_decay)
        n = len(data)
        history = []
        for epoch in range(epochs):
            opt.set_epoch(epoch)
            order = np.asarray(permutation(n, derive_seed(self.seed, self.cur_task, epoch, salt)))
            total, count = 0.0, 0
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                loss = loss_fn(Batch(data.x[idx], data.y[idx], idx, epoch, epochs))
                opt.zero_grad()
                backward(loss)
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            history.append(total / max(count, 1))
        for p in params:
            p.grad = None
        return history

    # -------------------------------------------------------- the protocol
    def training_set(self, train: Dataset) -> Dataset:
        if self.uses_exemplars and self.cur_task > 0:
            return rehearsal_dataset(self.store, train)
        return train

    def begin_task(self, task: int, train: Dataset, n_new: int) -> None:
        if task != self.cur_task + 1:
            raise LearnerStateError(f"expected task {self.cur_task + 1}, got {task}")
        self.cur_task = task
        self.total_classes = self.known_classes + n_new
        self._cache = {}

    def observe(self, task: int, train: Dataset, n_new: int | None = None) -> None:
        """Learn task ``task`` from its training view (stream-wide labels)."""
        if n_new is None:
            n_new = len(train.labels())
        self.begin_task(task, train, n_new)
        data = self.training_set(train)
        self.prepare_task(data)
        self.train_task(data)
        self.finish_task(train, data)
        if self.uses_exemplars:
            self.update_memory(train)
        self.after_task()
        self.known_classes = self.total_classes
        self._cache = {}

    def prepare_task(self, data: Dataset) -> None:
        pass

    def train_task(self, data: Dataset) -> None:
        params = self.trainable_parameters()
        if params and self.cfg.epochs > 0:
            self.loss_history[self.cur_task] = self.fit(data, self.composite_loss, params)

    def trainable_parameters(self) -> list[Tensor]:
        return []

    def composite_loss(self, batch: Batch) -> Tensor:
        raise NotImplementedError

    def finish_task(self, train: Dataset, data: Dataset) -> None:
        pass

    def after_task(self) -> None:
        pass

    def features_for_memory(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def update_memory(self, train: Dataset) -> None:
        new = range(self.known_classes, self.total_classes)
        build_exemplars(self.store, self.settings.policy, train, new,
                        self.features_for_memory, self.total_classes)

    # -------------------------------------------------------- inference
    def scores(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def classify(self, x, batch_size: int = 256) -> np.ndarray:
        """Class ids in ``[0, total_classes)``; ties resolve to the lowest id."""
        if self.cur_task < 0:
            raise LearnerStateError(f"{self.name} has not observed any task")
        x = np.asarray(x, dtype=np.float64)
        out = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                sc = self.scores(x[s:s + batch_size])[:, :self.total_classes]
                out.append(np.argmax(sc, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def digests(self) -> dict[str, str]:
        """Hashes of components that must stay frozen, keyed by component."""
        return {}
