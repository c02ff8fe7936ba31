"""iCaRL: rehearsal, logit distillation and a nearest-mean classifier."""

from __future__ import annotations

import copy

import numpy as np

from ..datastream import Dataset
from ..numkernel import ContractError, Tensor, as_tensor, cross_entropy, kd_loss, no_grad
from .base import Batch, Learner
from .finetune import HEAD_SALT, TrainableNet


def icarl_loss(new_logits: Tensor, targets, old_logits, T: float = 2.0) -> Tensor:
    """Cross-entropy plus temperature-scaled KD on the old-class columns.

    ``old_logits`` is None (or has zero columns) on the first task.
    """
    new_logits = as_tensor(new_logits)
    ce = cross_entropy(new_logits, targets)
    if old_logits is None:
        return ce
    old = np.asarray(old_logits.data if isinstance(old_logits, Tensor) else old_logits)
    known = old.shape[1]
    if known == 0:
        return ce
    if known > new_logits.shape[1] or old.shape[0] != new_logits.shape[0]:
        raise ContractError(f"old logits {old.shape} do not fit new logits {new_logits.shape}")
    return ce + kd_loss(new_logits[:, :known], old, T)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def ncm_classify(features, class_means) -> np.ndarray:
    """Nearest normalized class mean (Euclidean); ties go to the lower class id."""
    f = _unit(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    mu = _unit(np.asarray(class_means, dtype=np.float64))
    d2 = ((f[:, None, :] - mu[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


class ICaRL(Learner):
    name = "icarl"
    uses_exemplars = True
    DECISIONS = (
        "icarl: KD = T^2 * KL(old || new) on old-class columns, T from config temperature",
        "icarl: class means from stored exemplars with the post-task model; NCM classifier",
        "memory: herding on post-task features; memory update precedes evaluation",
    )

    def __init__(self, settings):
        super().__init__(settings)
        self.net = TrainableNet(self)
        self.old_net: TrainableNet | None = None
        self.class_means = np.zeros((0, self.embed_dim))

    def prepare_task(self, data: Dataset) -> None:
        self.net.grow(self.total_classes, self.rng(HEAD_SALT), self.embed_dim)
        if self.old_net is not None:
            self.fill_cache("old_logits", data.x, lambda x: self.old_net.logits(x).data)

    def trainable_parameters(self):
        return self.net.parameters()

    def composite_loss(self, batch: Batch) -> Tensor:
        logits = self.net.logits(batch.x)
        old = None
        if self.old_net is not None:
            old = self.cached("old_logits", batch, lambda x: self.old_net.logits(x).data)
        return icarl_loss(logits, batch.y, old, self.cfg.temperature)

    def features_for_memory(self, x):
        with no_grad():
            return self.net.features(x).data

    def after_task(self) -> None:
        means = []
        for c in range(self.total_classes):
            ex = self.store.x.get(c)
            if ex is None or len(ex) == 0:
                means.append(np.zeros(self.embed_dim))
                continue
            means.append(_unit(self.features_for_memory(ex)).mean(axis=0))
        self.store.accesses += 1
        self.class_means = np.stack(means)
        self.old_net = copy.deepcopy(self.net)
        self.old_net.backbone.set_trainable(False)
        self.old_net.head.freeze()

    def scores(self, x):
        f = _unit(self.net.features(x).data)
        mu = _unit(self.class_means)
        # negative squared distance: argmax == nearest mean
        return -((f[:, None, :] - mu[None, :, :]) ** 2).sum(-1)
