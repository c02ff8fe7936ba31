"""Coil: co-transport between old and new classifiers."""

from __future__ import annotations

import copy

import numpy as np

from ..datastream import Dataset
from ..numkernel import Tensor, concat, cross_entropy, kd_loss, l2_normalize, matmul, no_grad, tsum
from .base import Batch, Learner
from .icarl import _unit
from .ot import coil_transfer


class CosineHead:
    """``scale * cos(feature, w_c)`` with one weight row per class."""

    def __init__(self, rows: np.ndarray, scale: float):
        self.W = Tensor(rows, True)
        self.scale = scale

    def parameters(self):
        return [self.W]

    def __call__(self, f: Tensor) -> Tensor:
        return matmul(l2_normalize(f), l2_normalize(self.W).T) * self.scale


class Coil(Learner):
    """Rehearsal + KD with optimal-transport classifier transfer.

    Forward: new-class rows start as the transport of old rows along the
    prototype plan.  Backward: old rows are pulled toward the transport of the
    current new rows along the transposed plan, with a weight that decays
    linearly to zero over the epochs.
    """

    name = "coil"
    uses_exemplars = True
    PARAMS = {"coil_eps": 0.1, "coil_scale": 16.0, "coil_backward_weight": 0.1}
    DECISIONS = (
        "coil: OT cost = 1 - cosine between class prototypes (mean normalized features)",
        "coil: forward transfer initializes new heads; backward transfer is a transposed-plan "
        "regularizer on old heads with linearly decaying weight",
        "coil: KD = T^2 * KL on old-class logits",
        "memory: herding on post-task features; memory update precedes evaluation",
    )

    def __init__(self, settings):
        super().__init__(settings)
        self.backbone = self.ptm.copy(trainable=True)
        self.head: CosineHead | None = None
        self.old: tuple | None = None
        self.prototypes = np.zeros((0, self.embed_dim))
        self.plan: np.ndarray | None = None

    def _features(self, x, backbone=None) -> Tensor:
        return (backbone or self.backbone).encode(x)

    def _class_protos(self, data: Dataset, classes) -> np.ndarray:
        with no_grad():
            f = _unit(self._features(data.x).data)
        return np.stack([f[data.y == c].mean(0) for c in classes])

    def prepare_task(self, data: Dataset) -> None:
        new = range(self.known_classes, self.total_classes)
        rng = self.rng(101)
        if self.head is None:
            self.head = CosineHead(_unit(rng.normal(size=(len(new), self.embed_dim))),
                                   self.p["coil_scale"])
            return
        protos_new = self._class_protos(data, new)
        rows, self.plan = coil_transfer(self.head.W.data, self.prototypes, protos_new,
                                        self.p["coil_eps"])
        self.head = CosineHead(np.concatenate([self.head.W.data, rows]), self.p["coil_scale"])
        old_backbone, old_head = self.old
        self.fill_cache("old_logits", data.x, lambda x: old_head(old_backbone.encode(x)).data)

    def trainable_parameters(self):
        return self.backbone.parameters() + self.head.parameters()

    def backward_transfer(self) -> Tensor:
        known = self.known_classes
        W = self.head.W
        back = matmul(Tensor(self.plan * known), W[known:])
        diff = l2_normalize(W[:known]) - l2_normalize(back)
        return tsum(diff * diff) * (1.0 / known)

    def composite_loss(self, batch: Batch) -> Tensor:
        logits = self.head(self._features(batch.x))
        loss = cross_entropy(logits, batch.y)
        if self.old is None:
            return loss
        old_backbone, old_head = self.old
        old = self.cached("old_logits", batch, lambda x: old_head(old_backbone.encode(x)).data)
        loss = loss + kd_loss(logits[:, :self.known_classes], old, self.cfg.temperature)
        weight = self.p["coil_backward_weight"] * (1.0 - batch.epoch / max(batch.epochs, 1))
        if weight > 0:
            loss = loss + self.backward_transfer() * weight
        return loss

    def finish_task(self, train: Dataset, data: Dataset) -> None:
        new = range(self.known_classes, self.total_classes)
        self.prototypes = np.concatenate([self.prototypes, self._class_protos(train, new)])

    def features_for_memory(self, x):
        with no_grad():
            return self._features(x).data

    def after_task(self) -> None:
        backbone = self.backbone.copy(trainable=False)
        head = copy.deepcopy(self.head)
        head.W.requires_grad = False
        self.old = (backbone, head)

    def scores(self, x):
        return self.head(self._features(x)).data
