"""Plain sequential fine-tuning of the whole pre-trained encoder."""

from __future__ import annotations

import numpy as np

from ..datastream import Dataset
from ..numkernel import Tensor, cross_entropy
from .base import Batch, Learner, LinearHead

HEAD_SALT = 101


class TrainableNet:
    """A trainable copy of the pre-trained encoder plus a growing linear head."""

    def __init__(self, learner: Learner):
        self.backbone = learner.ptm.copy(trainable=True)
        self.head: LinearHead | None = None

    def grow(self, total: int, rng: np.random.Generator, in_dim: int) -> None:
        if self.head is None:
            self.head = LinearHead(in_dim, total, rng)
        else:
            self.head.expand(total, rng)

    def features(self, x) -> Tensor:
        return self.backbone.encode(x)

    def logits(self, x) -> Tensor:
        return self.head(self.features(x))

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.head.parameters()


class Finetune(Learner):
    """Cross-entropy on the current task only, over every seen class."""

    name = "finetune"
    DECISIONS = ("finetune: full encoder and head trained on current-task data only",)

    def __init__(self, settings):
        super().__init__(settings)
        self.net = TrainableNet(self)

    def prepare_task(self, data: Dataset) -> None:
        self.net.grow(self.total_classes, self.rng(HEAD_SALT), self.embed_dim)

    def trainable_parameters(self):
        return self.net.parameters()

    def composite_loss(self, batch: Batch) -> Tensor:
        return cross_entropy(self.net.logits(batch.x), batch.y)

    def scores(self, x):
        return self.net.logits(x).data
