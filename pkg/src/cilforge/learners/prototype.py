"""Prototype classifiers over frozen features: SimpleCIL and ADAM."""

from __future__ import annotations

import numpy as np

from ..backbone import PET_VARIANTS, PETModule, TinyTransformer, encode_batched
from ..datastream import Dataset
from ..numkernel import Tensor, cross_entropy, no_grad
from .base import Batch, Learner, LearnerConfigError, LinearHead, digest_tensors
from .icarl import _unit


class FitError(ValueError):
    pass


class PrototypeHead:
    """Per-class feature means, compared by cosine."""

    def __init__(self, dim: int):
        self.means = np.zeros((0, dim))

    def fit_classes(self, features: np.ndarray, labels: np.ndarray, classes) -> None:
        rows = []
        for c in classes:
            mask = labels == c
            if not mask.any():
                raise FitError(f"class {c} has no training samples")
            rows.append(features[mask].mean(axis=0))
        need = max(classes) + 1 if len(rows) else 0
        if need > len(self.means):
            grown = np.zeros((need, self.means.shape[1]))
            grown[:len(self.means)] = self.means
            self.means = grown
        for c, r in zip(classes, rows):
            self.means[c] = r

    @property
    def prototypes(self) -> np.ndarray:
        return _unit(self.means)

    def scores(self, features: np.ndarray) -> np.ndarray:
        return _unit(features) @ self.prototypes.T


def simplecil_fit(head: PrototypeHead, data: Dataset, extract, classes=None) -> PrototypeHead:
    classes = sorted(data.labels()) if classes is None else list(classes)
    head.fit_classes(extract(data.x), data.y, classes)
    return head


class SimpleCIL(Learner):
    name = "simplecil"
    DECISIONS = ("simplecil: prototypes are raw feature means of the frozen encoder, "
                 "classified by cosine",)

    def __init__(self, settings):
        super().__init__(settings)
        self.head = PrototypeHead(self.embed_dim)

    def extract(self, x) -> np.ndarray:
        return encode_batched(self.ptm, np.asarray(x))

    def finish_task(self, train: Dataset, data: Dataset) -> None:
        new = range(self.known_classes, self.total_classes)
        simplecil_fit(self.head, train, self.extract, new)

    def scores(self, x):
        return self.head.scores(self.ptm.encode(x).data)

    def digests(self):
        return {"backbone": self.ptm.digest()}


class Adam(Learner):
    """Adapt once on the first task, then prototype the concatenated features."""

    name = "adam"
    PARAMS = {"pet_variant": "adapter", "bottleneck": 16, "prompt_len": 4, "ssf_sites": None,
              "pet_epochs": None, "pet_lr": None}
    DECISIONS = (
        "adam: PET trained on task 0 only with a temporary linear head, then frozen",
        "adam: features = concat(frozen encoder, adapted encoder); cosine prototypes",
    )

    def __init__(self, settings):
        super().__init__(settings)
        variant = self.p["pet_variant"]
        if variant not in PET_VARIANTS:
            raise LearnerConfigError(f"unknown ADAM pet_variant {variant!r}; "
                                     f"expected one of {PET_VARIANTS}")
        self.variant = variant
        self.adapted: TinyTransformer | None = None
        self.pet: PETModule | None = None
        self.temp_head: LinearHead | None = None
        self.head = PrototypeHead(2 * self.embed_dim)

    @property
    def display_name(self) -> str:
        return f"ADAM w/ {self.variant}"

    def prepare_task(self, data: Dataset) -> None:
        if self.cur_task > 0:
            return
        d, L = self.embed_dim, self.ptm.depth
        if self.variant == "full":
            self.adapted = self.ptm.copy(trainable=True)
        else:
            self.adapted = self.ptm
            self.pet = PETModule(self.variant, d, L, bottleneck=self.p["bottleneck"],
                                 prompt_len=self.p["prompt_len"], sites=self.p["ssf_sites"]
                                 if self.variant == "ssf" else None, seed=self.seed)
        self.temp_head = LinearHead(d, self.total_classes, self.rng(101))

    def trainable_parameters(self):
        if self.cur_task > 0:
            return []
        own = self.adapted.parameters() if self.variant == "full" else self.pet.parameters()
        return own + self.temp_head.parameters()

    def adapted_features(self, x) -> Tensor:
        return self.adapted.encode(x, pet=self.pet)

    def composite_loss(self, batch: Batch) -> Tensor:
        return cross_entropy(self.temp_head(self.adapted_features(batch.x)), batch.y)

    def train_task(self, data: Dataset) -> None:
        if self.cur_task > 0:
            return
        epochs = self.p["pet_epochs"]
        if epochs is None:
            epochs = self.cfg.epochs
        if epochs > 0:
            self.loss_history[0] = self.fit(data, self.composite_loss, self.trainable_parameters(),
                                            epochs=epochs, lr=self.p["pet_lr"])
        if self.pet is not None:
            self.pet.freeze()
        else:
            self.adapted.set_trainable(False)
        self.temp_head = None

    def extract(self, x) -> np.ndarray:
        x = np.asarray(x)
        out = []
        with no_grad():
            for s in range(0, len(x), 256):
                xb = x[s:s + 256]
                out.append(np.concatenate([self.ptm.encode(xb).data,
                                           self.adapted_features(xb).data], axis=1))
        return np.concatenate(out)

    def finish_task(self, train: Dataset, data: Dataset) -> None:
        new = range(self.known_classes, self.total_classes)
        simplecil_fit(self.head, train, self.extract, new)

    def scores(self, x):
        return self.head.scores(self.extract(x))

    def digests(self):
        out = {"backbone": self.ptm.digest()}
        if self.pet is not None:
            out["pet"] = digest_tensors(self.pet.parameters())
        if self.adapted is not None and self.adapted is not self.ptm:
            out["adapted"] = self.adapted.digest()
        return out
