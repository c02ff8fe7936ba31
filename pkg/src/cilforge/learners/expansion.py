"""Learners that grow the representation: DER, FOSTER and MEMO."""

from __future__ import annotations

import numpy as np

from ..backbone import TinyTransformer
from ..datastream import Dataset
from ..numkernel import Tensor, concat, cross_entropy, kd_loss, no_grad
from .base import Batch, Learner, LearnerConfigError, LinearHead, digest_tensors
from .finetune import HEAD_SALT

AUX_SALT = 202


def aux_targets(y: np.ndarray, known: int) -> np.ndarray:
    """New classes -> 1..n_new, every old class -> 0."""
    return np.where(y >= known, y - known + 1, 0)


class DER(Learner):
    """One encoder per task; old encoders frozen; head over concatenated features."""

    name = "der"
    uses_exemplars = True
    PARAMS = {"aux_weight": 1.0}
    DECISIONS = (
        "der: each task appends a fresh copy of the pre-trained encoder; older copies frozen",
        "der: auxiliary (new classes + 1 old super-class) head, weight from aux_weight",
        "memory: herding on post-task features; memory update precedes evaluation",
    )

    def __init__(self, settings):
        super().__init__(settings)
        self.branches: list[TinyTransformer] = []
        self.head: LinearHead | None = None
        self.aux: LinearHead | None = None

    @property
    def feature_dim(self) -> int:
        return self.embed_dim * len(self.branches)

    def prepare_task(self, data: Dataset) -> None:
        for b in self.branches:
            b.set_trainable(False)
        self.branches.append(self.ptm.copy(trainable=True))
        if self.head is None:
            self.head = LinearHead(self.embed_dim, self.total_classes, self.rng(HEAD_SALT))
            self.aux = None
            return
        self.head.expand(self.total_classes, self.rng(HEAD_SALT), in_dim=self.feature_dim)
        n_new = self.total_classes - self.known_classes
        self.aux = LinearHead(self.embed_dim, n_new + 1, self.rng(AUX_SALT))
        self.fill_cache("old_features", data.x, self._old_features)

    def _old_features(self, x) -> np.ndarray:
        return np.concatenate([b.encode(x).data for b in self.branches[:-1]], axis=1)

    def trainable_parameters(self):
        params = self.branches[-1].parameters() + self.head.parameters()
        if self.aux is not None:
            params += self.aux.parameters()
        return params

    def composite_loss(self, batch: Batch) -> Tensor:
        f_new = self.branches[-1].encode(batch.x)
        if len(self.branches) == 1:
            return cross_entropy(self.head(f_new), batch.y)
        f_old = Tensor(self.cached("old_features", batch, self._old_features))
        loss = cross_entropy(self.head(concat([f_old, f_new], axis=1)), batch.y)
        aux_y = aux_targets(batch.y, self.known_classes)
        return loss + cross_entropy(self.aux(f_new), aux_y) * self.p["aux_weight"]

    def features(self, x) -> Tensor:
        return concat([b.encode(x) for b in self.branches], axis=1)

    def features_for_memory(self, x):
        with no_grad():
            return self.features(x).data

    def scores(self, x):
        return self.head(self.features(x)).data

    def digests(self):
        return {f"branch{i}": b.digest() for i, b in enumerate(self.branches)}


class Foster(Learner):
    """Boost with a second branch, then compress back into one encoder.

    Stage 1 trains a new branch (copied from the current student) next to the
    frozen old one, with CE plus KD against the previous model.  Stage 2
    distills the two-branch teacher's logits into a fresh single encoder,
    weighting each sample by ``n_class ** -balance_power``.
    """

    name = "foster"
    uses_exemplars = True
    PARAMS = {"compression_epochs": None, "balance_power": 0.5}
    DECISIONS = (
        "foster: stage-1 KD = T^2 * KL on old-class logits of the previous student",
        "foster: stage-2 student starts from the pre-trained encoder; logit KD with per-class "
        "weights n_c^-balance_power",
        "memory: herding on post-task features; memory update precedes evaluation",
    )

    def __init__(self, settings):
        super().__init__(settings)
        self.student: TinyTransformer | None = None
        self.head: LinearHead | None = None
        self.teacher: tuple | None = None
        self.kd_history: dict[int, list[float]] = {}

    def prepare_task(self, data: Dataset) -> None:
        if self.student is None:
            self.student = self.ptm.copy(trainable=True)
            self.head = LinearHead(self.embed_dim, self.total_classes, self.rng(HEAD_SALT))
            self.teacher = None
            return
        old = self.student.copy(trainable=False)
        new = self.student.copy(trainable=True)
        boosted = self.head.clone()
        boosted.expand(self.total_classes, self.rng(HEAD_SALT), in_dim=2 * self.embed_dim)
        self.teacher = (old, new, boosted)
        old_head = self.head
        self.fill_cache("old_features", data.x, lambda x: old.encode(x).data)
        self._cache["old_logits"] = old_head(Tensor(self._cache["old_features"])).data

    def _teacher_logits(self, x, f_old=None) -> Tensor:
        old, new, boosted = self.teacher
        f_old = Tensor(old.encode(x).data) if f_old is None else Tensor(f_old)
        return boosted(concat([f_old, new.encode(x)], axis=1))

    def trainable_parameters(self):
        if self.teacher is None:
            return self.student.parameters() + self.head.parameters()
        _, new, boosted = self.teacher
        return new.parameters() + boosted.parameters()

    def composite_loss(self, batch: Batch) -> Tensor:
        if self.teacher is None:
            return cross_entropy(self.head(self.student.encode(batch.x)), batch.y)
        old, _, _ = self.teacher
        f_old = self.cached("old_features", batch, lambda x: old.encode(x).data)
        logits = self._teacher_logits(batch.x, f_old)
        old_logits = self.cached("old_logits", batch, lambda x: self.head(old.encode(x)).data)
        return cross_entropy(logits, batch.y) + kd_loss(logits[:, :self.known_classes], old_logits,
                                                        self.cfg.temperature)

    def class_weights(self, y: np.ndarray) -> np.ndarray:
        counts = np.bincount(y, minlength=self.total_classes).astype(np.float64)
        per_class = np.where(counts > 0, np.maximum(counts, 1.0) ** -self.p["balance_power"], 0.0)
        return per_class[y]

    def compression_loss(self, batch: Batch, student: TinyTransformer, head: LinearHead) -> Tensor:
        teacher = self.cached("teacher_logits", batch, lambda x: self._teacher_logits(x).data)
        return kd_loss(head(student.encode(batch.x)), teacher, self.cfg.temperature,
                       weights=self._weights[batch.idx] if batch.idx is not None
                       else self.class_weights(batch.y))

    def train_task(self, data: Dataset) -> None:
        super().train_task(data)
        if self.teacher is None:
            return
        self.fill_cache("teacher_logits", data.x, lambda x: self._teacher_logits(x).data)
        self._weights = self.class_weights(data.y)
        student = self.ptm.copy(trainable=True)
        head = LinearHead(self.embed_dim, self.total_classes, self.rng(303))
        epochs = self.p["compression_epochs"]
        self.kd_history[self.cur_task] = self.fit(
            data, lambda b: self.compression_loss(b, student, head),
            student.parameters() + head.parameters(), epochs=epochs, salt=1)
        self.student, self.head = student, head
        self.teacher = None
        del self._weights

    @property
    def feature_dim(self) -> int:
        return self.embed_dim

    def features_for_memory(self, x):
        with no_grad():
            return self.student.encode(x).data

    def scores(self, x):
        return self.head(self.student.encode(x)).data


class Memo(Learner):
    """Shared generalized blocks plus one specialized suffix per task."""

    name = "memo"
    uses_exemplars = True
    PARAMS = {"memo_split": None, "aux_weight": 1.0}
    DECISIONS = (
        "memo: task 0 trains the whole encoder; afterwards the shared prefix (embedding, first "
        "L-s blocks, final norm) is frozen and each task clones the newest suffix",
        "memo: auxiliary (new classes + 1) head as in der",
        "memory: herding on post-task features; memory update precedes evaluation",
    )

    def __init__(self, settings):
        super().__init__(settings)
        L = self.ptm.depth
        s = self.p["memo_split"]
        s = max(1, L // 2) if s is None else int(s)
        if not 1 <= s < L:
            raise LearnerConfigError(f"memo_split must satisfy 1 <= s < depth={L}, got {s}")
        self.split = s
        self.suffix = list(range(L - s, L))
        self.base: TinyTransformer | None = None
        self.branches: list[TinyTransformer] = []
        self.head: LinearHead | None = None
        self.aux: LinearHead | None = None

    @property
    def feature_dim(self) -> int:
        return self.embed_dim * len(self.branches)

    def shared_tokens(self, x) -> Tensor:
        h, _ = self.base.run_blocks(self.base.embed(x), 0, self.ptm.depth - self.split)
        return h

    def branch_feature(self, branch: TinyTransformer, h: Tensor) -> Tensor:
        h, _ = branch.run_blocks(h, self.ptm.depth - self.split, self.ptm.depth)
        return self.base.head(h)

    def prepare_task(self, data: Dataset) -> None:
        if self.base is None:
            self.base = self.ptm.copy(trainable=True)
            self.branches = [self.base]
            self.head = LinearHead(self.embed_dim, self.total_classes, self.rng(HEAD_SALT))
            return
        self.base.set_trainable(False)
        for b in self.branches:
            b.set_trainable(False)
        new = self.branches[-1].copy(trainable=False).set_trainable(True, blocks=self.suffix)
        self.branches.append(new)
        self.head.expand(self.total_classes, self.rng(HEAD_SALT), in_dim=self.feature_dim)
        self.aux = LinearHead(self.embed_dim, self.total_classes - self.known_classes + 1,
                              self.rng(AUX_SALT))
        self.fill_cache("shared", data.x, lambda x: self.shared_tokens(x).data)
        self.fill_cache("old_features", data.x, self._old_features)

    def _old_features(self, x) -> np.ndarray:
        h = self.shared_tokens(x)
        return np.concatenate([self.branch_feature(b, h).data for b in self.branches[:-1]], axis=1)

    def trainable_parameters(self):
        if len(self.branches) == 1:
            return self.base.parameters() + self.head.parameters()
        return (self.branches[-1].parameters(blocks=self.suffix) + self.head.parameters()
                + self.aux.parameters())

    def composite_loss(self, batch: Batch) -> Tensor:
        if len(self.branches) == 1:
            f = self.branch_feature(self.base, self.shared_tokens(batch.x))
            return cross_entropy(self.head(f), batch.y)
        h = Tensor(self.cached("shared", batch, lambda x: self.shared_tokens(x).data))
        f_new = self.branch_feature(self.branches[-1], h)
        f_old = Tensor(self.cached("old_features", batch, self._old_features))
        loss = cross_entropy(self.head(concat([f_old, f_new], axis=1)), batch.y)
        aux_y = aux_targets(batch.y, self.known_classes)
        return loss + cross_entropy(self.aux(f_new), aux_y) * self.p["aux_weight"]

    def growth_per_task(self) -> int:
        return self.ptm.num_parameters(blocks=self.suffix)

    def features(self, x) -> Tensor:
        h = self.shared_tokens(x)
        return concat([self.branch_feature(b, h) for b in self.branches], axis=1)

    def features_for_memory(self, x):
        with no_grad():
            return self.features(x).data

    def scores(self, x):
        return self.head(self.features(x)).data

    def digests(self):
        shared = [v for k, v in sorted(self.base.params.items())
                  if not k.startswith(tuple(f"b{i}." for i in self.suffix))]
        out = {"shared": digest_tensors(shared)}
        for i, b in enumerate(self.branches):
            out[f"suffix{i}"] = b.digest(blocks=self.suffix)
        return out
