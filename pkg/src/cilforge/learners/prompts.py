"""Prompt-based learners on a frozen encoder: L2P, DualPrompt and CODA-Prompt.

All three query the frozen encoder's class token, train only prompt state
and a linear head, and use cross-entropy restricted to the current task's
columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..backbone import ConfigurationError, PromptInjection
from ..datastream import Dataset
from ..numkernel import (Tensor, as_tensor, concat, cosine_matrix, cross_entropy, l2_normalize,
                         matmul, mul, reshape, transpose, tsum)
from .base import Batch, Learner, LearnerConfigError, LearnerStateError, LinearHead
from .finetune import HEAD_SALT

POOL_SALT = 404


def _rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def l2p_select(query, keys, N: int) -> tuple[np.ndarray, Tensor]:
    """Top-``N`` keys by cosine to each query row, ties to the lowest index.

    Returns ``(indices [B x N], pull_loss)`` where the pull loss is the batch
    mean of ``(1/N) sum (1 - cos(q, k_selected))``.  The query carries no
    gradient; the keys do.
    """
    q = _rows(query)
    keys = as_tensor(keys)
    M = keys.shape[0]
    if not 1 <= N <= M:
        raise ValueError(f"need 1 <= N <= M, got N={N}, M={M}")
    sim = cosine_matrix(Tensor(q), keys)
    idx = np.argsort(-sim.data, axis=1, kind="stable")[:, :N]
    rows = np.repeat(np.arange(len(q))[:, None], N, axis=1)
    pull = 1.0 - sim[rows, idx].mean()
    return idx, pull


def _gram_schmidt_rows(n: int, dim: int, previous: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``n`` unit rows orthogonal to ``previous`` and to each other when room allows."""
    basis = [r for r in _unit(previous.reshape(len(previous), -1))] if len(previous) else []
    out = []
    for _ in range(n):
        v = rng.normal(size=dim)
        if len(basis) < dim:
            for b in basis:
                v = v - (v @ b) * b
        v = v / np.linalg.norm(v)
        basis.append(v)
        out.append(v)
    return np.array(out).reshape(n, dim)


class _PromptLearner(Learner):
    """Frozen-encoder query cache, growing head and current-task CE."""

    PARAMS = {"pull_weight": 0.5}

    def __init__(self, settings):
        super().__init__(settings)
        self.head: LinearHead | None = None

    def query(self, x) -> np.ndarray:
        return self.ptm.encode(x).data

    def grow_head(self) -> None:
        if self.head is None:
            self.head = LinearHead(self.embed_dim, self.total_classes, self.rng(HEAD_SALT))
        else:
            self.head.expand(self.total_classes, self.rng(HEAD_SALT))

    def prepare_task(self, data: Dataset) -> None:
        self.grow_head()
        self.fill_cache("query", data.x, self.query)

    def task_ce(self, logits: Tensor, y) -> Tensor:
        k = self.known_classes
        return cross_entropy(logits[:, k:self.total_classes], np.asarray(y) - k)

    def digests(self):
        return {"backbone": self.ptm.digest()}


class L2P(_PromptLearner):
    """A shared pool of keyed prompts; each input prepends its top-N prompts."""

    name = "l2p"
    PARAMS = {"pool_size": 10, "prompt_len": 4, "top_n": 2, "pull_weight": 0.5}
    DECISIONS = (
        "l2p: pool M=10, p=4, N=2, lambda_pull=0.5; prompts prepended at layer 0",
        "l2p: pull loss stops at the frozen query; CE over current-task columns only",
    )

    def __init__(self, settings):
        super().__init__(settings)
        M, p, N = self.p["pool_size"], self.p["prompt_len"], self.p["top_n"]
        if not 1 <= N <= M:
            raise LearnerConfigError(f"l2p needs 1 <= top_n <= pool_size, got {N} and {M}")
        rng = np.random.default_rng(self.seed + POOL_SALT)
        d = self.embed_dim
        self.keys = Tensor(rng.uniform(-1, 1, (M, d)), True)
        self.prompts = Tensor(rng.uniform(-0.1, 0.1, (M, p, d)), True)

    def trainable_parameters(self):
        return [self.keys, self.prompts] + self.head.parameters()

    def prompted(self, x, q: np.ndarray) -> tuple[Tensor, Tensor]:
        idx, pull = l2p_select(q, self.keys, self.p["top_n"])
        B, N = idx.shape
        toks = reshape(self.prompts[idx], (B, N * self.p["prompt_len"], self.embed_dim))
        f = self.ptm.encode(x, PromptInjection("prepend", {0: toks}))
        return self.head(f), pull

    def composite_loss(self, batch: Batch) -> Tensor:
        logits, pull = self.prompted(batch.x, self.cached("query", batch, self.query))
        return self.task_ce(logits, batch.y) + pull * self.p["pull_weight"]

    def scores(self, x):
        return self.prompted(x, self.query(x))[0].data


@dataclass
class DualPromptState:
    g_prompts: dict[int, Tensor]
    e_keys: list[Tensor] = field(default_factory=list)
    e_prompts: list[dict[int, Tensor]] = field(default_factory=list)


def dualprompt_forward(learner: DualPrompt, x, task_hint: int | None = None,
                       query: np.ndarray | None = None) -> Tensor:
    """Logits with g-prompts at every input and one e-prompt per sample.

    The e-prompt is that of ``task_hint`` when given, else of the task whose
    key is most cosine-similar to the query.
    """
    st = learner.state
    if not st.e_keys:
        raise LearnerStateError("dualprompt has not learned any task")
    x = np.asarray(x, dtype=np.float64)
    B = len(x)
    if task_hint is None:
        q = learner.query(x) if query is None else query
        keys = np.stack([k.data for k in st.e_keys])
        tasks = np.argmax(_unit(q) @ _unit(keys).T, axis=1)
    else:
        tasks = np.full(B, int(task_hint))
    prompts = dict(st.g_prompts)
    for layer in st.e_prompts[0]:
        if len(st.e_prompts) == 1 or (tasks == tasks[0]).all():
            prompts[layer] = st.e_prompts[int(tasks[0])][layer]
        else:
            stacked = concat([reshape(e[layer], (1,) + e[layer].shape) for e in st.e_prompts], axis=0)
            prompts[layer] = stacked[tasks]
    f = learner.ptm.encode(x, PromptInjection("prefix_kv", prompts))
    return learner.head(f)


class DualPrompt(_PromptLearner):
    """Shared g-prompts on shallow layers, one keyed e-prompt per task deeper."""

    name = "dualprompt"
    PARAMS = {"g_prompt_length": 4, "e_prompt_length": 4, "g_layers": [0, 1], "e_layers": [2],
              "pull_weight": 0.5}
    DECISIONS = (
        "dualprompt: g-prompts (length 4) at layers {0,1}, e-prompts (length 4) at {2}, "
        "both as prefix key/value",
        "dualprompt: e-prompt by task id while training, by key cosine at inference; "
        "past e-prompts frozen",
    )

    def __init__(self, settings):
        super().__init__(settings)
        G, E = list(self.p["g_layers"]), list(self.p["e_layers"])
        L = self.ptm.depth
        if set(G) & set(E):
            raise LearnerConfigError(f"g_layers {G} and e_layers {E} overlap")
        if not E:
            raise LearnerConfigError("e_layers must not be empty")
        for layer in G + E:
            if not 0 <= layer < L:
                raise LearnerConfigError(f"prompt layer {layer} outside depth {L}")
        self.g_layers, self.e_layers = G, E
        rng = np.random.default_rng(self.seed + POOL_SALT)
        d, g = self.embed_dim, self.p["g_prompt_length"]
        self.state = DualPromptState({i: Tensor(rng.uniform(-0.1, 0.1, (g, d)), True) for i in G})

    def prepare_task(self, data: Dataset) -> None:
        super().prepare_task(data)
        for k, e in zip(self.state.e_keys, self.state.e_prompts):
            k.requires_grad = False
            for t in e.values():
                t.requires_grad = False
        rng = self.rng(POOL_SALT)
        d, e = self.embed_dim, self.p["e_prompt_length"]
        self.state.e_keys.append(Tensor(rng.uniform(-1, 1, d), True))
        self.state.e_prompts.append({i: Tensor(rng.uniform(-0.1, 0.1, (e, d)), True)
                                     for i in self.e_layers})

    def trainable_parameters(self):
        st = self.state
        params = list(st.g_prompts.values()) + [st.e_keys[-1]] + list(st.e_prompts[-1].values())
        return params + self.head.parameters()

    def composite_loss(self, batch: Batch) -> Tensor:
        q = self.cached("query", batch, self.query)
        logits = dualprompt_forward(self, batch.x, task_hint=self.cur_task)
        key = reshape(self.state.e_keys[-1], (1, self.embed_dim))
        pull = 1.0 - cosine_matrix(Tensor(q), key).mean()
        return self.task_ce(logits, batch.y) + pull * self.p["pull_weight"]

    def scores(self, x):
        return dualprompt_forward(self, x).data


@dataclass
class CodaState:
    """Prompt components in per-task chunks; earlier chunks are frozen."""

    P: list[Tensor] = field(default_factory=list)  # [k x p x d]
    K: list[Tensor] = field(default_factory=list)  # [k x d]
    A: list[Tensor] = field(default_factory=list)  # [k x d]
    ortho_weight: float = 0.1

    @property
    def size(self) -> int:
        return sum(k.shape[0] for k in self.K)


def _ortho_term(chunks: list[Tensor]) -> Tensor:
    """``||X_new X_all^T - [0 I]||^2`` over flattened rows; ``X_new`` is the last chunk."""
    flat = [reshape(c, (c.shape[0], -1)) for c in chunks]
    new = flat[-1]
    allx = concat(flat, axis=0) if len(flat) > 1 else new
    target = np.zeros((new.shape[0], allx.shape[0]))
    target[:, allx.shape[0] - new.shape[0]:] = np.eye(new.shape[0])
    diff = matmul(new, transpose(allx)) - Tensor(target)
    return tsum(diff * diff)


def coda_prompt(query, state: CodaState) -> tuple[Tensor, Tensor]:
    """Attention-weighted prompt ``[B x p x d]`` and the orthogonality penalty.

    ``alpha_m = cos(q * A_m, K_m)`` and ``prompt = sum_m alpha_m P_m``.
    """
    if state.size < 1:
        raise ValueError("coda_prompt needs at least one component")
    q = Tensor(_rows(query))
    P = concat(state.P, axis=0) if len(state.P) > 1 else state.P[0]
    K = concat(state.K, axis=0) if len(state.K) > 1 else state.K[0]
    A = concat(state.A, axis=0) if len(state.A) > 1 else state.A[0]
    B, (M, p, d) = q.shape[0], P.shape
    qa = mul(reshape(q, (B, 1, d)), reshape(A, (1, M, d)))
    alpha = tsum(mul(l2_normalize(qa), reshape(l2_normalize(K), (1, M, d))), axis=-1)
    prompt = reshape(matmul(alpha, reshape(P, (M, p * d))), (B, p, d))
    penalty = (_ortho_term(state.K) + _ortho_term(state.A) + _ortho_term(state.P)) * state.ortho_weight
    return prompt, penalty


class CodaPrompt(_PromptLearner):
    """Soft attention over a growing set of prompt components."""

    name = "coda-prompt"
    PARAMS = {"pool_size": 10, "prompt_len": 4, "layers": [0, 1, 2], "ortho_weight": 0.1}
    DECISIONS = (
        "coda-prompt: M'=10 components, M'/T allocated per task, Gram-Schmidt initialized",
        "coda-prompt: one composed prompt injected as prefix key/value at layers [0,1,2]",
        "coda-prompt: ortho penalty = 0.1 * sum over K, A, flattened P of "
        "||X_new X_all^T - [0 I]||^2 (current chunk against all components)",
    )

    def __init__(self, settings):
        super().__init__(settings)
        M, T = self.p["pool_size"], self.nb_tasks
        if M < T:
            raise LearnerConfigError(f"coda-prompt needs pool_size >= nb_tasks, got {M} < {T}")
        self.per_task = M // T
        for layer in self.p["layers"]:
            if not 0 <= layer < self.ptm.depth:
                raise LearnerConfigError(f"prompt layer {layer} outside depth {self.ptm.depth}")
        self.state = CodaState(ortho_weight=self.p["ortho_weight"])

    def prepare_task(self, data: Dataset) -> None:
        super().prepare_task(data)
        st = self.state
        for t in st.P + st.K + st.A:
            t.requires_grad = False
        rng = self.rng(POOL_SALT)
        k, p, d = self.per_task, self.p["prompt_len"], self.embed_dim

        def prev(chunks):
            return np.concatenate([c.data.reshape(c.shape[0], -1) for c in chunks]) if chunks \
                else np.zeros((0, 1))

        st.P.append(Tensor(_gram_schmidt_rows(k, p * d, prev(st.P), rng).reshape(k, p, d), True))
        st.K.append(Tensor(_gram_schmidt_rows(k, d, prev(st.K), rng), True))
        st.A.append(Tensor(_gram_schmidt_rows(k, d, prev(st.A), rng), True))

    def trainable_parameters(self):
        st = self.state
        return [st.P[-1], st.K[-1], st.A[-1]] + self.head.parameters()

    def prompted(self, x, q) -> tuple[Tensor, Tensor]:
        prompt, penalty = coda_prompt(q, self.state)
        f = self.ptm.encode(x, PromptInjection("prefix_kv", {i: prompt for i in self.p["layers"]}))
        return self.head(f), penalty

    def composite_loss(self, batch: Batch) -> Tensor:
        logits, penalty = self.prompted(batch.x, self.cached("query", batch, self.query))
        return self.task_ce(logits, batch.y) + penalty

    def scores(self, x):
        return self.prompted(x, self.query(x))[0].data
