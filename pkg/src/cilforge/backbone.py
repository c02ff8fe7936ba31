"""Stand-ins for pre-trained models.

A :class:`TinyTransformer` is a pre-norm ViT-style encoder over vector
inputs cut into ``token_count`` patches.  It accepts prompt tokens (prepended
to the sequence or appended to keys/values only) and parameter-efficient
tuning modules (adapter, SSF, shallow/deep visual prompts).

``build_backbone`` returns a frozen extractor.  The ``frozen_pretrained_toy``
kind first fits the encoder on an auxiliary synthetic task whose classes
never appear in a benchmark stream, then freezes it.
"""

from __future__ import annotations

import hashlib
import logging
import os
import pickle
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .numkernel import (
    Optimizer,
    Tensor,
    backward,
    concat,
    cross_entropy,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    relu,
    reshape,
    softmax,
    transpose,
)

log = logging.getLogger(__name__)

KINDS = ("frozen_random", "frozen_pretrained_toy", "tiny_transformer")
# config strings from the original toolbox map onto the single pre-fit regime
BACKBONE_ALIASES = {
    "vit_base_patch16_224": "frozen_pretrained_toy",
    "vit_base_patch16_224_in21k": "frozen_pretrained_toy",
    "vit-b/16-in1k": "frozen_pretrained_toy",
    "vit-b/16-in21k": "frozen_pretrained_toy",
}


class SpecError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "frozen_pretrained_toy"
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    token_count: int = 16
    seed: int = 1993
    input_dim: int = 32
    mlp_ratio: int = 2
    # auxiliary pre-fit task (frozen_pretrained_toy only)
    aux_classes: int = 64
    aux_per_class: int = 16
    aux_epochs: int = 8

    def validate(self) -> None:
        kind = BACKBONE_ALIASES.get(self.kind.lower(), self.kind)
        if kind not in KINDS:
            raise SpecError(f"unknown backbone kind {self.kind!r}; expected one of {KINDS}")
        if self.embed_dim % self.heads:
            raise SpecError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        for name in ("embed_dim", "depth", "heads", "token_count", "input_dim"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")

    @property
    def resolved_kind(self) -> str:
        return BACKBONE_ALIASES.get(self.kind.lower(), self.kind)


@dataclass
class PromptInjection:
    """Prompt tokens for a set of layers.

    ``prompts`` maps a layer index to ``[p x d]`` (shared by the batch) or
    ``[B x p x d]`` (per sample).  In ``prepend`` mode the tokens enter the
    sequence right after the class token at that layer and stay until the next
    prepend layer replaces them.  In ``prefix_kv`` mode they are projected to
    extra keys/values of that layer's attention; queries are untouched.
    """

    mode: str
    prompts: dict[int, Tensor]

    @property
    def layer_set(self) -> list[int]:
        return sorted(self.prompts)


PET_VARIANTS = ("adapter", "ssf", "vpt_shallow", "vpt_deep", "full")


class PETModule:
    """Parameter-efficient tuning state attached to a frozen encoder."""

    def __init__(self, variant: str, embed_dim: int, depth: int, *, bottleneck: int = 16,
                 prompt_len: int = 4, sites=None, seed: int = 0, adapter_scale: float = 0.1):
        if variant not in PET_VARIANTS:
            raise ConfigurationError(f"unknown PET variant {variant!r}; expected one of {PET_VARIANTS}")
        self.variant = variant
        self.embed_dim = embed_dim
        self.depth = depth
        self.adapter_scale = adapter_scale
        rng = np.random.default_rng(seed)
        d = embed_dim
        self.sites = list(range(depth)) if sites is None else list(sites)
        for s in self.sites:
            if not 0 <= s < depth:
                raise ConfigurationError(f"PET site {s} outside depth {depth}")
        self.params: dict[str, Tensor] = {}
        if variant == "adapter":
            for s in self.sites:
                self.params[f"down{s}"] = Tensor(rng.normal(0, 1 / np.sqrt(d), (d, bottleneck)), True)
                self.params[f"down_b{s}"] = Tensor(np.zeros(bottleneck), True)
                # zero up-projection: identity at init
                self.params[f"up{s}"] = Tensor(np.zeros((bottleneck, d)), True)
                self.params[f"up_b{s}"] = Tensor(np.zeros(d), True)
        elif variant == "ssf":
            for s in self.sites:
                self.params[f"gamma{s}"] = Tensor(np.ones(d), True)
                self.params[f"beta{s}"] = Tensor(np.zeros(d), True)
        elif variant == "vpt_shallow":
            self.params["prompt0"] = Tensor(rng.uniform(-0.1, 0.1, (prompt_len, d)), True)
        elif variant == "vpt_deep":
            for layer in range(depth):
                self.params[f"prompt{layer}"] = Tensor(rng.uniform(-0.1, 0.1, (prompt_len, d)), True)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def prompt_for(self, layer: int) -> Tensor | None:
        if self.variant in ("vpt_shallow", "vpt_deep"):
            return self.params.get(f"prompt{layer}")
        return None

    def adapter(self, layer: int, h_norm: Tensor) -> Tensor | None:
        if self.variant != "adapter" or layer not in self.sites:
            return None
        p = self.params
        z = relu(matmul(h_norm, p[f"down{layer}"]) + p[f"down_b{layer}"])
        return (matmul(z, p[f"up{layer}"]) + p[f"up_b{layer}"]) * self.adapter_scale

    def scale_shift(self, layer: int, h: Tensor) -> Tensor:
        if self.variant != "ssf" or layer not in self.sites:
            return h
        return h * self.params[f"gamma{layer}"] + self.params[f"beta{layer}"]


def _init_params(spec: BackboneSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    d, L = spec.embed_dim, spec.depth
    patch = -(-spec.input_dim // spec.token_count)
    hidden = d * spec.mlp_ratio

    def lin(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))

    p = {
        # one embedding matrix per token position keeps pooled tokens full-rank
        "patch_w": rng.normal(0.0, 1.0 / np.sqrt(patch), (spec.token_count, patch, d)),
        "patch_b": np.zeros(d),
        "cls": rng.normal(0.0, 0.02, (1, 1, d)),
        "pos": rng.normal(0.0, 0.02, (1, spec.token_count + 1, d)),
        "norm_g": np.ones(d),
        "norm_b": np.zeros(d),
    }
    for i in range(L):
        p[f"b{i}.ln1_g"] = np.ones(d)
        p[f"b{i}.ln1_b"] = np.zeros(d)
        p[f"b{i}.qkv_w"] = lin(d, 3 * d)
        p[f"b{i}.qkv_b"] = np.zeros(3 * d)
        p[f"b{i}.proj_w"] = lin(d, d) * 0.5
        p[f"b{i}.proj_b"] = np.zeros(d)
        p[f"b{i}.ln2_g"] = np.ones(d)
        p[f"b{i}.ln2_b"] = np.zeros(d)
        p[f"b{i}.fc1_w"] = lin(d, hidden)
        p[f"b{i}.fc1_b"] = np.zeros(hidden)
        p[f"b{i}.fc2_w"] = lin(hidden, d) * 0.5
        p[f"b{i}.fc2_b"] = np.zeros(d)
    return p


class TinyTransformer:
    """Pre-norm transformer encoder returning the normalized class token."""

    def __init__(self, spec: BackboneSpec, params: dict[str, np.ndarray] | None = None):
        spec.validate()
        self.spec = spec
        raw = params if params is not None else _init_params(spec)
        self.params = {k: Tensor(v) for k, v in raw.items()}
        self.trace: dict[int, int] | None = None

    # --------------------------------------------------------------- params
    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    @property
    def depth(self) -> int:
        return self.spec.depth

    def parameters(self, blocks=None) -> list[Tensor]:
        if blocks is None:
            return list(self.params.values())
        prefixes = tuple(f"b{i}." for i in blocks)
        return [v for k, v in self.params.items() if k.startswith(prefixes)]

    def num_parameters(self, blocks=None) -> int:
        return sum(p.size for p in self.parameters(blocks))

    def set_trainable(self, flag: bool, blocks=None) -> TinyTransformer:
        for p in self.parameters(blocks):
            p.requires_grad = flag
        return self

    def copy(self, trainable: bool = False) -> TinyTransformer:
        out = TinyTransformer(self.spec, {k: v.data.copy() for k, v in self.params.items()})
        return out.set_trainable(trainable)

    def digest(self, blocks=None) -> str:
        """SHA-256 over the raw parameter bytes, in name order."""
        h = hashlib.sha256()
        names = sorted(self.params) if blocks is None else sorted(
            k for k in self.params if k.startswith(tuple(f"b{i}." for i in blocks)))
        for k in names:
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # -------------------------------------------------------------- forward
    def embed(self, x) -> Tensor:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.spec.input_dim:
            raise ConfigurationError(
                f"input has {x.shape[1]} features; backbone expects {self.spec.input_dim}")
        B, T = x.shape[0], self.spec.token_count
        patch = self.params["patch_w"].shape[1]
        pad = patch * T - x.shape[1]
        if pad:
            x = np.concatenate([x, np.zeros((B, pad))], axis=1)
        per_pos = Tensor(x.reshape(B, T, patch).transpose(1, 0, 2))
        tokens = transpose(matmul(per_pos, self.params["patch_w"]), (1, 0, 2)) + self.params["patch_b"]
        cls = self.params["cls"] + Tensor(np.zeros((B, 1, self.embed_dim)))
        return concat([cls, tokens], axis=1) + self.params["pos"]

    def block(self, i: int, h: Tensor, prefix: Tensor | None = None,
              pet: PETModule | None = None) -> Tensor:
        p = self.params
        d, H = self.embed_dim, self.spec.heads
        dh = d // H
        B, S = h.shape[0], h.shape[1]
        hn = layer_norm(h, p[f"b{i}.ln1_g"], p[f"b{i}.ln1_b"])
        qkv = matmul(hn, p[f"b{i}.qkv_w"]) + p[f"b{i}.qkv_b"]
        q = qkv[..., :d]
        k = qkv[..., d:2 * d]
        v = qkv[..., 2 * d:]
        if prefix is not None:
            if prefix.ndim == 2:
                prefix = prefix + Tensor(np.zeros((B,) + prefix.shape))
            w_kv = p[f"b{i}.qkv_w"][:, d:]
            b_kv = p[f"b{i}.qkv_b"][d:]
            pkv = matmul(prefix, w_kv) + b_kv
            k = concat([pkv[..., :d], k], axis=1)
            v = concat([pkv[..., d:], v], axis=1)
        Sk = k.shape[1]
        if self.trace is not None:
            self.trace[i] = Sk

        def heads(t, n):
            return transpose(reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

        qh, kh, vh = heads(q, S), heads(k, Sk), heads(v, Sk)
        att = softmax(matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)))
        o = reshape(transpose(matmul(att, vh), (0, 2, 1, 3)), (B, S, d))
        h = h + matmul(o, p[f"b{i}.proj_w"]) + p[f"b{i}.proj_b"]
        hn2 = layer_norm(h, p[f"b{i}.ln2_g"], p[f"b{i}.ln2_b"])
        m = matmul(gelu(matmul(hn2, p[f"b{i}.fc1_w"]) + p[f"b{i}.fc1_b"]), p[f"b{i}.fc2_w"])
        m = m + p[f"b{i}.fc2_b"]
        if pet is not None:
            a = pet.adapter(i, hn2)
            if a is not None:
                m = m + a
        h = h + m
        if pet is not None:
            h = pet.scale_shift(i, h)
        return h

    def run_blocks(self, h: Tensor, start: int, stop: int, injection: PromptInjection | None = None,
                   pet: PETModule | None = None, n_prompt: int = 0) -> tuple[Tensor, int]:
        """Apply blocks ``start..stop-1``; returns the hidden states and the
        number of prepended prompt tokens currently in the sequence."""
        for i in range(start, stop):
            prepend = []
            prefix = None
            if pet is not None and pet.prompt_for(i) is not None:
                prepend.append(pet.prompt_for(i))
            if injection is not None and i in injection.prompts:
                if injection.mode == "prepend":
                    prepend.append(injection.prompts[i])
                else:
                    prefix = injection.prompts[i]
            if prepend:
                B = h.shape[0]
                toks = [t if t.ndim == 3 else t + Tensor(np.zeros((B,) + t.shape)) for t in prepend]
                h = concat([h[:, :1], *toks, h[:, 1 + n_prompt:]], axis=1)
                n_prompt = sum(t.shape[1] for t in toks)
            h = self.block(i, h, prefix, pet)
        return h, n_prompt

    def head(self, h: Tensor) -> Tensor:
        return layer_norm(h[:, 0], self.params["norm_g"], self.params["norm_b"])

    def check_injection(self, injection: PromptInjection | None) -> None:
        if injection is None:
            return
        if injection.mode not in ("prepend", "prefix_kv"):
            raise ConfigurationError(f"unknown injection mode {injection.mode!r}")
        for layer in injection.prompts:
            if not 0 <= layer < self.depth:
                raise ConfigurationError(f"injection layer {layer} outside depth {self.depth}")

    def encode(self, x, injection: PromptInjection | None = None,
               pet: PETModule | None = None) -> Tensor:
        """Class-token feature ``[B x d]``."""
        self.check_injection(injection)
        h, _ = self.run_blocks(self.embed(x), 0, self.depth, injection, pet)
        return self.head(h)

    __call__ = encode


def trainable_params(pet: PETModule | None, backbone: TinyTransformer) -> list[Tensor]:
    """Parameters a PET learner optimizes; ``full`` means the whole encoder."""
    if pet is None or pet.variant == "full":
        return backbone.parameters()
    return pet.parameters()


def encode_batched(model: TinyTransformer, x: np.ndarray, batch_size: int = 256, **kw) -> np.ndarray:
    """No-grad features for a whole array."""
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(model.encode(x[s:s + batch_size], **kw).data)
    if not out:
        return np.zeros((0, model.embed_dim))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- pre-fitting

def _cache_dir() -> Path | None:
    root = os.environ.get("CILFORGE_CACHE", str(Path.home() / ".cache" / "cilforge"))
    if root.lower() in ("", "0", "off", "none"):
        return None
    return Path(root)


_MEMO: dict[BackboneSpec, dict[str, np.ndarray]] = {}


def aux_split(spec: BackboneSpec, held_out_per_class: int = 8):
    """(pre-fit data, held-out draws) of the auxiliary task."""
    from .datastream import synth_blobs

    # aux centers come from their own seed stream, so no stream class reappears
    pair = synth_blobs(spec.aux_classes, spec.aux_per_class, spec.input_dim, spread=0.5,
                       seed=spec.seed + 7_919_000, test_per_class=held_out_per_class)
    return pair.train, pair.test


def _prefit(spec: BackboneSpec) -> dict[str, np.ndarray]:
    model = TinyTransformer(spec).set_trainable(True)
    aux, _ = aux_split(spec, 0)
    rng = np.random.default_rng(spec.seed + 1)
    head_w = Tensor(rng.normal(0, 0.02, (spec.embed_dim, spec.aux_classes)), True)
    head_b = Tensor(np.zeros(spec.aux_classes), True)
    opt = Optimizer(model.parameters() + [head_w, head_b], kind="adam", lr=1e-3, weight_decay=1e-4)
    n = len(aux.y)
    for epoch in range(spec.aux_epochs):
        order = rng.permutation(n)
        for s in range(0, n, 64):
            idx = order[s:s + 64]
            logits = matmul(model.encode(aux.x[idx]), head_w) + head_b
            loss = cross_entropy(logits, aux.y[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
        log.debug("toy pre-fit epoch %d loss %.4f", epoch, loss.item())
    return model.state()


def build_backbone(spec: BackboneSpec) -> TinyTransformer:
    """Deterministic frozen extractor for ``spec``."""
    spec.validate()
    kind = spec.resolved_kind
    if kind != "frozen_pretrained_toy":
        return TinyTransformer(spec).set_trainable(False)
    # aliases share one cache entry
    spec = replace(spec, kind=kind)
    key = spec
    if key not in _MEMO:
        cache = _cache_dir()
        digest = hashlib.sha256(repr(sorted(asdict(spec).items())).encode()).hexdigest()[:20]
        path = cache / f"prefit-{digest}.pkl" if cache else None
        if path is not None and path.exists():
            with open(path, "rb") as fh:
                _MEMO[key] = pickle.load(fh)
        else:
            log.info("pre-fitting toy backbone (%s)", digest)
            _MEMO[key] = _prefit(spec)
            if path is not None:
                try:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    tmp = path.with_suffix(f".{os.getpid()}.tmp")
                    with open(tmp, "wb") as fh:
                        pickle.dump(_MEMO[key], fh)
                    os.replace(tmp, path)
                except OSError:
                    log.warning("could not write backbone cache at %s", path)
    params = {k: v.copy() for k, v in _MEMO[key].items()}
    return TinyTransformer(spec, params).set_trainable(False)
