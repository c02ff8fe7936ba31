import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cilforge.backbone import (BackboneSpec, ConfigurationError, PETModule, PromptInjection,
                               SpecError, TinyTransformer, build_backbone, trainable_params)
from cilforge.numkernel import Tensor, backward, tsum

from helpers import TINY


def x_for(spec, n=3, seed=0):
    return np.random.default_rng(seed).normal(size=(n, spec.input_dim))


def test_same_spec_same_weights():
    a, b = build_backbone(TINY), build_backbone(TINY)
    assert a.digest() == b.digest()
    x = x_for(TINY)
    np.testing.assert_array_equal(a.encode(x).data, b.encode(x).data)


def test_frozen_random_feature_dim():
    m = build_backbone(BackboneSpec(kind="frozen_random", embed_dim=16, heads=4, depth=1, input_dim=8))
    assert m.encode(x_for(m.spec, 5)).shape == (5, 16)


def test_all_parameters_frozen():
    assert not any(p.requires_grad for p in build_backbone(TINY).parameters())


def test_spec_error_on_indivisible_heads():
    with pytest.raises(SpecError):
        build_backbone(BackboneSpec(kind="frozen_random", embed_dim=10, heads=4))


def test_unknown_kind():
    with pytest.raises(SpecError):
        build_backbone(BackboneSpec(kind="resnet18"))


def test_alias_resolves_to_pretrained_toy():
    assert BackboneSpec(kind="vit_base_patch16_224_in21k").resolved_kind == "frozen_pretrained_toy"


def test_injection_layer_out_of_range():
    m = build_backbone(TINY)
    inj = PromptInjection("prepend", {TINY.depth: Tensor(np.zeros((2, TINY.embed_dim)))})
    with pytest.raises(ConfigurationError):
        m.encode(x_for(TINY), inj)


def test_empty_injection_equals_plain_forward():
    m = build_backbone(TINY)
    x = x_for(TINY)
    np.testing.assert_array_equal(m.encode(x, PromptInjection("prepend", {})).data, m.encode(x).data)


@pytest.mark.parametrize("p", [0, 1, 4, 16])
@pytest.mark.parametrize("mode", ["prepend", "prefix_kv"])
def test_feature_dim_invariant_to_prompt_count(p, mode):
    m = build_backbone(TINY)
    inj = PromptInjection(mode, {0: Tensor(np.full((p, TINY.embed_dim), 0.1))}) if p else None
    assert m.encode(x_for(TINY), inj).shape == (3, TINY.embed_dim)


def test_prepend_adds_keys_at_injected_layer_only():
    spec = BackboneSpec(kind="frozen_random", embed_dim=16, depth=3, heads=2, token_count=16, input_dim=8)
    m = build_backbone(spec)
    m.trace = {}
    m.encode(x_for(spec), PromptInjection("prepend", {1: Tensor(np.zeros((4, 16)))}))
    # class token + patch tokens, plus 4 prompts from layer 1 on
    assert m.trace == {0: 17, 1: 21, 2: 21}


def test_prefix_kv_leaves_query_length():
    spec = TINY
    m = build_backbone(spec)
    m.trace = {}
    h = m.embed(x_for(spec))
    out = m.block(0, h, prefix=Tensor(np.zeros((3, spec.embed_dim))))
    assert out.shape == h.shape and m.trace[0] == h.shape[1] + 3


def test_ssf_identity_at_init():
    m = build_backbone(TINY)
    pet = PETModule("ssf", TINY.embed_dim, TINY.depth)
    x = x_for(TINY)
    np.testing.assert_allclose(m.encode(x, pet=pet).data, m.encode(x).data, atol=1e-12)


def test_adapter_identity_at_init():
    m = build_backbone(TINY)
    pet = PETModule("adapter", TINY.embed_dim, TINY.depth, bottleneck=3)
    x = x_for(TINY)
    np.testing.assert_allclose(m.encode(x, pet=pet).data, m.encode(x).data, atol=1e-12)


def test_trainable_param_counts():
    spec = BackboneSpec(kind="frozen_random", embed_dim=16, depth=2, heads=2, input_dim=8)
    m = build_backbone(spec)
    ssf = PETModule("ssf", 16, 2, sites=[0])
    assert sum(p.size for p in trainable_params(ssf, m)) == 32
    vpt = PETModule("vpt_shallow", 16, 2, prompt_len=4)
    assert sum(p.size for p in trainable_params(vpt, m)) == 64
    full = PETModule("full", 16, 2)
    assert sum(p.size for p in trainable_params(full, m)) == m.num_parameters()


def test_unknown_pet_variant():
    with pytest.raises(ConfigurationError):
        PETModule("lora", 8, 2)


def test_gradient_reaches_only_prompts():
    m = build_backbone(TINY)
    before = m.digest()
    prompt = Tensor(np.full((2, TINY.embed_dim), 0.1), True)
    loss = tsum(m.encode(x_for(TINY), PromptInjection("prefix_kv", {1: prompt})))
    backward(loss)
    assert prompt.grad is not None and np.any(prompt.grad)
    assert all(p.grad is None for p in m.parameters())
    assert m.digest() == before


def test_pretrained_toy_beats_chance_on_held_out_aux():
    # linear probe: nearest class mean on held-out auxiliary blobs
    from cilforge.backbone import aux_split
    spec = BackboneSpec(kind="frozen_pretrained_toy")
    m = build_backbone(spec)
    train, test = aux_split(spec)
    ftr, fte = m.encode(train.x).data, m.encode(test.x).data
    means = np.stack([ftr[train.y == c].mean(0) for c in range(spec.aux_classes)])
    pred = np.argmin(((fte[:, None] - means[None]) ** 2).sum(-1), axis=1)
    assert (pred == test.y).mean() > 2.0 / spec.aux_classes


@given(st.integers(0, 2**31), st.integers(1, 4))
def test_copy_preserves_digest(seed, n):
    spec = BackboneSpec(kind="frozen_random", embed_dim=8, depth=1, heads=2, token_count=2,
                        input_dim=4, seed=seed)
    m = TinyTransformer(spec)
    c = m.copy(trainable=True)
    assert c.digest() == m.digest()
    assert all(p.requires_grad for p in c.parameters())
    x = np.random.default_rng(seed).normal(size=(n, 4))
    np.testing.assert_array_equal(c.encode(x).data, m.encode(x).data)
