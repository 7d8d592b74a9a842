import numpy as np
import pytest

from pyra import numerics as nx
from pyra.arch import ArchSpec
from pyra.merge import ScheduleError
from pyra.modulation import PyraConfig
from pyra.numerics import DimensionError, Tensor
from pyra.schedule import published_schedule
from pyra.vit import (
    block_forward,
    count_params,
    count_params_for,
    forward,
    forward_tokens,
    init_model,
    lora_qkv_forward,
    patch_embed,
)

from oracles import textbook_block

TINY = ArchSpec.preset("tiny")


def images(n=2, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 1, 16, 16))


def test_patch_embed_shape_single_image():
    m = init_model(TINY)
    assert patch_embed(images(1)[0], m).shape == (17, 32)
    assert patch_embed(images(3), m).shape == (3, 17, 32)


def test_patch_embed_zero_everything_leaves_cls():
    m = init_model(TINY)
    for t in (m.patch_weight, m.patch_bias, m.pos_embed):
        t.data[...] = 0.0
    out = patch_embed(np.zeros((1, 16, 16)), m).data
    np.testing.assert_array_equal(out[1:], 0.0)
    np.testing.assert_array_equal(out[0], m.cls_token.data[0])


def test_patch_embed_matches_manual_patches():
    m = init_model(TINY, seed=3)
    img = images(1)[0]
    out = patch_embed(img, m).data
    patch = img[0, 4:8, 8:12].reshape(-1)  # row 1, column 2 of the 4x4 grid
    expect = m.patch_weight.data @ patch + m.patch_bias.data + m.pos_embed.data[1 + 4 * 1 + 2]
    np.testing.assert_allclose(out[1 + 4 * 1 + 2], expect, rtol=1e-12)


def test_patch_embed_rejects_wrong_size():
    with pytest.raises(DimensionError):
        patch_embed(np.zeros((1, 12, 12)), init_model(TINY))


def test_fresh_adapter_is_bitwise_base_projection():
    m = init_model(TINY, lora_rank=4)
    x = np.random.default_rng(1).normal(size=(17, 32))
    block = m.blocks[0]
    base = lora_qkv_forward(x, block, None).data
    np.testing.assert_array_equal(lora_qkv_forward(x, block, m.adapters[0]).data, base)


def test_adapter_branch_is_plain_low_rank_product():
    m = init_model(TINY, lora_rank=4)
    a = m.adapters[0]
    a.B.data = np.random.default_rng(2).normal(size=a.B.shape)
    x = np.random.default_rng(1).normal(size=(17, 32))
    got = lora_qkv_forward(x, m.blocks[0], a).data
    expect = x @ (m.blocks[0].qkv.data + a.B.data @ a.A.data).T
    np.testing.assert_allclose(got, expect, rtol=1e-10, atol=1e-12)


def _np_weights(block):
    return {k: getattr(block, k).data for k in block.__dataclass_fields__}


def test_block_without_merging_matches_textbook_block():
    m = init_model(TINY, lora_rank=4, seed=5)
    rng = np.random.default_rng(0)
    for name in ("qkv_bias", "attn_out_bias", "ffn_in_bias", "ffn_out_bias", "norm1_weight", "norm2_bias"):
        t = getattr(m.blocks[1], name)
        t.data = t.data + 0.1 * rng.normal(size=t.shape)
    m.adapters[1].B.data = 0.05 * rng.normal(size=m.adapters[1].B.shape)
    x = rng.normal(size=(1, 17, 32))
    got, sizes = block_forward(x, 1, m)
    a = m.adapters[1]
    expect = textbook_block(x[0], _np_weights(m.blocks[1]), TINY.H, lora=(a.A.data, a.B.data))
    np.testing.assert_allclose(got.data[0], expect, rtol=1e-10, atol=1e-12)
    assert sizes.tolist() == [[1] * 17]


def test_block_with_merge_drops_r_tokens():
    m = init_model(TINY, schedule=[2, 2, 2, 2])
    out, sizes = block_forward(np.random.default_rng(0).normal(size=(2, 17, 32)), 0, m)
    assert out.shape == (2, 15, 32)
    assert sizes.sum(1).tolist() == [17, 17]


def test_token_count_after_each_layer():
    sched = [4, 3, 2, 1]
    m = init_model(TINY, schedule=sched)
    x = patch_embed(images(2), m)
    sizes = None
    for l in range(4):
        x, sizes = block_forward(x, l, m, sizes)
        assert x.shape[1] == 17 - sum(sched[: l + 1])
    assert np.all(sizes[:, 0] == 1)


def test_infeasible_schedule_rejected():
    with pytest.raises(ScheduleError):
        init_model(TINY, schedule=[9, 0, 0, 0])
    with pytest.raises(ScheduleError):
        init_model(TINY, schedule=[8, 4, 2, 2])


def test_full_merge_schedule_keeps_one_mergeable_token():
    m = init_model(TINY, schedule=[8, 4, 2, 1])
    x, sizes = forward_tokens(images(2), m)
    assert x.shape[1] == 2 and sizes[:, 1].tolist() == [16, 16]


def test_forward_shapes_and_probabilities():
    m = init_model(TINY, schedule=[2, 2, 2, 2], pyra=PyraConfig())
    single = forward(images(1)[0], m)
    assert single.shape == (4,)
    p = nx.softmax(forward(images(3), m)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_zero_head_single_class_logit_is_zero():
    arch = TINY.replace(num_classes=1)
    m = init_model(arch)
    m.head_weight.data[...] = 0.0
    assert forward(images(1)[0], m).data.tolist() == [0.0]


def test_mean_pool_variant_without_cls():
    arch = TINY.replace(use_cls=False)
    m = init_model(arch, schedule=[2, 2, 2, 2])
    assert forward(images(2), m).shape == (2, 4)


def test_forward_deterministic_across_runs():
    runs = [forward(images(4), init_model(TINY, schedule=[2, 2, 2, 2], seed=9)).data for _ in range(10)]
    for r in runs[1:]:
        np.testing.assert_array_equal(r, runs[0])


def test_batch_and_single_agree():
    m = init_model(TINY, schedule=[3, 2, 2, 1], pyra=PyraConfig())
    batch = forward(images(3), m).data
    for i, img in enumerate(images(3)):
        np.testing.assert_allclose(forward(img, m).data, batch[i], rtol=1e-12, atol=1e-13)


def test_pyra_does_not_shift_backbone_init():
    a = init_model(TINY, schedule=[2, 2, 2, 2], seed=4)
    b = init_model(TINY, schedule=[2, 2, 2, 2], seed=4, pyra=PyraConfig())
    for name, p in a.backbone_parameters().items():
        np.testing.assert_array_equal(p.data, b.named_parameters()[name].data)


def test_fresh_pyra_forward_equals_plain_merging():
    img = images(4)
    for seed in range(5):
        plain = init_model(TINY, schedule=[4, 3, 2, 1], seed=seed)
        pyra = init_model(TINY, schedule=[4, 3, 2, 1], seed=seed, pyra=PyraConfig())
        np.testing.assert_array_equal(forward(img, plain).data, forward(img, pyra).data)


def test_random_partition_mode_runs_deterministically():
    m = init_model(TINY, schedule=[2, 2, 2, 2], partition_mode="random", seed=1)
    np.testing.assert_array_equal(forward(images(2), m).data, forward(images(2), m).data)


def test_backbone_receives_no_gradient():
    m = init_model(TINY, schedule=[2, 2, 2, 2], pyra=PyraConfig())
    nx.backward(nx.cross_entropy(forward(images(2), m), np.array([0, 1])))
    for p in m.backbone_parameters().values():
        assert p.grad is None and not p.requires_grad
    assert all(p.grad is not None for p in m.trainable_parameters().values())


# --------------------------------------------------------------------------- parameter accounting


def test_trainable_set_is_adapters_generators_head():
    m = init_model(TINY, lora_rank=4, schedule=[2, 2, 2, 2], pyra=PyraConfig())
    prefixes = {k.split(".")[0] for k in m.trainable_parameters()}
    assert prefixes == {"lora", "pyra", "head"}
    assert len(m.adapters) == len(m.blocks) == TINY.L


def test_no_adapters_no_pyra_trains_head_only():
    m = init_model(TINY, lora_rank=None)
    assert set(m.trainable_parameters()) == {"head.weight", "head.bias"}
    rep = count_params(m)
    assert rep.trainable == 4 * 32 + 4 and rep.adapters == rep.generators == 0


def test_adapter_count_per_layer():
    m = init_model(TINY, lora_rank=3)
    assert m.adapters[0].A.size + m.adapters[0].B.size == 32 * 3 + 3 * 32 * 3


def test_vit_b_counts():
    rep = count_params_for(ArchSpec.preset("vit_b"), lora_rank=8, schedule=published_schedule("vit_b_high"), pyra=PyraConfig())
    assert rep.adapters == 294_912
    assert rep.generators == 9_408
    assert round(rep.backbone / 1e6) == 86
    assert f"{rep.adapters / 1e6:.2f}M" == "0.29M"
    assert f"{100 * rep.adapters / rep.backbone:.2f}%" == "0.34%"
    assert f"+{rep.generators / 1e3:.1f}K" == "+9.4K"


def test_vit_l_counts():
    rep = count_params_for(ArchSpec.preset("vit_l"), lora_rank=12, schedule=published_schedule("vit_l_high"), pyra=PyraConfig())
    assert rep.adapters == 1_179_648
    assert rep.generators == 24_768
    assert round(rep.backbone / 1e6) == 303
    assert f"{rep.adapters / 1e6:.2f}M" == "1.18M"
    assert f"{100 * rep.adapters / rep.backbone:.2f}%" == "0.39%"
    assert f"+{rep.generators / 1e3:.0f}K" == "+25K"


@pytest.mark.parametrize(
    "cfg",
    [None, PyraConfig(), PyraConfig(mode="gated"), PyraConfig(mode="direct_W"), PyraConfig(rank_s=2)],
)
def test_analytic_count_matches_allocated(cfg):
    sched = [3, 2, 2, 1]
    m = init_model(TINY, lora_rank=4, schedule=sched, pyra=cfg)
    assert count_params(m) == count_params_for(TINY, 4, sched, cfg)


def test_head_reported_both_ways():
    rep = count_params_for(ArchSpec.preset("vit_b"), lora_rank=8)
    assert rep.head == 768 * 1000 + 1000
    assert rep.percent > rep.percent_with_head
