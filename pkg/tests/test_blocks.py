"""Backbone stage, attention head, reconstructor, and checkpoint tests."""

import numpy as np
import pytest

from localsup import blocks, tensor as T
from localsup.blocks import (
    CheckpointError,
    ConfigError,
    Conv,
    GatedAttentionHead,
    NetworkPartition,
    Reconstructor,
    Relu,
    Stage,
    StagePlan,
    compact_backbone_plans,
    desk_backbone_plans,
    load_checkpoint,
    plan_output_shape,
    save_checkpoint,
)
from localsup.rfr import SamplerConfig
from localsup.tensor import Graph, Tensor, backward, gradient_check


def make_stage(layers, in_channels, seed=0, frozen=False):
    return Stage(StagePlan(list(layers), frozen=frozen), in_channels,
                 np.random.default_rng(seed))


def test_identity_conv_stage_preserves_input():
    stage = make_stage([Conv(1, kernel=3, stride=1)], 1)
    w, b = stage._params[0][1], stage._params[1][1]
    w.data[:] = 0.0
    w.data[0, 0, 1, 1] = 1.0
    b.data[:] = 0.0
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 9, 9)))
    out = stage(x)
    np.testing.assert_array_equal(out.data, x.data)


def test_stride_two_stage_halves_spatial():
    stage = make_stage([Conv(5, kernel=3, stride=2), Relu()], 3)
    out = stage(Tensor(np.zeros((1, 3, 64, 64))))
    assert out.shape == (1, 5, 32, 32)


def test_desk_backbone_stage_spatial_sizes_384_stride3():
    # pinned forward-shape oracle: stride-3 stem on 384^2 gives 128/64/32/16
    plans = desk_backbone_plans(k=4, first_conv_stride=3)
    partition = NetworkPartition.build(plans, 3, 2, SamplerConfig(), seed=0)
    h = Tensor(np.zeros((1, 3, 384, 384)))
    sizes = []
    for stage in partition.stages:
        h = stage(h)
        sizes.append(h.data.shape[-1])
    assert sizes == [128, 64, 32, 16]


def test_stage_shape_formula_random_configs():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        cin = int(rng.integers(1, 4))
        layers = []
        for _ in range(int(rng.integers(1, 4))):
            layers.append(Conv(int(rng.integers(1, 5)), kernel=3,
                               stride=int(rng.integers(1, 4))))
            if rng.random() < 0.5:
                layers.append(Relu())
        plan = StagePlan(layers)
        h = int(rng.integers(12, 40))
        w = int(rng.integers(12, 40))
        try:
            expect = plan_output_shape(plan, (cin, h, w))
        except ConfigError:
            continue
        stage = Stage(plan, cin, rng)
        out = stage(Tensor(np.zeros((1, cin, h, w))))
        assert out.shape == (1,) + expect
        assert stage.spatial_stride == int(np.prod([l.stride for l in layers if isinstance(l, Conv)]))


def test_stage_rejects_too_small_input():
    stage = make_stage([Conv(4, kernel=3, stride=2, padding=0),
                        Conv(4, kernel=3, stride=2, padding=0)], 2)
    with pytest.raises(ConfigError, match="too small"):
        stage(Tensor(np.zeros((1, 2, 4, 4))))


def test_frozen_stage_registers_no_parameters():
    stage = make_stage([Conv(4), Relu()], 3, frozen=True)
    assert stage.parameters() == []
    assert all(not p.requires_grad for _, p in stage.named_parameters())


def test_channel_mismatch_raises():
    stage = make_stage([Conv(4)], 3)
    with pytest.raises(T.ShapeMismatchError):
        stage(Tensor(np.zeros((1, 2, 8, 8))))


# ---------------------------------------------------------------------------
# gated attention


def head_for(embed, attn=8, classes=3, seed=0, **kw):
    return GatedAttentionHead(embed, attn, classes, np.random.default_rng(seed), **kw)


def test_single_instance_gets_full_attention():
    head = head_for(5)
    x = Tensor(np.random.default_rng(2).standard_normal((1, 5, 1, 1)))
    bag, attn = head.pool(x)
    np.testing.assert_allclose(attn.data, [1.0])
    np.testing.assert_allclose(bag.data.reshape(-1), x.data.reshape(-1))


def test_identical_instances_share_attention():
    head = head_for(4)
    col = np.random.default_rng(3).standard_normal(4)
    x = Tensor(np.stack([col, col], axis=-1).reshape(1, 4, 1, 2))
    _, attn = head.pool(x)
    np.testing.assert_allclose(attn.data, [0.5, 0.5], atol=1e-15)


def test_attention_normalized_for_random_inputs():
    rng = np.random.default_rng(4)
    head = head_for(6)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        h = Tensor(rng.standard_normal((n, 6)) * 3)
        attn = head.attend(h)
        assert np.all(attn.data >= 0)
        assert abs(attn.data.sum() - 1.0) < 1e-12


def test_bag_embedding_permutation_invariant():
    rng = np.random.default_rng(5)
    head = head_for(8)
    x = rng.standard_normal((1, 8, 4, 6))
    base, _ = head.pool(Tensor(x))
    flat = x.reshape(8, 24)
    for _ in range(100):
        perm = rng.permutation(24)
        xp = flat[:, perm].reshape(1, 8, 4, 6)
        bag, _ = head.pool(Tensor(xp))
        assert np.max(np.abs(bag.data - base.data)) < 1e-12


def test_logits_permutation_invariant_and_layout_agnostic():
    rng = np.random.default_rng(6)
    head = head_for(5, classes=4)
    inst = rng.standard_normal((5, 8))
    as_row = Tensor(inst.T.copy().reshape(1, 5, 1, 8))
    as_grid = Tensor(inst.T.copy().reshape(1, 5, 2, 4))
    l1 = head(as_row)
    l2 = head(as_grid)
    np.testing.assert_allclose(l1.data, l2.data, atol=1e-12)


def test_zero_final_linear_gives_uniform_softmax():
    head = head_for(4, classes=3)
    head.cls_w.data[:] = 0.0
    head.cls_b.data[:] = 0.0
    logits = head(Tensor(np.random.default_rng(7).standard_normal((1, 4, 3, 3))))
    probs = T.softmax(logits)
    np.testing.assert_allclose(probs.data, np.full(3, 1 / 3), atol=1e-15)


def test_head_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    head = head_for(4, attn=4, classes=3)
    x = Tensor(rng.standard_normal((1, 4, 2, 3)), requires_grad=True)

    def f():
        return T.cross_entropy(head(x), 1)

    assert gradient_check(f, [x] + head.parameters()) < 1e-5


def test_instance_cap_pools_large_maps():
    head = head_for(3, instance_cap=4)
    x = Tensor(np.random.default_rng(9).standard_normal((1, 3, 8, 8)))
    _, attn = head.pool(x)
    assert attn.shape == (4,)   # 64 instances pooled down to a 2x2 grid


def test_ungated_head_has_no_gate_parameters():
    head = head_for(4, gated=False)
    assert head.U is None
    names = [n for n, _ in head.named_parameters()]
    assert "head.U" not in names


# ---------------------------------------------------------------------------
# reconstructor


def test_reconstructor_stride1_preserves_spatial():
    r = Reconstructor(4, 3, 1, np.random.default_rng(0))
    out = r(Tensor(np.zeros((2, 4, 8, 8))))
    assert out.shape == (2, 3, 8, 8)


def test_reconstructor_stride2_doubles_spatial():
    r = Reconstructor(4, 2, 2, np.random.default_rng(0))
    out = r(Tensor(np.zeros((1, 4, 8, 8))))
    assert out.shape == (1, 2, 16, 16)


def test_reconstructor_stride_mismatch_fails_at_build():
    cls = GatedAttentionHead(4, 4, 2, np.random.default_rng(0))
    recon = Reconstructor(4, 3, 2, np.random.default_rng(0))
    with pytest.raises(ConfigError, match="stride"):
        blocks.AuxiliaryModel(cls, recon, SamplerConfig(), stage_stride=4)


# ---------------------------------------------------------------------------
# partition


def test_partition_counts_and_compatibility():
    plans = desk_backbone_plans(k=4)
    part = NetworkPartition.build(plans, 3, 3, SamplerConfig(), seed=1)
    assert part.k == 4
    assert len(part.aux) == 3
    assert part.head.embed_dim == part.stages[-1].out_channels


def test_partition_rejects_wrong_aux_count():
    plans = desk_backbone_plans(k=2)
    part = NetworkPartition.build(plans, 3, 2, SamplerConfig(), seed=0)
    with pytest.raises(ConfigError, match="K-1"):
        NetworkPartition(part.stages, part.head, [])


def test_partition_build_deterministic():
    plans = compact_backbone_plans(k=3)
    a = NetworkPartition.build(plans, 3, 3, SamplerConfig(), seed=42)
    b = NetworkPartition.build(compact_backbone_plans(k=3), 3, 3, SamplerConfig(), seed=42)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data)


def test_invalid_k_rejected():
    with pytest.raises(ConfigError):
        desk_backbone_plans(k=3)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    plans = compact_backbone_plans(k=2)
    part = NetworkPartition.build(plans, 3, 2, SamplerConfig(), seed=5)
    named = part.named_parameters()
    before = {n: p.data.copy() for n, p in named}
    save_checkpoint(tmp_path / "ckpt", named)
    for _, p in named:
        p.data = p.data + 1.0
    load_checkpoint(tmp_path / "ckpt", named)
    for n, p in named:
        assert np.array_equal(p.data, before[n]), n


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    part = NetworkPartition.build(compact_backbone_plans(k=2), 3, 2, SamplerConfig(), seed=5)
    save_checkpoint(tmp_path / "ckpt", part.named_parameters())
    other = NetworkPartition.build(compact_backbone_plans(k=2), 3, 4, SamplerConfig(), seed=5)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(tmp_path / "ckpt", other.named_parameters())


def test_checkpoint_missing_parameter_rejected(tmp_path):
    part = NetworkPartition.build(compact_backbone_plans(k=2), 3, 2, SamplerConfig(), seed=5)
    named = part.named_parameters()
    save_checkpoint(tmp_path / "ckpt", named[:-1])
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "ckpt", named)
