import numpy as np
import pytest
import torch

from unimov.checkpoint import load_arrays, load_module, save_arrays, save_module
from unimov.errors import GroupingError, NumericError, ParameterError
from unimov.extractor import (
    FUSION_MODES,
    AlignmentNet,
    AttentionBlock,
    ExtractorConfig,
    HierarchicalExtractor,
    PointwiseExtractor,
    apply_transform,
    extract,
    farthest_point_sample,
    gated_residual,
    knn_indices,
)
from unimov.gradcheck import check_module

from conftest import random_cloud

SMALL = dict(n_layers=2, embed_dim=16, n_patches=8, neighbors_per_patch=8, n_heads=2)


def small(seed=0, **kw):
    torch.manual_seed(seed)
    return HierarchicalExtractor(ExtractorConfig(**{**SMALL, **kw}))


def inputs(n=96, batch=1, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, n, 3, generator=g, dtype=dtype), torch.rand(batch, n, 3, generator=g, dtype=dtype) - 0.5


# ---------------------------------------------------------------------------
# config


@pytest.mark.parametrize(
    "kw",
    [dict(mask_ratio=1.0), dict(mask_ratio=-0.1), dict(n_layers=0), dict(fusion_mode="bogus"), dict(embed_dim=10, n_heads=4)],
)
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        ExtractorConfig(**kw)


def test_fusion_mode_flags():
    flags = {m: (ExtractorConfig(fusion_mode=m).use_local, ExtractorConfig(fusion_mode=m).use_global, ExtractorConfig(fusion_mode=m).use_attn) for m in FUSION_MODES}
    assert flags == {
        "local_only": (True, False, False),
        "global_only": (False, True, False),
        "local_global": (True, True, False),
        "local_attn": (True, False, True),
        "global_attn": (False, True, True),
        "local_global_attn": (True, True, True),
    }


# ---------------------------------------------------------------------------
# alignment


def test_untrained_alignment_is_identity():
    xyz, _ = inputs()
    out, transform = AlignmentNet()(xyz)
    assert torch.equal(transform[0], torch.eye(4))
    assert torch.allclose(out, xyz, atol=0, rtol=0)


def test_pure_translation():
    p = torch.randn(1, 20, 3, dtype=torch.float64)
    t = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64)
    m = torch.eye(4, dtype=torch.float64).unsqueeze(0).clone()
    m[0, :3, 3] = t
    assert torch.allclose(apply_transform(p, m), p + t, atol=1e-12)


def test_affine_matches_homogeneous_product():
    g = torch.Generator().manual_seed(2)
    p = torch.randn(2, 15, 3, generator=g, dtype=torch.float64)
    m = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
    m[:, 3] = torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=torch.float64)
    homog = torch.cat([p, torch.ones(2, 15, 1, dtype=torch.float64)], -1)
    expected = torch.einsum("bij,bnj->bni", m, homog)[..., :3]
    assert torch.allclose(apply_transform(p, m), expected, atol=1e-6)


def test_alignment_last_row_fixed_after_training_step():
    net = AlignmentNet()
    xyz, _ = inputs()
    opt = torch.optim.SGD(net.parameters(), lr=0.1)
    net(xyz)[0].pow(2).sum().backward()
    opt.step()
    _, transform = net(xyz)
    assert torch.equal(transform[0, 3], torch.tensor([0.0, 0.0, 0.0, 1.0]))
    assert not torch.equal(transform[0, :3], torch.eye(3, 4))


def test_non_finite_input_raises():
    xyz, feats = inputs()
    xyz[0, 3, 1] = float("nan")
    with pytest.raises(NumericError):
        small()(xyz, feats)


# ---------------------------------------------------------------------------
# grouping


def test_fps_picks_distinct_spread_points():
    xyz = torch.tensor([[[0.0, 0, 0], [0.1, 0, 0], [5, 0, 0], [0, 5, 0], [0.05, 0.05, 0]]])
    idx = farthest_point_sample(xyz, 3)[0].tolist()
    assert len(set(idx)) == 3
    assert {2, 3} <= set(idx)


def test_knn_matches_sorted_distances():
    g = torch.Generator().manual_seed(4)
    xyz = torch.randn(1, 30, 3, generator=g)
    q = torch.randn(1, 5, 3, generator=g)
    idx = knn_indices(xyz, q, 4)[0]
    for i in range(5):
        d = ((xyz[0] - q[0, i]) ** 2).sum(-1)
        assert set(idx[i].tolist()) == set(d.argsort()[:4].tolist())


def test_more_patches_than_points_is_a_grouping_error():
    with pytest.raises(GroupingError):
        small()(*inputs(n=5))
    with pytest.raises(GroupingError):
        farthest_point_sample(torch.zeros(1, 3, 3), 4)


# ---------------------------------------------------------------------------
# residual linking


def test_gated_residual_elementwise():
    g = torch.Generator().manual_seed(0)
    h, prev, w = (torch.randn(2, 8, 16, generator=g, dtype=torch.float64) for _ in range(3))
    expected = h.clone()
    for idx in np.ndindex(*h.shape):
        expected[idx] = h[idx] + w[idx] * prev[idx]
    assert torch.allclose(gated_residual(h, w, prev), expected, rtol=1e-12, atol=0)
    assert gated_residual(h, w, None) is h


def _branch_inputs(dtype=torch.float64):
    g = torch.Generator().manual_seed(1)
    return (
        torch.randn(2, 8, 32, generator=g, dtype=dtype),
        torch.randn(2, 8, 3, generator=g, dtype=dtype),
    )


@pytest.mark.parametrize("branch", ["local", "global_"])
def test_zero_gate_is_bit_equal_to_no_linking(branch):
    layer = small().double().eval().layers[1]
    b = getattr(layer, branch)
    x, c = _branch_inputs()
    h = b.encode(x, c)
    prev = torch.randn_like(h)
    assert torch.equal(b(x, c, prev, torch.zeros(16, dtype=torch.float64)), h)


@pytest.mark.parametrize("branch", ["local", "global_"])
def test_unit_gate_with_prev_equal_h_doubles(branch):
    layer = small().double().eval().layers[1]
    b = getattr(layer, branch)
    x, c = _branch_inputs()
    h = b.encode(x, c)
    assert torch.allclose(b(x, c, h, torch.ones(16, dtype=torch.float64)), 2 * h, rtol=1e-12, atol=0)


@pytest.mark.parametrize("branch", ["local", "global_"])
def test_residual_identity(branch):
    layer = small().double().eval().layers[1]
    b = getattr(layer, branch)
    x, c = _branch_inputs()
    h = b.encode(x, c)
    prev, omega = torch.randn_like(h), torch.randn(16, dtype=torch.float64)
    diff = b(x, c, prev, omega) - h
    assert ((diff - omega * prev).abs().max() / (omega * prev).abs().max()).item() <= 1e-6


def test_trace_obeys_residual_identity_inside_the_stack():
    ex = small().double().eval()
    with torch.no_grad():
        ex.layers[1].omega1.fill_(0.5)
        ex.layers[1].omega2.fill_(-0.25)
    xyz, feats = inputs(dtype=torch.float64)
    _, _, info = ex(xyz, feats, return_layers=True)
    (l0, g0), (l1, g1) = info["layers"]
    layer = ex.layers[1]
    amap = layer.attention(torch.cat([l0, g0], -1))
    a_l, a_g = amap.split(16, -1)
    x1 = torch.cat([l0, g0], -1)
    h_l = layer.local.encode(x1, info["centers"])
    h_g = layer.global_.encode(x1, info["centers"])
    assert torch.allclose(l1 - h_l, layer.omega1 * a_l * l0, atol=1e-6)
    assert torch.allclose(g1 - h_g, layer.omega2 * a_g * g0, atol=1e-6)


def test_mask_ratio_zero_uses_no_mask_tokens():
    ex = small(mask_ratio=0.0).train()
    xyz, feats = inputs()
    per_point, pooled = ex(xyz, feats, torch.Generator().manual_seed(0))
    assert per_point.shape == (1, 96, 16) and pooled.shape == (1, 16)
    assert torch.isfinite(per_point).all()
    # with nothing masked, training and evaluation compute the same function
    # (evaluation may take the fused attention kernel, hence not bit-equal)
    with torch.no_grad():
        ex.context_gate.fill_(1.0)
        a = ex(xyz, feats)[0]
        b = ex.eval()(xyz, feats)[0]
    assert torch.allclose(a, b, atol=1e-6)


def test_masking_changes_training_output_only_through_the_generator():
    ex = small().train()
    with torch.no_grad():
        ex.context_gate.fill_(1.0)
    xyz, feats = inputs()
    with torch.no_grad():
        a = ex(xyz, feats, torch.Generator().manual_seed(1))[0]
        b = ex(xyz, feats, torch.Generator().manual_seed(1))[0]
        c = ex(xyz, feats, torch.Generator().manual_seed(2))[0]
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


# ---------------------------------------------------------------------------
# attention block


@pytest.mark.parametrize("tokens", [1, 2, 3, 4, 8, 16])
def test_attention_shapes_and_range(tokens):
    block = AttentionBlock(12)
    x = 50 * torch.randn(2, tokens, 12)
    with torch.no_grad():
        out = block(x)
    assert out.shape == (2, tokens, 12)
    assert (out > 0).all() and (out < 1).all()


def test_attention_constant_input_gives_constant_output():
    block = AttentionBlock(8)
    x = torch.randn(1, 1, 8).expand(2, 10, 8)
    with torch.no_grad():
        out = block(x)
    assert torch.allclose(out, out[:, :1].expand_as(out), atol=1e-6)


def test_attention_output_channels():
    assert AttentionBlock(8, 4)(torch.randn(1, 5, 8)).shape == (1, 5, 4)


# ---------------------------------------------------------------------------
# whole extractor


def test_output_shapes():
    ex = small()
    per_point, pooled = ex(*inputs(n=100, batch=3))
    assert per_point.shape == (3, 100, 16)
    assert pooled.shape == (3, 16)
    assert torch.equal(pooled, per_point.max(dim=1).values)


def test_pooled_feature_is_permutation_invariant():
    ex = small()
    with torch.no_grad():
        ex.context_gate.fill_(1.0)
        for layer in ex.layers[1:]:
            layer.omega1.fill_(0.5)
            layer.omega2.fill_(0.5)
    cloud = random_cloud(np.random.default_rng(0), 150)
    _, a = extract(cloud, model=ex)
    _, b = extract(cloud.subset(np.random.default_rng(1).permutation(150)), model=ex)
    assert np.abs(a - b).max() <= 1e-5


def test_zero_gates_make_attention_mode_equal_plain_fusion():
    full = small(seed=3, fusion_mode="local_global_attn").eval()
    plain = HierarchicalExtractor(ExtractorConfig(**{**SMALL, "fusion_mode": "local_global"})).eval()
    plain.load_state_dict(full.state_dict())
    with torch.no_grad():
        full.context_gate.fill_(1.0)
        plain.context_gate.fill_(1.0)
        xyz, feats = inputs()
        assert all(torch.equal(a, b) for a, b in zip(full(xyz, feats), plain(xyz, feats)))


def test_zero_gates_equal_link_free_stack():
    linked = small(seed=4).eval()
    free = HierarchicalExtractor(linked.cfg, linking=False).eval()
    free.load_state_dict(linked.state_dict())
    with torch.no_grad():
        linked.context_gate.fill_(1.0)
        free.context_gate.fill_(1.0)
        xyz, feats = inputs()
        assert all(torch.equal(a, b) for a, b in zip(linked(xyz, feats), free(xyz, feats)))


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_every_fusion_mode_runs(mode):
    ex = small(fusion_mode=mode).eval()
    with torch.no_grad():
        ex.context_gate.fill_(1.0)
        per_point, _, info = ex(*inputs(), return_layers=True)
    assert torch.isfinite(per_point).all()
    f_l, f_g = info["layers"][-1]
    cfg = ex.cfg
    assert bool(f_l.abs().sum()) == cfg.use_local
    assert bool(f_g.abs().sum()) == cfg.use_global


def test_extract_tiles_small_clouds():
    cloud = random_cloud(np.random.default_rng(5), 20)
    per_point, pooled = extract(cloud, ExtractorConfig(**SMALL))
    assert per_point.shape == (20, 16)
    np.testing.assert_array_equal(pooled, per_point.max(axis=0))


def test_pointwise_baseline_shares_init_with_point_path():
    torch.manual_seed(0)
    base = PointwiseExtractor(16)
    ex = small(seed=0)
    for a, b in zip(base.mlp.parameters(), ex.point_path.parameters()):
        assert torch.equal(a, b)
    xyz, feats = inputs()
    per_point, pooled = base(xyz, feats)
    assert torch.equal(pooled, per_point.max(dim=1).values)


def test_extractor_gradients_on_sample():
    ex = small().double().eval()
    with torch.no_grad():
        for layer in ex.layers[1:]:
            layer.omega1.fill_(0.3)
            layer.omega2.fill_(-0.2)
        ex.context_gate.fill_(0.5)
    xyz, feats = inputs(batch=2, dtype=torch.float64, seed=9)
    w = torch.randn(16, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    result = check_module(ex, lambda m: (m(xyz, feats)[1] @ w).sum(), fraction=0.01, seed=1)
    assert result.ok, result


def test_attention_block_gradients():
    block = AttentionBlock(6).double()
    x = torch.randn(2, 9, 6, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    assert check_module(block, lambda m: m(x).sum(), fraction=1.0).ok


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    ex = small(seed=1)
    path = tmp_path / "ex.ckpt"
    save_module(ex, path)
    other = small(seed=2)
    load_module(other, path)
    for (na, a), (nb, b) in zip(ex.state_dict().items(), other.state_dict().items()):
        assert na == nb and torch.equal(a, b)


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "a.ckpt"
    save_arrays({"w": np.array([[1.0, 2.0]]), "s": np.array(3.0)}, path)
    raw = path.read_bytes()
    assert raw[:8] == b"UNIMOVCK"
    # magic, version, count, then "w": name len, name, ndim, dims, 2 floats
    assert raw[8:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert raw[16:21] == (1).to_bytes(4, "little") + b"w"
    assert raw[21:33] == (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[33:41], "<f4").tolist() == [1.0, 2.0]
    back = load_arrays(path)
    assert back["s"].shape == () and back["s"] == 3.0


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ParameterError, match="magic"):
        load_arrays(path)
    save_arrays({"w": np.zeros(10)}, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ParameterError, match="truncated"):
        load_arrays(path)
    save_module(small(n_layers=1), path)
    with pytest.raises(ParameterError, match="mismatch"):
        load_module(small(n_layers=2), path)
