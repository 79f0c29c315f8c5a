import math

import numpy as np
import pytest

from csg3dct import ops
from csg3dct.amdf import (SPATIAL, TEMPORAL, AmdfBlock, FusionAttention, IntraBranch, PatchEmbed, capture_attention,
                          factorized_attention, merge_tokens, split_tokens, swa_fusion, ca_fusion)
from csg3dct.config import ModelConfig
from csg3dct.model import CSG3DCT
from csg3dct.oracles import dense_attention, factorized_mask, layer_norm_affine
from csg3dct.tensor import Tensor, count_ops, default_dtype, no_grad
from csg3dct.verify import ca_equivalence, factorization_gradients

pytestmark = pytest.mark.usefixtures("f64")

T, N_GRID, D, H = 3, 2, 8, 2
L = T * N_GRID ** 2 + 1


def randomize(module, rng, scale=0.4):
    """Replace the near-uniform default init so attention maps are far from flat."""
    for name, p in module.named_parameters():
        if "norm" in name and name.endswith("weight"):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        else:
            p.data[...] = rng.normal(0, scale, p.shape)
    return module


def tokens(rng, n=2, length=L, d=D):
    return Tensor(rng.normal(size=(n, length, d)))


# ---------------------------------------------------------------- tokenisation

def test_token_lengths_toy_and_large_scale():
    assert ModelConfig().num_tokens == 129
    assert ModelConfig(image_size=256, heads=4).num_tokens == 2049
    with default_dtype(np.float32):
        embed = PatchEmbed(16, 32, 4, 16, 16)
        with no_grad():
            z = embed(Tensor(np.zeros((1, 16, 8, 64, 64), np.float32)))
    assert z.shape == (1, 2049, 32)


def test_tokenize_zero_features(rng):
    embed = PatchEmbed(4, D, 2, N_GRID, 8, rng=rng)
    embed.pos_spatial.data[...] = 0
    embed.pos_temporal.data[...] = 0
    z = embed(Tensor(np.zeros((2, 4, T, 4, 4)))).data
    assert z.shape == (2, L, D)
    np.testing.assert_array_equal(z[:, 1:], 0.0)
    np.testing.assert_array_equal(z[:, 0], np.broadcast_to(embed.cls_token.data, (2, D)))


def test_tokenize_rejects_bad_grid(rng):
    embed = PatchEmbed(4, D, 2, N_GRID, 8, rng=rng)
    with pytest.raises(ValueError):
        embed(Tensor(np.zeros((1, 4, T, 6, 6))))
    with pytest.raises(ValueError):
        embed(Tensor(np.zeros((1, 4, 9, 4, 4))))


def test_split_merge_round_trip(rng):
    z = tokens(rng)
    cls, patches = split_tokens(z, T, N_GRID)
    assert patches.shape == (2, T, N_GRID ** 2, D)
    np.testing.assert_array_equal(merge_tokens(cls, patches).data, z.data)
    with pytest.raises(ValueError):
        split_tokens(z, T + 1, N_GRID)


# ---------------------------------------------------------------- factorised attention

def _qkv(rng, length, dh=4):
    return [Tensor(rng.normal(size=(1, H, length, dh))) for _ in range(3)]


@pytest.mark.parametrize("axis", [SPATIAL, TEMPORAL])
def test_factorized_attention_matches_masked_dense_oracle(rng, axis):
    q, k, v = _qkv(rng, L)
    out = factorized_attention(q, k, v, T, N_GRID, axis).data
    ref, attn = dense_attention(q.data[0], k.data[0], v.data[0], factorized_mask(T, N_GRID, axis))
    np.testing.assert_allclose(out[0], ref, atol=1e-12)
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("axis", [SPATIAL, TEMPORAL])
def test_two_token_closed_form(rng, axis):
    q, k, v = _qkv(rng, 2)
    out = factorized_attention(q, k, v, 1, 1, axis).data[0]
    qd, kd, vd = q.data[0], k.data[0], v.data[0]
    for h in range(H):
        for row in range(2):
            s0, s1 = qd[h, row] @ kd[h, 0] / 2.0, qd[h, row] @ kd[h, 1] / 2.0
            w1 = 1.0 / (1.0 + math.exp(s0 - s1))
            np.testing.assert_allclose(out[h, row], (1 - w1) * vd[h, 0] + w1 * vd[h, 1], atol=1e-12)


def test_identical_tokens_receive_equal_weight(rng):
    q, k, v = _qkv(rng, L)
    k.data[0, :, 2] = k.data[0, :, 3]  # patch tokens 1 and 2 of frame 0
    with capture_attention() as rec:
        factorized_attention(q, k, v, T, N_GRID, SPATIAL)
    frame_maps = rec["maps"][1]  # [1, h, t, 1 + n^2 queries, 1 + n^2 keys]
    np.testing.assert_allclose(frame_maps[0, :, 0, :, 2], frame_maps[0, :, 0, :, 3], atol=1e-15)


def test_constant_in_time_tokens_give_uniform_temporal_weights(rng):
    q, k, v = _qkv(rng, L)
    patches = k.data[0, :, 1:].reshape(H, T, N_GRID ** 2, -1)
    patches[:] = patches[:, :1]
    k.data[0, :, 1:] = patches.reshape(H, -1, patches.shape[-1])
    with capture_attention() as rec:
        factorized_attention(q, k, v, T, N_GRID, TEMPORAL)
    m = rec["maps"][1][0]  # [h, n^2 cells, 1 + t queries, 1 + t keys]
    over_time = m[..., 1:]
    np.testing.assert_allclose(over_time, over_time[..., :1] * np.ones(T), atol=1e-15)


def _permute_frames(z, perm, t, n):
    cls, patches = z[:, :1], z[:, 1:].reshape(z.shape[0], t, n * n, -1)
    return np.concatenate([cls, patches[:, perm].reshape(z.shape[0], -1, z.shape[-1])], axis=1)


def _permute_cells(z, perm, t, n):
    cls, patches = z[:, :1], z[:, 1:].reshape(z.shape[0], t, n * n, -1)
    return np.concatenate([cls, patches[:, :, perm].reshape(z.shape[0], -1, z.shape[-1])], axis=1)


@pytest.mark.parametrize("axis, permute, size", [(SPATIAL, _permute_frames, T),
                                                 (TEMPORAL, _permute_cells, N_GRID ** 2)])
def test_branch_permutation_equivariance(rng, axis, permute, size):
    branch = randomize(IntraBranch(D, H, 2, axis, rng=rng), rng)
    z = tokens(rng)
    perm = rng.permutation(size)
    with no_grad():
        out = branch(z, T, N_GRID).data
        out_p = branch(Tensor(permute(z.data, perm, T, N_GRID)), T, N_GRID).data
    np.testing.assert_allclose(out_p, permute(out, perm, T, N_GRID), atol=1e-12)
    np.testing.assert_allclose(out_p[:, 0], out[:, 0], atol=1e-12)


@pytest.mark.parametrize("axis", [SPATIAL, TEMPORAL])
def test_factorization_gradients_exactly_zero(axis):
    cross, same = factorization_gradients(axis, coords=20, seed=3)
    assert cross == 0.0
    assert same > 0.0


# ---------------------------------------------------------------- fusion

def _np_proj(x, lin):
    return x @ lin.weight.data.T + lin.bias.data


def _np_heads(x):
    n, length, d = x.shape
    return x.reshape(n, length, H, d // H).transpose(0, 2, 1, 3)


def _np_unheads(x):
    n, h, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, length, h * dh)


def _np_qkv(fuse, z):
    zn = layer_norm_affine(z, fuse.norm.weight.data, fuse.norm.bias.data)
    return [_np_heads(_np_proj(zn, lin)) for lin in (fuse.q, fuse.k, fuse.v)]


def test_swa_with_shared_branches_is_self_attention(rng):
    fuse = randomize(FusionAttention(D, H, rng=rng), rng)
    z = tokens(rng)
    with no_grad():
        out_s, out_t = swa_fusion(z, z, fuse, fuse)
    q, k, v = _np_qkv(fuse, z.data)
    att = np.stack([dense_attention(q[i], k[i], v[i])[0] for i in range(2)])
    ref = z.data + _np_proj(_np_unheads(att), fuse.proj)
    np.testing.assert_allclose(out_s.data, ref, atol=1e-12)
    np.testing.assert_allclose(out_t.data, ref, atol=1e-12)


def test_swa_matches_matrix_oracle(rng):
    fuse_s = randomize(FusionAttention(D, H, rng=rng), rng)
    fuse_t = randomize(FusionAttention(D, H, rng=rng), rng)
    z_s, z_t = tokens(rng), tokens(rng)
    with capture_attention() as rec, no_grad():
        out_s, out_t = swa_fusion(z_s, z_t, fuse_s, fuse_t)
    qs, ks, vs = _np_qkv(fuse_s, z_s.data)
    qt, kt, vt = _np_qkv(fuse_t, z_t.data)
    a_s = np.stack([dense_attention(qs[i], ks[i], vs[i])[1] for i in range(2)])
    a_t = np.stack([dense_attention(qt[i], kt[i], vt[i])[1] for i in range(2)])
    np.testing.assert_allclose(out_s.data, z_s.data + _np_proj(_np_unheads(a_s @ vt), fuse_s.proj), atol=1e-12)
    np.testing.assert_allclose(out_t.data, z_t.data + _np_proj(_np_unheads(a_t @ vs), fuse_t.proj), atol=1e-12)
    for m in rec["maps"]:
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-6)


def test_ca_identical_values_give_projected_value(rng):
    fuse = randomize(FusionAttention(D, H, rng=rng), rng)
    fuse.v.weight.data[...] = 0.0
    v0 = rng.normal(size=D)
    fuse.v.bias.data[...] = v0
    z_t, z_c = tokens(rng), tokens(rng)
    out = ca_fusion(z_t, z_c, fuse).data
    np.testing.assert_allclose(out[:, 0] - z_t.data[:, 0], np.broadcast_to(_np_proj(v0, fuse.proj), (2, D)),
                               atol=1e-12)
    np.testing.assert_array_equal(out[:, 1:], z_t.data[:, 1:])


def test_ca_equals_cls_row_of_full_cross_attention():
    worst, patch, ratio, length = ca_equivalence(instances=10, seed=7)
    assert worst < 1e-6 and patch == 0.0
    assert length == 129
    assert ratio <= 1 / 129 + 1e-9


def test_ca_cost_is_linear_in_sequence_length(rng):
    fuse = FusionAttention(D, H, rng=rng)
    costs = []
    for t in (2, 4, 8):
        z = tokens(rng, n=1, length=t * 4 + 1)
        with count_ops() as c:
            ca_fusion(z, z, fuse)
        costs.append(c.by_op["ca_qk"] + c.by_op["ca_av"])
    assert costs == [2 * 2 * D * (t * 4 + 1) for t in (2, 4, 8)]


# ---------------------------------------------------------------- block

@pytest.mark.parametrize("fusion", ["swa", "ca", "none"])
def test_block_preserves_length_and_rows(rng, fusion):
    blk = randomize(AmdfBlock(D, H, 2, fusion, rng=rng), rng)
    with capture_attention() as rec:
        out = blk(tokens(rng), T, N_GRID)
    assert out.shape == (2, L, D)
    assert all(np.abs(m.sum(-1) - 1).max() < 1e-6 for m in rec["maps"])
    assert len(rec["mix"]) == 1


def test_block_length_129(rng):
    with default_dtype(np.float32):
        blk = AmdfBlock(32, 4, 2, "ca", rng=rng)
        out = blk(Tensor(rng.normal(size=(1, 129, 32)).astype(np.float32)), 8, 4)
    assert out.shape == (1, 129, 32)


def test_unknown_fusion_mode_rejected():
    with pytest.raises(ValueError):
        AmdfBlock(D, H, 2, "concat")


def test_large_spatial_logit_selects_spatial_branch(rng):
    blk = randomize(AmdfBlock(D, H, 2, "none", rng=rng), rng)
    blk.mix.data[...] = [60.0, -60.0]
    z = tokens(rng)
    np.testing.assert_allclose(blk(z, T, N_GRID).data, blk.spatial(z, T, N_GRID).data, atol=1e-12)


@pytest.mark.parametrize("fusion", ["swa", "ca"])
def test_equal_logits_average_branches(rng, fusion):
    blk = randomize(AmdfBlock(D, H, 2, fusion, rng=rng), rng)
    blk.mix.data[...] = 0.0
    w = blk.mixing_weights().data
    assert w[0] == w[1] == 0.5
    z = tokens(rng)
    z_s, z_t = blk.fuse(blk.spatial(z, T, N_GRID), blk.temporal(z, T, N_GRID))
    np.testing.assert_allclose(blk(z, T, N_GRID).data, 0.5 * (z_s.data + z_t.data), atol=1e-12)


def test_mixing_weights_positive_and_normalised(rng):
    blk = AmdfBlock(D, H, 2, "ca", rng=rng)
    for _ in range(20):
        blk.mix.data[...] = rng.normal(0, 5, 2)
        w = blk.mixing_weights().data
        assert np.all(w > 0) and abs(w.sum() - 1) < 1e-12


@pytest.mark.parametrize("fusion", ["swa", "ca", "none"])
def test_mixing_logits_receive_gradient(rng, fusion):
    blk = randomize(AmdfBlock(D, H, 2, fusion, rng=rng), rng)
    ops.sum(ops.square(blk(tokens(rng), T, N_GRID))).backward()
    assert blk.mix.grad is not None and np.all(blk.mix.grad != 0)


def test_model_has_one_more_amdf_block_than_conv_blocks():
    for blocks in [(1, 1, 1, 1), (2, 1, 3, 1)]:
        with default_dtype(np.float32):
            model = CSG3DCT(ModelConfig(blocks=blocks))
        assert len(model.amdf) == model.num_conv_blocks + 1 == sum(blocks) + 1
