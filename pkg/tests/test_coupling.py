import numpy as np
import pytest

from csg3dct import ops
from csg3dct.config import ModelConfig
from csg3dct.coupling import ConvHead, FCUDown, FCUUp, TokenHead, classify, dual_head_loss, resample_grid
from csg3dct.model import CSG3DCT
from csg3dct.oracles import layer_norm_affine
from csg3dct.tensor import Tensor, default_dtype, no_grad
from csg3dct.verify import model_gradient_errors

T, N, D = 3, 2, 8
L = T * N * N + 1


def feat(rng, c=6, size=4, n=2):
    return Tensor(rng.normal(size=(n, c, T, size, size)))


def tok(rng, n=2):
    return Tensor(rng.normal(size=(n, L, D)))


@pytest.fixture(autouse=True)
def _f64(f64):
    yield


def test_resample_grid():
    x = Tensor(np.arange(16.0).reshape(1, 1, 1, 4, 4))
    np.testing.assert_array_equal(resample_grid(x, 2).data.ravel(), [2.5, 4.5, 10.5, 12.5])
    assert resample_grid(x, 8).shape == (1, 1, 1, 8, 8)
    assert resample_grid(x, 4) is x
    with pytest.raises(ValueError):
        resample_grid(x, 3)


def test_fcu_down_zero_features_is_identity(rng):
    down = FCUDown(6, D, rng=rng)
    z = tok(rng)
    np.testing.assert_array_equal(down(Tensor(np.zeros((2, 6, T, 4, 4))), z, T, N).data, z.data)


def test_fcu_down_constant_frame_shifts_tokens_uniformly(rng):
    down = FCUDown(6, D, rng=rng)
    down.norm.bias.data[...] = rng.normal(size=D)
    f = np.broadcast_to(rng.normal(size=(2, 6, T, 1, 1)), (2, 6, T, 4, 4)).copy()
    z = tok(rng)
    shift = (down(Tensor(f), z, T, N).data - z.data)[:, 1:].reshape(2, T, N * N, D)
    np.testing.assert_allclose(shift, np.broadcast_to(shift[:, :, :1], shift.shape), atol=1e-12)
    np.testing.assert_array_equal(shift.shape, (2, T, N * N, D))


def test_fcu_down_matches_pool_then_project_replay(rng):
    down = FCUDown(6, D, rng=rng)
    down.norm.weight.data[...] = rng.uniform(0.5, 1.5, D)
    down.norm.bias.data[...] = rng.normal(size=D)
    f, z = feat(rng), tok(rng)
    out = down(f, z, T, N).data
    # pool first (linear ops commute), then project channels
    pooled = f.data.reshape(2, 6, T, N, 2, N, 2).mean(axis=(4, 6))  # [2, 6, T, N, N]
    proj = np.einsum("oc,nctyx->ntyxo", down.proj.weight.data[:, :, 0, 0, 0], pooled).reshape(2, T * N * N, D)
    ref = z.data.copy()
    ref[:, 1:] += layer_norm_affine(proj, down.norm.weight.data, down.norm.bias.data)
    np.testing.assert_allclose(out, ref, atol=1e-6)
    np.testing.assert_array_equal(out[:, 0], z.data[:, 0])


def test_fcu_down_rejects_frame_mismatch(rng):
    with pytest.raises(ValueError):
        FCUDown(6, D, rng=rng)(Tensor(np.zeros((2, 6, T + 1, 4, 4))), tok(rng), T, N)


@pytest.mark.parametrize("training", [True, False])
def test_fcu_up_zero_tokens_is_identity(rng, training):
    up = FCUUp(D, 6, rng=rng).train(training)
    z = tok(rng)
    z.data[:, 1:] = 0.0
    f = feat(rng)
    np.testing.assert_array_equal(up(z, f, T, N).data, f.data)


def test_fcu_up_without_resampling_matches_matrix_oracle(rng):
    up = FCUUp(D, 6, rng=rng).eval()
    up.bn.weight.data[...] = rng.uniform(0.5, 1.5, 6)
    up.bn.bias.data[...] = rng.normal(size=6)
    up.bn.running_mean[...] = rng.normal(size=6)
    up.bn.running_var[...] = rng.uniform(0.5, 2, 6)
    z, f = tok(rng), feat(rng, size=N)
    out = up(z, f, T, N).data
    grid = z.data[:, 1:].reshape(2, T, N, N, D)
    proj = grid @ up.proj.weight.data[:, :, 0, 0, 0].T  # [2, T, N, N, 6]
    bn = (proj - up.bn.running_mean) / np.sqrt(up.bn.running_var + up.bn.eps) * up.bn.weight.data + up.bn.bias.data
    np.testing.assert_allclose(out, f.data + bn.transpose(0, 4, 1, 2, 3), atol=1e-12)


def test_fcu_up_shape_contract(rng):
    with default_dtype(np.float32):
        up = FCUUp(32, 64, rng=rng)
        out = up(Tensor(rng.normal(size=(1, 129, 32)).astype(np.float32)),
                 Tensor(np.zeros((1, 64, 8, 16, 16), np.float32)), 8, 4)
    assert out.shape == (1, 64, 8, 16, 16)


def test_down_then_up_preserve_stream_shapes(rng):
    down, up = FCUDown(6, D, rng=rng), FCUUp(D, 6, rng=rng)
    f, z = feat(rng, size=8), tok(rng)
    z2 = down(f, z, T, N)
    assert z2.shape == z.shape and up(z2, f, T, N).shape == f.shape


# ---------------------------------------------------------------- heads

def _heads(rng, c=6):
    return ConvHead(c, rng=rng), TokenHead(D, rng=rng)


def test_zero_heads_give_even_odds(rng):
    ch, th = _heads(rng)
    for lin in (ch.fc, th.fc):
        lin.weight.data[...] = 0
    pred = classify(feat(rng), tok(rng), ch, th)
    np.testing.assert_array_equal(pred.logits.data, 0.0)
    np.testing.assert_array_equal(pred.probs, 0.5)


def test_zero_token_head_defers_to_conv_head(rng):
    ch, th = _heads(rng)
    ch.fc.weight.data[...] = rng.normal(size=ch.fc.weight.shape)
    th.fc.weight.data[...] = 0
    f = feat(rng, n=16)
    pred = classify(f, tok(rng, n=16), ch, th)
    np.testing.assert_array_equal(pred.labels, ch(f).data.argmax(axis=1))


def test_classify_averages_logits_and_sums_losses(rng):
    ch, th = _heads(rng)
    for lin in (ch.fc, th.fc):
        lin.weight.data[...] = rng.normal(size=lin.weight.shape)
    f, z = feat(rng), tok(rng)
    pred = classify(f, z, ch, th)
    np.testing.assert_allclose(pred.logits.data, 0.5 * (ch(f).data + th(z).data))
    np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0, atol=1e-12)
    y = np.array([0, 1])
    expected = ops.cross_entropy(ch(f), y).item() + ops.cross_entropy(th(z), y).item()
    assert dual_head_loss(pred, y).item() == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------- full model

def test_forward_finite_over_100_seeds():
    cfg = ModelConfig(image_size=32, patch_size=2)
    with default_dtype(np.float32):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            model = CSG3DCT(cfg, seed=seed)
            model.train(seed % 2 == 0)
            x = Tensor(rng.uniform(0, 1, size=(2, 1, 8, 32, 32)).astype(np.float32))
            with no_grad():
                pred = model(x)
            assert np.all(np.isfinite(pred.logits.data)), seed
            assert abs(pred.probs.sum(axis=1) - 1).max() < 1e-6


@pytest.mark.parametrize("fusion", ["swa", "none"])
def test_tiny_model_gradients_other_fusion_modes(fusion):
    errors = model_gradient_errors(seed=1, coords=2, fusion=fusion)
    assert max(errors.values()) < 1e-3, max(errors, key=errors.get)


def test_model_prediction_shapes():
    with default_dtype(np.float32):
        model = CSG3DCT(ModelConfig())
        with no_grad():
            pred = model(Tensor(np.zeros((3, 1, 8, 64, 64), np.float32)))
    assert pred.conv_logits.shape == pred.token_logits.shape == (3, 2)
    assert pred.labels.shape == (3,)
