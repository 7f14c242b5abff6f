import numpy as np
import pytest

from rsinet.decoder import Decoder, DecoderConfig
from rsinet.model import ModelConfig, build_model
from rsinet.nn import Tensor, no_grad, ops
from rsinet.nn.gradcheck import gradient_check


def _config(w=4, **kw):
    base = dict(high_channels=w, low_channels=w, graph_channels=w, block1_channels=(w,) * 10,
                fusion_channels=w, block3_channels=(w,) * 9, n_classes=3)
    base.update(kw)
    return DecoderConfig(**base)


def _lrelu(v):
    return np.where(v > 0, v, 0.01 * v)


def test_default_schedule():
    dec = Decoder(np.random.default_rng(0))
    b1 = dec.block1.layers
    assert len(b1) == 10 and [l.stride for l in b1] == [2, 1, 1, 1, 1, 2, 1, 1, 1, 1]
    assert [l.kernel_size for l in b1] == [3, 3, 3, 3, 5, 3, 3, 3, 3, 5]
    assert all(l.transposed and l.out_channels == 256 for l in b1)
    b3 = dec.block3.layers
    assert len(b3) == 9 and [l.stride for l in b3] == [2, 1, 1, 1, 1, 2, 1, 1, 1]
    assert b3[-1].out_channels == 128
    assert dec.block2.weight.shape == (256, 512, 1, 1)
    assert dec.block4.weight.shape == (6, 128 + 256, 1, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(block1_channels=(8,) * 9)
    with pytest.raises(ValueError):
        DecoderConfig(block3_strides=(2, 1, 1, 1, 1, 1, 1, 1, 1))


@pytest.mark.parametrize("hw", [8, 32])
def test_block1_quadruples(hw):
    rng = np.random.default_rng(1)
    dec = Decoder(rng, _config())
    out = dec.block1_upsample(Tensor(rng.normal(size=(4, hw, hw))))
    assert out.shape == (1, 4, 4 * hw, 4 * hw)


def test_block1_gradient_width4():
    rng = np.random.default_rng(2)
    dec = Decoder(rng, _config())
    x = Tensor(rng.normal(size=(1, 4, 2, 3)), requires_grad=True)
    probe = Tensor(rng.normal(size=(1, 4, 8, 12)))
    params = [p for n, p in dec.parameters().items() if n.startswith("block1.")]
    result = gradient_check(lambda: ops.sum(ops.mul(dec.block1_upsample(x), probe)), params + [x],
                            max_coords=20, rng=np.random.default_rng(0))
    assert result.error <= 1e-4 and result.skipped_fraction <= 0.05


def test_block2_shape_and_mismatch():
    rng = np.random.default_rng(3)
    dec = Decoder(rng, _config(w=3, fusion_channels=5))
    out = dec.block2_fuse(Tensor(rng.normal(size=(3, 8, 8))), Tensor(rng.normal(size=(3, 8, 8))))
    assert out.shape == (1, 5, 8, 8)
    with pytest.raises(ValueError):
        dec.block2_fuse(Tensor(np.ones((3, 8, 8))), Tensor(np.ones((3, 4, 4))))


def test_block2_zero_low_slice():
    rng = np.random.default_rng(4)
    dec = Decoder(rng, _config(w=3, fusion_channels=5))
    up = rng.normal(size=(1, 3, 6, 6))
    out = dec.block2_fuse(Tensor(up), Tensor(np.zeros((1, 3, 6, 6)))).data
    w = dec.block2.weight.data[:, :3, 0, 0]
    expect = _lrelu(np.einsum("oc,nchw->nohw", w, up) + dec.block2.bias.data[None, :, None, None])
    assert np.max(np.abs(out - expect)) <= 1e-12


def test_block2_linear_before_activation():
    rng = np.random.default_rng(5)
    dec = Decoder(rng, _config(w=3))
    dec.block2.bias.data[:] = 0.0
    x = Tensor(rng.normal(size=(1, 6, 5, 5)))
    for a in (2.5, -0.75):
        scaled = dec.block2(ops.mul(x, Tensor(np.array(a)))).data
        assert np.allclose(scaled, a * dec.block2(x).data, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("hw", [8, 32])
def test_block3_restores(hw):
    rng = np.random.default_rng(6)
    dec = Decoder(rng, _config(block3_channels=(4,) * 8 + (2,)))
    out = dec.block3_restore(Tensor(rng.normal(size=(4, hw, hw))))
    assert out.shape == (1, 2, 4 * hw, 4 * hw)
    assert len(dec.block3.layers) == 9


def test_block4_probabilities():
    rng = np.random.default_rng(7)
    dec = Decoder(rng, _config())
    img, graph = Tensor(rng.normal(size=(4, 9, 9))), Tensor(rng.normal(size=(4, 9, 9)))
    probs = dec.block4_fuse_classify(img, graph).data
    assert probs.shape == (1, 3, 9, 9)
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-9
    with pytest.raises(ValueError):
        dec.block4_logits(img, Tensor(np.ones((4, 8, 9))))


def test_logit_shift_keeps_argmax():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(1, 3, 7, 7))
    a = ops.softmax(Tensor(logits), axis=1).data
    b = ops.softmax(Tensor(logits + 41.5), axis=1).data
    assert np.array_equal(a.argmax(axis=1), b.argmax(axis=1))
    assert np.allclose(a, b, atol=1e-15)


def test_decoder_end_to_end_and_deterministic():
    rng = np.random.default_rng(9)
    dec = Decoder(rng, _config())
    high, low, graph = (Tensor(rng.normal(size=s)) for s in [(4, 2, 2), (4, 8, 8), (4, 32, 32)])
    out1 = dec(high, low, graph).data
    out2 = dec(high, low, graph).data
    assert out1.shape == (1, 3, 32, 32)
    assert np.array_equal(out1, out2)


def test_zero_graph_matches_no_gcn_variant():
    cfg = ModelConfig(n_classes=4, width_mult=1 / 32)
    full = build_model(cfg, seed=3)
    ablated = build_model(ModelConfig(n_classes=4, width_mult=1 / 32, variant="no_gcn"), seed=5)
    shared = {k: v.data for k, v in full.parameters().items() if not k.startswith("gcn.")}
    ablated.load_parameters(shared)
    img = Tensor(np.random.default_rng(1).random((3, 32, 32)))
    with no_grad():
        zeroed = full(img, graph_raster=Tensor(np.zeros((1, full.graph_channels, 32, 32))))
        reference = ablated(img)
    assert np.array_equal(zeroed.data, reference.data)
