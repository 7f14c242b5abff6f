import numpy as np
import pytest

from rsinet.cnn import (
    CnnStream,
    CnnStreamConfig,
    DenseAtrousUnit,
    DenseGroup,
    ParallelAtrousBlock,
    cnn_stream_forward,
    dense_atrous_unit,
    parallel_atrous_block,
)
from rsinet.nn import Tensor, backward, conv2d, ops
from rsinet.nn.gradcheck import gradient_check


def _tiny(**kw):
    base = dict(stem_channels=2, growth=2, tap_channels=2, branch_channels=2)
    base.update(kw)
    return CnnStreamConfig(**base)


# --- dense atrous unit -------------------------------------------------------------

@pytest.mark.parametrize("rate", [1, 2, 3, 5])
def test_unit_channels_and_extent(rate):
    rng = np.random.default_rng(rate)
    unit = DenseAtrousUnit(rng, 3, 4, rate)
    x = Tensor(rng.normal(size=(2, 3, 11, 13)))
    out = dense_atrous_unit(x, unit)
    assert out.shape == (2, 7, 11, 13)
    assert np.array_equal(out.data[:, :3], x.data)


@pytest.mark.parametrize("rate", [1, 2, 3, 6])
def test_unit_receptive_extent(rate):
    unit = DenseAtrousUnit(np.random.default_rng(0), 1, 1, rate)
    unit.conv.weight.data[:] = 1.0
    unit.conv.bias.data[:] = 0.0
    x = np.zeros((1, 1, 41, 41))
    x[0, 0, 20, 20] = 1.0
    grown = dense_atrous_unit(Tensor(x), unit).data[0, 1]
    rows, cols = np.nonzero(grown)
    assert rows.max() - rows.min() + 1 == 2 * rate + 1
    assert cols.max() - cols.min() + 1 == 2 * rate + 1


def test_dense_group_structure():
    rng = np.random.default_rng(1)
    g = 3
    full = DenseGroup(rng, 5, g, (1, 2, 3))
    assert [u.conv.in_channels for u in full.units] == [5, 8, 11]
    assert full.out_channels == 5 + 3 * g
    # dropping one unit shifts every later input width by exactly g
    short = DenseGroup(rng, 5, g, (1, 3))
    assert [u.conv.in_channels for u in short.units] == [5, 8]
    assert full.units[2].conv.in_channels - short.units[1].conv.in_channels == g
    assert full.out_channels - short.out_channels == g


# --- parallel atrous block -----------------------------------------------------------

def test_parallel_block_channels():
    rng = np.random.default_rng(2)
    block = ParallelAtrousBlock(rng, 4, 3)
    out = parallel_atrous_block(Tensor(rng.normal(size=(1, 4, 6, 5))), block)
    assert out.shape == (1, 15, 6, 5) and block.out_channels == 15


def test_pool_branch_constant():
    rng = np.random.default_rng(3)
    block = ParallelAtrousBlock(rng, 2, 3)
    pooled = block.branches(Tensor(np.full((1, 2, 7, 7), 0.4)))[-1].data
    assert np.all(pooled == pooled[:, :, :1, :1])
    pooled = block.branches(Tensor(rng.normal(size=(1, 2, 7, 7))))[-1].data
    assert np.all(pooled == pooled[:, :, :1, :1])


def test_parallel_block_composition_oracle():
    rng = np.random.default_rng(4)
    block = ParallelAtrousBlock(rng, 3, 2)
    x = rng.normal(size=(1, 3, 9, 8))
    lrelu = lambda v: np.where(v > 0, v, 0.01 * v)  # noqa: E731
    parts = [lrelu(conv2d(Tensor(x), block.point).data)]
    parts += [lrelu(conv2d(Tensor(x), conv).data) for conv in block.atrous]
    gap = Tensor(x.mean(axis=(2, 3), keepdims=True))
    parts.append(np.broadcast_to(lrelu(conv2d(gap, block.pool).data), (1, 2, 9, 8)))
    expect = np.concatenate(parts, axis=1)
    assert np.max(np.abs(block(Tensor(x)).data - expect)) <= 1e-12
    assert [c.dilation for c in block.atrous] == [6, 12, 18]


# --- whole stream ----------------------------------------------------------------------

def test_stream_taps_64():
    rng = np.random.default_rng(5)
    taps = cnn_stream_forward(Tensor(rng.random((3, 64, 64))), CnnStream(rng, _tiny(tap_channels=256)))
    assert taps.low.shape == (1, 256, 16, 16)
    assert taps.high.shape == (1, 256, 4, 4)


@pytest.mark.parametrize("hw", [(16, 16), (32, 48), (48, 16)])
def test_stream_extent_contract(hw):
    rng = np.random.default_rng(6)
    taps = CnnStream(rng, _tiny())(Tensor(rng.random((1, 3) + hw)))
    assert taps.low.shape[2:] == (hw[0] // 4, hw[1] // 4)
    assert taps.high.shape[2:] == (hw[0] // 16, hw[1] // 16)


def test_stream_rejects_indivisible():
    with pytest.raises(ValueError):
        CnnStream(np.random.default_rng(0), _tiny())(Tensor(np.zeros((3, 24, 32))))


def test_stream_default_widths():
    stream = CnnStream(np.random.default_rng(0))
    assert stream.stem.out_channels == 64 and stream.stem.stride == 2
    assert [u.conv.dilation for u in stream.group_a.units] == [1, 2, 3]
    assert stream.reduce_a.out_channels == stream.reduce_c.out_channels == 256
    assert stream.context.out_channels == 320


def test_stem_receives_gradient():
    rng = np.random.default_rng(7)
    stream = CnnStream(rng, _tiny(tap_channels=4))
    taps = stream(Tensor(rng.random((3, 32, 32))))
    backward(ops.add(ops.sum(taps.low), ops.sum(taps.high)))
    assert np.any(stream.stem.weight.grad != 0)


@pytest.mark.parametrize("cfg", [_tiny(), _tiny(dense=False), _tiny(parallel=False)],
                         ids=["full", "plain_groups", "single_context"])
def test_stream_gradient_check(cfg):
    rng = np.random.default_rng(8)
    stream = CnnStream(rng, cfg)
    img = Tensor(rng.random((3, 16, 16)))
    p_low = Tensor(rng.normal(size=(1, 2, 4, 4)))
    p_high = Tensor(rng.normal(size=(1, 2, 1, 1)))

    def loss():
        taps = stream(img)
        return ops.add(ops.sum(ops.mul(taps.low, p_low)), ops.sum(ops.mul(taps.high, p_high)))

    result = gradient_check(loss, list(stream.parameters().values()))
    assert result.error <= 1e-4
    assert result.skipped_fraction <= 0.05
