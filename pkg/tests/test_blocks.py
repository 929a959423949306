from fractions import Fraction

import numpy as np
import pytest

from cvrnet import blocks
from cvrnet.model import ModelConfig
from cvrnet.params import ParamStore
from cvrnet.verify import BLOCK_CASES


def _init(layer, dtype=np.float64, seed=0):
    store = ParamStore(dtype)
    layer.init(store, np.random.default_rng(seed))
    return store


def _zero_weights(store, prefix=""):
    for name, value in store.items():
        if name.startswith(prefix) and name.endswith("weights"):
            value[...] = 0.0


@pytest.mark.parametrize("case", BLOCK_CASES, ids=lambda c: c.name)
def test_block_gradients_over_seeds(case):
    for seed in range(20):
        for res in case.run(seed):
            assert res.max_rel_error < case.tol, (seed, res)


def test_scaled_widths():
    assert blocks.scaled(64, Fraction(1)) == 64
    assert blocks.scaled(64, Fraction(1, 8)) == 8
    assert blocks.scaled(3, Fraction(1, 8)) == 1


# -- stem -----------------------------------------------------------------------


def test_stem_shapes():
    assert blocks.stem("s", 64).out_shape((1, 224, 224, 3)) == (1, 56, 56, 64)
    assert blocks.stem("s", blocks.scaled(64, Fraction(1, 8))).out_shape((1, 32, 32, 3)) == (1, 8, 8, 8)


def test_input_size_must_divide_by_32():
    with pytest.raises(ValueError):
        ModelConfig(100, 100, 2)


# -- encoder-1 blocks -----------------------------------------------------------


@pytest.mark.parametrize("train", [False, True])
def test_zero_residual_is_relu(train, rng):
    block = blocks.residual_identity_block("b", 8, 2)
    store = _init(block)
    _zero_weights(store)
    x = rng.standard_normal((2, 5, 5, 8))
    y, cache = block.forward(store, x, train)
    np.testing.assert_array_equal(y, np.maximum(x, 0))
    # the skip path carries the upstream gradient, masked by the final ReLU
    dy = rng.standard_normal(y.shape)
    dx = block.backward(store, dy, cache)
    np.testing.assert_allclose(dx, dy * (x > 0), atol=1e-12)


def test_identity_block_preserves_shape():
    block = blocks.residual_identity_block("b", 1024, 256)
    assert block.out_shape((1, 14, 14, 1024)) == (1, 14, 14, 1024)


def test_conv_block_halves_and_widens():
    block = blocks.residual_conv_block("b", 256, 128, 512, stride=2)
    assert block.out_shape((1, 56, 56, 256)) == (1, 28, 28, 512)


def test_conv_block_rejects_odd_extent():
    block = blocks.residual_conv_block("b", 4, 2, 8, stride=2)
    with pytest.raises(blocks.ShapeError):
        block.out_shape((1, 7, 8, 4))
    store = _init(block)
    with pytest.raises(blocks.ShapeError):
        block.forward(store, np.zeros((1, 7, 8, 4)), False)


def test_stride1_identity_skip_equals_identity_block(rng):
    a = blocks.residual_conv_block("b", 8, 2, 8, stride=1, projection=False)
    b = blocks.residual_identity_block("b", 8, 2)
    sa, sb = _init(a, seed=3), _init(b, seed=3)
    x = rng.standard_normal((2, 4, 4, 8))
    np.testing.assert_array_equal(a.forward(sa, x, False)[0], b.forward(sb, x, False)[0])


def test_stride1_identity_projection_matches_identity_block(rng):
    proj = blocks.residual_conv_block("b", 8, 2, 8, stride=1, projection=True)
    ident = blocks.residual_identity_block("b", 8, 2)
    sp, si = _init(proj, seed=5), _init(ident, seed=5)
    sp["b.proj.conv.weights"] = np.eye(8).reshape(1, 1, 8, 8)
    # infer-mode BN divides by sqrt(1 + eps); this gamma undoes it
    sp["b.proj.bn.gamma"] = np.full(8, np.sqrt(1 + blocks.BN_EPSILON))
    x = rng.standard_normal((1, 4, 4, 8))
    np.testing.assert_allclose(proj.forward(sp, x, False)[0], ident.forward(si, x, False)[0], atol=1e-12)


def test_identity_skip_requires_matching_shape():
    with pytest.raises(blocks.ShapeError):
        blocks.residual_conv_block("b", 4, 2, 8, stride=1, projection=False)


# -- encoder-2 blocks -----------------------------------------------------------


def test_middle_unit_zero_weights_is_relu(rng):
    unit = blocks.middle_flow_unit("m", 4)
    store = _init(unit)
    _zero_weights(store)
    x = np.full((1, 4, 4, 4), -0.5)
    x[..., :2] = 1.5
    np.testing.assert_array_equal(unit.forward(store, x, False)[0], np.maximum(x, 0))


def test_middle_flow_repeated_eight_times_preserves_shape():
    shape = (1, 14, 14, 1024)
    for i in range(8):
        shape = blocks.middle_flow_unit(f"m{i}", 1024).out_shape(shape)
    assert shape == (1, 14, 14, 1024)
    store = ParamStore(np.float32)
    blocks.encoder2("enc2", Fraction(1, 16)).init(store, np.random.default_rng(0))
    units = {n.split(".")[2] for n in store.names() if n.startswith("enc2.middle.")}
    assert units == {f"unit{i}" for i in range(8)}


def test_entry_unit_halves():
    assert blocks.entry_flow_unit("e", 64, 128).out_shape((1, 112, 112, 64)) == (1, 56, 56, 128)


def test_exit_flow_full_width():
    flow = blocks.exit_flow("x", 1024, (1024, 1536, 2048))
    assert flow.out_shape((1, 14, 14, 1024)) == (1, 7, 7, 2048)


# -- head -----------------------------------------------------------------------


def test_head_zero_weights_uniform(rng):
    head = blocks.FCLHead("h", 6, 3)
    store = _init(head)
    for _, v in store.items():
        v[...] = 0.0
    z, _ = head.forward(store, np.full((2, 3, 3, 6), 4.0), False)
    np.testing.assert_array_equal(z, np.zeros((2, 3)))


@pytest.mark.parametrize("shape", [(1, 1, 1, 5), (3, 7, 2, 5), (2, 4, 4, 5)])
def test_head_output_shape(shape, rng):
    head = blocks.FCLHead("h", 5, 4)
    store = _init(head)
    assert head.forward(store, rng.standard_normal(shape), False)[0].shape == (shape[0], 4)


def test_head_requires_two_classes():
    with pytest.raises(ValueError):
        blocks.FCLHead("h", 5, 1)


def test_head_parameter_count():
    expected = 512 * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * 3 + 3
    assert expected == 172_675
    assert blocks.head_parameter_count(512, 3) == expected
    head = blocks.FCLHead("h", 512, 3)
    assert _init(head, np.float32).count() == expected


def test_parameter_count_monotone_in_width():
    counts = []
    for w in (Fraction(1, 16), Fraction(1, 8), Fraction(1, 4)):
        store = ParamStore(np.float32)
        blocks.encoder1("e1", w).init(store, np.random.default_rng(0))
        blocks.encoder2("e2", w).init(store, np.random.default_rng(0))
        counts.append(store.count())
    assert counts[0] < counts[1] < counts[2]
    # roughly quadratic growth
    assert 2.5 < counts[2] / counts[1] < 4.5


def test_parameter_names_are_hierarchical():
    store = ParamStore(np.float32)
    blocks.encoder1("enc1", Fraction(1, 16)).init(store, np.random.default_rng(0))
    assert "enc1.stage3.block0.conv2.conv.weights" in store
    assert len(set(store.names())) == len(store.names())
