import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swinnow import tensor as T
from swinnow.errors import ConfigError, DimensionError
from swinnow.nn import initialize
from swinnow.patches import FinalExpand, PatchEmbed, PatchExpand, PatchMerge, PatchSpec, ProjectionHead


def init(module, seed=0):
    initialize(module.param_store(), seed)
    return module


def test_embed_shape_weather_grid():
    emb = init(PatchEmbed(4, PatchSpec((1, 4, 4), 48)))
    out = emb(T.Tensor(np.zeros((1, 4, 4, 256, 256), dtype=np.float32)))
    assert out.shape == (1, 4, 64, 64, 48)


def test_embed_unit_patch_keeps_grid():
    emb = init(PatchEmbed(3, PatchSpec((1, 1, 1), 5)))
    x = np.random.default_rng(0).random((2, 3, 2, 6, 7)).astype(np.float32)
    out = emb(T.Tensor(x))
    assert out.shape == (2, 2, 6, 7, 5)
    expected = (np.moveaxis(x, 1, -1) @ emb.proj.weight.data + emb.proj.bias.data) @ emb.embed.weight.data
    np.testing.assert_allclose(out.data, expected + emb.embed.bias.data, rtol=1e-5, atol=1e-6)


def test_identity_embedding_reproduces_patch_values():
    with T.precision(np.float64):
        spec = PatchSpec((2, 2, 3), 2 * 2 * 2 * 3)
        emb = PatchEmbed(2, spec)
        emb.proj.weight.data = np.eye(24)
        emb.embed.weight.data = np.eye(24)
        for b in (emb.proj.bias, emb.embed.bias):
            b.data[...] = 0.0
        x = np.random.default_rng(1).random((1, 2, 4, 4, 6))
        out = emb(T.Tensor(x)).data
        # manual patch at token (t'=1, h'=1, w'=0): channel-major, then frame, row, column
        manual = x[0, :, 2:4, 2:4, 0:3].reshape(-1)
        np.testing.assert_array_equal(out[0, 1, 1, 0], manual)


def test_embed_pads_and_checks_frames():
    emb = init(PatchEmbed(1, PatchSpec((2, 4, 4), 4)))
    assert emb(T.Tensor(np.ones((1, 1, 2, 10, 13), dtype=np.float32))).shape == (1, 1, 3, 4, 4)
    with pytest.raises(ConfigError, match="divisible"):
        emb(T.Tensor(np.ones((1, 1, 3, 8, 8), dtype=np.float32)))
    with pytest.raises(DimensionError):
        emb(T.Tensor(np.ones((1, 2, 2, 8, 8), dtype=np.float32)))


def test_embed_padded_and_exact_paths_agree():
    emb = init(PatchEmbed(2, PatchSpec((1, 2, 2), 4)))
    x = np.random.default_rng(2).random((1, 2, 1, 6, 5)).astype(np.float32)
    explicit = np.zeros((1, 2, 1, 6, 6), dtype=np.float32)
    explicit[..., :5] = x
    np.testing.assert_array_equal(emb(T.Tensor(x)).data, emb(T.Tensor(explicit)).data)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 100))
def test_embed_is_affine(a, b, seed):
    with T.precision(np.float64):
        emb = init(PatchEmbed(2, PatchSpec((1, 2, 2), 3)), seed)
        rng = np.random.default_rng(seed)
        x, y = rng.random((2, 1, 2, 1, 4, 4))
        zero = emb(T.Tensor(np.zeros_like(x))).data
        lhs = emb(T.Tensor(a * x + b * y)).data - zero
        rhs = a * (emb(T.Tensor(x)).data - zero) + b * (emb(T.Tensor(y)).data - zero)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_merge_shape_and_count():
    merge = init(PatchMerge(48))
    out = merge(T.Tensor(np.zeros((1, 4, 64, 64, 48), dtype=np.float32)))
    assert out.shape == (1, 4, 32, 32, 96)
    assert out.size // 96 * 4 == 4 * 64 * 64


def test_merge_selector_takes_first_two_subpatches():
    with T.precision(np.float64):
        c = 3
        merge = PatchMerge(c)
        merge.reduction.weight.data = np.vstack([np.eye(2 * c), np.zeros((2 * c, 2 * c))])
        x = np.random.default_rng(3).random((1, 1, 4, 4, c))
        out = merge(T.Tensor(x)).data
        for i in range(2):
            for j in range(2):
                # the first two sub-patches in gather order are (0, 0) then (0, 1)
                expected = np.concatenate([x[0, 0, 2 * i, 2 * j], x[0, 0, 2 * i, 2 * j + 1]])
                np.testing.assert_array_equal(out[0, 0, i, j], expected)


def test_merge_pads_odd_grid():
    merge = init(PatchMerge(2))
    assert merge(T.Tensor(np.ones((1, 1, 5, 7, 2), dtype=np.float32))).shape == (1, 1, 3, 4, 4)


def test_expand_shape_and_odd_channels():
    expand = init(PatchExpand(96))
    assert expand(T.Tensor(np.zeros((1, 4, 32, 32, 96), dtype=np.float32))).shape == (1, 4, 64, 64, 48)
    with pytest.raises(ConfigError):
        PatchExpand(5)


def test_scatter_is_index_inverse_of_gather():
    b, t, h, w, c = 2, 3, 4, 6, 5
    labels = np.arange(b * t * h * w * c).reshape(b, t, h, w, c)
    gathered = PatchMerge.gather(T.Tensor(labels, dtype=np.float64))
    back = PatchExpand.scatter(gathered.reshape(b, t, h // 2, w // 2, 4 * c)).data
    np.testing.assert_array_equal(back, labels)


def test_expand_then_merge_shape_roundtrip():
    for c in (4, 8):
        x = T.Tensor(np.ones((1, 2, 6, 8, c), dtype=np.float32))
        y = init(PatchMerge(c // 2))(init(PatchExpand(c))(x))
        assert y.shape == x.shape


def test_pseudo_inverse_expand_recovers_merge_row_space():
    with T.precision(np.float64):
        c = 4
        rng = np.random.default_rng(4)
        merge, expand = PatchMerge(c), PatchExpand(2 * c)
        merge.reduction.weight.data = rng.standard_normal((4 * c, 2 * c))
        expand.expand.weight.data = np.linalg.pinv(merge.reduction.weight.data)
        x = rng.standard_normal((1, 1, 4, 4, c))
        y = expand(merge(T.Tensor(x))).data
        # project the gathered input onto the row space of the merge map
        w = merge.reduction.weight.data
        g = PatchMerge.gather(T.Tensor(x)).data
        projected = PatchExpand.scatter(T.Tensor(g @ w @ np.linalg.pinv(w))).data
        assert np.abs(y - projected).max() < 1e-4


def test_final_expand_layout():
    with T.precision(np.float64):
        fe = FinalExpand(2, 2, 3)
        fe.expand.weight.data = np.tile(np.eye(2), 6)
        x = np.random.default_rng(5).random((1, 1, 2, 2, 2))
        out = fe(T.Tensor(x)).data
        assert out.shape == (1, 1, 4, 6, 2)
        np.testing.assert_array_equal(out[0, 0, 2:4, 3:6], np.broadcast_to(x[0, 0, 1, 1], (2, 3, 2)))


def test_head_shapes_and_zero_output():
    spec = PatchSpec((1, 4, 4), 48)
    head = init(ProjectionHead(48, spec, 4, 8))
    out = head(T.Tensor(np.zeros((1, 4, 64, 64, 48), dtype=np.float32)), 256, 256)
    assert out.shape == (1, 4, 32, 256, 256)
    head.fc.weight.data[...] = 0.0
    x = T.Tensor(np.random.default_rng(6).random((1, 1, 3, 3, 48)).astype(np.float32))
    np.testing.assert_array_equal(head(x, 10, 11).data, np.full((1, 4, 8, 10, 11), 0.5, dtype=np.float32))


def test_head_frame_order():
    with T.precision(np.float64):
        head = ProjectionHead(2, PatchSpec((1, 1, 1), 2), 2, 3)
        head.up.expand.weight.data = np.eye(2)
        head.fc.weight.data[...] = 0.0
        head.fc.bias.data = np.arange(6.0)
        out = head.logits(T.Tensor(np.zeros((1, 2, 1, 1, 2))), 1, 1).data
        # channel v*k + j is frame t'*k + j of variable v
        np.testing.assert_array_equal(out[0, :, :, 0, 0], [[0, 1, 2, 0, 1, 2], [3, 4, 5, 3, 4, 5]])


def test_head_gradients():
    with T.precision(np.float64):
        head = ProjectionHead(4, PatchSpec((1, 2, 2), 4), 2, 2)
        rng = np.random.default_rng(7)
        for p in head.param_store().values():
            p.data = 0.3 * rng.standard_normal(p.shape)
        x = T.Tensor(rng.standard_normal((1, 1, 2, 3, 4)))
        w = T.Tensor(rng.standard_normal((1, 2, 2, 3, 5)))
        assert T.grad_check(lambda: T.tsum(head(x, 3, 5) * w), head.param_store()) < 1e-5
