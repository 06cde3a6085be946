import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swinnow import tensor as T
from swinnow.attention import (
    MLP,
    DecoderBlock,
    EncoderBlock,
    WindowAttention,
    WindowSpec,
    attention_mask,
    mlp,
    relative_position_bias,
    relative_position_index,
    window_attention,
    window_partition,
    window_reverse,
    wmca,
    wmsa,
)
from swinnow.errors import ConfigError, ContractError, DimensionError
from swinnow.nn import initialize

from oracles import allowed_pairs, bias_row, brute_attention, gelu


def randomize(module, seed, std=0.3):
    rng = np.random.default_rng(seed)
    for p in module.param_store().values():
        p.data = (std * rng.standard_normal(p.shape)).astype(p.dtype)


def attn_params(attn):
    return {
        "q_w": attn.q.weight.data, "q_b": attn.q.bias.data,
        "k_w": attn.k.weight.data, "k_b": attn.k.bias.data,
        "v_w": attn.v.weight.data, "v_b": attn.v.bias.data,
        "o_w": attn.proj.weight.data, "o_b": attn.proj.bias.data,
        "table": attn.rel_bias.data,
    }  # fmt: skip


# ------------------------------------------------------------- partitioning


def test_single_window_without_shift():
    x = T.Tensor(np.zeros((1, 1, 7, 7, 3)))
    windows, mask, rec = window_partition(x, WindowSpec((1, 7, 7), (0, 0, 0)))
    assert windows.shape == (1, 49, 3)
    assert rec.num_windows == 1
    assert not mask.any()


def test_window_count_for_weather_grid():
    x = T.Tensor(np.zeros((1, 4, 64, 64, 1), dtype=np.float32))
    windows, mask, rec = window_partition(x, WindowSpec())
    # 64 pads to 70 = 10 windows per spatial axis, 4 frames of depth-1 windows
    assert rec.num_windows == 400
    assert windows.shape == (400, 49, 1)
    assert mask.shape == (400, 49, 49)


@settings(max_examples=40, deadline=None)
@given(
    grid=st.tuples(st.integers(1, 4), st.integers(1, 12), st.integers(1, 12)),
    window=st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
    data=st.data(),
)
def test_reverse_inverts_partition(grid, window, data):
    shift = tuple(data.draw(st.integers(0, w - 1)) for w in window)
    x = np.random.default_rng(0).standard_normal((2, *grid, 3)).astype(np.float32)
    windows, _, rec = window_partition(T.Tensor(x), WindowSpec(window, shift))
    np.testing.assert_array_equal(window_reverse(windows, rec).data, x)


def test_reverse_rejects_foreign_windows():
    _, _, rec = window_partition(T.Tensor(np.zeros((1, 1, 7, 7, 2))), WindowSpec())
    with pytest.raises(ContractError):
        window_reverse(T.Tensor(np.zeros((1, 48, 2))), rec)


@pytest.mark.parametrize(
    "grid,window,shift",
    [((1, 14, 14), (1, 7, 7), (0, 3, 3)), ((2, 9, 11), (2, 4, 3), (1, 2, 1)), ((3, 7, 7), (1, 7, 7), (0, 0, 0)),
     ((4, 16, 16), (1, 7, 7), (0, 2, 2)), ((2, 5, 6), (2, 3, 3), (0, 1, 2))],
)
def test_mask_matches_neighbour_oracle(grid, window, shift):
    x = T.Tensor(np.zeros((1, *grid, 1)))
    _, mask, _ = window_partition(x, WindowSpec(window, shift))
    np.testing.assert_array_equal(mask == 0, allowed_pairs(grid, window, shift))


def test_mask_cached_and_readonly():
    x = T.Tensor(np.zeros((1, 1, 14, 14, 1)))
    spec = WindowSpec((1, 7, 7), (0, 3, 3))
    m1, m2 = window_partition(x, spec)[1], window_partition(x, spec)[1]
    assert m1 is m2
    assert not m1.flags.writeable


def test_shifted_mask_blocks_the_seam():
    # 14x14 grid, shift 3: the last window row mixes the wrapped top strip with the bottom
    _, _, rec = window_partition(T.Tensor(np.zeros((1, 1, 14, 14, 1))), WindowSpec((1, 7, 7), (0, 3, 3)))
    mask = attention_mask(rec)
    assert not mask[0].any()
    assert mask[3].min() < -1e8


# ------------------------------------------------------- relative positions


def test_bias_table_size_by_enumeration():
    for window in [(1, 7, 7), (2, 3, 4), (1, 1, 1), (3, 2, 5)]:
        cells = list(itertools.product(*(range(w) for w in window)))
        offsets = {tuple(np.subtract(a, b)) for a in cells for b in cells}
        assert WindowSpec(window, (0, 0, 0)).table_rows == len(offsets)
    assert WindowSpec((1, 7, 7)).table_rows == 169
    assert WindowSpec((1, 1, 1), (0, 0, 0)).table_rows == 1


@settings(max_examples=25, deadline=None)
@given(st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)))
def test_bias_index_matches_offsets_and_mirrors(window):
    idx = relative_position_index(window)
    cells = list(itertools.product(*(range(w) for w in window)))
    expected = np.array([[bias_row(np.subtract(a, b), window) for b in cells] for a in cells])
    np.testing.assert_array_equal(idx, expected)
    rows = WindowSpec(window, (0, 0, 0)).table_rows
    # (i, j) and (j, i) sit symmetrically about the centre row
    np.testing.assert_array_equal(idx + idx.T, np.full(idx.shape, rows - 1))
    assert len(np.unique(idx)) == rows


def test_bias_gather_shape_and_error():
    spec = WindowSpec((1, 3, 3), (0, 1, 1))
    table = T.Tensor(np.arange(25 * 2, dtype=np.float64).reshape(25, 2))
    bias = relative_position_bias(table, spec)
    assert bias.shape == (2, 9, 9)
    np.testing.assert_array_equal(np.diagonal(bias.data, axis1=1, axis2=2), np.tile([[24.0], [25.0]], 9))
    with pytest.raises(DimensionError):
        relative_position_bias(T.Tensor(np.zeros((24, 2))), spec)


# ----------------------------------------------------------------- attention


def test_heads_must_divide_dim():
    with pytest.raises(ConfigError, match="divisible"):
        WindowAttention(10, 4, WindowSpec())


def test_one_token_window_returns_projected_value():
    with T.precision(np.float64):
        attn = WindowAttention(4, 2, WindowSpec((1, 1, 1), (0, 0, 0)))
        randomize(attn, 0)
        x = np.random.default_rng(1).standard_normal((1, 1, 3, 3, 4))
        expected = (x @ attn.v.weight.data + attn.v.bias.data) @ attn.proj.weight.data + attn.proj.bias.data
        np.testing.assert_allclose(wmsa(T.Tensor(x), attn).data, expected, atol=1e-12)


def test_zero_query_key_gives_window_mean():
    with T.precision(np.float64):
        attn = WindowAttention(4, 1, WindowSpec((1, 2, 2), (0, 0, 0)))
        randomize(attn, 2)
        for p in (attn.q.weight, attn.q.bias, attn.k.weight, attn.k.bias, attn.rel_bias):
            p.data[...] = 0.0
        x = np.random.default_rng(3).standard_normal((1, 1, 2, 2, 4))
        v = x @ attn.v.weight.data + attn.v.bias.data
        expected = v.mean(axis=(2, 3), keepdims=True) @ attn.proj.weight.data + attn.proj.bias.data
        np.testing.assert_allclose(wmsa(T.Tensor(x), attn).data, np.broadcast_to(expected, x.shape), atol=1e-12)


def test_masked_and_unmasked_paths_agree():
    rng = np.random.default_rng(4)
    q, k, v = (T.Tensor(rng.standard_normal((2, 3, 2, 5, 4))) for _ in range(3))
    bias = T.Tensor(rng.standard_normal((2, 5, 5)))
    plain = window_attention(q, k, v, bias, None)
    masked = window_attention(q, k, v, bias, np.zeros((3, 5, 5)))
    np.testing.assert_array_equal(plain.data, masked.data)


def brute_cases():
    rng = np.random.default_rng(2024)
    for trial in range(50):
        grid = (int(rng.integers(1, 3)), int(rng.integers(2, 15)), int(rng.integers(2, 15)))
        window = (int(rng.integers(1, 3)), int(rng.integers(2, 8)), int(rng.integers(2, 8)))
        shift = tuple(int(rng.integers(0, w)) for w in window)
        heads = int(rng.choice([1, 2]))
        yield trial, grid, window, shift, heads


@pytest.mark.parametrize("cross", [False, True], ids=["msa", "mca"])
def test_shifted_attention_matches_brute_force(cross):
    worst = 0.0
    for trial, grid, window, shift, heads in brute_cases():
        attn = WindowAttention(4 * heads, heads, WindowSpec(window, shift))
        randomize(attn, trial)
        rng = np.random.default_rng(trial + 100)
        x = rng.standard_normal((1, *grid, 4 * heads)).astype(np.float32)
        kv = rng.standard_normal(x.shape).astype(np.float32) if cross else None
        got = attn(T.Tensor(x), None if kv is None else T.Tensor(kv), shifted=True).data
        ref = brute_attention(x, kv, attn_params(attn), window, shift, heads)
        worst = max(worst, float(np.abs(got - ref).max()))
    assert worst < 1e-5


def test_cross_with_same_input_is_self_attention():
    attn = WindowAttention(8, 2, WindowSpec())
    randomize(attn, 5)
    x = T.Tensor(np.random.default_rng(6).standard_normal((2, 1, 9, 9, 8)))
    for shifted in (False, True):
        np.testing.assert_array_equal(wmca(x, x, attn, shifted).data, wmsa(x, attn, shifted).data)


def test_cross_with_constant_keys_returns_projected_value():
    with T.precision(np.float64):
        attn = WindowAttention(4, 2, WindowSpec((1, 3, 3), (0, 1, 1)))
        randomize(attn, 7)
        q = T.Tensor(np.random.default_rng(8).standard_normal((1, 1, 6, 6, 4)))
        const = np.array([0.3, -1.0, 0.5, 2.0])
        kv = T.Tensor(np.broadcast_to(const, q.shape).copy())
        expected = (const @ attn.v.weight.data + attn.v.bias.data) @ attn.proj.weight.data + attn.proj.bias.data
        out = wmca(q, kv, attn, shifted=True).data
        np.testing.assert_allclose(out, np.broadcast_to(expected, q.shape), atol=1e-12)


def test_cross_grid_mismatch():
    attn = WindowAttention(4, 1, WindowSpec())
    with pytest.raises(DimensionError):
        wmca(T.Tensor(np.zeros((1, 1, 7, 7, 4))), T.Tensor(np.zeros((1, 1, 14, 14, 4))), attn)


# ----------------------------------------------------------------------- MLP


def test_mlp_zero_weights_and_gelu_value():
    x = T.Tensor(np.random.default_rng(9).standard_normal((2, 3, 4)))
    zeros = [T.Tensor(np.zeros(s)) for s in ((4, 16), (16,), (16, 4), (4,))]
    np.testing.assert_array_equal(mlp(x, *zeros).data, np.zeros((2, 3, 4)))
    # d = 1: W1 = [1, 0, 0, 0], W2 = e_1 passes gelu(x) straight through
    w1 = T.Tensor([[1.0, 0.0, 0.0, 0.0]])
    w2 = T.Tensor([[1.0], [0.0], [0.0], [0.0]])
    out = mlp(T.Tensor([[2.0]]), w1, T.Tensor(np.zeros(4)), w2, T.Tensor(np.zeros(1)))
    assert abs(out.item() - float(gelu(2.0))) < 1e-6
    assert abs(out.item() - 1.9545) < 1e-4


def test_mlp_shape_and_ratio():
    m = MLP(8)
    initialize(m.param_store(), 0)
    assert m(T.Tensor(np.ones((3, 5, 8), dtype=np.float32))).shape == (3, 5, 8)
    with pytest.raises(ConfigError):
        MLP(8, hidden=16)


# -------------------------------------------------------------------- blocks


def zero_block(block):
    for name, p in block.param_store().items():
        p.data[...] = 1.0 if name.endswith("gamma") else 0.0


def test_zero_encoder_block_is_identity():
    block = EncoderBlock(8, 2, WindowSpec())
    zero_block(block)
    x = T.Tensor(np.random.default_rng(10).standard_normal((1, 2, 9, 9, 8)).astype(np.float32))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_zero_decoder_block_is_identity():
    block = DecoderBlock(8, 2, WindowSpec())
    zero_block(block)
    rng = np.random.default_rng(11)
    x = T.Tensor(rng.standard_normal((1, 2, 9, 9, 8)).astype(np.float32))
    skip = T.Tensor(rng.standard_normal((1, 2, 9, 9, 8)).astype(np.float32))
    np.testing.assert_array_equal(block(x, skip).data, x.data)


def test_blocks_preserve_shape_and_reject_mismatch():
    spec = WindowSpec()
    enc, dec = EncoderBlock(8, 2, spec), DecoderBlock(8, 2, spec)
    initialize(enc.param_store(), 0)
    initialize(dec.param_store(), 0)
    x = T.Tensor(np.ones((2, 1, 10, 12, 8), dtype=np.float32))
    assert enc(x).shape == x.shape
    assert dec(x, x).shape == x.shape
    with pytest.raises(DimensionError):
        dec(x, T.Tensor(np.ones((2, 1, 10, 10, 8), dtype=np.float32)))


def test_decoder_layer_with_skip_equal_input():
    # cross-attention onto z itself reduces to self-attention on the normalised stream
    block = DecoderBlock(4, 1, WindowSpec((1, 3, 3), (0, 1, 1)))
    randomize(block, 12, std=0.2)
    layer = block.layers[0]
    z = T.Tensor(np.random.default_rng(13).standard_normal((1, 1, 6, 6, 4)).astype(np.float32))
    zbar = layer.self_attn(layer.norm1(z)) + z
    normed = layer.norm2(zbar)
    np.testing.assert_array_equal(wmca(normed, normed, layer.cross_attn).data, wmsa(normed, layer.cross_attn).data)


@pytest.mark.parametrize("kind", ["encoder", "decoder"])
def test_block_gradients(kind):
    with T.precision(np.float64):
        spec = WindowSpec((1, 3, 3), (0, 1, 1))
        block = EncoderBlock(4, 2, spec) if kind == "encoder" else DecoderBlock(4, 2, spec)
        randomize(block, 14, std=0.3)
        rng = np.random.default_rng(15)
        x = T.Tensor(rng.standard_normal((1, 1, 4, 5, 4)))
        skip = T.Tensor(rng.standard_normal((1, 1, 4, 5, 4)))
        w = T.Tensor(rng.standard_normal((1, 1, 4, 5, 4)))
        store = block.param_store()

        def f():
            out = block(x) if kind == "encoder" else block(x, skip)
            return T.tsum(out * w)

        tables = [p for n, p in store.items() if n.endswith("rel_bias")]
        assert len(tables) == (2 if kind == "encoder" else 4)
        # a wider step keeps cancellation error below tolerance on small coordinates
        assert T.grad_check(f, tables, eps=1e-4) < 1e-5
        assert T.grad_check(f, store, eps=1e-4, samples=60, seed=1) < 1e-5


def test_attention_input_gradients():
    with T.precision(np.float64):
        attn = WindowAttention(4, 2, WindowSpec((1, 3, 3), (0, 1, 2)))
        randomize(attn, 16)
        rng = np.random.default_rng(17)
        x = T.Tensor(rng.standard_normal((1, 1, 5, 4, 4)), requires_grad=True)
        kv = T.Tensor(rng.standard_normal((1, 1, 5, 4, 4)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((1, 1, 5, 4, 4)))
        assert T.grad_check(lambda: T.tsum(wmca(x, kv, attn, True) * w), [x, kv]) < 1e-5
