import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigmanet.attention import (
    AttentionConfig,
    AttentionKind,
    HeadWeights,
    SsaParams,
    attend_full,
    full_flops,
    full_self_attention,
    multi_head,
    predict_offsets,
    query_coordinates,
    sample_keys_values,
    sampled_points,
    ssa_attend,
    ssa_flops,
    ssa_forward,
)
from sigmanet.autodiff import FlopCounter, ShapeError, Tensor


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def numpy_full_attention(Q, K, V):
    s = Q @ K.T / np.sqrt(Q.shape[-1])
    s = np.exp(s - s.max(-1, keepdims=True))
    return (s / s.sum(-1, keepdims=True)) @ V


def enumerate_grid_offsets(grid):
    """Offsets that make every query sample every grid position once."""
    coords = query_coordinates(grid)
    return coords[None, :, :] - coords[:, None, :]


# --------------------------------------------------------------------------- full attention
def test_full_attention_matches_numpy():
    rng = np.random.default_rng(0)
    U = rng.standard_normal((7, 4))
    ws = [rng.standard_normal((4, 4)) for _ in range(3)]
    out = full_self_attention(T(U), *map(T, ws)).data
    ref = numpy_full_attention(U @ ws[0], U @ ws[1], U @ ws[2])
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_equal_keys_average_values():
    rng = np.random.default_rng(1)
    V = rng.standard_normal((5, 3))
    Q = rng.standard_normal((5, 3))
    K = np.tile(rng.standard_normal(3), (5, 1))
    out = attend_full(T(Q), T(K), T(V)).data
    np.testing.assert_allclose(out, np.tile(V.mean(0), (5, 1)), atol=1e-12)


def test_full_attention_weights_are_row_stochastic():
    rng = np.random.default_rng(2)
    _, w = attend_full(*(T(rng.standard_normal((6, 2))) for _ in range(3)), return_weights=True)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


def test_projection_shape_errors():
    U = T(np.ones((4, 3)))
    with pytest.raises(ShapeError):
        full_self_attention(U, T(np.ones((2, 2))), T(np.ones((3, 2))), T(np.ones((3, 2))))


# --------------------------------------------------------------------------- SSA oracle
@pytest.mark.parametrize("grid", [(2, 2), (3, 3), (2, 3)])
def test_ssa_enumerating_offsets_equals_full_attention(grid):
    rng = np.random.default_rng(sum(grid))
    n, d = grid[0] * grid[1], 4
    Q, K, V = (rng.standard_normal((n, d)) for _ in range(3))
    offsets = enumerate_grid_offsets(grid)
    got = ssa_attend(T(Q), T(K), T(V), T(offsets), grid).data
    np.testing.assert_allclose(got, numpy_full_attention(Q, K, V), rtol=0, atol=1e-10)


def test_ssa_single_zero_offset_returns_value_rows():
    rng = np.random.default_rng(3)
    Q, K, V = (rng.standard_normal((6, 3)) for _ in range(3))
    out = ssa_attend(T(Q), T(K), T(V), T(np.zeros((6, 1, 2))), (2, 3)).data
    np.testing.assert_allclose(out, V, rtol=0, atol=1e-15)


def test_ssa_forward_with_zero_predictor_samples_own_position():
    rng = np.random.default_rng(4)
    U = rng.standard_normal((4, 2))
    ws = [rng.standard_normal((2, 2)) for _ in range(3)]
    params = SsaParams.zeros(2, 3, np.float64)
    out = ssa_forward(T(U), *map(T, ws), params, (2, 2)).data
    # every sample sits on the query itself, so attention returns its own value
    np.testing.assert_allclose(out, U @ ws[2], atol=1e-12)


def test_out_of_grid_samples_are_zero():
    rng = np.random.default_rng(5)
    K, V = T(rng.standard_normal((4, 2))), T(rng.standard_normal((4, 2)))
    offsets = np.full((4, 2, 2), 50.0)
    k_s, v_s = sample_keys_values(K, V, T(offsets), (2, 2))
    assert k_s.shape == (4, 2, 2)
    np.testing.assert_array_equal(k_s.data, 0)
    np.testing.assert_array_equal(v_s.data, 0)


def test_ssa_rejects_bad_grid():
    with pytest.raises(ShapeError):
        ssa_attend(*(T(np.ones((5, 2))) for _ in range(3)), T(np.zeros((5, 1, 2))), (2, 3))


def test_ssa_batched_matches_per_sample():
    rng = np.random.default_rng(6)
    Q, K, V = (rng.standard_normal((3, 4, 2)) for _ in range(3))
    off = rng.uniform(-1, 1, (3, 4, 2, 2))
    batched = ssa_attend(T(Q), T(K), T(V), T(off), (2, 2)).data
    for b in range(3):
        single = ssa_attend(T(Q[b]), T(K[b]), T(V[b]), T(off[b]), (2, 2)).data
        np.testing.assert_allclose(batched[b], single, atol=1e-14)


# --------------------------------------------------------------------------- offsets
def test_predict_offsets_shape_and_bias():
    params = SsaParams(T(np.zeros((3, 8))), T(np.arange(8.0)))
    off = predict_offsets(T(np.ones((5, 3))), params)
    assert off.shape == (5, 4, 2)
    np.testing.assert_array_equal(off.data[2], np.arange(8.0).reshape(4, 2))


def test_predict_offsets_linear_in_query():
    rng = np.random.default_rng(7)
    params = SsaParams(T(rng.standard_normal((3, 4))), T(np.zeros(4)))
    q = rng.standard_normal((2, 3))
    np.testing.assert_allclose(
        predict_offsets(T(2 * q), params).data, 2 * predict_offsets(T(q), params).data, atol=1e-12
    )


def test_ssa_params_validation():
    with pytest.raises(ValueError):
        SsaParams(T(np.zeros((3, 3))), T(np.zeros(3)))
    with pytest.raises(ShapeError):
        SsaParams(T(np.zeros((3, 4))), T(np.zeros(2)))
    with pytest.raises(ValueError):
        SsaParams.zeros(3, 0)


def test_query_coordinates_row_major():
    np.testing.assert_array_equal(query_coordinates((2, 3)), [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]])


def test_sampled_points_rows():
    rows = sampled_points(np.zeros((4, 2, 2)), (2, 2))
    assert rows.shape == (8, 4)
    np.testing.assert_array_equal(rows[2], [1, 0, 1, 0])


# --------------------------------------------------------------------------- multi-head
def _heads(rng, n_heads, dim, hd, ssa_points=None):
    out = []
    for _ in range(n_heads):
        hw = HeadWeights(*(T(rng.standard_normal((dim, hd))) for _ in range(3)))
        if ssa_points:
            hw.ssa = SsaParams(T(0.1 * rng.standard_normal((hd, 2 * ssa_points))), T(np.zeros(2 * ssa_points)))
        out.append(hw)
    return out


def test_multi_head_concatenates_heads():
    rng = np.random.default_rng(8)
    cfg = AttentionConfig(dim=4, heads=2)
    U = rng.standard_normal((3, 4))
    heads = _heads(rng, 2, 4, 2)
    W = np.eye(4)
    out = multi_head(T(U), cfg, heads, T(W)).data
    for i, hw in enumerate(heads):
        ref = numpy_full_attention(U @ hw.wq.data, U @ hw.wk.data, U @ hw.wv.data)
        np.testing.assert_allclose(out[:, 2 * i:2 * i + 2], ref, atol=1e-12)


def test_multi_head_ssa_shape():
    rng = np.random.default_rng(9)
    cfg = AttentionConfig(dim=6, heads=3, kind="ssa", grid=(2, 3), n_points=2)
    out = multi_head(T(rng.standard_normal((2, 6, 6))), cfg, _heads(rng, 3, 6, 2, 2), T(np.eye(6)))
    assert out.shape == (2, 6, 6)


def test_attention_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(dim=5, heads=2)
    with pytest.raises(ValueError):
        AttentionConfig(dim=4, heads=2, kind=AttentionKind.SSA)
    with pytest.raises(ShapeError):
        multi_head(T(np.ones((3, 4))), AttentionConfig(4, 2), [], T(np.eye(4)))


# --------------------------------------------------------------------------- FLOP counts
def test_flop_closed_form_examples():
    assert ssa_flops(64, 16, 8) == 147968
    assert full_flops(4, 2) == 128
    assert ssa_flops(1024, 64, 8) < full_flops(1024, 64)


def test_flop_closed_form_rejects_nonpositive():
    with pytest.raises(ValueError):
        ssa_flops(0, 4, 2)
    with pytest.raises(ValueError):
        full_flops(4, 0)


def _measured(kind, n, d, p, rng):
    grid = (1, n)
    U = T(rng.standard_normal((n, d)))
    ws = [T(rng.standard_normal((d, d))) for _ in range(3)]
    with FlopCounter() as fc:
        if kind == "ssa":
            ssa_forward(U, *ws, SsaParams(T(rng.standard_normal((d, 2 * p))), T(np.zeros(2 * p))), grid)
        else:
            full_self_attention(U, *ws)
    return fc.total


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(1, 8), st.integers(1, 6))
def test_counter_matches_closed_form(n, d, p):
    rng = np.random.default_rng([n, d, p])
    assert _measured("ssa", n, d, p, rng) == ssa_flops(n, d, p)
    assert _measured("full", n, d, p, rng) == full_flops(n, d)


def test_counter_fixed_triples():
    rng = np.random.default_rng(0)
    for n, d, p in itertools.product([1, 9, 64], [1, 16], [1, 8]):
        assert _measured("ssa", n, d, p, rng) == ssa_flops(n, d, p)


def test_ssa_count_linear_in_n():
    # doubling N doubles the SSA count exactly
    assert ssa_flops(2048, 64, 8) == 2 * ssa_flops(1024, 64, 8)
