import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from app.services import attention
from app.services import diffcore as dc
from app.services.errors import PartitionError


def _params(d=4, layers=1, seed=0):
    return attention.init_attention(d, layers, np.random.default_rng(seed))


def _hand_params():
    params = _params(d=2)
    layer = params.layers[0]
    layer.phi.data = np.eye(2)
    layer.psi.data = np.array([[2.0, 0.0], [0.0, 1.0]])
    layer.alpha.data = np.array([[0.0, 1.0], [1.0, 0.0]])
    return params


def test_two_region_attention_matches_hand_computation():
    f = dc.tensor(np.eye(2))
    mask = np.array([True, True])
    out = attention.self_attend(f, mask, _hand_params(), 0).data
    # logits [[2, 0], [0, 1]]
    w0 = np.exp(2.0) / (np.exp(2.0) + 1.0)
    w1 = np.exp(1.0) / (np.exp(1.0) + 1.0)
    expected = np.array([[1.0 + (1.0 - w0), w0],
                         [w1, 1.0 + (1.0 - w1)]])
    assert_allclose(out, expected, atol=1e-12)


def test_single_unmasked_region_gets_weight_one():
    params = _params()
    f = dc.tensor(np.vstack([np.zeros(4), np.random.default_rng(1).normal(size=4), np.zeros(4)]))
    mask = np.array([False, True, False])
    weights = attention.attention_weights(f, mask, params, 0).data
    assert_allclose(weights, [[1.0]])
    out = attention.self_attend(f, mask, params, 0).data
    assert_allclose(out[1], f.data[1] @ params.layers[0].alpha.data + f.data[1], atol=1e-12)
    assert_allclose(out[[0, 2]], 0.0)


def test_zero_query_map_gives_uniform_weights():
    params = _params()
    params.layers[0].phi.data = np.zeros((4, 4))
    f = dc.tensor(np.random.default_rng(2).normal(size=(5, 4)))
    mask = np.array([True, True, False, True, True])
    weights = attention.attention_weights(f, mask, params, 0).data
    assert_allclose(weights, 0.25, atol=1e-15)


def test_attention_rows_sum_to_one():
    params = _params(d=6, seed=3)
    f = dc.tensor(np.random.default_rng(3).normal(size=(7, 6)))
    mask = np.array([True, False, True, True, False, True, True])
    weights = attention.attention_weights(f, mask, params, 0).data
    assert weights.shape == (5, 5)
    assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)


def test_masked_rows_neither_attend_nor_are_attended():
    params = _params(seed=4)
    rng = np.random.default_rng(4)
    base = rng.normal(size=(4, 4))
    mask = np.array([True, False, True, True])
    changed = base.copy()
    changed[1] = 100.0 * rng.normal(size=4)
    a = attention.self_attend(dc.tensor(base), mask, params, 0).data
    b = attention.self_attend(dc.tensor(changed), mask, params, 0).data
    assert_allclose(a, b, atol=0)
    assert_allclose(a[1], 0.0)


def test_fully_masked_sequence_is_rejected():
    with pytest.raises(PartitionError):
        attention.self_attend(dc.zeros((3, 4)), np.zeros(3, dtype=bool), _params(), 0)


def test_scaled_logits_divide_by_sqrt_d():
    params = _params(d=4, seed=5)
    f = dc.tensor(np.random.default_rng(5).normal(size=(3, 4)))
    mask = np.ones(3, dtype=bool)
    layer = params.layers[0]
    logits = (f.data @ layer.phi.data) @ (f.data @ layer.psi.data).T / 2.0
    expected = np.exp(logits - logits.max(axis=1, keepdims=True))
    expected /= expected.sum(axis=1, keepdims=True)
    assert_allclose(attention.attention_weights(f, mask, params, 0, scale_logits=True).data, expected, atol=1e-12)


def test_strict_mode_reduces_to_own_value_plus_residual():
    params = _params(seed=6)
    f = dc.tensor(np.random.default_rng(6).normal(size=(3, 4)))
    out = attention.self_attend(f, np.ones(3, dtype=bool), params, 0, strict=True).data
    assert_allclose(out, f.data @ params.layers[0].alpha.data + f.data, atol=1e-12)


def test_position_encoding_single_occupied_region():
    params = _params(seed=7)
    centroids = [None, np.array([0.1, 0.2, 0.3]), None]
    p = attention.position_encode(centroids, np.array([False, True, False]), params).data
    assert np.count_nonzero(np.any(p != 0.0, axis=1)) == 1
    assert np.any(p[1] != 0.0)


def test_position_encoding_identical_centroids_give_identical_rows():
    params = _params(seed=8)
    c = np.array([0.3, -0.1, 0.2])
    p = attention.position_encode([c, c.copy()], np.array([True, True]), params).data
    assert_allclose(p[0], p[1], atol=0)


def test_position_encoding_with_zero_weights_is_the_output_bias():
    params = _params(seed=9)
    for name in ("delta_w1", "delta_b1", "delta_w2"):
        tensor = getattr(params, name)
        tensor.data = np.zeros_like(tensor.data)
    bias = np.arange(4, dtype=float)
    params.delta_b2.data = bias
    centroids = [np.array([1.0, 2.0, 3.0]), None, np.array([-1.0, 0.0, 0.5])]
    p = attention.position_encode(centroids, np.array([True, False, True]), params).data
    assert_allclose(p, [bias, np.zeros(4), bias])


def test_position_encoding_needs_centroids_for_occupied_regions():
    with pytest.raises(PartitionError):
        attention.position_encode([None, None], np.array([True, False]), _params())


def test_region_transformer_stacks_layers_and_keeps_mask():
    params = _params(d=4, layers=2, seed=10)
    rng = np.random.default_rng(10)
    rfs = dc.tensor(np.vstack([rng.normal(size=4), np.zeros(4), rng.normal(size=4)]))
    occupied = np.array([True, False, True])
    centroids = [rng.normal(size=3), None, rng.normal(size=3)]
    rtfs = attention.region_transformer(rfs, centroids, occupied, params)
    assert rtfs.a.shape == (3, 4)
    assert rtfs.mask.tolist() == [True, False, True]
    assert_allclose(rtfs.a.data[1], 0.0)

    f = attention.position_encode(centroids, occupied, params).data + rfs.data
    for layer in range(2):
        f = attention.self_attend(dc.tensor(f), occupied, params, layer).data
    assert_allclose(rtfs.a.data, f, atol=1e-12)


def test_region_transformer_gradients_match_finite_differences():
    params = _params(d=3, layers=1, seed=11)
    rng = np.random.default_rng(11)
    rfs = dc.tensor(rng.normal(size=(3, 3)))
    centroids = [rng.normal(size=3) for _ in range(3)]
    direction = dc.tensor(rng.normal(size=(3, 3)))

    def f(_):
        rtfs = attention.region_transformer(rfs, centroids, np.ones(3, dtype=bool), params)
        return dc.reduce_sum(dc.mul(rtfs.a, direction))

    for tensor in (params.layers[0].phi, params.layers[0].alpha, params.delta_w2):
        assert dc.gradcheck(f, tensor) <= 1e-4


@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_region_transformer_is_equivariant_to_region_order(seed):
    rng = np.random.default_rng(seed)
    n = 5
    params = _params(d=4, layers=2, seed=12)
    occupied = rng.random(n) < 0.7
    occupied[rng.integers(n)] = True
    rfs = rng.normal(size=(n, 4)) * occupied[:, None]
    centroids = [rng.normal(size=3) if k else None for k in occupied]
    order = rng.permutation(n)

    rtfs = attention.region_transformer(dc.tensor(rfs), centroids, occupied, params)
    permuted = attention.region_transformer(dc.tensor(rfs[order]), [centroids[k] for k in order],
                                            occupied[order], params)
    assert permuted.mask.tolist() == rtfs.mask[order].tolist()
    assert_allclose(permuted.a.data, rtfs.a.data[order], atol=1e-10)
