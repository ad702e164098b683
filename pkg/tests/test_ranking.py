import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from filterprune.engine import run_forward
from filterprune.graph import ModelGraph, Node, build_architecture, init_weights
from filterprune.ranking import (
    EPS,
    RankVector,
    activation_node,
    beta_rank,
    compute_rank,
    group_stats,
    hrank_score,
    l1_rank,
    matrix_ranks,
    position_count,
    window_stats,
)

from oracles import enumerate_window_stats, gaussian_rank, literal_beta_scores, random_small_model, randomize_bn


def one_conv(cin=1, cout=2, k=3, stride=1, padding=0, size=5, bias=False):
    nodes = [Node("c", "conv", ("input",), dict(in_channels=cin, out_channels=cout, kernel=k, stride=stride,
                                                  padding=padding, bias=bias))]
    return ModelGraph(nodes, (cin, size, size), cout)


# ---------------------------------------------------------------- position count


@pytest.mark.parametrize("geom,window,s,expected", [
    ((32, 32), (3, 3), 1, (30, 30)),
    ((32, 32), (3, 3), 2, (15, 15)),
    ((7, 9), (7, 9), 3, (1, 1)),
    ((5, 5), (5, 5), 1, (1, 1)),
    ((34, 34), (3, 3), 2, (16, 16)),
])
def test_position_count(geom, window, s, expected):
    assert position_count(geom, window, s) == expected


def test_position_count_window_too_large():
    with pytest.raises(ValueError, match="larger"):
        position_count((3, 3), (4, 3), 1)


def test_position_count_matches_conv_grid():
    for stride in (1, 2, 3):
        for pad in (0, 1):
            g = one_conv(stride=stride, padding=pad, size=8)
            w = init_weights(g)
            st_ = window_stats(g, w, np.random.default_rng(0).random((2, 1, 8, 8), dtype=np.float32))["c"]
            out = run_forward(g, w, np.zeros((1, 1, 8, 8), np.float32)).logits
            assert st_.position_count == out.shape[2:]


# ---------------------------------------------------------------- window statistics


def test_identical_samples_have_zero_spread():
    g = build_architecture("cnn2", (3, 16, 16), 3)
    w = init_weights(g, seed=1)
    x = np.repeat(np.random.default_rng(0).random((1, 3, 16, 16), dtype=np.float32), 4, axis=0)
    for s in window_stats(g, w, x).values():
        assert s.sigma_in == 0.0
        assert not s.sigma_out.any()


def test_zero_and_two_windows_give_unit_sigma_in():
    g = one_conv(k=3, size=3)
    x = np.stack([np.zeros((1, 3, 3)), np.full((1, 3, 3), 2.0)]).astype(np.float32)
    st_ = window_stats(g, init_weights(g), x)["c"]
    assert st_.position_count == (1, 1)
    assert st_.sigma_in == pytest.approx(1.0)


def test_needs_two_samples():
    g = one_conv()
    with pytest.raises(ValueError, match="at least 2"):
        window_stats(g, init_weights(g), np.zeros((1, 1, 5, 5), np.float32))


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 1)])
def test_single_conv_matches_window_enumeration(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    g = one_conv(cin=2, cout=3, stride=stride, padding=padding, size=7, bias=True)
    w = randomize_bn(init_weights(g, seed=2), rng)
    x = rng.random((4, 2, 7, 7), dtype=np.float32)
    st_ = window_stats(g, w, x)["c"]
    s_in, s_out, counts = enumerate_window_stats(g, w, x, "c")
    assert st_.position_count == counts
    assert_allclose(st_.sigma_in, s_in, rtol=1e-5)
    assert_allclose(st_.sigma_out, s_out, rtol=1e-5)


def test_chunking_does_not_change_stats():
    g = random_small_model(np.random.default_rng(3), n_conv=2)
    w = init_weights(g)
    x = np.random.default_rng(4).random((10,) + g.input_shape, dtype=np.float32)
    a, b = window_stats(g, w, x, chunk=64), window_stats(g, w, x, chunk=3)
    for lid in a:
        assert_allclose(a[lid].sigma_in, b[lid].sigma_in, rtol=1e-12)
        assert_allclose(a[lid].sigma_out, b[lid].sigma_out, rtol=1e-12)


# ---------------------------------------------------------------- L1


def test_l1_examples():
    assert l1_rank(np.ones((1, 3, 3, 3)))[0] == 27
    assert l1_rank(np.zeros((2, 3, 3, 3))).tolist() == [0, 0]
    f = np.zeros((1, 1, 3, 3))
    f[0, 0, 0, :] = [1, -2, 3]
    assert l1_rank(f)[0] == 6


# ---------------------------------------------------------------- Beta


def test_beta_equals_l1_when_spread_is_preserved():
    # 1x1 identity-like filters with unit gain keep the input spread: sigma_out == sigma_in
    g = one_conv(cin=1, cout=2, k=1, size=4)
    w = {"c": {"weight": np.array([1.0, -1.0], np.float32).reshape(2, 1, 1, 1)}}
    x = np.random.default_rng(5).random((6, 1, 4, 4), dtype=np.float32)
    stats = window_stats(g, w, x)
    assert_allclose(stats["c"].sigma_out, stats["c"].sigma_in, rtol=1e-6)
    assert_allclose(beta_rank(g, w, x, stats=stats).scores["c"], l1_rank(w["c"]["weight"]), rtol=1e-6)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(0.1, 10.0), k=st.integers(0, 3), seed=st.integers(0, 1000))
def test_scaling_a_filter_scales_beta_by_c_squared(c, k, seed):
    rng = np.random.default_rng(seed)
    g = one_conv(cin=2, cout=4, size=6)
    w = {"c": {"weight": rng.normal(size=(4, 2, 3, 3))}}
    x = rng.random((4, 2, 6, 6))
    base = beta_rank(g, w, x).scores["c"]
    w2 = {"c": {"weight": w["c"]["weight"].copy()}}
    w2["c"]["weight"][k] *= c
    scaled = beta_rank(g, w2, x).scores["c"]
    assert scaled[k] == pytest.approx(c * c * base[k], rel=1e-9)
    others = [i for i in range(4) if i != k]
    assert_allclose(scaled[others], base[others], rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_two_layer_beta_matches_literal_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    g = random_small_model(rng, n_conv=2)
    w = randomize_bn(init_weights(g, seed=seed), rng)
    x = rng.random((4,) + g.input_shape, dtype=np.float32)
    got = beta_rank(g, w, x, seed=seed)
    want = literal_beta_scores(g, w, x)
    for lid in want:
        assert_allclose(got.scores[lid], want[lid], rtol=1e-5, atol=1e-9)


def test_beta_factorisation_and_determinism():
    rng = np.random.default_rng(6)
    g = random_small_model(rng, n_conv=3)
    w = init_weights(g, seed=6)
    x = rng.random((8,) + g.input_shape, dtype=np.float32)
    stats = window_stats(g, w, x)
    rv = beta_rank(g, w, x, seed=1)
    for lid, s in rv.scores.items():
        expect = l1_rank(w[lid]["weight"]) * (stats[lid].sigma_out / max(stats[lid].sigma_in, EPS))
        assert_allclose(s, expect, rtol=1e-6)
    again = beta_rank(g, w, x, seed=1)
    assert all(again.scores[k].tobytes() == rv.scores[k].tobytes() for k in rv.scores)


@pytest.mark.parametrize("c", [0.25, 0.7, 3.0, 16.0])
def test_first_layer_order_invariant_to_input_scale(c):
    rng = np.random.default_rng(7)
    g = random_small_model(rng, n_conv=2, bias=True)
    w = randomize_bn(init_weights(g, seed=7), rng)
    x = rng.random((8,) + g.input_shape, dtype=np.float32)
    first = g.conv_ids()[0]
    a = beta_rank(g, w, x).scores[first]
    b = beta_rank(g, w, (x * np.float32(c))).scores[first]
    assert_array_equal(np.argsort(-a, kind="stable"), np.argsort(-b, kind="stable"))


def test_scores_non_negative():
    rng = np.random.default_rng(8)
    g = random_small_model(rng, n_conv=3)
    w = init_weights(g, seed=8)
    x = rng.random((4,) + g.input_shape, dtype=np.float32)
    for m in ("l1", "beta", "hrank"):
        for s in compute_rank(m, g, w, x).scores.values():
            assert np.all(s >= 0)


def test_compute_rank_errors():
    g = one_conv()
    with pytest.raises(ValueError, match="unknown"):
        compute_rank("taylor", g, init_weights(g))
    with pytest.raises(ValueError, match="batch"):
        compute_rank("beta", g, init_weights(g))


# ---------------------------------------------------------------- HRank


def test_outer_product_has_rank_one():
    m = np.outer([1.0, 2.0, -1.0, 0.5], [3.0, 0.0, 1.0, 2.0, -2.0])
    assert matrix_ranks(m[None])[0] == 1


def test_identity_map_has_full_rank():
    assert matrix_ranks(np.eye(4, dtype=np.float32)[None])[0] == 4
    assert matrix_ranks(np.zeros((1, 3, 3)))[0] == 0


@pytest.mark.parametrize("seed", range(4))
def test_hrank_matches_row_reduction(seed):
    rng = np.random.default_rng(200 + seed)
    g = random_small_model(rng, n_conv=2)
    w = init_weights(g, seed=seed)
    x = rng.random((3,) + g.input_shape, dtype=np.float32)
    rv = hrank_score(g, w, x)
    outs = run_forward(g, w, x).outputs
    for lid in g.conv_ids():
        maps = outs[activation_node(g, lid)]
        eps = np.finfo(maps.dtype).eps
        want = [np.mean([gaussian_rank(maps[j, k], eps) for j in range(x.shape[0])]) for k in range(maps.shape[1])]
        assert_array_equal(rv.scores[lid], want)


def test_hrank_matrix_oracle_on_random_low_rank():
    rng = np.random.default_rng(9)
    for r in range(0, 6):
        a = rng.normal(size=(6, r)) @ rng.normal(size=(r, 7)) if r else np.zeros((6, 7))
        assert matrix_ranks(a[None], eps=np.finfo(np.float64).eps)[0] == r == gaussian_rank(a, np.finfo(np.float64).eps)


def test_activation_node_follows_bn_to_relu():
    g = build_architecture("resnet8", (3, 16, 16), 3)
    assert activation_node(g, "layer1.0.a.conv") == "layer1.0.a.relu"
    assert activation_node(g, "layer1.0.b.conv") == "layer1.0.relu"


# ---------------------------------------------------------------- group statistics


def _layer_stats(seed=10):
    rng = np.random.default_rng(seed)
    g = one_conv(cin=2, cout=6, size=6)
    w = {"c": {"weight": rng.normal(size=(6, 2, 3, 3))}}
    x = rng.random((5, 2, 6, 6))
    return l1_rank(w["c"]["weight"]), window_stats(g, w, x)["c"]


def test_singleton_groups_equal_filter_values():
    l1, st_ = _layer_stats()
    gs = group_stats(l1, st_, [1], [4])
    assert gs.l1_major == l1[1] and gs.l1_minor == l1[4]
    assert gs.beta_major == st_.beta[1] and gs.betarank_minor == l1[4] * st_.beta[4]


def test_identical_filters_give_equal_group_means():
    g = one_conv(cin=1, cout=4, size=5)
    f = np.random.default_rng(11).normal(size=(1, 1, 3, 3))
    w = {"c": {"weight": np.concatenate([f, f, f, f])}}
    st_ = window_stats(g, w, np.random.default_rng(12).random((4, 1, 5, 5)))["c"]
    gs = group_stats(l1_rank(w["c"]["weight"]), st_, [0, 1], [2, 3])
    assert gs.l1_major == gs.l1_minor
    assert gs.betarank_major == gs.betarank_minor


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["major", "minor", None]), min_size=6, max_size=6))
def test_group_means_match_recomputation(assign):
    if "major" not in assign or "minor" not in assign:
        return
    l1, st_ = _layer_stats()
    major = [i for i, a in enumerate(assign) if a == "major"]
    minor = [i for i, a in enumerate(assign) if a == "minor"]
    gs = group_stats(l1, st_, major, minor)
    beta = [st_.sigma_out[i] / max(st_.sigma_in, EPS) for i in range(6)]
    assert gs.l1_major == pytest.approx(sum(l1[i] for i in major) / len(major), rel=1e-12)
    assert gs.beta_minor == pytest.approx(sum(beta[i] for i in minor) / len(minor), rel=1e-12)
    assert gs.betarank_major == pytest.approx(sum(l1[i] * beta[i] for i in major) / len(major), rel=1e-12)


def test_betarank_group_is_mean_of_products_not_product_of_means():
    l1 = np.array([1.0, 3.0, 1.0, 1.0])

    class Stats:
        beta = np.array([3.0, 1.0, 1.0, 1.0])

    gs = group_stats(l1, Stats, [0, 1], [2, 3])
    assert gs.betarank_major == 3.0
    assert gs.l1_major * gs.beta_major == 4.0


def test_group_errors():
    l1, st_ = _layer_stats()
    with pytest.raises(ValueError, match="overlap"):
        group_stats(l1, st_, [0, 1], [1, 2])
    with pytest.raises(ValueError, match="non-empty"):
        group_stats(l1, st_, [], [1])


# ---------------------------------------------------------------- CSV


def test_rank_csv_round_trip():
    rv = RankVector("Beta", {"a": np.array([0.1, 1 / 3, 2.5e-9]), "b": np.array([7.0])}, 42)
    back = RankVector.from_csv(rv.to_csv())
    assert back.method == "Beta" and back.batch_seed == 42
    for k in rv.scores:
        assert back.scores[k].tobytes() == rv.scores[k].tobytes()
    assert rv.to_csv().splitlines()[0] == "layer_id,filter_index,score,method,batch_seed"


def test_rank_rejects_non_finite():
    with pytest.raises(ValueError):
        RankVector("L1", {"a": np.array([math.nan])})
