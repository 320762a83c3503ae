import itertools

import numpy as np
import pytest

from graphcond import coreset
from graphcond.graphcore import LabeledGraph, generate_sbm, SbmParams
from graphcond.matching import class_counts


def _toy(labels, features=None, train=None):
    labels = np.asarray(labels)
    n = len(labels)
    feats = np.random.default_rng(0).standard_normal((n, 2)) if features is None else np.asarray(features, float)
    train = np.arange(n) if train is None else np.asarray(train)
    rest = np.setdiff1d(np.arange(n), train)
    return LabeledGraph(n, feats.shape[1], int(labels.max()) + 1, np.zeros((0, 2), np.int64), feats, labels,
                        train, rest[: len(rest) // 2], rest[len(rest) // 2:])


def test_class_counts_largest_remainder_by_hand():
    # quotas 3.5, 1.0, 0.5 -> floors 3,1,0; the spare slot goes to class 0 (tie, lower index);
    # class 2 then needs one node, taken from the largest class -> 3,1,1
    labels = np.array([0] * 7 + [1] * 2 + [2])
    np.testing.assert_array_equal(class_counts(labels, 3, 5), [3, 1, 1])


def test_random_select_unbalanced_counts():
    g = _toy([0] * 14 + [1] * 4 + [2] * 2)
    res = coreset.random_select(g, ratio=0.5, seed=0)  # 10 slots, quotas 7, 2, 1
    assert {c: len(v) for c, v in res.selected.items()} == {0: 7, 1: 2, 2: 1}


def test_random_select_deterministic_and_from_train():
    g = generate_sbm(SbmParams(30, 3), seed=1)
    a = coreset.random_select(g, 0.1, seed=4)
    b = coreset.random_select(g, 0.1, seed=4)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert set(a.indices) <= set(g.train.tolist())
    for c, idx in a.selected.items():
        assert np.all(g.labels[idx] == c)


def test_random_select_ratio_one_takes_all_train():
    g = generate_sbm(SbmParams(10, 2), seed=0)
    res = coreset.random_select(g, 1.0, seed=0)
    np.testing.assert_array_equal(np.sort(res.indices), g.train)


@pytest.mark.parametrize("method", coreset.METHODS)
def test_results_are_train_subsets(method):
    g = generate_sbm(SbmParams(40, 3), seed=2)
    res = coreset.select(g, method, 0.1, seed=1)
    assert set(res.indices) <= set(g.train.tolist())
    assert len(set(res.indices.tolist())) == len(res.indices)


def test_unknown_method():
    with pytest.raises(ValueError):
        coreset.select(_toy([0, 1]), "oracle", 0.5)


# ------------------------------------------------------------------ herding


def test_herding_collinear_k1_picks_point_nearest_mean():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]])  # mean 2
    assert coreset.herding_order(x, 1) == [1]


def test_herding_full_class_returns_everything():
    x = np.random.default_rng(3).standard_normal((6, 2))
    assert set(coreset.herding_order(x, 6)) == set(range(6))


def _herding_oracle(x, k):
    """Greedy by enumerating every candidate extension of the current set."""
    mu = x.mean(0)
    chosen = []
    for _ in range(k):
        best, best_d = None, np.inf
        for cand in range(len(x)):
            if cand in chosen:
                continue
            d = np.linalg.norm(mu - x[chosen + [cand]].mean(0))
            if d < best_d - 1e-12:
                best, best_d = cand, d
        chosen.append(best)
    return chosen


def test_herding_five_point_instance():
    x = np.array([[0.0, 0.0], [2.0, 1.0], [-1.0, 3.0], [4.0, -2.0], [1.0, 1.0]])
    assert coreset.herding_order(x, 2) == _herding_oracle(x, 2)


def test_herding_select_per_class():
    g = _toy([0, 0, 0, 1, 1], features=[[0, 0], [1, 0], [5, 0], [0, 1], [0, 3]])
    res = coreset.herding_select(g, 0.4)  # 2 slots: one per class
    np.testing.assert_array_equal(res.selected[0], [1])


# ------------------------------------------------------------------ k-center


def test_kcenter_k1_is_start():
    x = np.random.default_rng(0).standard_normal((5, 2))
    assert coreset.kcenter_order(x, 1, start=3) == [3]


def test_kcenter_square_opposite_corners():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    for start in range(4):
        a, b = coreset.kcenter_order(x, 2, start)
        assert {a, b} in ({0, 2}, {1, 3})


def test_kcenter_all_points():
    x = np.random.default_rng(1).standard_normal((8, 3))
    assert sorted(coreset.kcenter_order(x, 8, 0)) == list(range(8))


def test_kcenter_select_is_seeded():
    g = generate_sbm(SbmParams(30, 2), seed=0)
    a = coreset.kcenter_select(g, 0.1, seed=7).indices
    np.testing.assert_array_equal(a, coreset.kcenter_select(g, 0.1, seed=7).indices)


def _kcenter_greedy_oracle(x, k, start):
    chosen = [start]
    for _ in range(k - 1):
        dists = [min(np.linalg.norm(x[i] - x[c]) for c in chosen) for i in range(len(x))]
        chosen.append(int(np.argmax(dists)))
    return chosen


def _optimal_radius(x, k):
    return min(coreset.covering_radius(x, list(s)) for s in itertools.combinations(range(len(x)), k))


@pytest.mark.parametrize("n", range(1, 9))
def test_kcenter_two_approximation_small(n):
    rng = np.random.default_rng(n)
    for trial in range(3):
        x = rng.standard_normal((n, 2))
        for k in range(1, min(3, n) + 1):
            for start in range(n):
                centers = coreset.kcenter_order(x, k, start)
                assert centers == _kcenter_greedy_oracle(x, k, start)
                assert coreset.covering_radius(x, centers) <= 2 * _optimal_radius(x, k) + 1e-12


@pytest.mark.parametrize("n", range(1, 9))
def test_herding_matches_oracle_small(n):
    rng = np.random.default_rng(100 + n)
    for trial in range(3):
        x = rng.standard_normal((n, 2))
        for k in range(1, min(3, n) + 1):
            assert coreset.herding_order(x, k) == _herding_oracle(x, k)


def test_coreset_graph_is_induced_subgraph():
    g = generate_sbm(SbmParams(20, 2, p_in=0.5), seed=0)
    res = coreset.random_select(g, 0.2, seed=0)
    sub = res.to_graph(g)
    idx = res.indices
    a = g.adjacency().toarray()[np.ix_(idx, idx)]
    np.testing.assert_array_equal(sub.adjacency().toarray(), a)
    np.testing.assert_array_equal(sub.labels, g.labels[idx])
