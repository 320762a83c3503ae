import json
import logging

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from graphcond import graphcore as gc
from graphcond import matching, models


def _write_path_graph(d, extra_edges=""):
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta.json").write_text(json.dumps({"num_nodes": 3, "num_features": 2, "num_classes": 2, "format_version": 1}))
    (d / "edges.tsv").write_text("0\t1\n1\t2\n" + extra_edges)
    (d / "features.tsv").write_text("0.1\t0.2\n0.3\t0.4\n0.5\t0.6\n")
    (d / "labels.tsv").write_text("0\n1\n0\n")
    (d / "splits.json").write_text(json.dumps({"train": [0, 1], "val": [], "test": [2]}))
    return d


def test_load_path_graph(tmp_path):
    g = gc.load_graph(_write_path_graph(tmp_path / "g"))
    assert g.num_nodes == 3 and g.num_edges == 2
    np.testing.assert_array_equal(g.edges, [[0, 1], [1, 2]])
    assert g.metadata["duplicates_dropped"] == 0


def test_duplicate_reversed_edge_is_dropped(tmp_path):
    g = gc.load_graph(_write_path_graph(tmp_path / "g", "1\t0\n"))
    assert g.num_edges == 2
    assert g.metadata["duplicates_dropped"] == 1


def test_space_separated_edges_accepted(tmp_path):
    d = _write_path_graph(tmp_path / "g")
    (d / "edges.tsv").write_text("0 1\n1 2\n")
    assert gc.load_graph(d).num_edges == 2


def test_self_loop_dropped_with_warning(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        g = gc.load_graph(_write_path_graph(tmp_path / "g", "2\t2\n"))
    assert g.num_edges == 2 and g.metadata["self_loops_dropped"] == 1
    assert "self-loop" in caplog.text


def test_label_out_of_range(tmp_path):
    d = _write_path_graph(tmp_path / "g")
    (d / "labels.tsv").write_text("0\n5\n0\n")
    with pytest.raises(gc.GraphFormatError, match="label out of range") as exc:
        gc.load_graph(d)
    assert exc.value.line == 2 and exc.value.path.endswith("labels.tsv")


def test_missing_file(tmp_path):
    d = _write_path_graph(tmp_path / "g")
    (d / "splits.json").unlink()
    with pytest.raises(gc.GraphFormatError, match="missing file"):
        gc.load_graph(d)


def test_dimension_mismatch(tmp_path):
    d = _write_path_graph(tmp_path / "g")
    (d / "features.tsv").write_text("0.1\t0.2\n0.3\t0.4\n")
    with pytest.raises(gc.GraphFormatError, match="dimension mismatch"):
        gc.load_graph(d)


def test_non_finite_feature(tmp_path):
    d = _write_path_graph(tmp_path / "g")
    (d / "features.tsv").write_text("0.1\t0.2\nnan\t0.4\n0.5\t0.6\n")
    with pytest.raises(gc.GraphFormatError, match="non-finite") as exc:
        gc.load_graph(d)
    assert exc.value.line == 2


def test_graph_round_trip(tmp_path):
    g = gc.generate_sbm(gc.SbmParams(nodes_per_class=8, num_classes=2), seed=3)
    gc.save_graph(g, tmp_path / "g")
    h = gc.load_graph(tmp_path / "g")
    for f in ("edges", "features", "labels", "train", "val", "test"):
        np.testing.assert_array_equal(getattr(g, f), getattr(h, f))


def test_normalize_isolated_node():
    np.testing.assert_array_equal(gc.normalize_adjacency(np.zeros((1, 1))).toarray(), [[1.0]])


def test_normalize_single_edge():
    np.testing.assert_allclose(gc.normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]])).toarray(),
                               [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_normalize_rejects_bad_input():
    with pytest.raises(gc.GraphValueError):
        gc.normalize_adjacency(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(gc.GraphValueError):
        gc.normalize_adjacency(np.array([[0.0, -1.0], [-1.0, 0.0]]))


def _dense_oracle(a):
    at = a + np.eye(len(a))
    dinv = np.diag(1.0 / np.sqrt(at.sum(1)))
    return dinv @ at @ dinv


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.booleans())
def test_normalize_matches_dense_oracle(seed, n, weighted):
    rng = np.random.default_rng(seed)
    a = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.5), 1)
    if not weighted:
        a = (a > 0).astype(float)
    a = a + a.T
    out = gc.normalize_adjacency(a).toarray()
    np.testing.assert_allclose(out, _dense_oracle(a), atol=1e-14)
    assert np.abs(out - out.T).max() <= 1e-12
    np.testing.assert_allclose(np.diag(out), 1.0 / (a.sum(1) + 1), atol=1e-14)
    nz = out[out != 0]
    assert np.all((nz > 0) & (nz <= 1)) and np.all(out.sum(1) <= n)
    # sparse input gives the same operator
    np.testing.assert_allclose(gc.normalize_adjacency(sp.csr_matrix(a)).toarray(), out, atol=1e-15)


def test_normalize_graph_input():
    g = gc.generate_sbm(gc.SbmParams(nodes_per_class=5, num_classes=2), seed=0)
    np.testing.assert_allclose(gc.normalize_adjacency(g).toarray(), _dense_oracle(g.adjacency().toarray()), atol=1e-14)


def test_sbm_extreme_probabilities():
    g = gc.generate_sbm(gc.SbmParams(nodes_per_class=3, num_classes=2, p_in=1.0, p_out=0.0), seed=0)
    assert g.num_edges == 6
    a = g.adjacency().toarray()
    same = g.labels[:, None] == g.labels[None, :]
    assert np.all(a[same & ~np.eye(6, dtype=bool)] == 1) and np.all(a[~same] == 0)


def test_sbm_determinism(tmp_path):
    p = gc.SbmParams(nodes_per_class=20)
    gc.save_graph(gc.generate_sbm(p, 5), tmp_path / "a")
    gc.save_graph(gc.generate_sbm(p, 5), tmp_path / "b")
    for f in ("meta.json", "edges.tsv", "features.tsv", "labels.tsv", "splits.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("seed", range(5))
def test_sbm_within_class_density(seed):
    g = gc.generate_sbm(gc.SbmParams(200, 3, 0.3, 0.02), seed)
    a = g.adjacency().toarray()
    same = (g.labels[:, None] == g.labels[None, :]) & ~np.eye(g.num_nodes, dtype=bool)
    assert abs(a[same].mean() - 0.3) <= 0.2 * 0.3
    np.testing.assert_array_equal(np.bincount(g.labels), [200, 200, 200])


def test_sbm_split_is_stratified_and_disjoint():
    g = gc.generate_sbm(gc.SbmParams(50, 4), seed=1)
    for idx, frac in ((g.train, 0.6), (g.val, 0.2), (g.test, 0.2)):
        np.testing.assert_array_equal(np.bincount(g.labels[idx], minlength=4), [int(round(frac * 50))] * 4)
    assert len(np.intersect1d(g.train, g.test)) == 0


def test_sbm_invalid_params():
    with pytest.raises(gc.GraphValueError):
        gc.SbmParams(p_in=0.1, p_out=0.2).validate()


def test_labeled_graph_invariants():
    base = dict(num_nodes=3, num_features=1, num_classes=2, features=np.zeros((3, 1)),
                labels=np.array([0, 1, 0]), train=np.array([0]), val=np.array([1]), test=np.array([2]))
    with pytest.raises(gc.GraphValueError):
        gc.LabeledGraph(edges=np.array([[1, 1]]), **base)
    with pytest.raises(gc.GraphValueError):
        gc.LabeledGraph(edges=np.array([[0, 1], [0, 1]]), **base)
    with pytest.raises(gc.GraphValueError):
        gc.LabeledGraph(edges=np.zeros((0, 2), int), **{**base, "train": np.array([0, 1])})
    with pytest.raises(gc.GraphValueError):
        gc.LabeledGraph(edges=np.zeros((0, 2), int), **{**base, "train": np.zeros(0, int)})


def _random_state(seed, n=7, d=3):
    rng = np.random.default_rng(seed)
    phi = models.sample_adjgen(models.InitDistribution(seed=seed), d, 5, 1)
    return matching.SyntheticState(
        features=rng.standard_normal((n, d)), labels=rng.integers(0, 3, n), phi=phi, num_classes=3,
        blocks=[np.array([0, 2, 4]), np.array([1, 3, 5, 6])], candidates=np.array([1, 2]),
        active=np.array([0, 3, 4, 5, 6]), epoch=11,
    )


def test_condensed_round_trip(tmp_path):
    st_ = _random_state(0)
    gc.save_condensed(st_, tmp_path / "c")
    back = gc.load_condensed(tmp_path / "c")
    np.testing.assert_array_equal(back.features, st_.features)
    np.testing.assert_array_equal(back.labels, st_.labels)
    for a, b in zip(back.phi.arrays(), st_.phi.arrays()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(back.adjacency, st_.dense_adjacency(0.5))
    np.testing.assert_array_equal(back.dense_adjacency(0.5), st_.dense_adjacency(0.5))
    assert back.epoch == 11
    np.testing.assert_array_equal(back.candidates, st_.candidates)
    for a, b in zip(back.blocks, st_.blocks):
        np.testing.assert_array_equal(a, b)


def test_adj_tsv_respects_threshold(tmp_path):
    st_ = _random_state(1, n=12)
    gc.save_condensed(st_, tmp_path / "c", delta=0.5)
    rows = [line.split("\t") for line in (tmp_path / "c" / "adj.tsv").read_text().splitlines()]
    full = models.adjgen_forward(st_.features, st_.phi).data
    iu = np.triu_indices(12, 1)
    assert len(rows) == int((full[iu] >= 0.5).sum())
    for i, j, w in rows:
        assert int(i) < int(j) and float(w) >= 0.5


def test_truncated_features_row(tmp_path):
    gc.save_condensed(_random_state(2), tmp_path / "c")
    f = tmp_path / "c" / "features.tsv"
    lines = f.read_text().splitlines()
    lines[3] = "\t".join(lines[3].split("\t")[:-1])
    f.write_text("\n".join(lines) + "\n")
    with pytest.raises(gc.GraphFormatError, match="expected 3 columns") as exc:
        gc.load_condensed(tmp_path / "c")
    assert exc.value.line == 4


def test_format_version_mismatch(tmp_path):
    gc.save_condensed(_random_state(3), tmp_path / "c")
    meta = json.loads((tmp_path / "c" / "meta.json").read_text())
    meta["format_version"] = 99
    (tmp_path / "c" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(gc.GraphFormatError, match="format_version"):
        gc.load_condensed(tmp_path / "c")


def test_coreset_layout_has_no_phi(tmp_path):
    g = gc.generate_sbm(gc.SbmParams(nodes_per_class=6, num_classes=2), seed=0)
    sub = g.induced_subgraph(g.train[:5])
    gc.save_coreset_graph(sub, tmp_path / "c")
    assert not (tmp_path / "c" / "phi.json").exists()
    back = gc.load_condensed(tmp_path / "c")
    np.testing.assert_array_equal(back.adjacency, sub.adjacency().toarray())
