import csv
import json
import logging

import numpy as np
import pytest

from graphcond import coreset, harness
from graphcond.graphcore import SbmParams, generate_sbm, normalize_adjacency, save_coreset_graph
from graphcond.matching import CondenseConfig, condense


@pytest.fixture(scope="module")
def sbm():
    return generate_sbm(SbmParams(40, 3, 0.3, 0.02, feature_dim=8), seed=0)


FAST = harness.TrainHyper(epochs=40, hidden=16)


def test_loss_strictly_decreases_first_epochs(sbm):
    m = harness.train_classifier(normalize_adjacency(sbm), sbm.features, sbm.labels, sbm.train,
                                 hyper=harness.TrainHyper(epochs=10))
    assert np.all(np.diff(m.trace) < 0)


def test_zero_epochs_returns_init(sbm):
    adj = normalize_adjacency(sbm)
    m = harness.train_classifier(adj, sbm.features, sbm.labels, sbm.train, hyper=harness.TrainHyper(epochs=0), seed=3)
    init = harness._init_params("gcn", sbm.num_features, 3, harness.TrainHyper(epochs=0), 3)
    for a, b in zip(m.params.tensors(), init.tensors()):
        np.testing.assert_array_equal(a.data, b.data)
    assert m.trace == []


@pytest.mark.parametrize("arch", harness.ARCHS)
def test_training_deterministic(sbm, arch):
    adj = normalize_adjacency(sbm)
    a = harness.train_classifier(adj, sbm.features, sbm.labels, sbm.train, arch, FAST, seed=1)
    b = harness.train_classifier(adj, sbm.features, sbm.labels, sbm.train, arch, FAST, seed=1)
    for x, y in zip(a.params.tensors(), b.params.tensors()):
        np.testing.assert_array_equal(x.data, y.data)


def test_unknown_arch(sbm):
    with pytest.raises(ValueError):
        harness.train_classifier(normalize_adjacency(sbm), sbm.features, sbm.labels, sbm.train, "gat")


def test_protocol_identity_on_real_graph(sbm):
    rep = harness.evaluate_condensed(sbm, sbm, "gcn", repeats=2, hyper=FAST, seed=5)
    adj = normalize_adjacency(sbm)
    direct = []
    for k in range(2):
        m = harness.train_classifier(adj, sbm.features, sbm.labels, sbm.train, "gcn", FAST, seed=5 + k,
                                     val=(adj, sbm.features, sbm.labels, sbm.val))
        pred = m.predict(adj, sbm.features).argmax(1)
        direct.append(float(np.mean(pred[sbm.test] == sbm.labels[sbm.test])))
    assert rep.accuracies == direct


def test_report_mean_is_mean_of_repeats(sbm):
    rep = harness.evaluate_condensed(sbm, sbm, "sgc", repeats=3, hyper=FAST)
    assert rep.mean == float(np.mean(rep.accuracies))
    assert rep.std == float(np.std(rep.accuracies))
    assert len(rep.accuracies) == 3


def test_missing_class_warns(sbm, caplog, tmp_path):
    idx = np.concatenate([sbm.train[sbm.labels[sbm.train] == c][:5] for c in (0, 1)])
    save_coreset_graph(sbm.induced_subgraph(idx), tmp_path / "c")
    with caplog.at_level(logging.WARNING):
        rep = harness.evaluate_condensed(tmp_path / "c", sbm, repeats=1, hyper=FAST)
    assert rep.warnings and "classes [2]" in rep.warnings[0]
    assert rep.storage_bytes > 0


def test_features_only_mode(sbm):
    rep = harness.evaluate_condensed(sbm, sbm, repeats=1, hyper=FAST, features_only=True)
    assert rep.mode == "features-only"


def test_transfer_sgc_close_to_gcn():
    g = generate_sbm(SbmParams(60, 3, 0.3, 0.02), seed=1)
    res = coreset.random_select(g, 0.2, seed=0).to_graph(g)
    reps = harness.transfer_eval(res, g, archs=("gcn", "sgc"), repeats=2)
    assert [r.arch for r in reps] == ["gcn", "sgc"]
    assert abs(reps[0].mean - reps[1].mean) < 0.15


def test_transfer_single_arch_is_evaluate(sbm):
    (a,) = harness.transfer_eval(sbm, sbm, archs=("gcn",), repeats=1, hyper=FAST)
    b = harness.evaluate_condensed(sbm, sbm, "gcn", 1, hyper=FAST)
    assert a.accuracies == b.accuracies


def test_eval_hides_train_labels(sbm):
    # scrambling real labels on train nodes must not change the evaluation of a condensed state
    rep = condense(sbm, CondenseConfig(ratio=0.1, max_epochs=2, hidden=8, phi_hidden=8))
    scrambled = generate_sbm(SbmParams(40, 3, 0.3, 0.02, feature_dim=8), seed=0)
    scrambled.labels[scrambled.train] = (scrambled.labels[scrambled.train] + 1) % 3
    a = harness.evaluate_state(rep.state, sbm, repeats=1, hyper=FAST)
    b = harness.evaluate_state(rep.state, scrambled, repeats=1, hyper=FAST)
    assert a.accuracies == b.accuracies


# ---------------------------------------------------------------- benchmark


def test_empty_grid(sbm, tmp_path):
    assert harness.benchmark(sbm, [], tmp_path) == []
    with (tmp_path / "report.csv").open() as fh:
        assert next(csv.reader(fh)) == harness.CSV_COLUMNS
    assert json.loads((tmp_path / "report.json").read_text()) == {"rows": []}


def test_two_cell_grid_and_speedup(sbm, tmp_path):
    small = {"hidden": 8, "phi_hidden": 8, "max_epochs": 3, "patience": 5}
    grid = [
        {"method": "gcond", "ratio": 0.1, "config": small, "repeats": 1, "train": {"epochs": 20}},
        {"method": "exgc", "ratio": 0.1, "config": dict(small, kappa=0.5, selection_period=1),
         "repeats": 1, "train": {"epochs": 20}},
    ]
    rows = harness.benchmark(sbm, grid, tmp_path, dataset="sbm")
    assert len(rows) == 2
    with (tmp_path / "report.csv").open() as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 2
    gc, ex = table
    assert gc["speedup"] == ""
    assert float(ex["speedup"]) == pytest.approx(float(gc["seconds"]) / float(ex["seconds"]), rel=1e-9)
    for r in rows:
        assert r["acc_mean"] == float(np.mean(r["accuracies"]))
        assert r["bytes"] > 0


def test_coreset_cell(sbm, tmp_path):
    rows = harness.benchmark(sbm, [{"method": "herding", "ratio": 0.2, "repeats": 1, "train": {"epochs": 10}}],
                             tmp_path)
    assert rows[0]["epochs"] == 0 and rows[0]["speedup"] is None


def test_unknown_benchmark_method(sbm, tmp_path):
    with pytest.raises(ValueError):
        harness.benchmark(sbm, [{"method": "magic"}], tmp_path)
