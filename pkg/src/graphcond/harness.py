"""Evaluation protocol: train on a condensed graph, test on the real one."""

from __future__ import annotations

import csv
import json
import logging
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import coreset, models
from .autodiff import Tape, Tensor
from .graphcore import (
    LabeledGraph,
    NormalizedAdjacency,
    directory_bytes,
    load_condensed,
    normalize_adjacency,
    save_condensed,
    save_coreset_graph,
)
from .matching import CondenseConfig, SyntheticState, condense

log = logging.getLogger(__name__)

ARCHS = ("gcn", "sgc", "mlp")
CSV_COLUMNS = ["dataset", "method", "ratio", "arch", "mode", "acc_mean", "acc_std",
               "epochs", "seconds", "bytes", "speedup"]


@dataclass
class TrainHyper:
    epochs: int = 300
    lr: float = 0.01
    weight_decay: float = 5e-4
    hidden: int = 64
    hops: int = 2


@dataclass
class TrainedModel:
    arch: str
    params: object
    trace: list[float]
    best_epoch: int | None = None

    def predict(self, adj, X) -> np.ndarray:
        with Tape():
            return _forward(self.arch, adj, X, self.params).data


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    std: float
    train_seconds: float
    storage_bytes: int | None
    arch: str
    mode: str
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _init_params(arch: str, d: int, c: int, hyper: TrainHyper, seed: int):
    dist = models.InitDistribution("glorot_uniform", seed)
    rng = dist.rng(7)
    if arch == "gcn":
        return models.GcnParams(Tensor(dist.matrix(rng, d, hyper.hidden)), Tensor(dist.matrix(rng, hyper.hidden, c)))
    if arch == "sgc":
        return models.SgcParams(Tensor(dist.matrix(rng, d, c)), hyper.hops)
    if arch == "mlp":
        return models.MlpParams(Tensor(dist.matrix(rng, d, hyper.hidden)), Tensor(dist.matrix(rng, hyper.hidden, c)))
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")


def _forward(arch, adj, X, params) -> Tensor:
    if arch == "gcn":
        return models.gcn_forward(adj, X, params)
    if arch == "sgc":
        return models.sgc_forward(adj, X, params)
    return models.mlp_forward(adj, X, params)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else float("nan")


def train_classifier(adj, X: np.ndarray, labels: np.ndarray, train_idx, arch: str = "gcn",
                     hyper: TrainHyper | None = None, seed: int = 0, val=None) -> TrainedModel:
    """Full-batch Adam training with L2 weight decay.

    ``val`` is an optional ``(adj, X, labels, idx)`` tuple; when given the
    parameters with the best validation accuracy are returned.
    """
    hyper = hyper or TrainHyper()
    params = _init_params(arch, X.shape[1], int(labels.max()) + 1 if labels.size else 1, hyper, seed)
    return _fit(adj, X, labels, train_idx, arch, hyper, params, val)


def _fit(adj, X, labels, train_idx, arch, hyper, params, val) -> TrainedModel:
    arrs = [t.data for t in params.tensors()]
    m = [np.zeros_like(a) for a in arrs]
    v = [np.zeros_like(a) for a in arrs]
    trace: list[float] = []
    best = (-1.0, None, arrs)
    Xc = Tensor(X)
    for epoch in range(1, hyper.epochs + 1):
        with Tape():
            ts = [Tensor(a, requires_grad=True) for a in arrs]
            loss = ad.softmax_cross_entropy(_forward(arch, adj, Xc, params.with_tensors(ts)), labels, train_idx)
            grads = ad.grad(loss, ts)
        trace.append(loss.item())
        new = []
        for k, (a, gr) in enumerate(zip(arrs, grads)):
            gk = gr.data + hyper.weight_decay * a
            m[k] = 0.9 * m[k] + 0.1 * gk
            v[k] = 0.999 * v[k] + 0.001 * gk * gk
            new.append(a - hyper.lr * (m[k] / (1 - 0.9 ** epoch)) / (np.sqrt(v[k] / (1 - 0.999 ** epoch)) + 1e-8))
        arrs = new
        if val is not None:
            vadj, vX, vlab, vidx = val
            with Tape():
                logits = _forward(arch, vadj, vX, params.with_tensors(Tensor(a) for a in arrs)).data
            acc = _accuracy(logits[vidx], vlab[vidx])
            if acc > best[0]:
                best = (acc, epoch, arrs)
    if val is not None and best[1] is not None:
        arrs = best[2]
    final = params.with_tensors(Tensor(a) for a in arrs)
    return TrainedModel(arch, final, trace, best[1] if val is not None else None)


def _condensed_parts(source, features_only: bool, delta: float):
    """(normalized adjacency, features, labels, train indices, storage bytes)."""
    nbytes = None
    if isinstance(source, (str, Path)):
        nbytes = directory_bytes(source)
        source = load_condensed(source)
    if isinstance(source, LabeledGraph):
        adj = normalize_adjacency(source) if not features_only else normalize_adjacency(np.zeros((source.num_nodes,) * 2))
        return adj, source.features, source.labels, source.train, nbytes
    if isinstance(source, SyntheticState):
        n = source.num_nodes
        dense = np.zeros((n, n)) if features_only else source.dense_adjacency(delta)
        return normalize_adjacency(dense), source.features, source.labels, np.arange(n), nbytes
    raise TypeError(f"cannot evaluate {type(source).__name__}")


def evaluate_condensed(source, real: LabeledGraph, arch: str = "gcn", repeats: int = 3,
                       features_only: bool = False, hyper: TrainHyper | None = None,
                       delta: float = 0.5, seed: int = 0) -> EvalReport:
    """Train on the condensed graph, score on the real test nodes.

    ``source`` is a condensed directory, a :class:`SyntheticState`, or a
    :class:`LabeledGraph` (trained on its own train split).  Real labels are
    read only at validation and test indices.
    """
    hyper = hyper or TrainHyper()
    adj, X, labels, train_idx, nbytes = _condensed_parts(source, features_only, delta)
    warnings = []
    missing = sorted(set(np.unique(real.labels[real.test]).tolist()) - set(np.unique(labels[train_idx]).tolist()))
    if missing:
        msg = f"classes {missing} appear in the real test split but not in the condensed labels"
        log.warning(msg)
        warnings.append(msg)
    real_adj = normalize_adjacency(real)
    val = (real_adj, real.features, real.labels, real.val) if len(real.val) else None
    # widen the label space so every real class has an output unit
    n_cls = max(real.num_classes, int(labels.max()) + 1)
    accs = []
    start = time.perf_counter()
    for rep in range(repeats):
        params = _init_params(arch, X.shape[1], n_cls, hyper, seed + rep)
        model = _fit(adj, X, labels, train_idx, arch, hyper, params, val)
        logits = model.predict(real_adj, real.features)
        accs.append(_accuracy(logits[real.test], real.labels[real.test]))
    elapsed = time.perf_counter() - start
    return EvalReport(
        accuracies=accs, mean=float(np.mean(accs)), std=float(np.std(accs)),
        train_seconds=elapsed, storage_bytes=nbytes, arch=arch,
        mode="features-only" if features_only else "with-structure", warnings=warnings,
    )


def transfer_eval(source, real: LabeledGraph, archs=("gcn", "sgc", "mlp"), repeats: int = 3,
                  hyper: TrainHyper | None = None, seed: int = 0) -> list[EvalReport]:
    return [evaluate_condensed(source, real, a, repeats, hyper=hyper, seed=seed) for a in archs]


# ---------------------------------------------------------------------------
# benchmark grid


def _run_cell(g: LabeledGraph, cell: dict, workdir: Path, dataset: str) -> list[dict]:
    method = cell["method"]
    ratio = float(cell.get("ratio", 0.05))
    archs = cell.get("archs", ["gcn"])
    repeats = int(cell.get("repeats", 3))
    features_only = bool(cell.get("features_only", False))
    seed = int(cell.get("seed", 0))
    hyper = TrainHyper(**cell.get("train", {}))
    out_dir = workdir / cell.get("name", f"{method}_{ratio}_{seed}")
    epochs = 0
    start = time.perf_counter()
    if method in ("gcond", "mgcond", "exgc"):
        overrides = dict(cell.get("config", {}))
        overrides.update(mode=method, ratio=ratio, seed=seed)
        cfg = CondenseConfig.from_dict(overrides)
        report = condense(g, cfg)
        epochs = report.convergence_epoch
        save_condensed(report.state, out_dir, delta=cfg.delta)
        report.write_trace(out_dir / "trace.csv")
    elif method in coreset.METHODS:
        res = coreset.select(g, method, ratio, seed)
        save_coreset_graph(res.to_graph(g), out_dir)
    else:
        raise ValueError(f"unknown benchmark method {method!r}")
    seconds = time.perf_counter() - start
    rows = []
    for arch in archs:
        rep = evaluate_condensed(out_dir, g, arch, repeats, features_only, hyper, seed=seed)
        rows.append({
            "dataset": dataset, "method": method, "ratio": ratio, "arch": arch, "mode": rep.mode,
            "acc_mean": rep.mean, "acc_std": rep.std, "epochs": epochs, "seconds": seconds,
            "bytes": rep.storage_bytes, "accuracies": rep.accuracies, "seed": seed,
        })
    return rows


def add_speedups(rows: list[dict]) -> None:
    """``speedup`` on exgc rows: matching gcond seconds / exgc seconds."""
    ref = {(r["dataset"], r["ratio"], r["seed"]): r["seconds"] for r in rows if r["method"] == "gcond"}
    for r in rows:
        key = (r["dataset"], r["ratio"], r["seed"])
        r["speedup"] = ref[key] / r["seconds"] if r["method"] == "exgc" and key in ref and r["seconds"] > 0 else None


def benchmark(g: LabeledGraph, grid: list[dict], out_dir, dataset: str = "dataset", jobs: int = 1) -> list[dict]:
    """Run every grid cell, then write ``report.csv`` and ``report.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(exist_ok=True)
    if jobs > 1 and len(grid) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, [g] * len(grid), grid, [cells_dir] * len(grid), [dataset] * len(grid)))
    else:
        results = [_run_cell(g, cell, cells_dir, dataset) for cell in grid]
    rows = [r for cell_rows in results for r in cell_rows]
    add_speedups(rows)
    with (out_dir / "report.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in CSV_COLUMNS})
    (out_dir / "report.json").write_text(json.dumps({"rows": rows}, indent=2) + "\n")
    return rows


def evaluate_state(state: SyntheticState, real: LabeledGraph, **kw) -> EvalReport:
    """Evaluate an in-memory state through a temporary directory round-trip."""
    with tempfile.TemporaryDirectory() as tmp:
        save_condensed(state, tmp, delta=kw.pop("delta", 0.5))
        return evaluate_condensed(tmp, real, **kw)
