"""Graph data model, on-disk dataset format, normalization and SBM generation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class GraphFormatError(ValueError):
    """A dataset or condensed-graph directory is malformed."""

    def __init__(self, path, message, line=None):
        where = f"{path}" if line is None else f"{path}:{line}"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.line = line


class GraphValueError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledGraph:
    num_nodes: int
    num_features: int
    num_classes: int
    edges: np.ndarray  # (E, 2) int64, u < v, sorted, unique
    features: np.ndarray  # (N, d) float64
    labels: np.ndarray  # (N,) int64
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.num_nodes
        if self.features.shape != (n, self.num_features):
            raise GraphValueError(f"features shape {self.features.shape} != ({n}, {self.num_features})")
        if not np.all(np.isfinite(self.features)):
            raise GraphValueError("features contain non-finite values")
        if self.labels.shape != (n,):
            raise GraphValueError(f"labels length {self.labels.shape[0]} != {n}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise GraphValueError("label out of range")
        e = self.edges
        if e.size:
            if e.min() < 0 or e.max() >= n:
                raise GraphValueError("edge endpoint out of range")
            if np.any(e[:, 0] >= e[:, 1]):
                raise GraphValueError("edges must be stored as u < v without self-loops")
            if len(np.unique(e, axis=0)) != len(e):
                raise GraphValueError("duplicate edges")
        splits = [np.asarray(s) for s in (self.train, self.val, self.test)]
        allidx = np.concatenate(splits)
        if len(np.unique(allidx)) != len(allidx):
            raise GraphValueError("split lists overlap")
        if allidx.size and (allidx.min() < 0 or allidx.max() >= n):
            raise GraphValueError("split index out of range")
        if self.train.size == 0:
            raise GraphValueError("train split is empty")

    @property
    def num_edges(self) -> int:
        return int(len(self.edges))

    def adjacency(self) -> sp.csr_matrix:
        """Unweighted symmetric adjacency without self-loops."""
        n = self.num_nodes
        if not len(self.edges):
            return sp.csr_matrix((n, n))
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    def induced_subgraph(self, nodes) -> "LabeledGraph":
        """Subgraph on ``nodes`` (all of which become train nodes)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        pos = np.full(self.num_nodes, -1, dtype=np.int64)
        pos[nodes] = np.arange(len(nodes))
        keep = (pos[self.edges[:, 0]] >= 0) & (pos[self.edges[:, 1]] >= 0) if len(self.edges) else np.zeros(0, bool)
        sub = pos[self.edges[keep]] if len(self.edges) else np.zeros((0, 2), np.int64)
        return LabeledGraph(
            num_nodes=len(nodes),
            num_features=self.num_features,
            num_classes=self.num_classes,
            edges=canonical_edges(sub),
            features=self.features[nodes].copy(),
            labels=self.labels[nodes].copy(),
            train=np.arange(len(nodes)),
            val=np.zeros(0, np.int64),
            test=np.zeros(0, np.int64),
        )


def canonical_edges(pairs) -> np.ndarray:
    """Order each pair as u < v, drop self-loops, dedupe and sort."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if not len(pairs):
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """D^{-1/2}(A+I)D^{-1/2} stored as a CSR matrix."""

    matrix: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    @cached_property
    def transposed(self) -> "NormalizedAdjacency":
        return NormalizedAdjacency(self.matrix.T.tocsr())


def normalize_adjacency(g) -> NormalizedAdjacency:
    """Symmetric GCN normalization with self-loops added.

    Accepts a :class:`LabeledGraph`, a scipy sparse matrix, or a dense
    non-negative symmetric array (weighted entries allowed).
    """
    if isinstance(g, LabeledGraph):
        a = g.adjacency()
    elif sp.issparse(g):
        a = sp.csr_matrix(g, dtype=np.float64)
    else:
        a = np.asarray(g, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphValueError(f"adjacency must be square, got {a.shape}")
        a = sp.csr_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise GraphValueError(f"adjacency must be square, got {a.shape}")
    if a.nnz and a.data.min() < 0:
        raise GraphValueError("adjacency has a negative weight")
    if a.nnz and abs(a - a.T).max() > 0:
        raise GraphValueError("adjacency is not symmetric")
    n = a.shape[0]
    a = a + sp.identity(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    dinv = sp.diags(1.0 / np.sqrt(deg))
    out = (dinv @ a @ dinv).tocsr()
    out.sort_indices()
    return NormalizedAdjacency(out)


# ---------------------------------------------------------------------------
# on-disk dataset format


def _read_tsv(path: Path, ncols: int | None, dtype, nrows: int | None = None) -> np.ndarray:
    if not path.exists():
        raise GraphFormatError(path, "missing file")
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split()
            if ncols is not None and len(parts) != ncols:
                raise GraphFormatError(path, f"expected {ncols} columns, found {len(parts)}", lineno)
            try:
                vals = [dtype(p) for p in parts]
            except ValueError:
                raise GraphFormatError(path, f"unparseable value in {text!r}", lineno) from None
            if dtype is float and not all(math.isfinite(v) for v in vals):
                raise GraphFormatError(path, "non-finite feature", lineno)
            rows.append(vals)
    if nrows is not None and len(rows) != nrows:
        raise GraphFormatError(path, f"dimension mismatch: expected {nrows} rows, found {len(rows)}")
    width = ncols if ncols is not None else 0
    return np.array(rows, dtype=np.float64 if dtype is float else np.int64).reshape(len(rows), width)


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise GraphFormatError(path, "missing file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(path, f"invalid JSON: {exc.msg}", exc.lineno) from None


def load_graph(directory) -> LabeledGraph:
    directory = Path(directory)
    meta = _read_json(directory / "meta.json")
    try:
        n, d, c = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])
    except KeyError as exc:
        raise GraphFormatError(directory / "meta.json", f"missing key {exc.args[0]}") from None
    if meta.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise GraphFormatError(directory / "meta.json", f"unsupported format_version {meta.get('format_version')}")

    raw = _read_tsv(directory / "edges.tsv", 2, int)
    if raw.size and (raw.min() < 0 or raw.max() >= n):
        bad = int(np.flatnonzero((raw < 0).any(1) | (raw >= n).any(1))[0]) + 1
        raise GraphFormatError(directory / "edges.tsv", "edge endpoint out of range", bad)
    self_loops = int(np.sum(raw[:, 0] == raw[:, 1])) if raw.size else 0
    edges = canonical_edges(raw)
    duplicates = len(raw) - self_loops - len(edges)
    if self_loops:
        log.warning("dropped %d self-loop line(s) from %s", self_loops, directory / "edges.tsv")

    feats = _read_tsv(directory / "features.tsv", d, float, nrows=n)
    labels_path = directory / "labels.tsv"
    labels = _read_tsv(labels_path, 1, int, nrows=n).ravel()
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise GraphFormatError(labels_path, f"label out of range: {labels[bad[0]]} not in [0, {c})", int(bad[0]) + 1)

    splits = _read_json(directory / "splits.json")
    try:
        train, val, test = (np.asarray(splits[k], dtype=np.int64) for k in ("train", "val", "test"))
    except KeyError as exc:
        raise GraphFormatError(directory / "splits.json", f"missing key {exc.args[0]}") from None

    try:
        return LabeledGraph(
            num_nodes=n, num_features=d, num_classes=c, edges=edges, features=feats,
            labels=labels, train=train, val=val, test=test,
            metadata={"duplicates_dropped": duplicates, "self_loops_dropped": self_loops},
        )
    except GraphValueError as exc:
        raise GraphFormatError(directory, str(exc)) from None


def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix_tsv(path: Path, mat: np.ndarray) -> None:
    with Path(path).open("w") as fh:
        for row in np.atleast_2d(mat):
            fh.write("\t".join(_fmt(v) for v in row) + "\n")


def write_int_tsv(path: Path, arr) -> None:
    with Path(path).open("w") as fh:
        for row in np.asarray(arr, dtype=np.int64).reshape(len(arr), -1):
            fh.write("\t".join(str(int(v)) for v in row) + "\n")


def save_graph(g: LabeledGraph, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": g.num_nodes, "num_features": g.num_features,
            "num_classes": g.num_classes, "format_version": FORMAT_VERSION}
    (directory / "meta.json").write_text(json.dumps(meta) + "\n")
    write_int_tsv(directory / "edges.tsv", g.edges)
    write_matrix_tsv(directory / "features.tsv", g.features)
    write_int_tsv(directory / "labels.tsv", g.labels)
    splits = {k: [int(i) for i in getattr(g, k)] for k in ("train", "val", "test")}
    (directory / "splits.json").write_text(json.dumps(splits) + "\n")


# ---------------------------------------------------------------------------
# stochastic block model


@dataclass(frozen=True)
class SbmParams:
    nodes_per_class: int = 200
    num_classes: int = 3
    p_in: float = 0.3
    p_out: float = 0.02
    feature_dim: int = 16
    class_mean_separation: float = 1.0
    feature_noise: float = 1.0
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def validate(self) -> None:
        if self.nodes_per_class < 1 or self.num_classes < 1 or self.feature_dim < 1:
            raise GraphValueError("nodes_per_class, num_classes and feature_dim must be positive")
        if not 0.0 <= self.p_out < self.p_in <= 1.0:
            raise GraphValueError(f"need 0 <= p_out < p_in <= 1, got p_in={self.p_in}, p_out={self.p_out}")
        if self.class_mean_separation < 0:
            raise GraphValueError("class_mean_separation must be >= 0")
        if self.feature_noise <= 0:
            raise GraphValueError("feature_noise must be > 0")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise GraphValueError("split_fractions must be three non-negative reals summing to 1")


def generate_sbm(params: SbmParams, seed: int) -> LabeledGraph:
    """Planted-partition graph with Gaussian class-conditional features.

    Class ``c`` has mean ``c * separation`` along its own random unit
    direction; directions are mutually orthogonal when ``feature_dim >=
    num_classes`` and shared otherwise.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    k, m, d = params.num_classes, params.nodes_per_class, params.feature_dim
    n = k * m
    labels = np.repeat(np.arange(k), m)

    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, params.p_in, params.p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)

    if d >= k:
        dirs, _ = np.linalg.qr(rng.standard_normal((d, k)))
        dirs = dirs.T
    else:
        dirs = np.tile(rng.standard_normal(d) / np.sqrt(d), (k, 1))
    means = params.class_mean_separation * np.arange(k)[:, None] * dirs
    feats = means[labels] + params.feature_noise * rng.standard_normal((n, d))

    f_tr, f_va, _ = params.split_fractions
    train, val, test = [], [], []
    for c in range(k):
        members = rng.permutation(np.flatnonzero(labels == c))
        a = int(round(f_tr * m))
        b = a + int(round(f_va * m))
        train.append(members[:a])
        val.append(members[a:b])
        test.append(members[b:])
    return LabeledGraph(
        num_nodes=n, num_features=d, num_classes=k, edges=edges, features=feats,
        labels=labels.astype(np.int64),
        train=np.sort(np.concatenate(train)), val=np.sort(np.concatenate(val)),
        test=np.sort(np.concatenate(test)),
        metadata={"generator": "sbm", "seed": seed},
    )


# ---------------------------------------------------------------------------
# condensed-graph directory


def save_condensed(state, directory, delta: float = 0.5, kind: str = "condensed") -> None:
    """Write features, labels, thresholded adjacency and generator weights.

    ``adj.tsv`` holds only off-diagonal pairs ``i < j`` with weight >= delta;
    the unit diagonal is implicit.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    adj = state.dense_adjacency(delta)
    n, d = state.features.shape
    meta = {
        "format_version": FORMAT_VERSION, "kind": kind, "num_nodes": n, "num_features": d,
        "num_classes": int(state.num_classes), "delta": delta, "epoch": int(state.epoch),
        "blocks": [[int(i) for i in b] for b in state.blocks],
        "candidates": [int(i) for i in state.candidates],
        "active": [int(i) for i in state.active],
    }
    (directory / "meta.json").write_text(json.dumps(meta) + "\n")
    write_matrix_tsv(directory / "features.tsv", state.features)
    write_int_tsv(directory / "labels.tsv", state.labels)
    iu, ju = np.triu_indices(n, k=1)
    w = adj[iu, ju]
    keep = w >= delta if state.phi is not None else w > 0
    with (directory / "adj.tsv").open("w") as fh:
        for i, j, x in zip(iu[keep], ju[keep], w[keep]):
            fh.write(f"{i}\t{j}\t{float(x)!r}\n")
    phi_path = directory / "phi.json"
    if state.phi is not None:
        params = {name: {"shape": list(a.shape), "data": a.tolist()}
                  for name, a in zip(state.phi.names, state.phi.arrays())}
        phi_path.write_text(json.dumps({"format_version": FORMAT_VERSION, "params": params}) + "\n")
    elif phi_path.exists():
        phi_path.unlink()


def save_coreset_graph(g: LabeledGraph, directory) -> None:
    """Store an induced subgraph in the condensed-graph layout (no phi.json)."""
    from .matching import SyntheticState

    adj = g.adjacency().toarray()  # real subgraph: no self-affinity, GCN adds self-loops
    state = SyntheticState(features=g.features, labels=g.labels, phi=None,
                           num_classes=g.num_classes, adjacency=adj)
    save_condensed(state, directory, kind="coreset")


def load_condensed(directory):
    from .matching import SyntheticState
    from .models import AdjGenParams

    directory = Path(directory)
    meta = _read_json(directory / "meta.json")
    if meta.get("format_version") != FORMAT_VERSION:
        raise GraphFormatError(directory / "meta.json", f"format_version mismatch: {meta.get('format_version')}")
    n, d = int(meta["num_nodes"]), int(meta["num_features"])
    feats = _read_tsv(directory / "features.tsv", d, float, nrows=n)
    labels = _read_tsv(directory / "labels.tsv", 1, int, nrows=n).ravel()
    entries = _read_tsv(directory / "adj.tsv", 3, float)
    # generated graphs carry a unit self-affinity diagonal; coresets are plain subgraphs
    adj = np.zeros((n, n)) if meta.get("kind") == "coreset" else np.eye(n)
    if len(entries):
        i, j = entries[:, 0].astype(np.int64), entries[:, 1].astype(np.int64)
        if i.min() < 0 or j.max() >= n:
            raise GraphFormatError(directory / "adj.tsv", "node index out of range")
        adj[i, j] = entries[:, 2]
        adj[j, i] = entries[:, 2]
    phi = None
    if (directory / "phi.json").exists():
        raw = _read_json(directory / "phi.json")
        if raw.get("format_version") != FORMAT_VERSION:
            raise GraphFormatError(directory / "phi.json", "format_version mismatch")
        arrs = []
        for name in ("W1a", "W1b", "b1", "w2", "b2"):
            item = raw["params"][name]
            a = np.array(item["data"], dtype=np.float64).reshape(item["shape"])
            arrs.append(a)
        phi = AdjGenParams.from_arrays(arrs)
    return SyntheticState(
        features=feats, labels=labels, phi=phi, num_classes=int(meta["num_classes"]),
        blocks=[np.array(b, dtype=np.int64) for b in meta.get("blocks", [])],
        candidates=np.array(meta.get("candidates", []), dtype=np.int64),
        active=np.array(meta.get("active", []), dtype=np.int64),
        epoch=int(meta.get("epoch", 0)), adjacency=adj,
    )


def directory_bytes(directory) -> int:
    return sum(p.stat().st_size for p in Path(directory).iterdir() if p.is_file())
