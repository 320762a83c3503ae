"""Selection baselines: pick real train nodes instead of synthesizing them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphcore import LabeledGraph
from .matching import class_counts, synthetic_size

METHODS = ("random", "herding", "kcenter")


@dataclass
class CoresetResult:
    selected: dict[int, np.ndarray]
    method: str

    @property
    def indices(self) -> np.ndarray:
        """All selected node indices, grouped by class."""
        parts = [self.selected[c] for c in sorted(self.selected)]
        return np.concatenate(parts) if parts else np.zeros(0, np.int64)

    def to_graph(self, g: LabeledGraph) -> LabeledGraph:
        return g.induced_subgraph(self.indices)


def _per_class_budget(g: LabeledGraph, ratio: float) -> dict[int, np.ndarray]:
    """Train pool per class and how many to take from it."""
    train_labels = g.labels[g.train]
    total = min(synthetic_size(g, ratio), len(g.train))
    counts = class_counts(train_labels, g.num_classes, total)
    pools = {}
    for c in range(g.num_classes):
        pool = np.sort(g.train[train_labels == c])
        if pool.size:
            pools[c] = (pool, min(int(counts[c]), pool.size))
    return pools


def random_select(g: LabeledGraph, ratio: float, seed: int = 0) -> CoresetResult:
    rng = np.random.default_rng(seed)
    out = {}
    for c, (pool, k) in _per_class_budget(g, ratio).items():
        out[c] = np.sort(rng.choice(pool, size=k, replace=False))
    return CoresetResult(out, "random")


def herding_order(x: np.ndarray, k: int) -> list[int]:
    """Greedy herding in feature space.

    Each step adds the point that brings the mean of the selection closest
    to the mean of all points; ties go to the lower index.
    """
    mu = x.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros(x.shape[1])
    remaining = np.ones(len(x), dtype=bool)
    for step in range(1, k + 1):
        cand = (running[None, :] + x) / step
        dist = np.linalg.norm(cand - mu, axis=1)
        dist[~remaining] = np.inf
        best = int(np.argmin(dist))
        chosen.append(best)
        remaining[best] = False
        running += x[best]
    return chosen


def herding_select(g: LabeledGraph, ratio: float) -> CoresetResult:
    out = {}
    for c, (pool, k) in _per_class_budget(g, ratio).items():
        out[c] = pool[herding_order(g.features[pool], k)]
    return CoresetResult(out, "herding")


def kcenter_order(x: np.ndarray, k: int, start: int) -> list[int]:
    """Farthest-point traversal starting from ``start``; ties to lower index."""
    if k <= 0:
        return []
    chosen = [int(start)]
    mind = np.linalg.norm(x - x[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(x - x[nxt], axis=1))
    return chosen


def covering_radius(x: np.ndarray, centers) -> float:
    d = np.linalg.norm(x[:, None, :] - x[np.asarray(centers)][None, :, :], axis=2)
    return float(d.min(axis=1).max())


def kcenter_select(g: LabeledGraph, ratio: float, seed: int = 0) -> CoresetResult:
    rng = np.random.default_rng(seed)
    out = {}
    for c, (pool, k) in _per_class_budget(g, ratio).items():
        start = int(rng.integers(len(pool)))
        out[c] = pool[kcenter_order(g.features[pool], k, start)]
    return CoresetResult(out, "kcenter")


def select(g: LabeledGraph, method: str, ratio: float, seed: int = 0) -> CoresetResult:
    if method == "random":
        return random_select(g, ratio, seed)
    if method == "herding":
        return herding_select(g, ratio)
    if method == "kcenter":
        return kcenter_select(g, ratio, seed)
    raise ValueError(f"unknown coreset method {method!r}; choose from {METHODS}")
