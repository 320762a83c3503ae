"""Per-node importance scores over the synthetic graph.

Used by the ``exgc`` schedule to decide which synthetic rows get trained.
Each scorer returns an :class:`ImportanceScores`; larger means more important.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax, xlogy

from . import autodiff as ad
from . import models
from .autodiff import Tape, Tensor


@dataclass
class ImportanceScores:
    p: np.ndarray
    kind: str
    metadata: dict = field(default_factory=dict)

    def ranks(self) -> np.ndarray:
        """0 = most important; ties broken by lower index."""
        order = np.lexsort((np.arange(len(self.p)), -self.p))
        ranks = np.empty(len(self.p), dtype=np.int64)
        ranks[order] = np.arange(len(self.p))
        return ranks

    def write_tsv(self, path) -> None:
        ranks = self.ranks()
        with Path(path).open("w") as fh:
            for i, (s, r) in enumerate(zip(self.p, ranks)):
                fh.write(f"{i}\t{float(s)!r}\t{int(r)}\n")


@dataclass
class GlobalMaskParams:
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def arrays(self):
        return [self.W1, self.b1, self.w2, self.b2]


def info_constraint(p, r: float):
    """Sum of KL(Bern(p_i) || Bern(r)), with 0 log 0 = 0.

    A :class:`Tensor` argument yields a differentiable tensor (``p`` must lie
    strictly inside (0, 1) there); anything else yields a float.
    """
    if not 0.0 < r < 1.0:
        raise ValueError(f"r must be in (0, 1), got {r}")
    if isinstance(p, Tensor):
        q = ad.shift(ad.scale(p, -1.0), 1.0)
        t1 = ad.mul(p, ad.shift(ad.log(p), -np.log(r)))
        t2 = ad.mul(q, ad.shift(ad.log(q), -np.log(1.0 - r)))
        return ad.sum_all(ad.add(t1, t2))
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("scores must lie in [0, 1]")
    q = 1.0 - p
    # ratios are exactly 1 when p == r, so the value is exactly 0 there
    kl = xlogy(p, p / r) + xlogy(q, q / (1.0 - r))
    return float(np.sum(np.maximum(kl, 0.0)))


def _synthetic_logits(X: Tensor, phi, theta: models.GcnParams, state) -> Tensor:
    if phi is None:
        a = Tensor(state.dense_adjacency())
    else:
        a = models.adjgen_forward(X, phi)
    return models.gcn_forward(models.normalize_dense(a), X, theta)


def _theta_const(theta: models.GcnParams) -> models.GcnParams:
    return theta.with_tensors(Tensor(t.data) for t in theta.tensors())


def _phi(state):
    return state.phi.arrays() if state.phi is not None else None


def sa_scores(state, theta: models.GcnParams, loss_scale: float = 1.0) -> ImportanceScores:
    """Softmax over nodes of the summed absolute loss gradient of each row."""
    with Tape():
        X = Tensor(state.features, requires_grad=True)
        logits = _synthetic_logits(X, _phi(state), _theta_const(theta), state)
        loss = ad.scale(ad.softmax_cross_entropy(logits, state.labels), loss_scale)
        (gx,) = ad.grad(loss, [X])
    saliency = np.abs(gx.data).sum(axis=1)
    bad = np.flatnonzero(~np.isfinite(saliency))
    if bad.size:
        raise FloatingPointError(f"non-finite saliency at node {int(bad[0])}")
    return ImportanceScores(softmax(saliency), "sa", {"saliency": saliency})


def _distance(y: Tensor, y_hat: Tensor, kind: str) -> Tensor:
    if kind == "mse":
        return ad.mean_squared(y, y_hat)
    # KL(softmax(y) || softmax(y_hat)), averaged over rows
    py = Tensor(_softmax_rows(y.data))
    logq = ad.log(ad.softmax_rows(y_hat))
    return ad.scale(ad.sum_all(ad.mul(py, ad.scale(logq, -1.0))), 1.0 / y.shape[0])


def _softmax_rows(a):
    return softmax(a, axis=1)


def _masked_logits(state, theta, p_col: Tensor) -> Tensor:
    X = Tensor(state.features)
    Xm = ad.mul(X, ad.broadcast_to(p_col, X.shape))
    return _synthetic_logits(Xm, _phi(state), theta, state)


def local_mask_scores(state, theta, lam: float = 1e-4, steps: int = 100, eta_p: float = 0.01,
                      init: float = 0.9, distance: str = "mse") -> ImportanceScores:
    """Learn a per-node feature mask by projected gradient descent.

    Minimizes ``D(y, y_p) + lam * sum(p)`` with ``p`` clamped to ``[0, 1]``.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    th = _theta_const(theta)
    y = Tensor(_synthetic_logits(Tensor(state.features), _phi(state), th, state).data)
    p = np.full((state.num_nodes, 1), float(init))
    obj_val = np.nan
    for _ in range(steps):
        with Tape():
            pt = Tensor(p, requires_grad=True)
            obj = ad.add(_distance(y, _masked_logits(state, th, pt), distance),
                         ad.scale(ad.sum_all(pt), lam))
            obj_val = obj.item()
            if not np.isfinite(obj_val):
                raise FloatingPointError("local mask objective diverged")
            (gp,) = ad.grad(obj, [pt])
        p = np.clip(p - eta_p * gp.data, 0.0, 1.0)
    return ImportanceScores(p.ravel(), "local_mask", {"iterations": steps, "objective": obj_val})


def init_global_mask(d: int, hidden: int, seed) -> GlobalMaskParams:
    rng = np.random.default_rng(seed)
    bound1 = models.glorot_bound(d, hidden)
    bound2 = models.glorot_bound(hidden, 1)
    return GlobalMaskParams(
        rng.uniform(-bound1, bound1, (d, hidden)), np.zeros((1, hidden)),
        rng.uniform(-bound2, bound2, (hidden, 1)), np.zeros((1, 1)),
    )


def _mask_mlp(X: Tensor, params) -> Tensor:
    W1, b1, w2, b2 = params
    h = ad.relu(ad.add_bias(ad.matmul(X, W1), b1))
    return ad.sigmoid(ad.add(ad.matmul(h, w2), ad.broadcast_to(b2, (X.shape[0], 1))))


def global_mask_scores(state, theta, lam: float = 1e-4, r: float = 0.5, steps: int = 100,
                       eta_psi: float = 0.01, hidden: int = 32, seed=0,
                       distance: str = "mse") -> ImportanceScores:
    """Scores ``p_i = MLP(x_i)`` trained against ``D(y, y_mlp) + lam * l_I(p, r)``."""
    if not 0.0 < r < 1.0:
        raise ValueError(f"r must be in (0, 1), got {r}")
    th = _theta_const(theta)
    X = Tensor(state.features)
    y = Tensor(_synthetic_logits(X, _phi(state), th, state).data)
    params = init_global_mask(state.features.shape[1], hidden, seed).arrays()
    m = [np.zeros_like(a) for a in params]
    v = [np.zeros_like(a) for a in params]
    obj_val = np.nan
    for step in range(1, steps + 1):
        with Tape():
            ps = [Tensor(a, requires_grad=True) for a in params]
            p = _mask_mlp(X, ps)
            obj = ad.add(_distance(y, _masked_logits(state, th, p), distance),
                         ad.scale(info_constraint(p, r), lam))
            obj_val = obj.item()
            if not np.isfinite(obj_val):
                raise FloatingPointError("global mask objective diverged")
            grads = [gr.data for gr in ad.grad(obj, ps)]
        for k, gr in enumerate(grads):
            m[k] = 0.9 * m[k] + 0.1 * gr
            v[k] = 0.999 * v[k] + 0.001 * gr * gr
            params[k] = params[k] - eta_psi * (m[k] / (1 - 0.9 ** step)) / (np.sqrt(v[k] / (1 - 0.999 ** step)) + 1e-8)
    with Tape():
        p = _mask_mlp(X, [Tensor(a) for a in params]).data.ravel()
    return ImportanceScores(p, "global_mask", {"iterations": steps, "objective": obj_val})


def random_scores(n: int, seed) -> ImportanceScores:
    """Scores from a uniformly random ranking, normalized to sum to 1."""
    perm = np.random.default_rng(seed).permutation(n)
    raw = (n - np.argsort(perm)).astype(np.float64)  # position 0 of perm gets the top score
    return ImportanceScores(raw / raw.sum(), "random", {})


def score_nodes(state, theta, cfg, seed_tag=(0,)) -> ImportanceScores:
    """Dispatch on ``cfg.explainer``."""
    kind = cfg.explainer
    if kind == "sa":
        return sa_scores(state, theta)
    if kind == "local_mask":
        return local_mask_scores(state, theta, cfg.lam, cfg.explainer_steps, cfg.eta_p,
                                 distance=cfg.explainer_distance)
    if kind == "global_mask":
        return global_mask_scores(state, theta, cfg.lam, cfg.r, cfg.explainer_steps, cfg.eta_p,
                                  seed=list(seed_tag), distance=cfg.explainer_distance)
    if kind == "random":
        return random_scores(state.num_nodes, list(seed_tag))
    raise ValueError(f"unknown explainer {kind!r}")
