"""Gradient-matching condensation: objective, E/M steps and the epoch loop.

Three schedules decide which synthetic feature rows an E-step may touch:

* ``gcond``  - every row, every epoch;
* ``mgcond`` - one of ``K`` fixed blocks, cycling with the epoch;
* ``exgc``   - the rows promoted so far by an importance explainer.

All randomness is derived from ``cfg.seed`` through tagged generators, so a
run is a pure function of (graph, config).
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tape, Tensor
from .graphcore import LabeledGraph, NormalizedAdjacency, normalize_adjacency

log = logging.getLogger(__name__)

MODES = ("gcond", "mgcond", "exgc")
EXPLAINERS = ("sa", "local_mask", "global_mask", "random")
BACKBONE_LOOPS = ("one-step", "inner-loop")

# tags for the per-purpose random streams
_TAG_FEATURES, _TAG_PHI, _TAG_BLOCKS, _TAG_THETA, _TAG_EXPLAIN = 1, 2, 3, 100, 200


class ConfigError(ValueError):
    pass


@dataclass
class CondenseConfig:
    ratio: float = 0.05
    mode: str = "gcond"
    backbone_loop: str = "one-step"
    K: int = 4
    kappa: float = 0.05
    selection_period: int = 50
    explainer: str = "sa"
    lam: float = 1e-4
    r: float = 0.5
    beta: float = 1.0  # carried for reference only; never used in computation
    eta_x: float = 1e-3
    eta_phi: float = 1e-3
    eta_theta: float = 1e-2
    tau_theta: int = 5
    e_x: int = 1
    e_phi: int = 1
    max_epochs: int = 200
    patience: int = 4
    min_rel_improvement: float = 0.0
    delta: float = 0.5
    seed: int = 0
    hidden: int = 64
    phi_hidden: int = 128
    theta_draws: int = 1
    theta_refresh: int = 1
    inner_refresh: int = 10
    init_kind: str = "glorot_uniform"
    literal_mset: bool = False
    explainer_steps: int = 100
    eta_p: float = 0.01
    explainer_distance: str = "mse"

    def validate(self) -> None:
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.backbone_loop not in BACKBONE_LOOPS:
            raise ConfigError(f"unknown backbone_loop {self.backbone_loop!r}")
        if self.explainer not in EXPLAINERS:
            raise ConfigError(f"unknown explainer {self.explainer!r}; choose from {EXPLAINERS}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0.0 < self.kappa <= 1.0:
            raise ConfigError("kappa must be in (0, 1]")
        if not 0.0 < self.r < 1.0:
            raise ConfigError("r must be in (0, 1)")
        if min(self.eta_x, self.eta_phi, self.eta_theta) <= 0:
            raise ConfigError("step sizes must be positive")
        if self.selection_period < 1 or self.theta_draws < 1 or self.patience < 1:
            raise ConfigError("selection_period, theta_draws and patience must be >= 1")
        if self.theta_refresh < 0 or self.inner_refresh < 1:
            raise ConfigError("theta_refresh must be >= 0 and inner_refresh >= 1")
        if self.explainer_distance not in ("mse", "kl"):
            raise ConfigError("explainer_distance must be 'mse' or 'kl'")

    @classmethod
    def from_dict(cls, data: dict) -> "CondenseConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SyntheticState:
    features: np.ndarray
    labels: np.ndarray
    phi: models.AdjGenParams | None
    num_classes: int
    blocks: list[np.ndarray] = field(default_factory=list)
    candidates: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    epoch: int = 0
    adjacency: np.ndarray | None = None  # fixed structure when there is no generator
    opt: dict = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    def dense_adjacency(self, delta: float = 0.5) -> np.ndarray:
        """Thresholded adjacency used for evaluation and saving."""
        if self.phi is not None:
            return models.adjgen_forward(self.features, self.phi, threshold=delta)
        if self.adjacency is not None:
            return self.adjacency
        return np.eye(self.num_nodes)


@dataclass
class MatchReport:
    rows: list[dict]
    state: SyntheticState
    convergence_epoch: int
    converged: bool

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows])

    def write_trace(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "active_frac", "seconds"])
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["loss"]), repr(r["active_frac"]), f"{r['seconds']:.6f}"])


# ---------------------------------------------------------------------------
# initialization


def class_counts(train_labels: np.ndarray, num_classes: int, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` slots by class frequency.

    Every class present in ``train_labels`` gets at least one slot; slots for
    that are taken from the currently largest class.
    """
    freq = np.bincount(train_labels, minlength=num_classes).astype(np.float64)
    present = freq > 0
    if total < present.sum():
        raise ConfigError(f"{total} synthetic nodes cannot cover {int(present.sum())} classes")
    quota = total * freq / freq.sum()
    counts = np.floor(quota).astype(np.int64)
    rem = quota - counts
    order = sorted(range(num_classes), key=lambda c: (-rem[c], c))
    for c in order[: total - counts.sum()]:
        counts[c] += 1
    for c in np.flatnonzero(present & (counts == 0)):
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[c] += 1
    return counts


def synthetic_size(g: LabeledGraph, ratio: float) -> int:
    return int(np.floor(ratio * g.num_nodes + 1e-9))


def init_synthetic(g: LabeledGraph, cfg: CondenseConfig) -> SyntheticState:
    cfg.validate()
    n_syn = synthetic_size(g, cfg.ratio)
    counts = class_counts(g.labels[g.train], g.num_classes, n_syn)
    labels = np.repeat(np.arange(g.num_classes), counts).astype(np.int64)

    rng = np.random.default_rng([cfg.seed, _TAG_FEATURES])
    feats = np.empty((n_syn, g.num_features))
    pos = 0
    for c in range(g.num_classes):
        pool = g.train[g.labels[g.train] == c]
        k = int(counts[c])
        if k == 0:
            continue
        pick = rng.choice(pool, size=k, replace=k > len(pool))
        feats[pos:pos + k] = g.features[pick]
        pos += k

    dist = models.InitDistribution(cfg.init_kind, cfg.seed)
    phi = models.sample_adjgen(dist, g.num_features, cfg.phi_hidden, _TAG_PHI)
    perm = np.random.default_rng([cfg.seed, _TAG_BLOCKS]).permutation(n_syn)
    k = min(cfg.K, n_syn)
    blocks = [np.sort(b) for b in np.array_split(perm, k)]
    return SyntheticState(
        features=feats, labels=labels, phi=phi, num_classes=g.num_classes, blocks=blocks,
        candidates=np.arange(n_syn, dtype=np.int64), active=np.zeros(0, np.int64),
    )


# ---------------------------------------------------------------------------
# objective


def grad_match_distance(syn_grads, real_grads) -> Tensor:
    """Sum over layers and columns of ``1 - cos(G'_col, G_col)``."""
    total = None
    for gs, gr in zip(syn_grads, real_grads, strict=True):
        gs, gr = ad.as_tensor(gs), ad.as_tensor(gr)
        if gs.shape != gr.shape:
            raise ad.ShapeError(f"gradient shapes differ: {gs.shape} vs {gr.shape}")
        ncol = gs.shape[1] if gs.data.ndim == 2 else 1
        term = ad.shift(ad.scale(ad.cosine_per_column(gs, gr), -1.0), float(ncol))
        total = term if total is None else ad.add(total, term)
    return total if total is not None else Tensor(0.0)


def real_gradient(g: LabeledGraph, adj: NormalizedAdjacency, theta: models.GcnParams, c: int) -> list[np.ndarray]:
    rows = g.train[g.labels[g.train] == c]
    if rows.size == 0:
        raise ValueError(f"class {c} has no train nodes")
    with Tape():
        th = theta.with_tensors(Tensor(t.data, True) for t in theta.tensors())
        loss = ad.softmax_cross_entropy(models.gcn_forward(adj, g.features, th), g.labels, rows)
        return [t.data for t in ad.grad(loss, th.tensors())]


def real_gradients(g, adj, thetas) -> list[dict[int, list[np.ndarray]]]:
    """Per-draw, per-class real gradients sharing one forward pass per draw."""
    present = [int(c) for c in np.unique(g.labels[g.train])]
    out = []
    for theta in thetas:
        with Tape():
            th = _fresh(theta)
            logits = models.gcn_forward(adj, g.features, th)
            per_class = {}
            for c in present:
                rows = g.train[g.labels[g.train] == c]
                loss = ad.softmax_cross_entropy(logits, g.labels, rows)
                per_class[c] = [t.data for t in ad.grad(loss, th.tensors())]
        out.append(per_class)
    return out


def _fresh(theta: models.GcnParams) -> models.GcnParams:
    return theta.with_tensors(Tensor(t.data, True) for t in theta.tensors())


def synthetic_forward(X: Tensor, phi_ts, state: SyntheticState):
    if state.phi is None:
        a = Tensor(state.dense_adjacency())
    else:
        a = models.adjgen_forward(X, phi_ts)
    return models.normalize_dense(a)


def synthetic_gradient(state: SyntheticState, theta: models.GcnParams, c: int,
                       X: Tensor | None = None, phi_ts=None, adj: Tensor | None = None,
                       create_graph: bool = True) -> list[Tensor]:
    """Gradient of the synthetic class-``c`` loss w.r.t. the GCN weights.

    Must be called inside an active :class:`Tape`.
    """
    rows = np.flatnonzero(state.labels == c)
    if rows.size == 0:
        raise ValueError(f"class {c} has no synthetic nodes")
    X = X if X is not None else Tensor(state.features)
    if adj is None:
        adj = synthetic_forward(X, phi_ts if phi_ts is not None else state.phi.arrays(), state)
    th = _fresh(theta)
    loss = ad.softmax_cross_entropy(models.gcn_forward(adj, X, th), state.labels, rows)
    return ad.grad(loss, th.tensors(), create_graph=create_graph)


def matching_objective(state, X: Tensor, phi_ts, thetas, real, epoch: int | None = None,
                       create_graph: bool = True) -> Tensor:
    """Class-summed matching distance averaged over the theta draws."""
    adj = synthetic_forward(X, phi_ts, state)
    total = None
    for th, grads in zip(thetas, real, strict=True):
        th_t = _fresh(th)
        logits = models.gcn_forward(adj, X, th_t)
        for c in sorted(grads):
            rows = np.flatnonzero(state.labels == c)
            if rows.size == 0:
                continue
            loss = ad.softmax_cross_entropy(logits, state.labels, rows)
            syn = ad.grad(loss, th_t.tensors(), create_graph=create_graph)
            dist = grad_match_distance(syn, grads[c])
            if not np.isfinite(dist.data):
                raise FloatingPointError(f"non-finite matching loss at epoch {epoch}, class {c}")
            total = dist if total is None else ad.add(total, dist)
    if total is None:
        return Tensor(0.0)
    return ad.scale(total, 1.0 / len(thetas))


def matching_loss(state, thetas, real) -> float:
    """Value of the matching objective at the current state (no update)."""
    with Tape():
        X = Tensor(state.features, requires_grad=True)
        return matching_objective(state, X, _phi_arrays(state), thetas, real, create_graph=False).item()


def _phi_arrays(state):
    return state.phi.arrays() if state.phi is not None else None


# ---------------------------------------------------------------------------
# optimizer


_B1, _B2, _EPS = 0.9, 0.999, 1e-8


def _adam_rows(x, g, m, v, steps, rows, lr):
    """Adam update restricted to ``rows``; other rows and their moments stay put."""
    x, m, v, steps = x.copy(), m.copy(), v.copy(), steps.copy()
    steps[rows] += 1
    m[rows] = _B1 * m[rows] + (1 - _B1) * g[rows]
    v[rows] = _B2 * v[rows] + (1 - _B2) * g[rows] ** 2
    t = steps[rows][:, None]
    mhat = m[rows] / (1 - _B1 ** t)
    vhat = v[rows] / (1 - _B2 ** t)
    x[rows] = x[rows] - lr * mhat / (np.sqrt(vhat) + _EPS)
    return x, m, v, steps


def _adam(x, g, m, v, step, lr):
    m = _B1 * m + (1 - _B1) * g
    v = _B2 * v + (1 - _B2) * g * g
    mhat = m / (1 - _B1 ** step)
    vhat = v / (1 - _B2 ** step)
    return x - lr * mhat / (np.sqrt(vhat) + _EPS), m, v


def estep(state: SyntheticState, thetas, real, update_rows, cfg: CondenseConfig,
          epoch: int | None = None) -> tuple[SyntheticState, list[float]]:
    """``cfg.e_x`` Adam steps on the rows ``update_rows`` of the features.

    Returns the new state and the loss value seen before each step.
    """
    rows = np.unique(np.asarray(update_rows, dtype=np.int64))
    if rows.size == 0:
        return state, []
    n, d = state.features.shape
    if rows.min() < 0 or rows.max() >= n:
        raise IndexError("update_rows out of range")
    opt = state.opt.get("x") or (np.zeros((n, d)), np.zeros((n, d)), np.zeros(n, np.int64))
    X_np = state.features
    losses = []
    for _ in range(cfg.e_x):
        with Tape():
            X = Tensor(X_np, requires_grad=True)
            obj = matching_objective(state, X, _phi_arrays(state), thetas, real, epoch)
            losses.append(obj.item())
            if obj.node is None:
                break
            (gx,) = ad.grad2(obj, [X])
        X_np, m, v, steps = _adam_rows(X_np, gx.data, *opt, rows, cfg.eta_x)
        opt = (m, v, steps)
    new_opt = dict(state.opt, x=opt)
    return dataclasses.replace(state, features=X_np, opt=new_opt), losses


def mstep(state: SyntheticState, thetas, real, cfg: CondenseConfig,
          epoch: int | None = None) -> tuple[SyntheticState, list[float]]:
    """``cfg.e_phi`` Adam steps on the generator weights, features frozen."""
    if state.phi is None:
        return state, []
    arrs = state.phi.arrays()
    m, v, step = state.opt.get("phi") or ([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], 0)
    losses = []
    for _ in range(cfg.e_phi):
        with Tape():
            phi_ts = [Tensor(a, requires_grad=True) for a in arrs]
            obj = matching_objective(state, Tensor(state.features), phi_ts, thetas, real, epoch)
            losses.append(obj.item())
            if obj.node is None:
                break
            grads = [t.data for t in ad.grad2(obj, phi_ts)]
        step += 1
        upd = [_adam(a, gr, mi, vi, step, cfg.eta_phi) for a, gr, mi, vi in zip(arrs, grads, m, v)]
        arrs = [u[0] for u in upd]
        m = [u[1] for u in upd]
        v = [u[2] for u in upd]
    new_opt = dict(state.opt, phi=(m, v, step))
    return dataclasses.replace(state, phi=models.AdjGenParams.from_arrays(arrs), opt=new_opt), losses


# ---------------------------------------------------------------------------
# row selection


def selection_count(kappa: float, n: int) -> int:
    return max(1, int(np.floor(kappa * n + 1e-9)))


def top_indices(scores: np.ndarray, pool: np.ndarray, k: int) -> np.ndarray:
    """``k`` members of ``pool`` with the largest scores; ties go to lower index."""
    pool = np.sort(np.asarray(pool, dtype=np.int64))
    order = sorted(pool.tolist(), key=lambda i: (-scores[i], i))
    return np.array(order[:k], dtype=np.int64)


def select_rows(state: SyntheticState, cfg: CondenseConfig, t: int, theta=None,
                scorer: Callable | None = None) -> np.ndarray:
    """Rows the E-step of epoch ``t`` may update.

    In ``exgc`` mode this moves newly selected rows from ``state.candidates``
    into ``state.active`` (in place) on selection epochs.
    """
    n = state.num_nodes
    if cfg.mode == "gcond":
        return np.arange(n, dtype=np.int64)
    if cfg.mode == "mgcond":
        return state.blocks[t % len(state.blocks)]
    if t % cfg.selection_period == 0 and state.candidates.size:
        if scorer is None:
            from .explainers import score_nodes

            scores = score_nodes(state, theta, cfg, seed_tag=(cfg.seed, _TAG_EXPLAIN, t)).p
        else:
            scores = scorer(state, theta)
        k = min(selection_count(cfg.kappa, n), state.candidates.size)
        chosen = top_indices(scores, state.candidates, k)
        state.candidates = np.setdiff1d(state.candidates, chosen)
        state.active = np.union1d(state.active, chosen)
    return state.candidates if cfg.literal_mset else state.active


# ---------------------------------------------------------------------------
# epoch loop


def _train_theta(state, theta: models.GcnParams, cfg: CondenseConfig) -> models.GcnParams:
    """A few SGD steps of the GCN on the current synthetic graph."""
    with Tape():
        adj = Tensor(synthetic_forward(Tensor(state.features), _phi_arrays(state), state).data)
    th = theta
    for _ in range(cfg.tau_theta):
        with Tape():
            th = _fresh(th)
            loss = ad.softmax_cross_entropy(models.gcn_forward(adj, state.features, th), state.labels)
            grads = ad.grad(loss, th.tensors())
        th = th.with_tensors(Tensor(t.data - cfg.eta_theta * gr.data) for t, gr in zip(th.tensors(), grads))
    return th


class _ThetaSchedule:
    def __init__(self, g: LabeledGraph, cfg: CondenseConfig):
        self.cfg = cfg
        self.dist = models.InitDistribution(cfg.init_kind, cfg.seed)
        self.shape = (g.num_features, cfg.hidden, g.num_classes)
        self.current: list[models.GcnParams] | None = None
        self._real = None

    def _draw(self, round_: int, k: int) -> models.GcnParams:
        return models.sample_theta(self.dist, *self.shape, _TAG_THETA, round_, k)

    def draws(self, t: int) -> list[models.GcnParams]:
        cfg = self.cfg
        if cfg.backbone_loop == "inner-loop":
            if self.current is None or t % cfg.inner_refresh == 0:
                self.current = [self._draw(t // cfg.inner_refresh, 0)]
            return self.current
        if self.current is None or (cfg.theta_refresh and t % cfg.theta_refresh == 0):
            round_ = t // cfg.theta_refresh if cfg.theta_refresh else 0
            self.current = [self._draw(round_, k) for k in range(cfg.theta_draws)]
        return self.current

    def real(self, g, adj):
        """Real gradients for the current draws, recomputed only when they change."""
        if self._real is None or self._real[0] is not self.current:
            self._real = (self.current, real_gradients(g, adj, self.current))
        return self._real[1]

    def advance(self, state):
        if self.cfg.backbone_loop == "inner-loop":
            self.current = [_train_theta(state, th, self.cfg) for th in self.current]


def condense(g: LabeledGraph, cfg: CondenseConfig, progress: Callable[[dict], None] | None = None) -> MatchReport:
    """Alternate E- and M-steps until the matching loss stalls."""
    cfg.validate()
    state = init_synthetic(g, cfg)
    adj = normalize_adjacency(g)
    schedule = _ThetaSchedule(g, cfg)
    rows_out: list[dict] = []
    best = np.inf
    stale = 0
    converged = False
    n = state.num_nodes
    t = 0
    for t in range(cfg.max_epochs):
        start = time.perf_counter()
        thetas = schedule.draws(t)
        real = schedule.real(g, adj)
        rows = select_rows(state, cfg, t, thetas[0])
        state, e_losses = estep(state, thetas, real, rows, cfg, epoch=t)
        state, m_losses = mstep(state, thetas, real, cfg, epoch=t)
        losses = e_losses + m_losses
        loss = float(np.mean(losses)) if losses else matching_loss(state, thetas, real)
        state.epoch = t + 1
        schedule.advance(state)
        row = {"epoch": t, "loss": loss, "active_frac": len(rows) / n,
               "seconds": time.perf_counter() - start}
        rows_out.append(row)
        if progress is not None:
            progress(row)
        if loss < best * (1.0 - cfg.min_rel_improvement) or not np.isfinite(best):
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                converged = True
                break
    return MatchReport(rows=rows_out, state=state, convergence_epoch=t + 1, converged=converged)
