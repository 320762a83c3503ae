"""Randomized finite-difference checks for every differentiable primitive,
first and second order."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tape, Tensor


def _central_difference(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray], k: int, h: float) -> np.ndarray:
    out = np.zeros_like(xs[k])
    for idx in np.ndindex(xs[k].shape):
        plus = [x.copy() for x in xs]
        minus = [x.copy() for x in xs]
        plus[k][idx] += h
        minus[k][idx] -= h
        out[idx] = (f(plus) - f(minus)) / (2 * h)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def _probe(rng, shape):
    return rng.standard_normal(shape)


# name -> (input generator, function of tensors returning a tensor)
def _cases(rng) -> dict[str, tuple[list[np.ndarray], Callable]]:
    sym = rng.standard_normal((4, 4))
    sym = sym + sym.T
    idx = np.array([2, 0, 2, 1])
    return {
        "add": ([_probe(rng, (3, 4)), _probe(rng, (3, 4))], lambda a, b: ad.add(a, b)),
        "scale": ([_probe(rng, (3, 4))], lambda a: ad.scale(a, -1.7)),
        "shift": ([_probe(rng, (3, 4))], lambda a: ad.mul(ad.shift(a, 0.3), a)),
        "mul": ([_probe(rng, (3, 4)), _probe(rng, (3, 4))], lambda a, b: ad.mul(a, b)),
        "mul_scalar": ([_probe(rng, (3, 4)), _probe(rng, ())], lambda a, s: ad.mul_scalar(a, s)),
        "matmul": ([_probe(rng, (3, 4)), _probe(rng, (4, 2))], lambda a, b: ad.matmul(a, b)),
        "transpose": ([_probe(rng, (3, 4))], lambda a: ad.transpose(a)),
        "reshape": ([_probe(rng, (3, 4))], lambda a: ad.reshape(a, (2, 6))),
        "broadcast_to": ([_probe(rng, (1, 4))], lambda a: ad.broadcast_to(a, (3, 4))),
        "sum_to": ([_probe(rng, (3, 4))], lambda a: ad.sum_to(a, (3, 1))),
        "take_rows": ([_probe(rng, (3, 4))], lambda a: ad.take_rows(a, idx)),
        "scatter_rows": ([_probe(rng, (4, 2))], lambda a: ad.scatter_rows(a, idx, 3)),
        "concat_rows": ([_probe(rng, (2, 3)), _probe(rng, (1, 3))], lambda a, b: ad.concat_rows([a, b])),
        "sparse_dense_matmul": ([_probe(rng, (4, 3))], lambda a: ad.sparse_dense_matmul(sym, a)),
        "relu": ([_probe(rng, (3, 4))], lambda a: ad.mul(ad.relu(a), a)),
        "sigmoid": ([_probe(rng, (3, 4))], lambda a: ad.sigmoid(a)),
        "power": ([rng.uniform(0.5, 2.0, (3, 4))], lambda a: ad.power(a, -0.5)),
        "log": ([rng.uniform(0.5, 2.0, (3, 4))], lambda a: ad.log(a)),
        "softmax_rows": ([_probe(rng, (3, 4))], lambda a: ad.softmax_rows(a)),
        "softmax_cross_entropy": (
            [_probe(rng, (5, 3))],
            lambda a: ad.softmax_cross_entropy(a, np.array([0, 2, 1, 1, 0]), np.array([0, 1, 3])),
        ),
        "cosine_per_column": ([_probe(rng, (4, 3)), _probe(rng, (4, 3))], lambda a, b: ad.cosine_per_column(a, b)),
    }


def check_primitive(name: str, seed: int = 0, h: float = 1e-6) -> tuple[float, float]:
    """(first-order, second-order) relative errors against central differences.

    The scalar probed is ``<w, f(x)>`` for a fixed random ``w``; the second
    order check differentiates ``|grad|^2`` of that scalar.
    """
    rng = np.random.default_rng(seed)
    xs, fn = _cases(rng)[name]
    with Tape():
        out_shape = fn(*[Tensor(x) for x in xs]).shape
    w = rng.standard_normal(out_shape)

    def scalar(arrs, order):
        with Tape():
            ts = [Tensor(a, requires_grad=True) for a in arrs]
            s = ad.sum_all(ad.mul(fn(*ts), Tensor(w))) if out_shape else ad.mul(fn(*ts), Tensor(w))
            if order == 1:
                return s, ts
            gs = ad.grad(s, ts, create_graph=True)
            total = None
            for gt in gs:
                sq = ad.sum_all(ad.mul(gt, gt))
                total = sq if total is None else ad.add(total, sq)
            return total, ts

    first = second = 0.0
    for order in (1, 2):
        def f(arrs, order=order):
            return scalar(arrs, order)[0].item()

        with Tape():
            val, ts = scalar(xs, order)
            if val.node is None:
                # linear maps have an identically constant gradient norm
                analytic = [np.zeros_like(x) for x in xs]
            else:
                analytic = [g.data for g in ad.grad(val, ts)]
        err = max(rel_error(analytic[k], _central_difference(f, xs, k, h)) for k in range(len(xs)))
        if order == 1:
            first = err
        else:
            second = err
    return first, second


def check_all(seed: int = 0, tol: float = 1e-5) -> dict[str, tuple[float, float, bool]]:
    names = list(_cases(np.random.default_rng(seed)))
    out = {}
    for name in names:
        e1, e2 = check_primitive(name, seed)
        out[name] = (e1, e2, e1 < tol and e2 < tol)
    return out


def _gcn_instance(seed, n, d, c, hidden):
    from .graphcore import normalize_adjacency

    rng = np.random.default_rng(seed)
    a = np.triu((rng.random((n, n)) < 0.3).astype(float), 1)
    adj = normalize_adjacency(a + a.T)
    X = rng.standard_normal((n, d))
    y = rng.integers(0, c, n)
    mask = rng.random(n) < 0.6
    mask[0] = True
    ws = [rng.standard_normal((d, hidden)), rng.standard_normal((hidden, c))]
    return adj, X, y, mask, ws


def gcn_gradient_error(seed: int, h: float = 1e-5, n: int = 10, d: int = 4, c: int = 3, hidden: int = 5) -> float:
    """FD check of the masked cross-entropy gradient of a 2-layer GCN."""
    adj, X, y, mask, ws = _gcn_instance(seed, n, d, c, hidden)

    def run(arrs, want_grad=False):
        with Tape():
            th = models.GcnParams(Tensor(arrs[0], True), Tensor(arrs[1], True))
            loss = ad.softmax_cross_entropy(models.gcn_forward(adj, X, th), y, mask)
            if want_grad:
                return [g.data for g in ad.grad(loss, th.tensors())]
            return loss.item()

    analytic = run(ws, True)
    return max(rel_error(analytic[k], _central_difference(run, ws, k, h)) for k in range(2))


def _probes(x: np.ndarray, h: float):
    for idx in np.ndindex(x.shape):
        for sign in (1.0, -1.0):
            y = x.copy()
            y[idx] += sign * h
            yield y


def gcn_probe_is_smooth(seed: int, h: float = 1e-5, n: int = 10, d: int = 4, c: int = 3, hidden: int = 5) -> bool:
    """True when no relu in the GCN changes sign at any central-difference probe.

    Central differences across a relu kink measure a one-sided mix, not the
    derivative, so such probes say nothing about the analytic gradient.
    """
    adj, X, y, mask, ws = _gcn_instance(seed, n, d, c, hidden)
    ax = adj.matrix @ X
    base = ax @ ws[0] > 0
    return all(np.array_equal(ax @ w > 0, base) for w in _probes(ws[0], h))


def _matching_instance(seed, n_syn, d, c, hidden, phi_hidden):
    rng = np.random.default_rng(seed)
    Xs = rng.standard_normal((n_syn, d))
    ys = np.arange(n_syn) % c
    ws = [rng.standard_normal((d, hidden)), rng.standard_normal((hidden, c))]
    targets = {k: [rng.standard_normal((d, hidden)), rng.standard_normal((hidden, c))] for k in range(c)}
    phi = models.sample_adjgen(models.InitDistribution(seed=seed), d, phi_hidden, 1)
    return Xs, ys, ws, targets, phi


def matching_gradient_error(seed: int, h: float = 1e-4, n_syn: int = 6, d: int = 4, c: int = 3,
                            hidden: int = 5, phi_hidden: int = 6) -> float:
    """FD check of d(matching distance)/dX' through the generator and GCN."""
    from .matching import grad_match_distance

    Xs, ys, ws, targets, phi = _matching_instance(seed, n_syn, d, c, hidden, phi_hidden)

    def run(arrs, want_grad=False):
        with Tape():
            X = Tensor(arrs[0], requires_grad=True)
            adj = models.normalize_dense(models.adjgen_forward(X, phi))
            th = models.GcnParams(Tensor(ws[0], True), Tensor(ws[1], True))
            logits = models.gcn_forward(adj, X, th)
            total = None
            for k in range(c):
                loss = ad.softmax_cross_entropy(logits, ys, ys == k)
                gs = ad.grad(loss, th.tensors(), create_graph=True)
                dist = grad_match_distance(gs, targets[k])
                total = dist if total is None else ad.add(total, dist)
            if want_grad:
                return ad.grad2(total, [X])[0].data
            return total.item()

    return rel_error(run([Xs], True), _central_difference(run, [Xs], 0, h))


def _matching_signs(X, phi, W1):
    pair = (X @ phi.W1a)[:, None, :] + (X @ phi.W1b)[None, :, :] + phi.b1
    a = models.adjgen_forward(X, phi).data
    a_hat = models.normalize_dense(Tensor(a)).data
    return pair > 0, a_hat @ X @ W1 > 0


def matching_probe_is_smooth(seed: int, h: float = 1e-4, n_syn: int = 6, d: int = 4, c: int = 3,
                             hidden: int = 5, phi_hidden: int = 6) -> bool:
    """True when no relu (generator or GCN) changes sign at any probe of X'."""
    Xs, ys, ws, targets, phi = _matching_instance(seed, n_syn, d, c, hidden, phi_hidden)
    base = _matching_signs(Xs, phi, ws[0])
    for x in _probes(Xs, h):
        if not all(np.array_equal(a, b) for a, b in zip(_matching_signs(x, phi, ws[0]), base)):
            return False
    return True


def tiny_graph():
    """The fixed small SBM used by the reduction-chain identity."""
    from .graphcore import SbmParams, generate_sbm

    return generate_sbm(SbmParams(nodes_per_class=10, num_classes=3, p_in=0.5, p_out=0.05, feature_dim=5), seed=0)


def reduction_chain(epochs: int = 50, seed: int = 0) -> dict[str, np.ndarray]:
    """Loss traces of gcond, mgcond(K=1) and exgc(kappa=1, period=1).

    Patience is disabled so all three run exactly ``epochs`` epochs.
    """
    from .matching import CondenseConfig, condense

    g = tiny_graph()
    base = dict(ratio=0.3, max_epochs=epochs, patience=epochs + 1, seed=seed, hidden=8, phi_hidden=8)
    cfgs = {
        "gcond": CondenseConfig(mode="gcond", **base),
        "mgcond": CondenseConfig(mode="mgcond", K=1, **base),
        "exgc": CondenseConfig(mode="exgc", kappa=1.0, selection_period=1, **base),
    }
    return {name: condense(g, cfg).losses for name, cfg in cfgs.items()}


def reduction_chain_gap(epochs: int = 50, seed: int = 0) -> float:
    traces = reduction_chain(epochs, seed)
    ref = traces["gcond"]
    return max(float(np.abs(tr - ref).max()) if tr.shape == ref.shape else np.inf for tr in traces.values())
