"""GNN models matched during condensation, the adjacency generator, and
parameter initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class GcnParams:
    W1: Tensor
    W2: Tensor
    b1: Tensor | None = None
    b2: Tensor | None = None

    @property
    def hidden_width(self) -> int:
        return self.W1.shape[1]

    def tensors(self) -> list[Tensor]:
        return [t for t in (self.W1, self.W2, self.b1, self.b2) if t is not None]

    def with_tensors(self, ts) -> "GcnParams":
        ts = list(ts)
        W1, W2 = ts[0], ts[1]
        b1 = ts[2] if self.b1 is not None else None
        b2 = ts[-1] if self.b2 is not None else None
        return GcnParams(W1, W2, b1, b2)


@dataclass
class SgcParams:
    W: Tensor
    propagation_hops: int = 2

    def __post_init__(self):
        if self.propagation_hops < 1:
            raise ValueError("propagation_hops must be >= 1")

    def tensors(self) -> list[Tensor]:
        return [self.W]

    def with_tensors(self, ts) -> "SgcParams":
        return SgcParams(list(ts)[0], self.propagation_hops)


@dataclass
class MlpParams:
    W1: Tensor
    W2: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.W1, self.W2]

    def with_tensors(self, ts) -> "MlpParams":
        ts = list(ts)
        return MlpParams(ts[0], ts[1])


@dataclass
class AdjGenParams:
    """Pair scorer ``[x_i; x_j] -> hidden -> 1``.

    The first-layer weight is stored split into the halves acting on ``x_i``
    and on ``x_j`` so pair activations never materialize the ``2d`` input.
    """

    W1a: np.ndarray
    W1b: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.W1a, self.W1b, self.b1, self.w2, self.b2]

    @classmethod
    def from_arrays(cls, arrs) -> "AdjGenParams":
        return cls(*[np.array(a, dtype=np.float64) for a in arrs])

    @property
    def names(self) -> tuple[str, ...]:
        return ("W1a", "W1b", "b1", "w2", "b2")

    @classmethod
    def zeros(cls, d: int, hidden: int) -> "AdjGenParams":
        return cls(np.zeros((d, hidden)), np.zeros((d, hidden)), np.zeros((1, hidden)),
                   np.zeros((hidden, 1)), np.zeros((1, 1)))


@dataclass
class InitDistribution:
    """Seeded source of initial parameter states.

    ``kind`` is ``"glorot_uniform"`` or ``"kaiming_normal"``.  Each call to
    :meth:`rng` with the same tag yields the same stream.
    """

    kind: str = "glorot_uniform"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("glorot_uniform", "kaiming_normal"):
            raise ValueError(f"unknown init kind {self.kind!r}")

    def rng(self, *tag: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *tag])

    def matrix(self, rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
        if self.kind == "glorot_uniform":
            bound = glorot_bound(fan_in, fan_out)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def sample_theta(dist: InitDistribution, d: int, hidden: int, c: int, *tag: int,
                 use_bias: bool = False) -> GcnParams:
    rng = dist.rng(*tag)
    W1 = Tensor(dist.matrix(rng, d, hidden), requires_grad=True)
    W2 = Tensor(dist.matrix(rng, hidden, c), requires_grad=True)
    if not use_bias:
        return GcnParams(W1, W2)
    return GcnParams(W1, W2, Tensor(np.zeros((1, hidden)), True), Tensor(np.zeros((1, c)), True))


def sample_adjgen(dist: InitDistribution, d: int, hidden: int, *tag: int) -> AdjGenParams:
    rng = dist.rng(*tag)
    W1 = dist.matrix(rng, 2 * d, hidden)
    w2 = dist.matrix(rng, hidden, 1)
    return AdjGenParams(W1[:d].copy(), W1[d:].copy(), np.zeros((1, hidden)), w2, np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# forward passes


def _propagate(adj, x: Tensor) -> Tensor:
    if isinstance(adj, Tensor):
        return ad.matmul(adj, x)
    return ad.sparse_dense_matmul(adj, x)


def gcn_forward(adj, X, theta: GcnParams) -> Tensor:
    """Two-layer GCN logits ``A relu(A X W1) W2``.

    ``adj`` is a :class:`~graphcond.graphcore.NormalizedAdjacency` (constant)
    or a dense normalized tensor (differentiable, synthetic graph).
    """
    X = ad.as_tensor(X)
    if X.shape[1] != theta.W1.shape[0]:
        raise ad.ShapeError(f"gcn_forward: features have {X.shape[1]} columns, W1 expects {theta.W1.shape[0]}")
    h = _propagate(adj, ad.matmul(X, theta.W1))
    if theta.b1 is not None:
        h = ad.add_bias(h, theta.b1)
    h = ad.relu(h)
    out = _propagate(adj, ad.matmul(h, theta.W2))
    if theta.b2 is not None:
        out = ad.add_bias(out, theta.b2)
    return out


def sgc_forward(adj, X, theta: SgcParams) -> Tensor:
    h = ad.as_tensor(X)
    for _ in range(theta.propagation_hops):
        h = _propagate(adj, h)
    return ad.matmul(h, theta.W)


def mlp_forward(adj, X, theta: MlpParams) -> Tensor:
    del adj
    return ad.matmul(ad.relu(ad.matmul(ad.as_tensor(X), theta.W1)), theta.W2)


def adjgen_forward(X, phi, threshold: float | None = None):
    """Dense synthetic adjacency from node features.

    ``a_ij = sigmoid((m(x_i, x_j) + m(x_j, x_i)) / 2)`` with unit diagonal.
    ``phi`` may hold arrays or tensors; with ``threshold`` the result is a
    numpy array whose entries below the threshold are zeroed.
    """
    X = ad.as_tensor(X)
    W1a, W1b, b1, w2, b2 = [ad.as_tensor(p) for p in _phi_items(phi)]
    n = X.shape[0]
    u = ad.matmul(X, W1a)
    v = ad.matmul(X, W1b)
    ii = np.repeat(np.arange(n), n)
    jj = np.tile(np.arange(n), n)
    pre = ad.add(ad.take_rows(u, ii), ad.take_rows(v, jj))
    hidden = ad.relu(ad.add_bias(pre, b1))
    score = ad.add(ad.matmul(hidden, w2), ad.broadcast_to(b2, (n * n, 1)))
    m = ad.reshape(score, (n, n))
    sym = ad.scale(ad.add(m, ad.transpose(m)), 0.5)
    eye = np.eye(n)
    a = ad.add(ad.mul(ad.sigmoid(sym), Tensor(1.0 - eye)), Tensor(eye))
    if threshold is None:
        return a
    out = a.data.copy()
    out[out < threshold] = 0.0
    return out


def _phi_items(phi):
    if isinstance(phi, AdjGenParams):
        return phi.arrays()
    return list(phi)


def normalize_dense(a: Tensor) -> Tensor:
    """Differentiable D^{-1/2}(A+I)D^{-1/2} for a dense square tensor."""
    n = a.shape[0]
    at = ad.add(a, Tensor(np.eye(n)))
    dinv = ad.power(ad.row_sum(at), -0.5)
    return ad.mul(at, ad.matmul(dinv, ad.transpose(dinv)))
