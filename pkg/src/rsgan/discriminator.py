"""Matrix-factorization ranker trained with plain BPR or the socially
constrained BPR loss over quads ``(u, i, z, j)`` where ``z`` is a relaxed
item selection coming from the generator."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import NumericFault
from .rng import stream

SUPPORT_FLOOR = 1e-12


@dataclass
class DiscriminatorParams:
    P: np.ndarray  # m x d user factors
    Q: np.ndarray  # n x d item factors
    lam: float = 0.001

    @property
    def d(self) -> int:
        return self.P.shape[1]

    def copy(self) -> "DiscriminatorParams":
        return DiscriminatorParams(self.P.copy(), self.Q.copy(), self.lam)

    def check_finite(self):
        if not (np.all(np.isfinite(self.P)) and np.all(np.isfinite(self.Q))):
            raise NumericFault("discriminator factors are not finite")


@dataclass
class TrainingQuad:
    u: int
    i: int
    z: np.ndarray  # length-n relaxed item selection
    j: int


def init_discriminator(m: int, n: int, d: int = 50, lam: float = 0.001,
                       master_seed: int = 0) -> DiscriminatorParams:
    rng = stream(master_seed, "discriminator-init")
    return DiscriminatorParams(rng.uniform(-0.05, 0.05, (m, d)),
                               rng.uniform(-0.05, 0.05, (n, d)), lam)


def score(params: DiscriminatorParams, u: int, i: int) -> float:
    return float(params.P[u] @ params.Q[i])


def soft_score(params: DiscriminatorParams, u: int, z: np.ndarray) -> float:
    """``sum_k z_k x_uk`` over the entries of ``z`` above ``1e-12``."""
    support = np.flatnonzero(z > SUPPORT_FLOOR)
    return float(z[support] @ (params.Q[support] @ params.P[u]))


def sample_quad(train_items: np.ndarray, n: int, u: int, z: np.ndarray,
                rng: np.random.Generator) -> Optional[TrainingQuad]:
    """Uniform positive from ``train_items`` and a rejection-sampled negative.

    Returns ``None`` (skip) when the user has no positives or consumed every item.
    """
    train_items = np.asarray(train_items)
    if len(train_items) == 0 or len(train_items) >= n:
        return None
    i = int(train_items[rng.integers(len(train_items))])
    owned = set(train_items.tolist())
    while True:
        j = int(rng.integers(n))
        if j not in owned:
            return TrainingQuad(u, i, z, j)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def discriminator_loss(params: DiscriminatorParams, quad: TrainingQuad) -> float:
    """Double-margin loss with L2 on the touched rows (``z``-weighted for the generated item)."""
    P, Q, lam = params.P, params.Q, params.lam
    support = np.flatnonzero(quad.z > SUPPORT_FLOOR)
    zs = quad.z[support]
    x_ui = P[quad.u] @ Q[quad.i]
    x_uj = P[quad.u] @ Q[quad.j]
    x_uz = zs @ (Q[support] @ P[quad.u])
    reg = (P[quad.u] @ P[quad.u] + Q[quad.i] @ Q[quad.i] + Q[quad.j] @ Q[quad.j]
           + zs @ np.einsum("kd,kd->k", Q[support], Q[support]))
    return float(-(_log_sigmoid(x_ui - x_uz) + _log_sigmoid(x_uz - x_uj)) + lam * reg)


def bpr_loss(params: DiscriminatorParams, u: int, i: int, j: int) -> float:
    P, Q = params.P, params.Q
    reg = P[u] @ P[u] + Q[i] @ Q[i] + Q[j] @ Q[j]
    return float(-_log_sigmoid(P[u] @ Q[i] - P[u] @ Q[j]) + params.lam * reg)


def _support(Z) -> sp.csr_matrix:
    """``Z`` as CSR with entries at or below ``SUPPORT_FLOOR`` removed."""
    Z = sp.csr_matrix(Z, dtype=np.float64, copy=True)
    Z.data[Z.data <= SUPPORT_FLOOR] = 0.0
    Z.eliminate_zeros()
    return Z


def social_bpr_grads(params: DiscriminatorParams, users, pos, neg, Z):
    """Summed gradients of the quad loss for a block; ``Z`` is ``B x n`` and held constant.

    ``Z`` may be dense or sparse. Returns ``(loss, gP, gQi, gQj, cols, gQz)``
    with ``gQz`` aligned to the item columns ``cols`` that carry
    generated-item mass.
    """
    P, Q, lam = params.P, params.Q, params.lam
    Zs = _support(Z)
    cols, inv = np.unique(Zs.indices, return_inverse=True)
    Zc = sp.csr_matrix((Zs.data, inv.ravel(), Zs.indptr), shape=(Zs.shape[0], len(cols)))
    Qc = Q[cols]
    Pu, Qi, Qj = P[users], Q[pos], Q[neg]
    qz = np.asarray(Zc @ Qc)
    x_ui = np.einsum("bd,bd->b", Pu, Qi)
    x_uj = np.einsum("bd,bd->b", Pu, Qj)
    x_uz = np.einsum("bd,bd->b", Pu, qz)
    sq = np.einsum("kd,kd->k", Qc, Qc)
    reg = (np.einsum("bd,bd->b", Pu, Pu) + np.einsum("bd,bd->b", Qi, Qi)
           + np.einsum("bd,bd->b", Qj, Qj) + Zc @ sq)
    loss = float(np.sum(np.logaddexp(0.0, -(x_ui - x_uz)) + np.logaddexp(0.0, -(x_uz - x_uj)) + lam * reg))
    a1 = expit(-(x_ui - x_uz))[:, None]
    a2 = expit(-(x_uz - x_uj))[:, None]
    gP = -a1 * Qi + (a1 - a2) * qz + a2 * Qj + 2 * lam * Pu
    gQi = -a1 * Pu + 2 * lam * Qi
    gQj = a2 * Pu + 2 * lam * Qj
    colsum = np.asarray(Zc.sum(axis=0)).ravel()
    gQz = np.asarray(Zc.T @ ((a1 - a2) * Pu)) + 2 * lam * colsum[:, None] * Qc
    return loss, gP, gQi, gQj, cols, gQz


def social_bpr_step(params: DiscriminatorParams, users, pos, neg, Z, lr: float) -> float:
    """One SGD step on a block of quads (gradients from the pre-step factors). Returns the loss."""
    users = np.asarray(users, dtype=np.int64)
    loss, gP, gQi, gQj, cols, gQz = social_bpr_grads(params, users, pos, neg, Z)
    if not np.isfinite(loss):
        raise NumericFault("non-finite discriminator loss")
    np.add.at(params.P, users, -lr * gP)
    np.add.at(params.Q, np.asarray(pos), -lr * gQi)
    np.add.at(params.Q, np.asarray(neg), -lr * gQj)
    params.Q[cols] -= lr * gQz
    return loss


def discriminator_step(params: DiscriminatorParams, quad: TrainingQuad, lr: float) -> DiscriminatorParams:
    """SGD descent on one quad, in place; ``z`` is a constant here."""
    social_bpr_step(params, [quad.u], [quad.i], [quad.j], quad.z[None, :], lr)
    return params


def bpr_grads(params: DiscriminatorParams, users, pos, neg):
    P, Q, lam = params.P, params.Q, params.lam
    Pu, Qi, Qj = P[users], Q[pos], Q[neg]
    x = np.einsum("bd,bd->b", Pu, Qi - Qj)
    reg = (np.einsum("bd,bd->b", Pu, Pu) + np.einsum("bd,bd->b", Qi, Qi)
           + np.einsum("bd,bd->b", Qj, Qj))
    loss = float(np.sum(np.logaddexp(0.0, -x) + lam * reg))
    a = expit(-x)[:, None]
    gP = -a * (Qi - Qj) + 2 * lam * Pu
    gQi = -a * Pu + 2 * lam * Qi
    gQj = a * Pu + 2 * lam * Qj
    return loss, gP, gQi, gQj


def bpr_step(params: DiscriminatorParams, users, pos, neg, lr: float) -> float:
    users = np.asarray(users, dtype=np.int64)
    loss, gP, gQi, gQj = bpr_grads(params, users, pos, neg)
    if not np.isfinite(loss):
        raise NumericFault("non-finite BPR loss")
    np.add.at(params.P, users, -lr * gP)
    np.add.at(params.Q, np.asarray(pos), -lr * gQi)
    np.add.at(params.Q, np.asarray(neg), -lr * gQj)
    return loss


def top_k(scores: np.ndarray, K: int, exclude=None) -> np.ndarray:
    """Indices of the ``K`` highest scores, ties to the lower index, ``exclude`` removed."""
    scores = np.asarray(scores, dtype=np.float64)
    cand = np.ones(len(scores), dtype=bool)
    if exclude is not None and len(exclude):
        cand[np.asarray(list(exclude) if isinstance(exclude, set) else exclude, dtype=np.int64)] = False
    idx = np.flatnonzero(cand)
    if K < len(idx):
        s = scores[idx]
        kth = np.partition(-s, K - 1)[K - 1]
        idx = idx[-s <= kth]
    order = np.lexsort((idx, -scores[idx]))
    return idx[order[:K]]


def rank_items(params: DiscriminatorParams, u: int, K: int, exclude=None) -> np.ndarray:
    return top_k(params.Q @ params.P[u], K, exclude)


class PairIndex:
    """Membership test for ``(user, item)`` pairs of a sparse interaction matrix."""

    def __init__(self, matrix):
        coo = matrix.tocoo()
        self.n = matrix.shape[1]
        self.keys = np.sort(coo.row.astype(np.int64) * self.n + coo.col.astype(np.int64))
        self.counts = np.bincount(coo.row, minlength=matrix.shape[0])

    def contains(self, users, items) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.n + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return (self.keys[pos] == keys) if len(self.keys) else np.zeros(len(keys), dtype=bool)


def sample_negatives(users, owned: PairIndex, rng: np.random.Generator) -> np.ndarray:
    """Uniform items not consumed by each user (rejection sampling)."""
    users = np.asarray(users, dtype=np.int64)
    if np.any(owned.counts[users] >= owned.n):
        raise ValueError("a user has consumed every item; no negative exists")
    neg = rng.integers(owned.n, size=len(users))
    bad = owned.contains(users, neg)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(owned.n, size=len(idx))
        bad[idx] = owned.contains(users[idx], neg[idx])
    return neg
