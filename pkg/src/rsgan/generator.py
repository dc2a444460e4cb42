"""Friend/item generator: a CDAE over seeded-friend profiles followed by two
Gumbel-Softmax layers (friend, then one of the friend's items).

Single-user functions mirror the individual steps; ``generator_forward`` and
``generator_backward`` run the same computation on a block of users at once
and are what the trainer uses.
"""

import logging
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import DegenerateDistributionError, EmptySupportError, NumericFault
from .rng import stream

log = logging.getLogger(__name__)

MASK = -1e9
LOG_EPS = 1e-12
ITEM_MASS_FLOOR = 1e-8
PARAM_ORDER = ("W_in", "b_hidden", "U_node", "W_out", "b_out", "H")


@dataclass
class GeneratorParams:
    W_in: np.ndarray      # m x h
    b_hidden: np.ndarray  # h
    U_node: np.ndarray    # m x h
    W_out: np.ndarray     # h x m
    b_out: np.ndarray     # m
    H: np.ndarray         # m x n
    tau: float = 0.2
    q_corrupt: float = 0.2

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.q_corrupt < 1.0:
            raise ValueError("corruption probability must lie in [0, 1)")

    @property
    def m(self) -> int:
        return self.W_in.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def h(self) -> int:
        return self.W_in.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def copy(self) -> "GeneratorParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update({k: v.copy() for k, v in self.arrays().items()})
        return GeneratorParams(**kw)

    def check_finite(self):
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise NumericFault(f"generator parameter {name} is not finite")


def init_generator(m: int, n: int, hidden: int = 200, tau: float = 0.2,
                   q_corrupt: float = 0.2, master_seed: int = 0) -> GeneratorParams:
    """Glorot-uniform weights, zero biases, small user nodes and ``H`` filled with ones."""
    rng = stream(master_seed, "generator-init")
    bound = np.sqrt(6.0 / (m + hidden))
    return GeneratorParams(
        W_in=rng.uniform(-bound, bound, (m, hidden)),
        b_hidden=np.zeros(hidden),
        U_node=rng.uniform(-0.01, 0.01, (m, hidden)),
        W_out=rng.uniform(-bound, bound, (hidden, m)),
        b_out=np.zeros(m),
        H=np.ones((m, n)),
        tau=tau,
        q_corrupt=q_corrupt,
    )


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cdae_forward(params: GeneratorParams, u: int, s_tilde: np.ndarray,
                 return_hidden: bool = False):
    """Reconstruction scores ``c`` (length m) for user ``u`` from a corrupted seed vector."""
    hidden = expit(s_tilde @ params.W_in + params.U_node[u] + params.b_hidden)
    c = hidden @ params.W_out + params.b_out
    if not np.all(np.isfinite(c)):
        raise NumericFault("non-finite CDAE output")
    return (c, hidden) if return_hidden else c


def friend_distribution(c: np.ndarray, exclude_self: Optional[int] = None) -> np.ndarray:
    """Softmax over users with the user's own entry forced to zero."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[0] < 2:
        raise DegenerateDistributionError("a friend distribution needs at least two users")
    logits = c.copy()
    if exclude_self is not None:
        logits[exclude_self] = MASK
    return softmax(logits)


def gumbel_noise(rng: np.random.Generator, size) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log(mu))``, ``mu`` clamped away from 0 and 1."""
    mu = np.clip(rng.random(size), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(mu))


def gumbel_softmax(logits: np.ndarray, g: np.ndarray, tau: float) -> np.ndarray:
    """Relaxed one-hot sample ``softmax((logits + g) / tau)`` for fixed noise ``g``.

    Entries at the mask sentinel end up with (numerically) zero weight.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.any(logits > MASK / 2):
        raise EmptySupportError("every entry is masked")
    return softmax((logits + g) / tau)


def sample_friend(params: GeneratorParams, u: int, p_u: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    """Friend selection ``v`` from the friend distribution via the first Gumbel-Softmax layer."""
    logits = np.log(p_u + LOG_EPS)
    logits[u] = MASK
    return gumbel_softmax(logits, gumbel_noise(rng, len(p_u)), params.tau)


def item_logits(v: np.ndarray, train: sp.csr_matrix, params: GeneratorParams,
                u: int) -> Optional[np.ndarray]:
    """Masked logits ``(v^T R) * H[u]`` for the second Gumbel-Softmax layer.

    Items carrying less than ``1e-8`` of the friend mass, and items ``u``
    already consumed in ``train``, get the mask sentinel. Friend weights
    below ``friend_cutoff(m)`` are ignored when summing item mass; together
    they could never lift an item over the floor on their own. Returns ``None``
    when nothing is left to sample.
    """
    w = train.T @ np.where(v >= friend_cutoff(len(v)), v, 0.0)
    consumed = np.zeros(train.shape[1], dtype=bool)
    consumed[train.indices[train.indptr[u]:train.indptr[u + 1]]] = True
    masked = (w < ITEM_MASS_FLOOR) | consumed
    if masked.all():
        return None
    return np.where(masked, MASK, w * params.H[u])


def friend_cutoff(m: int) -> float:
    """Friend weight below which a friend adds nothing to item mass (all of them sum to < floor/2)."""
    return ITEM_MASS_FLOOR / (2.0 * m)


def sample_item(logits: np.ndarray, rng: np.random.Generator, tau: float) -> np.ndarray:
    return gumbel_softmax(logits, gumbel_noise(rng, len(logits)), tau)


# ---------------------------------------------------------------------------
# pretraining


def pretrain_cdae(params: GeneratorParams, seeds, epochs: int = 30, lr: float = 0.05,
                  master_seed: int = 0, neg_ratio: int = 5) -> GeneratorParams:
    """Fit the CDAE to reconstruct each user's seeded friends.

    Per user and epoch the seed vector is corrupted (each positive dropped
    with probability ``q_corrupt``), and logistic cross-entropy is taken on
    the seeded friends (label 1) plus ``neg_ratio * |S_u|`` uniformly sampled
    non-friends (label 0). Plain per-user SGD; users without seeds are skipped.
    """
    params = params.copy()
    m = params.m
    users = np.array([u for u in range(m) if len(seeds.friends[u])], dtype=np.int64)
    for epoch in range(epochs):
        order = stream(master_seed, "pretrain-order", epoch).permutation(users)
        total = 0.0
        for u in order:
            rng = stream(master_seed, "pretrain", epoch, u)
            friends = seeds.friends[u]
            kept = friends[rng.random(len(friends)) >= params.q_corrupt]
            forbidden = np.zeros(m, dtype=bool)
            forbidden[friends] = True
            forbidden[u] = True
            pool = np.flatnonzero(~forbidden)
            negs = pool[rng.integers(len(pool), size=neg_ratio * len(friends))] if len(pool) else pool
            targets = np.concatenate([friends, negs])
            labels = np.concatenate([np.ones(len(friends)), np.zeros(len(negs))])

            a = params.W_in[kept].sum(axis=0) + params.U_node[u] + params.b_hidden
            hid = expit(a)
            c_t = hid @ params.W_out[:, targets] + params.b_out[targets]
            total += float(np.sum(np.logaddexp(0.0, c_t) - labels * c_t))
            dc = expit(c_t) - labels
            dhid = params.W_out[:, targets] @ dc
            da = dhid * hid * (1.0 - hid)
            np.subtract.at(params.W_out.T, targets, lr * np.outer(dc, hid))
            np.subtract.at(params.b_out, targets, lr * dc)
            params.W_in[kept] -= lr * da
            params.b_hidden -= lr * da
            params.U_node[u] -= lr * da
        if not np.isfinite(total):
            raise NumericFault("non-finite CDAE pretraining loss", epoch)
        log.debug("pretrain epoch %d: cross-entropy %.4f", epoch, total)
    return params


# ---------------------------------------------------------------------------
# batched forward / backward



@dataclass
class GeneratorPass:
    """Everything the backward pass needs from one forward pass over a block of users.

    The item layer is stored sparsely: ``rows``/``cols`` list every candidate
    (row, item) pair in row-major order, and ``w``/``z`` hold the friend mass
    and relaxed item weight at those pairs. All other items carry zero weight.
    """

    users: np.ndarray
    s_tilde: sp.csr_matrix  # B x m corrupted seed input
    hidden: np.ndarray      # B x h
    p: np.ndarray           # B x m friend distribution
    v: np.ndarray           # B x m relaxed friend
    rows: np.ndarray        # candidate row index
    cols: np.ndarray        # candidate item id
    w: np.ndarray           # v^T R at the candidates
    z: np.ndarray           # relaxed item weight at the candidates
    valid: np.ndarray       # B, False when no candidate item exists
    n: int
    tau: float

    def z_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.z, (self.rows, self.cols)), shape=(len(self.users), self.n))

    def z_dense(self) -> np.ndarray:
        out = np.zeros((len(self.users), self.n))
        out[self.rows, self.cols] = self.z
        return out


@dataclass
class GeneratorNoise:
    """Fixed randomness for one forward pass (reparameterization constants).

    Item noise is a pure function of ``(item_keys[row], item)``, so any
    candidate set can be evaluated without drawing a dense ``B x n`` block.
    """

    keep: Optional[np.ndarray]  # B x m corruption keep-mask, None = no corruption
    g_friend: np.ndarray        # B x m
    item_keys: np.ndarray       # B, uint64


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def hashed_gumbel(keys: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Gumbel draws indexed by ``(key, item)``: uniform from a splitmix64 hash."""
    with np.errstate(over="ignore"):
        x = _splitmix64(np.asarray(keys, dtype=np.uint64) ^ (np.asarray(items).astype(np.uint64) * _GOLDEN))
    mu = (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    mu = np.clip(mu, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(mu))


def draw_noise(master_seed: int, tag: str, keys, m: int, q_corrupt: float,
               corrupt: bool = True) -> GeneratorNoise:
    """Per-sample noise from counter-based streams keyed by ``(tag, *key)``."""
    B = len(keys)
    keep = np.ones((B, m), dtype=bool) if corrupt else None
    g1 = np.empty((B, m))
    item_keys = np.empty(B, dtype=np.uint64)
    for r, key in enumerate(keys):
        key = key if isinstance(key, tuple) else (key,)
        rng = stream(master_seed, tag, *key)
        u_corrupt = rng.random(m)
        if corrupt:
            keep[r] = u_corrupt >= q_corrupt
        g1[r] = gumbel_noise(rng, m)
        item_keys[r] = rng.integers(0, 2**63, dtype=np.int64)
    return GeneratorNoise(keep, g1, item_keys)


def _row_max(values, rows, B):
    out = np.full(B, -np.inf)
    np.maximum.at(out, rows, values)
    return out


def _consumed(train: sp.csr_matrix, users, rows, cols) -> np.ndarray:
    """Whether ``users[rows]`` consumed ``cols`` in ``train``."""
    sub = sp.csr_matrix(train[users])
    sub.sort_indices()
    n = train.shape[1]
    sub_rows = np.repeat(np.arange(len(users), dtype=np.int64), np.diff(sub.indptr))
    owned = sub_rows * n + sub.indices.astype(np.int64)
    keys = rows.astype(np.int64) * n + cols.astype(np.int64)
    if len(owned) == 0:
        return np.zeros(len(keys), dtype=bool)
    pos = np.minimum(np.searchsorted(owned, keys), len(owned) - 1)
    return owned[pos] == keys


def generator_forward(params: GeneratorParams, users, seed_matrix: sp.csr_matrix,
                      train: sp.csr_matrix, noise: GeneratorNoise) -> GeneratorPass:
    users = np.asarray(users, dtype=np.int64)
    B = len(users)
    brange = np.arange(B)
    s = seed_matrix[users]
    if noise.keep is not None:
        s = s.multiply(noise.keep).tocsr()
    s = sp.csr_matrix(s)
    s.eliminate_zeros()
    hidden = expit(s @ params.W_in + params.U_node[users] + params.b_hidden)
    c = hidden @ params.W_out + params.b_out
    if not np.all(np.isfinite(c)):
        raise NumericFault("non-finite CDAE output")
    c[brange, users] = MASK
    p = softmax(c)
    logp = np.log(p + LOG_EPS)
    logp[brange, users] = MASK
    v = softmax((logp + noise.g_friend) / params.tau)

    V = sp.csr_matrix(np.where(v >= friend_cutoff(params.m), v, 0.0))
    W = sp.csr_matrix(V @ train)
    W.data[W.data < ITEM_MASS_FLOOR] = 0.0
    W.eliminate_zeros()
    W.sort_indices()
    rows = np.repeat(np.arange(B), np.diff(W.indptr))
    cols = W.indices.astype(np.int64)
    w = W.data
    keep = ~_consumed(train, users, rows, cols)
    rows, cols, w = rows[keep], cols[keep], w[keep]
    valid = np.bincount(rows, minlength=B) > 0

    s_item = (w * params.H[users[rows], cols] + hashed_gumbel(noise.item_keys[rows], cols)) / params.tau
    e = np.exp(s_item - _row_max(s_item, rows, B)[rows])
    z = e / np.bincount(rows, weights=e, minlength=B)[rows]
    return GeneratorPass(users=users, s_tilde=s, hidden=hidden, p=p, v=v, rows=rows, cols=cols,
                         w=w, z=z, valid=valid, n=train.shape[1], tau=params.tau)


def _candidate_scores(disc, fp: GeneratorPass):
    X = disc.P[fp.users] @ disc.Q.T
    return X[fp.rows, fp.cols]


def generator_loss(fp: GeneratorPass, disc, pos_items) -> np.ndarray:
    """Per-sample ``-log sigmoid(x_ui - x_uz)`` (invalid rows give 0)."""
    Pu = disc.P[fp.users]
    x_ui = np.einsum("bd,bd->b", Pu, disc.Q[pos_items])
    x_uz = np.bincount(fp.rows, weights=fp.z * _candidate_scores(disc, fp), minlength=len(fp.users))
    return np.where(fp.valid, np.logaddexp(0.0, -(x_ui - x_uz)), 0.0)


def generator_backward(params: GeneratorParams, disc, fp: GeneratorPass, pos_items,
                       train: sp.csr_matrix) -> Tuple[Dict[str, object], float]:
    """Gradient of ``sum_b -log sigmoid(x_ui - x_uz)`` w.r.t. every generator parameter.

    Rows without a candidate item contribute nothing. Dense gradients are
    returned for the shared weights; ``U_node`` comes back as a
    ``(rows, values)`` pair and ``H`` as a sparse ``m x n`` matrix since only
    the block's users and candidate items are touched. Ascent on these
    gradients raises ``x_uz``.
    """
    users = fp.users
    B = len(users)
    brange = np.arange(B)
    tau = fp.tau
    rows, cols = fp.rows, fp.cols
    Pu = disc.P[users]
    x_c = _candidate_scores(disc, fp)
    x_ui = np.einsum("bd,bd->b", Pu, disc.Q[pos_items])
    x_uz = np.bincount(rows, weights=fp.z * x_c, minlength=B)
    margin = x_ui - x_uz
    keep = fp.valid.astype(np.float64)
    loss = float(np.sum(keep * np.logaddexp(0.0, -margin)))
    a = expit(-margin) * keep                 # dL/dx_uz

    gz = a[rows] * x_c
    zg = np.bincount(rows, weights=fp.z * gz, minlength=B)
    draw = fp.z * (gz - zg[rows]) / tau
    dH = draw * fp.w
    dw = draw * params.H[users[rows], cols]

    dv = np.asarray((sp.csr_matrix((dw, (rows, cols)), shape=(B, fp.n)) @ train.T).todense())
    de1 = fp.v * (dv - np.einsum("bm,bm->b", fp.v, dv)[:, None])
    dlogp = de1 / tau
    dlogp[brange, users] = 0.0
    ratio = fp.p / (fp.p + LOG_EPS)
    rdl = ratio * dlogp
    dc = rdl - fp.p * rdl.sum(axis=1, keepdims=True)
    dc[brange, users] = 0.0

    hid = fp.hidden
    dW_out = hid.T @ dc
    db_out = dc.sum(axis=0)
    dhid = dc @ params.W_out.T
    da = dhid * hid * (1.0 - hid)
    dW_in = np.asarray(fp.s_tilde.T @ da)
    grads = {
        "W_in": dW_in,
        "b_hidden": da.sum(axis=0),
        "U_node": (users, da),
        "W_out": dW_out,
        "b_out": db_out,
        "H": sp.coo_matrix((dH, (users[rows], cols)), shape=params.H.shape),
    }
    return grads, loss


def apply_generator_grads(params: GeneratorParams, grads, step: float) -> None:
    """``theta += step * grad`` in place (ascent for positive ``step``)."""
    for name in PARAM_ORDER:
        g = grads[name]
        target = getattr(params, name)
        if isinstance(g, tuple):
            rows, vals = g
            np.add.at(target, rows, step * vals)
        elif sp.issparse(g):
            g = g.tocoo()
            np.add.at(target, (g.row, g.col), step * g.data)
        else:
            target += step * g


def dense_grad(params: GeneratorParams, grads, name: str) -> np.ndarray:
    g = grads[name]
    if isinstance(g, tuple):
        out = np.zeros_like(getattr(params, name))
        np.add.at(out, g[0], g[1])
        return out
    if sp.issparse(g):
        return g.toarray()
    return g


def noise_free_distribution(params: GeneratorParams, seed_matrix: sp.csr_matrix,
                            users=None, chunk: int = 512) -> np.ndarray:
    """Friend distributions without corruption or Gumbel noise (rows follow ``users``)."""
    users = np.arange(params.m) if users is None else np.asarray(users, dtype=np.int64)
    out = np.empty((len(users), params.m))
    for start in range(0, len(users), chunk):
        blk = users[start:start + chunk]
        s = sp.csr_matrix(seed_matrix[blk])
        hidden = expit(s @ params.W_in + params.U_node[blk] + params.b_hidden)
        c = hidden @ params.W_out + params.b_out
        c[np.arange(len(blk)), blk] = MASK
        out[start:start + len(blk)] = softmax(c)
    return out
