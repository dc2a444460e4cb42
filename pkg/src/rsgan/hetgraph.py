"""Seeded-friend discovery on the joint user-user / user-item graph.

Meta-path-guided random walks are run over the trust network and the
user-item bipartite graph, only users are emitted, a skip-gram model with
negative sampling embeds the walk corpus, and every user's most similar
users become its seeded friends.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from numba import njit

from .data import Dataset, SocialGraph, iter_tsv
from .errors import ConfigError, DataError, ParseError
from .rng import stream

log = logging.getLogger(__name__)

DEFAULT_META_PATHS = ("U-U", "U-I-U", "U-U-I-U")
NEG_TABLE_SIZE = 1_000_000


@dataclass(frozen=True)
class MetaPath:
    pattern: tuple

    @classmethod
    def parse(cls, text: str) -> "MetaPath":
        types = tuple(t.strip().upper() for t in text.split("-"))
        if len(types) < 2 or types[0] != "U" or types[-1] != "U":
            raise ConfigError(f"meta-path {text!r} must start and end with U and have length >= 2")
        if any(t not in ("U", "I") for t in types):
            raise ConfigError(f"meta-path {text!r} may only contain U and I")
        if any(a == b == "I" for a, b in zip(types, types[1:])):
            raise ConfigError(f"meta-path {text!r} has an item-item hop")
        return cls(types)

    def __str__(self):
        return "-".join(self.pattern)

    @property
    def hops(self):
        return list(zip(self.pattern[:-1], self.pattern[1:]))


def parse_meta_paths(paths) -> List[MetaPath]:
    if isinstance(paths, str):
        paths = [s for s in paths.split(",") if s.strip()]
    return [p if isinstance(p, MetaPath) else MetaPath.parse(p) for p in paths]


@dataclass
class SeededFriendSet:
    """Directed per-user seed lists; ``similarity`` is parallel to ``friends``."""

    m: int
    friends: List[np.ndarray]
    similarity: Optional[List[np.ndarray]] = None
    n_dropped_self: int = 0
    n_dropped_unknown: int = 0

    def __post_init__(self):
        self.friends = [np.asarray(f, dtype=np.int64) for f in self.friends]
        if len(self.friends) != self.m:
            raise ValueError("need one friend list per user")
        for u, f in enumerate(self.friends):
            if len(f) and (f.min() < 0 or f.max() >= self.m or np.any(f == u)):
                raise ValueError(f"invalid seeded friends for user {u}")

    @classmethod
    def from_pairs(cls, m: int, pairs) -> "SeededFriendSet":
        lists = [[] for _ in range(m)]
        for u, v in pairs:
            if u != v and v not in lists[u]:
                lists[u].append(int(v))
        return cls(m, [np.array(sorted(x), dtype=np.int64) for x in lists])

    def indicator(self, u: int) -> np.ndarray:
        s = np.zeros(self.m)
        s[self.friends[u]] = 1.0
        return s

    def matrix(self) -> sp.csr_matrix:
        rows = np.concatenate([np.full(len(f), u) for u, f in enumerate(self.friends)] or [np.zeros(0)])
        cols = np.concatenate(self.friends or [np.zeros(0)])
        return sp.csr_matrix((np.ones(len(rows)), (rows.astype(np.int64), cols.astype(np.int64))),
                             shape=(self.m, self.m))

    def pair_set(self):
        return {(u, int(v)) for u, f in enumerate(self.friends) for v in f}

    @property
    def n_pairs(self) -> int:
        return sum(len(f) for f in self.friends)

    def users_with_seeds(self) -> np.ndarray:
        return np.array([u for u, f in enumerate(self.friends) if len(f)], dtype=np.int64)


def _walk_graphs(feedback: sp.csr_matrix, social: SocialGraph):
    adj = social.adjacency()
    uu = ((adj + adj.T) > 0).astype(np.float64).tocsr()
    ui = sp.csr_matrix(feedback, dtype=np.float64)
    iu = ui.T.tocsr()
    graphs = {}
    for key, g in (("UU", uu), ("UI", ui), ("IU", iu)):
        g.sort_indices()
        graphs[key] = (g.indptr.astype(np.int64), g.indices.astype(np.int64))
    return graphs


def generate_walks(feedback, social: SocialGraph, paths=DEFAULT_META_PATHS,
                   walks_per_node: int = 10, walk_length: int = 40,
                   master_seed: int = 0) -> List[np.ndarray]:
    """Meta-path walks from every user; returns the emitted user sequences.

    ``feedback`` is the ``m x n`` training interaction matrix (or a Dataset).
    Trust edges are walked in both directions. Each hop picks a uniform
    neighbour of the type the (cyclically repeated) pattern asks for; a walk
    stops early when no such neighbour exists, and ``walk_length`` counts
    emitted users, the start user included.
    """
    if walks_per_node < 1 or walk_length < 2:
        raise ConfigError("walks_per_node must be >= 1 and walk_length >= 2")
    if isinstance(feedback, Dataset):
        feedback = feedback.feedback
    m = feedback.shape[0]
    if social.m != m:
        raise DataError("social graph and feedback disagree on the user count")
    graphs = _walk_graphs(feedback, social)
    corpus = []
    for p_idx, path in enumerate(parse_meta_paths(paths)):
        hops = [a + b for a, b in path.hops]
        for r in range(walks_per_node):
            rng = stream(master_seed, "walk", p_idx, r)
            out = np.full((m, walk_length), -1, dtype=np.int64)
            out[:, 0] = np.arange(m)
            length = np.ones(m, dtype=np.int64)
            cur = np.arange(m)
            active = np.ones(m, dtype=bool)
            step = 0
            while active.any():
                indptr, indices = graphs[hops[step % len(hops)]]
                idx = np.flatnonzero(active)
                deg = indptr[cur[idx] + 1] - indptr[cur[idx]]
                dead = deg == 0
                active[idx[dead]] = False
                idx, deg = idx[~dead], deg[~dead]
                draws = rng.random(len(idx))
                cur[idx] = indices[indptr[cur[idx]] + np.minimum((draws * deg).astype(np.int64), deg - 1)]
                if hops[step % len(hops)][1] == "U":
                    out[idx, length[idx]] = cur[idx]
                    length[idx] += 1
                    active[idx[length[idx] >= walk_length]] = False
                step += 1
            corpus.extend(out[u, :length[u]].copy() for u in range(m))
    return corpus


@njit(cache=True)
def _sgns_epoch(tokens, offsets, order, W, C, neg_table, window, negatives,
                lr0, step, total_steps, seed):
    np.random.seed(seed)
    d = W.shape[1]
    n_table = neg_table.shape[0]
    neu = np.zeros(d)
    for wi in order:
        start = offsets[wi]
        end = offsets[wi + 1]
        for c in range(start, end):
            lr = lr0 * max(1.0 - step / total_steps, 1e-4)
            step += 1
            center = tokens[c]
            # effective window drawn uniformly from 1..window
            b = np.random.randint(window) + 1
            lo = max(start, c - b)
            hi = min(end, c + b + 1)
            for o in range(lo, hi):
                if o == c:
                    continue
                ctx = tokens[o]
                neu[:] = 0.0
                for k in range(negatives + 1):
                    if k == 0:
                        target = ctx
                        label = 1.0
                    else:
                        target = neg_table[np.random.randint(n_table)]
                        if target == ctx:
                            continue
                        label = 0.0
                    f = 0.0
                    for t in range(d):
                        f += W[center, t] * C[target, t]
                    g = (label - 1.0 / (1.0 + np.exp(-f))) * lr
                    for t in range(d):
                        neu[t] += g * C[target, t]
                        C[target, t] += g * W[center, t]
                for t in range(d):
                    W[center, t] += neu[t]
    return step


def train_skipgram(corpus: Sequence[np.ndarray], m: int, d_emb: int = 64, window: int = 5,
                   negatives: int = 5, epochs: int = 5, lr: float = 0.025,
                   master_seed: int = 0) -> np.ndarray:
    """Skip-gram with negative sampling over user walks; returns the ``m x d_emb`` input vectors.

    Negatives follow the unigram^0.75 distribution of emitted users (drawn
    from a lookup table), each centre uses an effective window drawn
    uniformly from ``1..window``, and the learning rate decays linearly over
    all epochs. Single-threaded and
    deterministic for a fixed seed.
    """
    if d_emb < 2 or window < 1 or negatives < 1:
        raise ConfigError("need d_emb >= 2, window >= 1, negatives >= 1")
    if len(corpus) == 0:
        raise DataError("empty walk corpus")
    rng = stream(master_seed, "skipgram-init")
    W = (rng.random((m, d_emb)) - 0.5) / d_emb
    C = np.zeros((m, d_emb))
    if epochs <= 0:
        return W
    lengths = np.array([len(w) for w in corpus], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    tokens = np.concatenate(corpus).astype(np.int64)
    if tokens.min() < 0 or tokens.max() >= m:
        raise DataError("walk corpus contains ids outside [0, m)")
    freq = np.bincount(tokens, minlength=m).astype(np.float64) ** 0.75
    neg_cdf = np.cumsum(freq / freq.sum())
    neg_table = np.searchsorted(neg_cdf, (np.arange(NEG_TABLE_SIZE) + 0.5) / NEG_TABLE_SIZE)
    neg_table = np.minimum(neg_table, m - 1).astype(np.int64)
    total = float(len(tokens) * epochs)
    step = 0
    for epoch in range(epochs):
        ep_rng = stream(master_seed, "skipgram-epoch", epoch)
        order = ep_rng.permutation(len(corpus)).astype(np.int64)
        seed = int(ep_rng.integers(0, 2**31 - 1))
        step = _sgns_epoch(tokens, offsets, order, W, C, neg_table, window, negatives,
                           lr, step, total, seed)
    if not np.all(np.isfinite(W)):
        raise DataError("skip-gram produced non-finite embeddings")
    return W


def select_seeded_friends(emb: np.ndarray, k_seed: int = 10, min_sim: float = 0.0,
                          chunk: int = 1024) -> SeededFriendSet:
    """Top-``k_seed`` users by cosine similarity (>= ``min_sim``), self excluded.

    Ties go to the lower user id. Zero vectors have similarity 0 to everyone.
    """
    if k_seed < 1 or not -1.0 <= min_sim <= 1.0:
        raise ConfigError("need k_seed >= 1 and min_sim in [-1, 1]")
    emb = np.asarray(emb, dtype=np.float64)
    m = emb.shape[0]
    norms = np.linalg.norm(emb, axis=1)
    unit = emb / np.where(norms > 0, norms, 1.0)[:, None]
    ids = np.arange(m)
    friends, sims = [], []
    for start in range(0, m, chunk):
        block = unit[start:start + chunk] @ unit.T
        for r, row in enumerate(block):
            u = start + r
            ok = row >= min_sim
            ok[u] = False
            cand = ids[ok]
            order = np.lexsort((cand, -row[cand]))[:k_seed]
            friends.append(cand[order])
            sims.append(row[cand[order]])
    return SeededFriendSet(m, friends, sims)


def discover_seeded_friends(feedback, social: SocialGraph, paths=DEFAULT_META_PATHS,
                            walks_per_node: int = 10, walk_length: int = 40, d_emb: int = 64,
                            window: int = 5, negatives: int = 5, epochs: int = 5,
                            lr: float = 0.025, k_seed: int = 10, min_sim: float = 0.0,
                            master_seed: int = 0) -> SeededFriendSet:
    """Walks, embedding and selection in one call."""
    if isinstance(feedback, Dataset):
        feedback = feedback.feedback
    corpus = generate_walks(feedback, social, paths, walks_per_node, walk_length, master_seed)
    emb = train_skipgram(corpus, feedback.shape[0], d_emb, window, negatives, epochs, lr, master_seed)
    seeds = select_seeded_friends(emb, k_seed, min_sim)
    log.info("seeded friends: %d pairs over %d users", seeds.n_pairs, len(seeds.users_with_seeds()))
    return seeds


def load_seeded_friends(path, dataset: Dataset) -> SeededFriendSet:
    """Read ``user<TAB>friend[<TAB>similarity]``; self-pairs and unknown ids are dropped."""
    lists = [dict() for _ in range(dataset.m)]
    n_self = n_unknown = 0
    for lineno, cols in iter_tsv(path):
        if len(cols) not in (2, 3):
            raise ParseError(path, lineno, "expected user<TAB>friend[<TAB>similarity]")
        u = dataset.user_index.get(cols[0])
        v = dataset.user_index.get(cols[1])
        if u is None or v is None:
            n_unknown += 1
            continue
        if u == v:
            n_self += 1
            continue
        sim = float(cols[2]) if len(cols) == 3 else np.nan
        lists[u].setdefault(v, sim)
    if n_self or n_unknown:
        log.warning("%s: dropped %d self pairs and %d pairs with unknown users", path, n_self, n_unknown)
    friends = [np.array(list(d.keys()), dtype=np.int64) for d in lists]
    sims = [np.array(list(d.values()), dtype=np.float64) for d in lists]
    return SeededFriendSet(dataset.m, friends, sims, n_dropped_self=n_self, n_dropped_unknown=n_unknown)


def write_seeded_friends(path, dataset: Dataset, seeds: SeededFriendSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, friends in enumerate(seeds.friends):
            sims = seeds.similarity[u] if seeds.similarity is not None else [np.nan] * len(friends)
            for v, s in zip(friends, sims):
                fh.write(f"{dataset.user_ids[u]}\t{dataset.user_ids[v]}\t{float(s):.17g}\n")
