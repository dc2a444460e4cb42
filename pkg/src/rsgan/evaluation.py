"""Top-K ranking metrics, cold-start and link-prediction reports, and the
reliable-friend network analysis."""

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import Dataset, FoldSplit, SocialGraph, cold_start_users
from .discriminator import DiscriminatorParams, top_k
from .generator import GeneratorParams, noise_free_distribution

METRICS = ("precision", "recall", "ndcg")


def precision_at_k(recommended: Sequence[int], relevant, K: int) -> float:
    hits = len(set(list(recommended)[:K]) & set(relevant))
    return hits / K


def recall_at_k(recommended: Sequence[int], relevant, K: int) -> Optional[float]:
    """``None`` when there is nothing relevant (the user is left out of averages)."""
    relevant = set(relevant)
    if not relevant:
        return None
    return len(set(list(recommended)[:K]) & relevant) / len(relevant)


def ndcg_at_k(recommended: Sequence[int], relevant, K: int) -> Optional[float]:
    """Binary-relevance NDCG; the ideal list has ``min(K, |relevant|)`` hits."""
    relevant = set(relevant)
    if not relevant:
        return None
    dcg = sum(1.0 / math.log2(pos + 2) for pos, item in enumerate(list(recommended)[:K])
              if item in relevant)
    idcg = sum(1.0 / math.log2(pos + 2) for pos in range(min(K, len(relevant))))
    return dcg / idcg


@dataclass
class MetricReport:
    """Per-K averages over evaluated users. ``n_users == 0`` means nothing was evaluated."""

    ks: List[int]
    metrics: Dict[int, Dict[str, float]] = field(default_factory=dict)
    n_users: int = 0

    @property
    def empty(self) -> bool:
        return self.n_users == 0

    def get(self, name: str, K: int) -> float:
        return self.metrics[K][name]

    def to_dict(self):
        return {"ks": list(self.ks), "n_users": self.n_users,
                "metrics": {str(k): dict(v) for k, v in self.metrics.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls([int(k) for k in d["ks"]], {int(k): dict(v) for k, v in d["metrics"].items()},
                   int(d["n_users"]))

    @staticmethod
    def mean(reports: Sequence["MetricReport"]) -> "MetricReport":
        """Unweighted mean over folds (reports with no users are ignored)."""
        reports = [r for r in reports if not r.empty]
        if not reports:
            return MetricReport([])
        ks = reports[0].ks
        metrics = {K: {name: float(np.mean([r.metrics[K][name] for r in reports])) for name in METRICS}
                   for K in ks}
        return MetricReport(ks, metrics, int(round(np.mean([r.n_users for r in reports]))))


def write_reports_tsv(path, reports: Dict[str, MetricReport]) -> None:
    """Rows ``metric@K``, one column per model."""
    names = list(reports)
    ks = sorted({K for r in reports.values() for K in r.ks})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("metric\t" + "\t".join(names) + "\n")
        if all(r.empty for r in reports.values()):
            fh.write("# no users evaluated\n")
            return
        for name in METRICS:
            for K in ks:
                vals = [f"{reports[m].metrics[K][name]:.6f}" if K in reports[m].metrics else "nan"
                        for m in names]
                fh.write(f"{name}@{K}\t" + "\t".join(vals) + "\n")
        fh.write("users\t" + "\t".join(str(reports[m].n_users) for m in names) + "\n")


def write_reports_json(path, reports: Dict[str, MetricReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: v.to_dict() for k, v in reports.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def evaluate_scores(scores, exclude: Sequence[np.ndarray], relevant: Sequence[np.ndarray],
                    ks: Iterable[int] = (10, 20), users=None) -> MetricReport:
    """Rank every candidate per user and average metrics over users with relevant items.

    ``scores`` is an ``m x n`` array or a callable ``users -> block of rows``.
    Users are reduced in ascending id order.
    """
    ks = sorted(int(k) for k in ks)
    kmax = max(ks)
    m = len(relevant)
    users = np.arange(m) if users is None else np.sort(np.asarray(list(users), dtype=np.int64))
    users = np.array([u for u in users if len(relevant[u])], dtype=np.int64)
    sums = {K: dict.fromkeys(METRICS, 0.0) for K in ks}
    chunk = 256
    for start in range(0, len(users), chunk):
        blk = users[start:start + chunk]
        rows = scores(blk) if callable(scores) else np.asarray(scores)[blk]
        for u, row in zip(blk, rows):
            rec = top_k(row, kmax, exclude[u])
            rel = set(relevant[u].tolist())
            for K in ks:
                sums[K]["precision"] += precision_at_k(rec, rel, K)
                sums[K]["recall"] += recall_at_k(rec, rel, K)
                sums[K]["ndcg"] += ndcg_at_k(rec, rel, K)
    if len(users) == 0:
        return MetricReport(ks)
    return MetricReport(ks, {K: {k: v / len(users) for k, v in sums[K].items()} for K in ks}, len(users))


def _exclusions(fold: FoldSplit, split: str) -> List[np.ndarray]:
    train = fold.items_by_user("train")
    if split == "test":
        val = fold.items_by_user("validation")
        return [np.concatenate([a, b]) for a, b in zip(train, val)]
    return train


def evaluate_ranking(params, dataset: Dataset, fold: FoldSplit, ks=(10, 20),
                     split: str = "test", users=None) -> MetricReport:
    """Full-catalogue ranking for every user with held-out items in ``split``.

    Candidates are all items minus the user's training items (and, on the
    test split, minus the validation items too). ``params`` is a
    DiscriminatorParams or an explicit ``m x n`` score matrix.
    """
    if isinstance(params, DiscriminatorParams):
        P, Q = params.P, params.Q
        scores = lambda blk: P[blk] @ Q.T  # noqa: E731
    else:
        scores = np.asarray(params)
    return evaluate_scores(scores, _exclusions(fold, split), fold.items_by_user(split), ks, users)


def evaluate_cold_start(params, dataset: Dataset, fold: FoldSplit, max_feedback: int = 10,
                        ks=(10, 20)) -> MetricReport:
    """``evaluate_ranking`` restricted to users with fewer than ``max_feedback`` training items."""
    cold = cold_start_users(dataset, fold, max_feedback)
    if not cold:
        return MetricReport(sorted(ks))
    return evaluate_ranking(params, dataset, fold, ks, users=sorted(cold))


def link_prediction_eval(gen: GeneratorParams, seeds, heldout: SocialGraph, K: int = 10) -> MetricReport:
    """Rank users by the noise-free friend distribution against held-out followees.

    Self and the user's seeded friends are not candidates.
    """
    relevant = heldout.out_adjacency
    users = [u for u in range(gen.m) if len(relevant[u])]
    if not users:
        return MetricReport([K])
    seed_matrix = seeds.matrix()
    exclude = [np.append(seeds.friends[u], u) for u in range(gen.m)]
    scores = lambda blk: noise_free_distribution(gen, seed_matrix, blk)  # noqa: E731
    return evaluate_scores(scores, exclude, relevant, [K], users)


@dataclass
class ReliableNetwork:
    friends: np.ndarray        # m x T, descending probability
    probabilities: np.ndarray  # m x T
    follower_counts: np.ndarray

    @property
    def T(self) -> int:
        return self.friends.shape[1]

    def pair_set(self):
        return {(u, int(v)) for u, row in enumerate(self.friends) for v in row}

    def follower_histogram(self) -> Dict[int, int]:
        """``follower_count -> number of users`` with that many followers."""
        return dict(sorted(Counter(self.follower_counts.tolist()).items()))


def export_reliable_network(gen: GeneratorParams, seeds, T: int = 20) -> ReliableNetwork:
    """Top-``T`` users of each noise-free friend distribution (ties to the lower id)."""
    m = gen.m
    T = min(T, m - 1)
    dist = noise_free_distribution(gen, seeds.matrix())
    friends = np.empty((m, T), dtype=np.int64)
    for u in range(m):
        friends[u] = top_k(dist[u], T, [u])
    probs = np.take_along_axis(dist, friends, axis=1)
    followers = np.bincount(friends.ravel(), minlength=m)
    return ReliableNetwork(friends, probs, followers)


def follower_histogram(graph: SocialGraph) -> Dict[int, int]:
    counts = np.bincount(graph.edges[:, 1], minlength=graph.m) if len(graph) else np.zeros(graph.m, int)
    return dict(sorted(Counter(counts.tolist()).items()))


def overlap_stats(reliable: ReliableNetwork, seeds, explicit: SocialGraph):
    """Fractions of seeded and of explicit pairs retained in the reliable network.

    Either value is ``None`` when its denominator is zero.
    """
    rel = reliable.pair_set()
    seed_pairs = seeds.pair_set()
    explicit_pairs = explicit.edge_set()
    seed_ret = len(seed_pairs & rel) / len(seed_pairs) if seed_pairs else None
    expl_ret = len(explicit_pairs & rel) / len(explicit_pairs) if explicit_pairs else None
    return seed_ret, expl_ret
