"""Rating/trust ingestion, dense indexing and per-user cross-validation folds."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, EmptyDatasetError, ParseError
from .rng import stream

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class InteractionRecord:
    user_raw_id: str
    item_raw_id: str
    rating: float = 1.0


@dataclass
class Dataset:
    """Users and items with contiguous ids and the binary feedback matrix ``R``."""

    user_ids: List[str]
    item_ids: List[str]
    user_index: Dict[str, int]
    item_index: Dict[str, int]
    feedback: sp.csr_matrix
    _per_user: Optional[List[np.ndarray]] = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return len(self.user_ids)

    @property
    def n(self) -> int:
        return len(self.item_ids)

    @property
    def nnz(self) -> int:
        return int(self.feedback.nnz)

    @property
    def per_user_items(self) -> List[np.ndarray]:
        if self._per_user is None:
            self._per_user = csr_rows(self.feedback)
        return self._per_user

    def pairs(self) -> np.ndarray:
        """All ``(user, item)`` dense pairs, sorted by user then item."""
        coo = self.feedback.tocoo()
        out = np.stack([coo.row, coo.col], axis=1).astype(np.int64)
        return out[np.lexsort((out[:, 1], out[:, 0]))]

    def raw_pairs(self) -> List[Tuple[str, str]]:
        return [(self.user_ids[u], self.item_ids[i]) for u, i in self.pairs()]


@dataclass
class SocialGraph:
    """Directed trust edges between dense user ids (truster -> trustee)."""

    m: int
    edges: np.ndarray
    n_raw: int = 0
    n_self_loops: int = 0
    n_duplicates: int = 0
    n_unknown: int = 0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= self.m:
                raise DataError("social edge endpoint outside [0, m)")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise DataError("social graph contains self-loops")

    def __len__(self):
        return len(self.edges)

    @classmethod
    def from_pairs(cls, m: int, pairs) -> "SocialGraph":
        """Build a cleaned graph from dense pairs; self-loops and duplicates dropped."""
        pairs = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs,
                           dtype=np.int64).reshape(-1, 2)
        keep = pairs[:, 0] != pairs[:, 1]
        n_self = int((~keep).sum())
        pairs = pairs[keep]
        _, first = np.unique(pairs, axis=0, return_index=True)
        first.sort()
        return cls(m=m, edges=pairs[first], n_raw=len(keep), n_self_loops=n_self,
                   n_duplicates=len(pairs) - len(first))

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.edges))
        return sp.csr_matrix((data, (self.edges[:, 0], self.edges[:, 1])), shape=(self.m, self.m))

    @property
    def out_adjacency(self) -> List[np.ndarray]:
        return csr_rows(self.adjacency())

    def edge_set(self):
        return set(map(tuple, self.edges.tolist()))


@dataclass
class FoldSplit:
    """One cross-validation fold; each split is an ``(k, 2)`` array of dense (user, item)."""

    fold_id: int
    m: int
    n: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def matrix(self, name: str = "train") -> sp.csr_matrix:
        return pairs_to_matrix(self.split(name), self.m, self.n)

    def items_by_user(self, name: str = "train") -> List[np.ndarray]:
        return csr_rows(self.matrix(name))

    def train_counts(self) -> np.ndarray:
        return np.bincount(self.train[:, 0], minlength=self.m)


def csr_rows(mat: sp.csr_matrix) -> List[np.ndarray]:
    mat = sp.csr_matrix(mat)
    mat.sort_indices()
    return [mat.indices[mat.indptr[r]:mat.indptr[r + 1]].astype(np.int64) for r in range(mat.shape[0])]


def pairs_to_matrix(pairs: np.ndarray, m: int, n: int) -> sp.csr_matrix:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    mat = sp.csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(m, n))
    mat.sum_duplicates()
    mat.data[:] = 1.0
    return mat


def iter_tsv(path) -> Iterator[Tuple[int, List[str]]]:
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_interactions(path, rating_threshold: float = 0.0) -> List[InteractionRecord]:
    """Read ``user<TAB>item[<TAB>rating]`` lines and keep ratings >= threshold.

    Duplicated (user, item) pairs collapse onto their first position with the
    maximum rating. A missing rating column marks an implicit positive that
    always survives the threshold. A header row (non-numeric rating on the
    first data line) is skipped.
    """
    best: Dict[Tuple[str, str], Tuple[float, bool]] = {}
    first_data_line = True
    n_lines = 0
    for lineno, cols in iter_tsv(path):
        if len(cols) not in (2, 3) or not cols[0] or not cols[1]:
            raise ParseError(path, lineno, "expected user<TAB>item[<TAB>rating]")
        if len(cols) == 3 and not _is_number(cols[2]):
            if first_data_line:
                first_data_line = False
                continue
            raise ParseError(path, lineno, f"bad rating {cols[2]!r}")
        first_data_line = False
        n_lines += 1
        implicit = len(cols) == 2
        rating = 1.0 if implicit else float(cols[2])
        if not math.isfinite(rating):
            raise ParseError(path, lineno, f"non-finite rating {cols[2]!r}")
        key = (cols[0], cols[1])
        prev = best.get(key)
        if prev is None:
            best[key] = (rating, implicit)
        elif rating > prev[0]:
            best[key] = (rating, implicit or prev[1])
    records = [InteractionRecord(u, i, r) for (u, i), (r, imp) in best.items()
               if imp or r >= rating_threshold]
    log.info("%s: %d lines, %d unique pairs, %d kept at threshold %s",
             path, n_lines, len(best), len(records), rating_threshold)
    if not records:
        raise EmptyDatasetError(f"{path}: no interactions survive threshold {rating_threshold}")
    return records


def build_dataset(records: Sequence[InteractionRecord]) -> Dataset:
    """Assign dense ids in first-appearance order and build ``R``."""
    if not records:
        raise EmptyDatasetError("no interaction records")
    user_index: Dict[str, int] = {}
    item_index: Dict[str, int] = {}
    rows, cols = [], []
    for rec in records:
        u = user_index.setdefault(rec.user_raw_id, len(user_index))
        i = item_index.setdefault(rec.item_raw_id, len(item_index))
        rows.append(u)
        cols.append(i)
    feedback = pairs_to_matrix(np.stack([rows, cols], axis=1), len(user_index), len(item_index))
    return Dataset(user_ids=list(user_index), item_ids=list(item_index),
                   user_index=user_index, item_index=item_index, feedback=feedback)


def load_social(path, dataset: Dataset) -> SocialGraph:
    """Read ``truster<TAB>trustee[<TAB>weight]`` lines onto the dataset's user index.

    Self-loops, duplicate edges and edges touching users unknown to the
    dataset are dropped; the counts are kept on the returned graph.
    """
    pairs = []
    n_raw = n_unknown = 0
    first_data_line = True
    for lineno, cols in iter_tsv(path):
        if len(cols) not in (2, 3) or not cols[0] or not cols[1]:
            raise ParseError(path, lineno, "expected truster<TAB>trustee[<TAB>weight]")
        if len(cols) == 3 and not _is_number(cols[2]):
            if first_data_line:
                first_data_line = False
                continue
            raise ParseError(path, lineno, f"bad weight {cols[2]!r}")
        first_data_line = False
        n_raw += 1
        a = dataset.user_index.get(cols[0])
        b = dataset.user_index.get(cols[1])
        if a is None or b is None:
            n_unknown += 1
            continue
        pairs.append((a, b))
    graph = SocialGraph.from_pairs(dataset.m, np.array(pairs, dtype=np.int64).reshape(-1, 2))
    graph.n_raw = n_raw
    graph.n_unknown = n_unknown
    log.info("%s: %d relations read, %d self-loops, %d duplicates, %d unknown endpoints dropped",
             path, n_raw, graph.n_self_loops, graph.n_duplicates, n_unknown)
    return graph


def split_folds(dataset: Dataset, k: int = 5, master_seed: int = 0,
                validation_fraction: float = 0.1) -> List[FoldSplit]:
    """Per-user stratified k-fold split with a validation carve-out.

    Each user's items are shuffled by a per-user stream and dealt round-robin
    (from a random offset) into ``k`` shards. Fold ``f`` tests on shard ``f``;
    ``floor(validation_fraction * |pool|)`` items of the remaining pool become
    validation. A user whose pool would be empty gets one test item back.
    """
    if not 2 <= k <= 20:
        raise ConfigError(f"fold count k={k} outside [2, 20]")
    per_user = dataset.per_user_items
    if any(len(items) == 0 for items in per_user):
        raise DataError("every user needs at least one interaction")
    parts = {f: {s: [] for s in SPLITS} for f in range(k)}
    for u, items in enumerate(per_user):
        rng = stream(master_seed, "fold", u)
        perm = rng.permutation(items)
        shard = (np.arange(len(perm)) + rng.integers(k)) % k
        for f in range(k):
            test = perm[shard == f]
            pool = perm[shard != f]
            if len(pool) == 0:
                pool, test = test[:1], test[1:]
            n_val = int(math.floor(validation_fraction * len(pool)))
            pool = stream(master_seed, "validation", f, u).permutation(pool)
            val, train = pool[:n_val], pool[n_val:]
            for name, arr in (("train", train), ("validation", val), ("test", test)):
                if len(arr):
                    parts[f][name].append(np.stack([np.full(len(arr), u), arr], axis=1))
    folds = []
    for f in range(k):
        arrays = {}
        for name in SPLITS:
            arr = (np.concatenate(parts[f][name]) if parts[f][name]
                   else np.zeros((0, 2), dtype=np.int64)).astype(np.int64)
            arrays[name] = arr[np.lexsort((arr[:, 1], arr[:, 0]))]
        folds.append(FoldSplit(fold_id=f, m=dataset.m, n=dataset.n, **arrays))
    return folds


def cold_start_users(dataset: Dataset, fold: FoldSplit, max_feedback: int = 10) -> set:
    """Users with strictly fewer than ``max_feedback`` training interactions."""
    if max_feedback < 1:
        raise ConfigError("max_feedback must be >= 1")
    counts = np.bincount(fold.train[:, 0], minlength=dataset.m) if len(fold.train) else np.zeros(dataset.m, int)
    has_data = np.zeros(dataset.m, dtype=bool)
    for name in SPLITS:
        arr = fold.split(name)
        has_data[arr[:, 0]] = True
    return {int(u) for u in np.flatnonzero(has_data & (counts < max_feedback))}


def write_fold_manifest(path, dataset: Dataset, folds: Sequence[FoldSplit]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fold\tsplit\tuser\titem\n")
        for fold in folds:
            for name in SPLITS:
                for u, i in fold.split(name):
                    fh.write(f"{fold.fold_id}\t{name}\t{dataset.user_ids[u]}\t{dataset.item_ids[i]}\n")


def read_fold_manifest(path, dataset: Dataset) -> List[FoldSplit]:
    parts: Dict[int, Dict[str, list]] = {}
    for lineno, cols in iter_tsv(path):
        if cols == ["fold", "split", "user", "item"]:
            continue
        if len(cols) != 4 or cols[1] not in SPLITS or not cols[0].isdigit():
            raise ParseError(path, lineno, "expected fold<TAB>split<TAB>user<TAB>item")
        u = dataset.user_index.get(cols[2])
        i = dataset.item_index.get(cols[3])
        if u is None or i is None:
            raise ParseError(path, lineno, "manifest refers to an id missing from the dataset")
        parts.setdefault(int(cols[0]), {s: [] for s in SPLITS})[cols[1]].append((u, i))
    if not parts:
        raise EmptyDatasetError(f"{path}: empty fold manifest")
    folds = []
    for f in sorted(parts):
        arrays = {s: np.array(parts[f][s], dtype=np.int64).reshape(-1, 2) for s in SPLITS}
        folds.append(FoldSplit(fold_id=f, m=dataset.m, n=dataset.n, **arrays))
    return folds


def holdout_links(social: SocialGraph, fraction: float = 0.2,
                  master_seed: int = 0) -> Tuple[SocialGraph, SocialGraph]:
    """Hold out ``round(fraction * outdeg)`` followees per user.

    Returns ``(kept, heldout)``; both are directed graphs over the same users.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("link holdout fraction must lie in [0, 1)")
    kept, held = [], []
    for u, followees in enumerate(social.out_adjacency):
        if len(followees) == 0:
            continue
        n_out = int(math.floor(fraction * len(followees) + 0.5))
        perm = stream(master_seed, "links", u).permutation(followees)
        held.extend((u, int(v)) for v in perm[:n_out])
        kept.extend((u, int(v)) for v in perm[n_out:])
    return SocialGraph.from_pairs(social.m, np.array(kept, dtype=np.int64).reshape(-1, 2)), \
        SocialGraph.from_pairs(social.m, np.array(held, dtype=np.int64).reshape(-1, 2))


def write_social(path, dataset: Dataset, graph: SocialGraph, label: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in graph.edges:
            prefix = f"{label}\t" if label else ""
            fh.write(f"{prefix}{dataset.user_ids[a]}\t{dataset.user_ids[b]}\n")
