"""Small generated datasets with known structure, used by tests and the CLI fixture."""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .data import Dataset, InteractionRecord, SocialGraph, build_dataset
from .rng import stream


@dataclass
class PlantedFixture:
    dataset: Dataset
    social: SocialGraph
    partner: np.ndarray  # planted reliable friend of every user


def planted_friends(n_pairs: int = 10, n_items: int = 30, core: int = 3, extra: int = 4,
                    noise_edges: int = 10, master_seed: int = 0) -> PlantedFixture:
    """Users come in pairs with identical item sets.

    Pair ``k`` owns the exclusive items ``core*k .. core*k+core-1`` plus
    ``extra`` items drawn from outside that block; both members consume all
    of them, so whatever one member holds out the other has seen. Pair
    members trust each other and ``noise_edges`` random one-way edges are
    added on top.
    """
    m = 2 * n_pairs
    if core * n_pairs > n_items:
        raise ValueError("not enough items for the exclusive blocks")
    rng = stream(master_seed, "planted")
    records: List[InteractionRecord] = []
    for k in range(n_pairs):
        block = np.arange(core * k, core * (k + 1))
        outside = np.setdiff1d(np.arange(n_items), block)
        items = np.concatenate([block, np.sort(rng.choice(outside, extra, replace=False))])
        for u in (2 * k, 2 * k + 1):
            records.extend(InteractionRecord(f"u{u:02d}", f"i{i:02d}") for i in items)
    # make sure every item id appears so n == n_items
    seen = {r.item_raw_id for r in records}
    for i in range(n_items):
        if f"i{i:02d}" not in seen:
            records.append(InteractionRecord(f"u{rng.integers(m):02d}", f"i{i:02d}"))
    order = sorted(range(len(records)), key=lambda r: (records[r].user_raw_id, records[r].item_raw_id))
    dataset = build_dataset([records[r] for r in order])
    partner = np.array([u ^ 1 for u in range(m)], dtype=np.int64)
    edges = [(u, int(partner[u])) for u in range(m)]
    while len(edges) < m + noise_edges:
        a, b = (int(x) for x in rng.integers(m, size=2))
        if a != b and b != partner[a] and (a, b) not in edges:
            edges.append((a, b))
    social = SocialGraph.from_pairs(m, edges)
    return PlantedFixture(dataset, social, partner)


def block_dataset(users_per_group: int = 20, items_per_group: int = 20, density: float = 0.5,
                  master_seed: int = 0) -> Dataset:
    """Two user groups that each consume only their own item group."""
    rng = stream(master_seed, "blocks")
    records = []
    for g in range(2):
        for a in range(users_per_group):
            u = g * users_per_group + a
            picks = np.flatnonzero(rng.random(items_per_group) < density)
            if len(picks) < 2:
                picks = np.arange(2)
            records.extend(InteractionRecord(f"u{u:03d}", f"i{g * items_per_group + i:03d}") for i in picks)
    return build_dataset(records)


def lastfm_like(m: int = 1892, n: int = 17632, nnz: int = 92834, n_links: int = 25434,
                n_topics: int = 20, master_seed: int = 0) -> Tuple[Dataset, SocialGraph]:
    """Random dataset with the shape of the LastFM benchmark.

    Each user has a topic mixture, items have a topic and a Zipf popularity,
    and users mostly link to users with a similar dominant topic. Only meant
    for timing and hyperparameter sanity checks; the numbers it produces say
    nothing about the real data.
    """
    rng = stream(master_seed, "lastfm-like")
    topic_of_item = rng.integers(n_topics, size=n)
    pop = 1.0 / np.arange(1, n + 1) ** 0.8
    pop = pop[rng.permutation(n)]
    mix = rng.dirichlet(np.full(n_topics, 0.2), size=m)
    per_user = np.full(m, nnz // m)
    per_user[: nnz - per_user.sum()] += 1
    by_topic = [np.flatnonzero(topic_of_item == t) for t in range(n_topics)]
    topic_pop = [pop[idx] / pop[idx].sum() for idx in by_topic]
    records = []
    for u in range(m):
        chosen = set()
        while len(chosen) < per_user[u]:
            t = rng.choice(n_topics, p=mix[u])
            chosen.add(int(rng.choice(by_topic[t], p=topic_pop[t])))
        records.extend(InteractionRecord(f"u{u}", f"i{i}") for i in sorted(chosen))
    dataset = build_dataset(records)
    dom = mix.argmax(axis=1)
    edges = set()
    while len(edges) < n_links:
        a = int(rng.integers(m))
        if rng.random() < 0.7:
            pool = np.flatnonzero(dom == dom[a])
            b = int(rng.choice(pool))
        else:
            b = int(rng.integers(m))
        if a != b:
            edges.add((dataset.user_index[f"u{a}"], dataset.user_index[f"u{b}"]))
    return dataset, SocialGraph.from_pairs(dataset.m, sorted(edges))


def write_fixture(directory, dataset: Dataset, social: SocialGraph) -> Tuple[Path, Path]:
    """Write ``ratings.tsv`` and ``trust.tsv`` in the loader formats."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ratings = directory / "ratings.tsv"
    trust = directory / "trust.tsv"
    with open(ratings, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in dataset.raw_pairs():
            fh.write(f"{u}\t{i}\t1\n")
    with open(trust, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in social.edges:
            fh.write(f"{dataset.user_ids[a]}\t{dataset.user_ids[b]}\n")
    return ratings, trust
