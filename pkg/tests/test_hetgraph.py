import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from rsgan.data import InteractionRecord, SocialGraph, build_dataset
from rsgan.errors import ConfigError
from rsgan.hetgraph import (MetaPath, SeededFriendSet, discover_seeded_friends, generate_walks,
                            load_seeded_friends, select_seeded_friends, train_skipgram,
                            write_seeded_friends)
from rsgan.synthetic import planted_friends


def _random_graph(seed, m=12, n=15):
    rng = np.random.default_rng(seed)
    R = sp.csr_matrix((rng.random((m, n)) < 0.25).astype(float))
    social = SocialGraph.from_pairs(m, rng.integers(0, m, size=(20, 2)))
    return R, social


class TestMetaPath:
    def test_parse(self):
        assert MetaPath.parse("U-I-U").pattern == ("U", "I", "U")
        assert str(MetaPath.parse("u-u-i-u")) == "U-U-I-U"

    @pytest.mark.parametrize("bad", ["U", "I-U", "U-I", "U-I-I-U", "U-X-U"])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            MetaPath.parse(bad)


class TestWalks:
    @given(st.integers(0, 10_000), st.integers(2, 12))
    def test_ids_and_lengths(self, seed, length):
        R, social = _random_graph(seed)
        for walk in generate_walks(R, social, walks_per_node=2, walk_length=length, master_seed=seed):
            assert 1 <= len(walk) <= length
            assert walk.min() >= 0 and walk.max() < R.shape[0]

    @given(st.integers(0, 10_000))
    def test_uiu_walks_share_items(self, seed):
        R, social = _random_graph(seed)
        R = R.tolil()
        items = [set(R.rows[u]) for u in range(R.shape[0])]
        for walk in generate_walks(R.tocsr(), social, ["U-I-U"], 2, 10, seed):
            for a, b in zip(walk[:-1], walk[1:]):
                assert items[a] & items[b]

    def test_uu_walks_follow_trust_in_either_direction(self):
        R, social = _random_graph(3)
        links = social.edge_set() | {(b, a) for a, b in social.edge_set()}
        for walk in generate_walks(R, social, ["U-U"], 3, 8, 1):
            for a, b in zip(walk[:-1], walk[1:]):
                assert (a, b) in links

    def test_deterministic(self):
        R, social = _random_graph(4)
        a = generate_walks(R, social, master_seed=9)
        b = generate_walks(R, social, master_seed=9)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestSelection:
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, scale):
        emb = np.random.default_rng(seed).normal(size=(15, 4))
        a = select_seeded_friends(emb, k_seed=4)
        b = select_seeded_friends(emb * scale, k_seed=4)
        assert a.pair_set() == b.pair_set()

    @given(st.integers(0, 10_000), st.integers(1, 20))
    def test_no_self_and_valid_ids(self, seed, k):
        emb = np.random.default_rng(seed).normal(size=(10, 3))
        seeds = select_seeded_friends(emb, k_seed=k, min_sim=-1.0)
        for u, f in enumerate(seeds.friends):
            assert u not in f
            assert len(f) == min(k, 9)
            assert np.all((f >= 0) & (f < 10))

    def test_matches_brute_force_cosine(self):
        emb = np.random.default_rng(0).normal(size=(8, 3))
        unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        sims = unit @ unit.T
        seeds = select_seeded_friends(emb, k_seed=3, min_sim=0.1)
        for u in range(8):
            expect = sorted((v for v in range(8) if v != u and sims[u, v] >= 0.1),
                            key=lambda v: (-sims[u, v], v))[:3]
            assert seeds.friends[u].tolist() == expect

    def test_bad_arguments(self):
        with pytest.raises(ConfigError):
            select_seeded_friends(np.ones((3, 2)), k_seed=0)

    def test_seed_set_validation(self):
        with pytest.raises(ValueError):
            SeededFriendSet(2, [np.array([0]), np.array([])])


class TestSkipGram:
    def test_co_occurring_users_end_up_closer(self):
        # two disjoint cliques of walkers
        corpus = [np.array([0, 1, 2, 3] * 5), np.array([4, 5, 6, 7] * 5)] * 40
        W = train_skipgram(corpus, 8, d_emb=8, window=2, negatives=3, epochs=3, master_seed=0)
        unit = W / np.linalg.norm(W, axis=1, keepdims=True)
        sims = unit @ unit.T
        within = np.mean([sims[a, b] for a in range(4) for b in range(4) if a != b])
        across = np.mean([sims[a, b] for a in range(4) for b in range(4, 8)])
        assert within > across + 0.3

    def test_deterministic_and_finite(self):
        corpus = [np.array([0, 1, 2, 1, 0]), np.array([2, 3, 4])]
        a = train_skipgram(corpus, 5, d_emb=4, epochs=2, master_seed=1)
        b = train_skipgram(corpus, 5, d_emb=4, epochs=2, master_seed=1)
        assert np.array_equal(a, b) and np.all(np.isfinite(a))


class TestDiscovery:
    def test_planted_partners_found(self):
        fx = planted_friends()
        seeds = discover_seeded_friends(fx.dataset.feedback, fx.social, k_seed=3)
        hits = np.mean([fx.partner[u] in seeds.friends[u] for u in range(fx.dataset.m)])
        assert hits >= 0.9

    def test_file_round_trip_drops_self_and_unknown(self, tmp_path):
        ds = build_dataset([InteractionRecord(u, "x") for u in "abc"])
        seeds = SeededFriendSet(3, [np.array([1, 2]), np.array([0]), np.array([], dtype=np.int64)],
                                [np.array([0.5, 0.25]), np.array([0.125]), np.array([])])
        write_seeded_friends(tmp_path / "s.tsv", ds, seeds)
        with open(tmp_path / "s.tsv", "a", encoding="utf-8") as fh:
            fh.write("c\tc\t1\nz\ta\t1\n")
        back = load_seeded_friends(tmp_path / "s.tsv", ds)
        assert back.pair_set() == seeds.pair_set()
        assert back.similarity[0].tolist() == [0.5, 0.25]
        assert (back.n_dropped_self, back.n_dropped_unknown) == (1, 1)
