import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsgan.data import (InteractionRecord, SocialGraph, build_dataset, cold_start_users, holdout_links,
                        load_interactions, load_social, read_fold_manifest, split_folds,
                        write_fold_manifest, write_social)
from rsgan.errors import ConfigError, DataError, EmptyDatasetError, ParseError

records_strategy = st.lists(
    st.tuples(st.integers(0, 12), st.integers(0, 15)), min_size=1, max_size=80,
).map(lambda pairs: [InteractionRecord(f"u{u}", f"i{i}") for u, i in pairs])


def _dedup(records):
    seen = {}
    for r in records:
        seen.setdefault((r.user_raw_id, r.item_raw_id), None)
    return set(seen)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoading:
    def test_threshold_duplicates_and_comments(self, tmp_path):
        path = _write(tmp_path / "r.tsv", "# comment\na\tx\t5\na\ty\t2\nb\tx\t1\nb\tx\t4\n\nc\tz\n")
        recs = load_interactions(path, rating_threshold=4)
        assert [(r.user_raw_id, r.item_raw_id, r.rating) for r in recs] == [
            ("a", "x", 5.0), ("b", "x", 4.0), ("c", "z", 1.0)]

    def test_header_row_skipped(self, tmp_path):
        path = _write(tmp_path / "r.tsv", "userID\tartistID\tweight\n2\t51\t13883\n2\t52\t11690\n")
        ds = build_dataset(load_interactions(path))
        assert (ds.m, ds.n, ds.nnz) == (1, 2, 2)

    def test_bad_rating_after_first_line(self, tmp_path):
        path = _write(tmp_path / "r.tsv", "a\tx\t1\na\ty\tbad\n")
        with pytest.raises(ParseError) as err:
            load_interactions(path)
        assert err.value.lineno == 2

    def test_wrong_column_count(self, tmp_path):
        with pytest.raises(ParseError):
            load_interactions(_write(tmp_path / "r.tsv", "a\tx\t1\t9\n"))

    def test_nothing_survives(self, tmp_path):
        with pytest.raises(EmptyDatasetError):
            load_interactions(_write(tmp_path / "r.tsv", "a\tx\t1\n"), rating_threshold=3)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_interactions(tmp_path / "absent.tsv")

    def test_social_cleaning(self, tmp_path):
        ds = build_dataset([InteractionRecord(u, "x") for u in "abc"])
        path = _write(tmp_path / "t.tsv", "userID\tfriendID\na\tb\na\tb\nb\tb\nc\ta\t0.5\nq\ta\n")
        g = load_social(path, ds)
        assert g.edge_set() == {(0, 1), (2, 0)}
        # the header row reads as a pair of unknown ids
        assert (g.n_self_loops, g.n_duplicates, g.n_unknown) == (1, 1, 2)

    def test_social_rejects_bad_endpoints(self):
        with pytest.raises(DataError):
            SocialGraph(m=2, edges=np.array([[0, 2]]))
        with pytest.raises(DataError):
            SocialGraph(m=2, edges=np.array([[1, 1]]))


class TestDataset:
    @given(records_strategy)
    def test_round_trip(self, records):
        ds = build_dataset(records)
        assert set(ds.raw_pairs()) == _dedup(records)
        assert ds.nnz == len(_dedup(records))

    @given(records_strategy)
    def test_indices_are_bijections_and_R_is_binary(self, records):
        ds = build_dataset(records)
        assert sorted(ds.user_index.values()) == list(range(ds.m))
        assert sorted(ds.item_index.values()) == list(range(ds.n))
        assert all(ds.user_ids[i] == u for u, i in ds.user_index.items())
        assert np.all(ds.feedback.data == 1.0)
        for u, items in enumerate(ds.per_user_items):
            assert set(items.tolist()) == set(ds.feedback[u].indices.tolist())


class TestFolds:
    @given(records_strategy, st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_partition(self, records, k, seed):
        ds = build_dataset(records)
        all_pairs = set(map(tuple, ds.pairs().tolist()))
        test_union = set()
        for fold in split_folds(ds, k, seed):
            parts = [set(map(tuple, fold.split(s).tolist())) for s in ("train", "validation", "test")]
            assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
            assert parts[0] | parts[1] | parts[2] == all_pairs
            test_union |= parts[2]
            # the training exclusion set never contains a test item
            train_items = fold.items_by_user("train")
            for u, i in fold.test:
                assert i not in set(train_items[u].tolist())
        assert test_union <= all_pairs

    @given(records_strategy, st.integers(0, 2**31 - 1))
    def test_pure_function_of_inputs(self, records, seed):
        ds = build_dataset(records)
        a, b = split_folds(ds, 5, seed), split_folds(ds, 5, seed)
        for fa, fb in zip(a, b):
            for s in ("train", "validation", "test"):
                assert np.array_equal(fa.split(s), fb.split(s))

    def test_test_share_is_one_kth_per_user(self):
        records = [InteractionRecord(f"u{u}", f"i{i}") for u in range(30) for i in range(u % 7 + 5)]
        ds = build_dataset(records)
        for fold in split_folds(ds, 5, 3):
            counts = np.bincount(fold.test[:, 0], minlength=ds.m)
            totals = np.array([len(x) for x in ds.per_user_items])
            assert np.all(np.abs(counts - totals / 5) <= 1)

    def test_validation_rounded_down(self):
        records = [InteractionRecord("a", f"i{i}") for i in range(25)]
        fold = split_folds(build_dataset(records), 5, 0, validation_fraction=0.1)[0]
        assert len(fold.validation) == 2  # floor(0.1 * 20)

    def test_every_user_keeps_training_data(self):
        records = [InteractionRecord(f"u{u}", "x") for u in range(4)]
        for fold in split_folds(build_dataset(records), 5, 0):
            assert set(fold.train[:, 0].tolist()) == {0, 1, 2, 3}

    def test_bad_k(self):
        ds = build_dataset([InteractionRecord("a", "x")])
        with pytest.raises(ConfigError):
            split_folds(ds, 1)

    def test_manifest_round_trip(self, tmp_path):
        records = [InteractionRecord(f"u{u}", f"i{(u * 3 + i) % 11}") for u in range(9) for i in range(6)]
        ds = build_dataset(records)
        folds = split_folds(ds, 3, 7)
        write_fold_manifest(tmp_path / "f.tsv", ds, folds)
        back = read_fold_manifest(tmp_path / "f.tsv", ds)
        for fa, fb in zip(folds, back):
            for s in ("train", "validation", "test"):
                assert np.array_equal(fa.split(s), fb.split(s))

    def test_cold_start_users(self):
        records = [InteractionRecord(f"u{u}", f"i{i}") for u in range(3) for i in range(5 * u + 2)]
        ds = build_dataset(records)
        fold = split_folds(ds, 2, 0, validation_fraction=0.0)[0]
        counts = fold.train_counts()
        assert cold_start_users(ds, fold, 4) == {u for u in range(3) if counts[u] < 4}


class TestLinkHoldout:
    def test_holdout_is_a_partition(self, tmp_path):
        rng = np.random.default_rng(0)
        pairs = rng.integers(0, 30, size=(200, 2))
        g = SocialGraph.from_pairs(30, pairs)
        kept, held = holdout_links(g, 0.2, 5)
        assert not (kept.edge_set() & held.edge_set())
        assert kept.edge_set() | held.edge_set() == g.edge_set()
        for u, followees in enumerate(g.out_adjacency):
            assert len(held.out_adjacency[u]) == int(np.floor(0.2 * len(followees) + 0.5))
        ds = build_dataset([InteractionRecord(f"u{u}", "x") for u in range(30)])
        write_social(tmp_path / "held.tsv", ds, held)
        assert load_social(tmp_path / "held.tsv", ds).edge_set() == held.edge_set()
