import json
import subprocess
import sys
import time

import numpy as np
import pytest

from rsgan.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rsgan.cli import OPTIONS, main, read_config
from rsgan.data import build_dataset, load_interactions, read_fold_manifest
from rsgan.discriminator import DiscriminatorParams
from rsgan.errors import ConfigError
from rsgan.synthetic import planted_friends, write_fixture

FAST_SEED = ["--walks", "4", "--walk-length", "10", "--emb-dim", "8", "--sg-epochs", "2", "--k-seed", "3"]
FAST_TRAIN = ["--dim", "10", "--hidden", "20", "--epochs", "8", "--pretrain-epochs", "20",
              "--batch-size", "16", "--lr-g", "0.3"]


def _run(*args):
    return main([str(a) for a in args])


def _pipeline(data_dir, out):
    ratings, trust = data_dir / "ratings.tsv", data_dir / "trust.tsv"
    assert _run("prepare", "--ratings", ratings, "--trust", trust, "--out", out) == 0
    assert _run("seed", "--out", out, "--fold", "0", *FAST_SEED) == 0
    for model in ("bpr", "random", "rsgan"):
        assert _run("train", "--out", out, "--fold", "0", "--model", model, "--threads", "1", *FAST_TRAIN) == 0
    assert _run("eval", "--out", out, "--fold", "0") == 0
    assert _run("linkpred", "--out", out, "--fold", "0") == 0
    assert _run("analyze", "--out", out, "--fold", "0") == 0


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    fx = planted_friends()
    d = tmp_path_factory.mktemp("data")
    write_fixture(d, fx.dataset, fx.social)
    return d


@pytest.fixture(scope="module")
def run(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    _pipeline(fixture_dir, out)
    return out


def _outputs(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "run.log"}


class TestHelpAndConfig:
    def test_help_lists_every_key_and_default(self):
        proc = subprocess.run([sys.executable, "-m", "rsgan", "train", "--help"], capture_output=True,
                              text=True, check=True, env={"COLUMNS": "400", "PATH": ""})
        text = " ".join(proc.stdout.split())
        for opt in OPTIONS:
            assert opt.flag in text
            assert f"(default: {opt.default}; config key: {opt.key})" in text

    def test_config_and_flag_precedence(self, tmp_path, fixture_dir):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# comment\nratings={fixture_dir / 'ratings.tsv'}\ntrust={fixture_dir / 'trust.tsv'}\n"
                       f"folds=3\nlink_holdout=0.5\nout={tmp_path / 'from_cfg'}\n")
        assert _run("prepare", "--config", cfg, "--folds", "4") == 0
        out = tmp_path / "from_cfg"
        ds = build_dataset(load_interactions(fixture_dir / "ratings.tsv"))
        assert len(read_fold_manifest(out / "folds.tsv", ds)) == 4  # flag beats config
        assert json.loads((out / "prepared.json").read_text())["link_holdout"] == 0.5  # config beats default

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate=0.1\n")
        with pytest.raises(ConfigError):
            read_config(cfg)
        assert _run("prepare", "--config", cfg, "--out", tmp_path) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_bad_value(self, tmp_path):
        assert _run("prepare", "--folds", "five", "--out", tmp_path) == 2

    def test_bool_flags(self, tmp_path):
        cfg = tmp_path / "b.cfg"
        cfg.write_text("hard_z=yes\nepoch_alternation=0\n")
        assert read_config(cfg) == {"hard_z": True, "epoch_alternation": False}


class TestErrors:
    def test_missing_input_names_the_path(self, tmp_path, fixture_dir, capsys):
        missing = tmp_path / "no_such_ratings.tsv"
        rc = _run("prepare", "--ratings", missing, "--trust", fixture_dir / "trust.tsv", "--out", tmp_path)
        assert rc == 2 and str(missing) in capsys.readouterr().err

    def test_train_before_prepare(self, tmp_path):
        assert _run("train", "--out", tmp_path / "empty") == 2

    def test_corrupt_checkpoint(self, run, tmp_path, capsys):
        out = tmp_path / "copy"
        out.mkdir()
        for name, data in _outputs(run).items():
            (out / name).write_bytes(data)
        (out / "bpr_fold0.ckpt").write_bytes(b"RSGX" + (run / "bpr_fold0.ckpt").read_bytes()[4:])
        assert _run("eval", "--out", out, "--fold", "0", "--models", "bpr") == 4
        assert "magic" in capsys.readouterr().err
        (out / "rsgan_fold0.ckpt").unlink()
        assert _run("analyze", "--out", out, "--fold", "0") == 4

    def test_numeric_fault(self, run, tmp_path, capsys):
        out = tmp_path / "copy"
        out.mkdir()
        for name, data in _outputs(run).items():
            (out / name).write_bytes(data)
        rc = _run("train", "--out", out, "--fold", "0", "--model", "bpr", "--lr", "1e200", "--dim", "4")
        assert rc == 3 and "epoch" in capsys.readouterr().err


class TestPipeline:
    def test_outputs(self, run):
        names = set(_outputs(run))
        for expected in ("folds.tsv", "summary.tsv", "seeds_fold0.tsv", "bpr_fold0.ckpt", "random_fold0.ckpt",
                         "cdae_fold0.ckpt", "rsgan_fold0.ckpt", "eval.tsv", "eval.json", "eval_cold.tsv",
                         "linkpred.tsv", "reliable_fold0.tsv", "followers_fold0.tsv", "overlap.json"):
            assert expected in names
        assert (run / "summary.tsv").read_text().splitlines()[1] == "20\t30\t140\t30"

    def test_learning_curve_has_five_columns(self, run):
        lines = (run / "rsgan_fold0_curve.tsv").read_text().splitlines()
        assert len(lines) == 1 + 8 and all(len(line.split("\t")) == 5 for line in lines)

    def test_rsgan_fixture_run_is_fast(self, fixture_dir, run, tmp_path):
        out = tmp_path / "timed"
        for name in ("prepared.json", "folds.tsv", "social_kept.tsv", "social_heldout.tsv", "seeds_fold0.tsv"):
            (out / name).parent.mkdir(exist_ok=True)
            (out / name).write_bytes((run / name).read_bytes())
        start = time.perf_counter()
        assert _run("train", "--out", out, "--fold", "0", "--model", "rsgan", "--dim", "10", "--hidden", "50",
                    "--batch-size", "16") == 0
        assert time.perf_counter() - start < 10

    def test_bpr_zero_epochs_is_initialization(self, run, tmp_path):
        out = tmp_path / "zero"
        out.mkdir()
        for name in ("prepared.json", "folds.tsv", "social_kept.tsv", "social_heldout.tsv"):
            (out / name).write_bytes((run / name).read_bytes())
        assert _run("train", "--out", out, "--fold", "0", "--model", "bpr", "--epochs", "0", "--dim", "6") == 0
        ckpt = load_checkpoint(out / "bpr_fold0.ckpt")
        assert ckpt.generator is None and ckpt.dims[2] == 6
        assert np.all(np.abs(ckpt.discriminator.P) < 0.05)

    def test_oracle_checkpoint_scores_perfectly(self, run, tmp_path):
        out = tmp_path / "oracle"
        out.mkdir()
        for name in ("prepared.json", "folds.tsv", "social_kept.tsv", "social_heldout.tsv"):
            (out / name).write_bytes((run / name).read_bytes())
        ds = build_dataset(load_interactions(json.loads((run / "prepared.json").read_text())["ratings"]))
        fold = read_fold_manifest(run / "folds.tsv", ds)[0]
        P = np.zeros((ds.m, ds.n))
        P[fold.test[:, 0], fold.test[:, 1]] = 1.0  # scores = held-out indicator
        save_checkpoint(Checkpoint(DiscriminatorParams(P, np.eye(ds.n), 0.0)), out / "bpr_fold0.ckpt")
        assert _run("eval", "--out", out, "--fold", "0", "--ks", "10") == 0
        report = json.loads((out / "eval.json").read_text())
        assert report["bpr"]["metrics"]["10"]["ndcg"] == 1.0

    def test_empty_link_holdout(self, fixture_dir, tmp_path):
        out = tmp_path / "noholdout"
        assert _run("prepare", "--ratings", fixture_dir / "ratings.tsv", "--trust", fixture_dir / "trust.tsv",
                    "--out", out, "--link-holdout", "0") == 0
        assert _run("seed", "--out", out, "--fold", "0", *FAST_SEED) == 0
        assert _run("train", "--out", out, "--fold", "0", "--model", "rsgan", "--epochs", "1",
                    "--pretrain-epochs", "1", "--hidden", "8", "--dim", "4") == 0
        assert _run("linkpred", "--out", out, "--fold", "0") == 0
        assert "no users evaluated" in (out / "linkpred.tsv").read_text()

    def test_analyze_edge_count(self, run):
        lines = (run / "reliable_fold0.tsv").read_text().splitlines()
        assert len(lines) == 20 * 19  # top_t = 20, capped at the m - 1 non-self users
        _run("analyze", "--out", run, "--fold", "0", "--top-t", "5")
        assert len((run / "reliable_fold0.tsv").read_text().splitlines()) == 5 * 20
        _run("analyze", "--out", run, "--fold", "0")

    def test_rerun_is_byte_identical(self, fixture_dir, run, tmp_path):
        out = tmp_path / "again"
        _pipeline(fixture_dir, out)
        first, second = _outputs(run), _outputs(out)
        assert first.keys() == second.keys()
        assert [k for k in first if first[k] != second[k]] == []
