"""Command-line driver: prepare -> seed -> train -> eval -> linkpred -> analyze.

Every option has one config-file key (``key=value`` lines) and one flag
(``--key-with-dashes``). Flags override the config file, which overrides
the built-in defaults. All outputs go under ``--out``; timestamps only ever
appear in ``run.log``.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (build_dataset, holdout_links, load_interactions, load_social, read_fold_manifest,
                   split_folds, write_fold_manifest, write_social)
from .discriminator import init_discriminator
from .errors import ConfigError, DataError, FormatError, NumericFault, RSGANError
from .evaluation import (MetricReport, evaluate_cold_start, evaluate_ranking, export_reliable_network,
                         follower_histogram, link_prediction_eval, overlap_stats, write_reports_json,
                         write_reports_tsv)
from .hetgraph import (DEFAULT_META_PATHS, discover_seeded_friends, load_seeded_friends,
                       write_seeded_friends)
from .trainer import TrainConfig, adversarial_train, pretrain_generator, train_bpr_baseline

log = logging.getLogger("rsgan")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4
MODELS = ("bpr", "rsgan", "random")


@dataclass(frozen=True)
class Option:
    key: str
    type: Any
    default: Any
    help: str
    group: str

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


_D = TrainConfig.__dataclass_fields__

OPTIONS: List[Option] = [
    Option("seed", int, 0, "master random seed", "global"),
    Option("out", str, "runs", "output directory", "global"),
    Option("threads", int, 1, "BLAS thread limit", "global"),
    # data
    Option("ratings", str, None, "user<TAB>item[<TAB>rating] file (prepare)", "data"),
    Option("trust", str, None, "truster<TAB>trustee file (prepare)", "data"),
    Option("rating_threshold", float, 0.0, "keep ratings >= this value", "data"),
    Option("folds", int, 5, "number of cross-validation folds", "data"),
    Option("validation_fraction", float, 0.1, "share of each training pool used for validation", "data"),
    Option("link_holdout", float, 0.2, "share of each user's followees held out for link prediction", "data"),
    # seeded friends
    Option("meta_paths", str, ",".join(DEFAULT_META_PATHS), "comma-separated meta-paths", "seed"),
    Option("walks", int, 10, "walks per user and meta-path", "seed"),
    Option("walk_length", int, 40, "users emitted per walk", "seed"),
    Option("emb_dim", int, 64, "skip-gram embedding size", "seed"),
    Option("window", int, 5, "skip-gram window", "seed"),
    Option("neg", int, 5, "skip-gram negatives per pair", "seed"),
    Option("sg_epochs", int, 5, "skip-gram epochs", "seed"),
    Option("sg_lr", float, 0.025, "skip-gram initial learning rate", "seed"),
    Option("k_seed", int, 10, "seeded friends per user", "seed"),
    Option("min_sim", float, 0.0, "minimum cosine similarity of a seeded friend", "seed"),
    Option("seeds", str, None, "seed-friend file instead of OUT/seeds_fold{fold}.tsv ({fold} is expanded)",
           "seed"),
    # training
    Option("model", str, "rsgan", "model to train: bpr, rsgan or random", "train"),
    Option("fold", str, "all", "folds to process: 'all' or comma-separated ids", "train"),
    Option("dim", int, _D["d"].default, "latent factor size", "train"),
    Option("lambda", float, _D["lam"].default, "L2 weight on touched factor rows", "train"),
    Option("lr", float, _D["lr_d"].default, "discriminator / BPR learning rate", "train"),
    Option("lr_g", float, _D["lr_g"].default, "generator ascent learning rate", "train"),
    Option("lr_decay", float, _D["lr_decay"].default, "per-epoch learning-rate multiplier", "train"),
    Option("batch_size", int, _D["batch_size"].default, "samples per update", "train"),
    Option("epochs", int, _D["max_epochs"].default, "maximum training epochs", "train"),
    Option("patience", int, _D["patience"].default, "epochs without validation gain before stopping", "train"),
    Option("d_steps_per_g_step", int, _D["d_steps_per_g_step"].default,
           "discriminator batches per generator step", "train"),
    Option("warmup_epochs", int, _D["warmup_epochs"].default, "plain BPR epochs before adversarial training",
           "train"),
    Option("epoch_alternation", bool, _D["epoch_alternation"].default,
           "generate a whole epoch of items before updating", "train"),
    Option("epoch_unit", str, _D["epoch_unit"].default, "'interactions' or 'users' per epoch", "train"),
    Option("hard_z", bool, _D["hard_z"].default, "harden generated items to one-hot for the D-step", "train"),
    Option("hidden", int, _D["hidden"].default, "CDAE hidden units", "train"),
    Option("tau", float, _D["tau"].default, "Gumbel-Softmax temperature", "train"),
    Option("corrupt", float, _D["q_corrupt"].default, "CDAE input corruption probability", "train"),
    Option("pretrain_epochs", int, _D["pretrain_epochs"].default, "CDAE pretraining epochs", "train"),
    Option("pretrain_lr", float, _D["pretrain_lr"].default, "CDAE pretraining learning rate", "train"),
    Option("neg_ratio", int, _D["neg_ratio"].default, "sampled non-friends per seed in pretraining", "train"),
    Option("random_friends", int, _D["random_friends"].default, "friend-list size of the random ablation",
           "train"),
    # evaluation
    Option("ks", str, "10,20", "cut-offs for ranking metrics", "eval"),
    Option("cold_threshold", int, 10, "cold-start users have fewer training items than this", "eval"),
    Option("models", str, None, "models to evaluate (default: every trained model found)", "eval"),
    Option("link_k", int, 10, "cut-off for link prediction", "eval"),
    Option("top_t", int, 20, "reliable friends kept per user", "eval"),
]
BY_KEY = {o.key: o for o in OPTIONS}
GROUP_TITLES = {"global": "global options", "data": "data", "seed": "seeded friends",
                "train": "training", "eval": "evaluation"}


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(opt: Option, text: str):
    if opt.type is bool:
        return _parse_bool(text)
    try:
        return opt.type(text)
    except ValueError as exc:
        raise ConfigError(f"{opt.key}: cannot parse {text!r} as {opt.type.__name__}") from exc


def read_config(path) -> Dict[str, Any]:
    """Flat ``key=value`` file; blank lines and ``#`` comments ignored, unknown keys rejected."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if key not in BY_KEY:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(BY_KEY[key], value)
    return values


def _add_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=argparse.SUPPRESS, metavar="FILE",
                        help="key=value config file; flags override it")
    groups = {}
    for opt in OPTIONS:
        group = groups.get(opt.group)
        if group is None:
            group = groups[opt.group] = parser.add_argument_group(GROUP_TITLES[opt.group])
        text = f"{opt.help} (default: {opt.default}; config key: {opt.key})".replace("%", "%%")
        if opt.type is bool:
            group.add_argument(opt.flag, dest=opt.key, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=text)
        else:
            group.add_argument(opt.flag, dest=opt.key, type=str, default=argparse.SUPPRESS,
                               metavar=opt.type.__name__.upper(), help=text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsgan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    _add_options(parser)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, helptext in (("prepare", "load data, write folds and the link holdout"),
                           ("seed", "discover seeded friends per fold"),
                           ("train", "train a model per fold"),
                           ("eval", "ranking and cold-start reports"),
                           ("linkpred", "social link prediction report"),
                           ("analyze", "reliable-friend network, follower histograms, overlap")):
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                       help="log progress to stderr")
        _add_options(p)
    return parser


def resolve(ns: argparse.Namespace) -> Dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    values = {o.key: o.default for o in OPTIONS}
    raw = vars(ns)
    if "config" in raw:
        values.update(read_config(raw["config"]))
    for opt in OPTIONS:
        if opt.key in raw:
            given = raw[opt.key]
            values[opt.key] = given if isinstance(given, bool) else _convert(opt, given)
    if values["model"] not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}")
    return values


def train_config(values: Dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        batch_size=values["batch_size"], d=values["dim"], hidden=values["hidden"], tau=values["tau"],
        lam=values["lambda"], lr_d=values["lr"], lr_g=values["lr_g"], lr_decay=values["lr_decay"],
        q_corrupt=values["corrupt"], pretrain_epochs=values["pretrain_epochs"],
        pretrain_lr=values["pretrain_lr"], neg_ratio=values["neg_ratio"], max_epochs=values["epochs"],
        d_steps_per_g_step=values["d_steps_per_g_step"], patience=values["patience"],
        warmup_epochs=values["warmup_epochs"], epoch_alternation=values["epoch_alternation"],
        epoch_unit=values["epoch_unit"], hard_z=values["hard_z"],
        friend_sampler="random" if values["model"] == "random" else "generator",
        random_friends=values["random_friends"], master_seed=values["seed"])


# ---------------------------------------------------------------------------
# shared state between stages


@dataclass
class Context:
    out: Path
    dataset: Any
    social: Any
    kept: Any
    heldout: Any
    folds: list


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_inputs(ratings, trust, threshold):
    if not ratings or not trust:
        raise ConfigError("both --ratings and --trust are required")
    dataset = build_dataset(load_interactions(ratings, threshold))
    return dataset, load_social(trust, dataset)


def load_context(values) -> Context:
    out = Path(values["out"])
    meta_path = out / "prepared.json"
    if not meta_path.exists():
        raise DataError(f"{meta_path} not found; run 'prepare' first")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    dataset, social = _load_inputs(meta["ratings"], meta["trust"], meta["rating_threshold"])
    kept = load_social(out / "social_kept.tsv", dataset)
    heldout = load_social(out / "social_heldout.tsv", dataset)
    folds = read_fold_manifest(out / "folds.tsv", dataset)
    return Context(out, dataset, social, kept, heldout, folds)


def selected_folds(values, ctx: Context):
    if values["fold"] == "all":
        return ctx.folds
    try:
        wanted = {int(x) for x in values["fold"].split(",") if x.strip()}
    except ValueError as exc:
        raise ConfigError(f"bad fold list {values['fold']!r}") from exc
    known = {f.fold_id for f in ctx.folds}
    if not wanted <= known:
        raise ConfigError(f"unknown folds {sorted(wanted - known)}")
    return [f for f in ctx.folds if f.fold_id in wanted]


def _seed_path(values, out: Path, fold_id: int) -> Path:
    if values["seeds"]:
        return Path(values["seeds"].replace("{fold}", str(fold_id)))
    return out / f"seeds_fold{fold_id}.tsv"


def _load_seeds(values, ctx: Context, fold_id: int):
    path = _seed_path(values, ctx.out, fold_id)
    if not path.exists():
        raise DataError(f"{path} not found; run 'seed' first or pass --seeds")
    return load_seeded_friends(path, ctx.dataset)


def _ckpt_path(out: Path, model: str, fold_id: int) -> Path:
    return out / f"{model}_fold{fold_id}.ckpt"


def _load_ckpt(out: Path, model: str, fold_id: int) -> Checkpoint:
    path = _ckpt_path(out, model, fold_id)
    if not path.exists():
        raise FormatError(f"{path}: checkpoint not found")
    return load_checkpoint(path)


def _ks(values) -> List[int]:
    try:
        ks = sorted({int(k) for k in values["ks"].split(",") if k.strip()})
    except ValueError as exc:
        raise ConfigError(f"bad cut-off list {values['ks']!r}") from exc
    if not ks or ks[0] < 1:
        raise ConfigError("cut-offs must be positive")
    return ks


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(values) -> None:
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset, social = _load_inputs(values["ratings"], values["trust"], values["rating_threshold"])
    folds = split_folds(dataset, values["folds"], values["seed"], values["validation_fraction"])
    kept, heldout = holdout_links(social, values["link_holdout"], values["seed"])
    write_fold_manifest(out / "folds.tsv", dataset, folds)
    write_social(out / "social_kept.tsv", dataset, kept)
    write_social(out / "social_heldout.tsv", dataset, heldout)
    summary = f"{dataset.m} {dataset.n} {dataset.nnz} {len(social)}"
    with open(out / "summary.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("users\titems\tfeedback\trelations\n" + summary.replace(" ", "\t") + "\n")
    _write_json(out / "prepared.json", {
        "ratings": str(Path(values["ratings"]).resolve()), "trust": str(Path(values["trust"]).resolve()),
        "rating_threshold": values["rating_threshold"], "folds": values["folds"],
        "validation_fraction": values["validation_fraction"], "link_holdout": values["link_holdout"],
        "seed": values["seed"]})
    print(summary)


def cmd_seed(values) -> None:
    ctx = load_context(values)
    for fold in selected_folds(values, ctx):
        seeds = discover_seeded_friends(
            fold.matrix("train"), ctx.kept, values["meta_paths"], values["walks"],
            values["walk_length"], values["emb_dim"], values["window"], values["neg"],
            values["sg_epochs"], values["sg_lr"], values["k_seed"], values["min_sim"], values["seed"])
        path = ctx.out / f"seeds_fold{fold.fold_id}.tsv"
        write_seeded_friends(path, ctx.dataset, seeds)
        print(f"fold {fold.fold_id}: {seeds.n_pairs} seeded pairs -> {path}")


def _echo(cfg: TrainConfig, model: str, fold_id: int) -> Dict[str, str]:
    echo = dict(cfg.to_items())
    echo.update(model=model, fold=str(fold_id))
    return echo


def cmd_train(values) -> None:
    ctx = load_context(values)
    cfg = train_config(values)
    model = values["model"]
    for fold in selected_folds(values, ctx):
        curve = ctx.out / f"{model}_fold{fold.fold_id}_curve.tsv"
        if model == "bpr":
            disc, state = train_bpr_baseline(ctx.dataset, fold, cfg, curve_path=curve)
            ckpt = Checkpoint(disc, None, _echo(cfg, model, fold.fold_id))
        elif model == "random":
            _, disc, state = adversarial_train(ctx.dataset, fold, None, cfg, curve_path=curve)
            ckpt = Checkpoint(disc, None, _echo(cfg, model, fold.fold_id))
        else:
            seeds = _load_seeds(values, ctx, fold.fold_id)
            pretrained = pretrain_generator(fold, seeds, cfg)
            init = init_discriminator(fold.m, fold.n, cfg.d, cfg.lam, cfg.master_seed)
            save_checkpoint(Checkpoint(init, pretrained, _echo(cfg, "cdae", fold.fold_id)),
                            _ckpt_path(ctx.out, "cdae", fold.fold_id))
            gen, disc, state = adversarial_train(ctx.dataset, fold, seeds, cfg, generator=pretrained,
                                                 curve_path=curve)
            ckpt = Checkpoint(disc, gen, _echo(cfg, model, fold.fold_id))
        path = _ckpt_path(ctx.out, model, fold.fold_id)
        save_checkpoint(ckpt, path)
        print(f"fold {fold.fold_id}: {model} {state.epoch} epochs, best validation ndcg@{cfg.eval_k} "
              f"{state.best_ndcg:.6f} at epoch {state.best_epoch} -> {path}")


def _models(values, ctx: Context, folds) -> List[str]:
    if values["models"]:
        names = [m.strip() for m in values["models"].split(",") if m.strip()]
        bad = [m for m in names if m not in MODELS + ("cdae",)]
        if bad:
            raise ConfigError(f"unknown models {bad}")
        return names
    found = [m for m in MODELS if all(_ckpt_path(ctx.out, m, f.fold_id).exists() for f in folds)]
    if not found:
        raise FormatError(f"no checkpoints found in {ctx.out}")
    return found


def cmd_eval(values) -> None:
    ctx = load_context(values)
    folds = selected_folds(values, ctx)
    ks = _ks(values)
    overall, cold = {}, {}
    for model in _models(values, ctx, folds):
        runs, cold_runs = [], []
        for fold in folds:
            disc = _load_ckpt(ctx.out, model, fold.fold_id).discriminator
            runs.append(evaluate_ranking(disc, ctx.dataset, fold, ks))
            cold_runs.append(evaluate_cold_start(disc, ctx.dataset, fold, values["cold_threshold"], ks))
        overall[model] = MetricReport.mean(runs)
        cold[model] = MetricReport.mean(cold_runs)
    write_reports_tsv(ctx.out / "eval.tsv", overall)
    write_reports_json(ctx.out / "eval.json", overall)
    write_reports_tsv(ctx.out / "eval_cold.tsv", cold)
    write_reports_json(ctx.out / "eval_cold.json", cold)
    print((ctx.out / "eval.tsv").read_text(encoding="utf-8"), end="")


def cmd_linkpred(values) -> None:
    ctx = load_context(values)
    folds = selected_folds(values, ctx)
    reports = {}
    for model in ("cdae", "rsgan"):
        runs = []
        for fold in folds:
            gen = _load_ckpt(ctx.out, model, fold.fold_id).generator
            if gen is None:
                raise FormatError(f"{_ckpt_path(ctx.out, model, fold.fold_id)} has no generator")
            runs.append(link_prediction_eval(gen, _load_seeds(values, ctx, fold.fold_id), ctx.heldout,
                                             values["link_k"]))
        reports[model] = MetricReport.mean(runs)
    write_reports_tsv(ctx.out / "linkpred.tsv", reports)
    write_reports_json(ctx.out / "linkpred.json", reports)
    print((ctx.out / "linkpred.tsv").read_text(encoding="utf-8"), end="")


def _write_histogram(path, hist: Dict[int, int]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("follower_count\tnum_users\n")
        for count, users in hist.items():
            fh.write(f"{count}\t{users}\n")


def cmd_analyze(values) -> None:
    ctx = load_context(values)
    overlap = {}
    _write_histogram(ctx.out / "followers_explicit.tsv", follower_histogram(ctx.social))
    for fold in selected_folds(values, ctx):
        ckpt = _load_ckpt(ctx.out, "rsgan", fold.fold_id)
        if ckpt.generator is None:
            raise FormatError(f"{_ckpt_path(ctx.out, 'rsgan', fold.fold_id)} has no generator")
        seeds = _load_seeds(values, ctx, fold.fold_id)
        net = export_reliable_network(ckpt.generator, seeds, values["top_t"])
        ids = ctx.dataset.user_ids
        with open(ctx.out / f"reliable_fold{fold.fold_id}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for u in range(len(ids)):
                for v, p in zip(net.friends[u], net.probabilities[u]):
                    fh.write(f"{ids[u]}\t{ids[v]}\t{p:.17g}\n")
        _write_histogram(ctx.out / f"followers_fold{fold.fold_id}.tsv", net.follower_histogram())
        seed_ret, expl_ret = overlap_stats(net, seeds, ctx.social)
        overlap[str(fold.fold_id)] = {"seed_retention": seed_ret, "explicit_retention": expl_ret}
    _write_json(ctx.out / "overlap.json", overlap)
    print(json.dumps(overlap, sort_keys=True))


COMMANDS = {"prepare": cmd_prepare, "seed": cmd_seed, "train": cmd_train, "eval": cmd_eval,
            "linkpred": cmd_linkpred, "analyze": cmd_analyze}


def _setup_logging(out: Path, verbose: bool) -> None:
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        if getattr(h, "_rsgan", False):
            root.removeHandler(h)
            h.close()
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.INFO if verbose else logging.WARNING)
    err.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    err._rsgan = True
    root.addHandler(err)
    try:
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / "run.log", encoding="utf-8")
    except OSError:
        return
    fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    fh._rsgan = True
    root.addHandler(fh)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        values = resolve(ns)
        _setup_logging(Path(values["out"]), getattr(ns, "verbose", False))
        log.info("%s: %s", ns.command, " ".join(f"{k}={v}" for k, v in sorted(values.items())))
        if values["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        with threadpool_limits(limits=values["threads"]):
            COMMANDS[ns.command](values)
    except NumericFault as exc:
        print(f"rsgan: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"rsgan: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (DataError, ConfigError) as exc:
        print(f"rsgan: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RSGANError as exc:
        print(f"rsgan: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
