"""Adversarial training loop (generator vs. discriminator) and the plain BPR baseline."""

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .data import Dataset, FoldSplit
from .discriminator import (DiscriminatorParams, PairIndex, bpr_step, init_discriminator,
                            sample_negatives, social_bpr_step)
from .errors import ConfigError, NumericFault
from .evaluation import evaluate_ranking
from .generator import (GeneratorParams, apply_generator_grads, draw_noise, generator_backward,
                        generator_forward, init_generator, noise_free_distribution, pretrain_cdae)
from .hetgraph import SeededFriendSet
from .rng import stream

log = logging.getLogger(__name__)

EPOCH_UNITS = ("interactions", "users")
FRIEND_SAMPLERS = ("generator", "random")


@dataclass
class TrainConfig:
    batch_size: int = 512
    d: int = 50
    hidden: int = 200
    tau: float = 0.2
    lam: float = 0.001
    lr_d: float = 0.05
    lr_g: float = 0.01
    lr_decay: float = 0.98
    q_corrupt: float = 0.2
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    neg_ratio: int = 5
    max_epochs: int = 200
    d_steps_per_g_step: int = 1
    patience: int = 10
    warmup_epochs: int = 0
    epoch_alternation: bool = False
    epoch_unit: str = "interactions"
    hard_z: bool = False
    friend_sampler: str = "generator"
    random_friends: int = 50
    eval_k: int = 10
    master_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ("batch_size", "d", "hidden", "tau", "d_steps_per_g_step", "patience", "eval_k",
                    "random_friends")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lam", "lr_d", "lr_g", "pretrain_epochs", "pretrain_lr", "max_epochs",
                     "warmup_epochs", "neg_ratio"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if not 0 <= self.q_corrupt < 1:
            raise ConfigError("q_corrupt must lie in [0, 1)")
        if self.epoch_unit not in EPOCH_UNITS:
            raise ConfigError(f"epoch_unit must be one of {EPOCH_UNITS}")
        if self.friend_sampler not in FRIEND_SAMPLERS:
            raise ConfigError(f"friend_sampler must be one of {FRIEND_SAMPLERS}")

    def to_items(self) -> List[Tuple[str, str]]:
        return [(f.name, str(getattr(self, f.name))) for f in fields(self)]


@dataclass
class TrainState:
    epoch: int = 0
    best_ndcg: float = -math.inf
    best_epoch: int = -1
    since_improvement: int = 0
    history: List[dict] = field(default_factory=list)

    def record(self, epoch: int, loss_d: float, loss_g: float, val_ndcg: float) -> bool:
        """Append one epoch; returns whether validation NDCG improved."""
        self.history.append({"epoch": epoch, "loss_d": loss_d, "loss_g": loss_g, "val_ndcg": val_ndcg})
        self.epoch = epoch + 1
        improved = val_ndcg > self.best_ndcg
        if improved:
            self.best_ndcg = val_ndcg
            self.best_epoch = epoch
            self.since_improvement = 0
        else:
            self.since_improvement += 1
        return improved


class CurveLog:
    """Tab-separated learning curve: fold, epoch, loss_D, loss_G, val_ndcg@K."""

    def __init__(self, path, fold_id: int, k: int = 10):
        self.path = path
        self.fold_id = fold_id
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(f"fold\tepoch\tloss_D\tloss_G\tval_ndcg@{k}\n")

    def write(self, epoch, loss_d, loss_g, val):
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{self.fold_id}\t{epoch}\t{loss_d:.10g}\t{loss_g:.10g}\t{val:.10g}\n")


def _validation_ndcg(disc, dataset, fold, k) -> float:
    if len(fold.validation) == 0:
        return float("nan")
    return evaluate_ranking(disc, dataset, fold, [k], split="validation").get("ndcg", k)


def _epoch_samples(fold: FoldSplit, cfg: TrainConfig, epoch: int, train_items):
    """Users and positive items visited in one epoch."""
    rng = stream(cfg.master_seed, "epoch", epoch)
    if cfg.epoch_unit == "interactions":
        perm = rng.permutation(len(fold.train))
        return fold.train[perm, 0].copy(), fold.train[perm, 1].copy()
    users = rng.permutation(np.array([u for u in range(fold.m) if len(train_items[u])], dtype=np.int64))
    pos = np.array([train_items[u][rng.integers(len(train_items[u]))] for u in users], dtype=np.int64)
    return users, pos


def _with_epoch(exc: NumericFault, epoch) -> NumericFault:
    if exc.epoch is not None or epoch is None:
        return exc
    return NumericFault(str(exc), epoch)


def _lr(base, cfg, epoch):
    return base * cfg.lr_decay ** epoch


def train_bpr_epoch(disc: DiscriminatorParams, fold: FoldSplit, owned: PairIndex,
                    cfg: TrainConfig, epoch: int, lr: float, tag: str = "bpr") -> float:
    rng = stream(cfg.master_seed, tag, epoch)
    perm = rng.permutation(len(fold.train))
    users, pos = fold.train[perm, 0], fold.train[perm, 1]
    neg = sample_negatives(users, owned, rng)
    total = 0.0
    for start in range(0, len(users), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        total += bpr_step(disc, users[sl], pos[sl], neg[sl], lr)
    return total / max(len(users), 1)


def train_bpr_baseline(dataset: Dataset, fold: FoldSplit, cfg: TrainConfig,
                       curve_path=None) -> Tuple[DiscriminatorParams, TrainState]:
    """Plain BPR with mini-batch SGD and early stopping on validation NDCG."""
    disc = init_discriminator(fold.m, fold.n, cfg.d, cfg.lam, cfg.master_seed)
    owned = PairIndex(fold.matrix("train"))
    state = TrainState()
    best = disc.copy()
    curve = CurveLog(curve_path, fold.fold_id, cfg.eval_k)
    epoch = None
    try:
        for epoch in range(cfg.max_epochs):
            loss = train_bpr_epoch(disc, fold, owned, cfg, epoch, _lr(cfg.lr_d, cfg, epoch))
            if not math.isfinite(loss):
                raise NumericFault("non-finite BPR loss", epoch)
            val = _validation_ndcg(disc, dataset, fold, cfg.eval_k)
            improved = state.record(epoch, loss, 0.0, val)
            if improved or math.isnan(val):
                best = disc.copy()
            curve.write(epoch, loss, 0.0, val)
            log.info("bpr fold %d epoch %d: loss %.5f val ndcg@%d %.5f", fold.fold_id, epoch, loss,
                     cfg.eval_k, val)
            if state.since_improvement >= cfg.patience:
                break
    except NumericFault as exc:
        raise _with_epoch(exc, epoch)
    return best, state


def pretrain_generator(fold: FoldSplit, seeds: SeededFriendSet, cfg: TrainConfig) -> GeneratorParams:
    gen = init_generator(fold.m, fold.n, cfg.hidden, cfg.tau, cfg.q_corrupt, cfg.master_seed)
    return pretrain_cdae(gen, seeds, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.master_seed, cfg.neg_ratio)


def random_friend_lists(m: int, count: int, master_seed: int) -> List[np.ndarray]:
    """``count`` distinct random users (self excluded) per user."""
    out = []
    for u in range(m):
        others = np.delete(np.arange(m), u)
        k = min(count, len(others))
        out.append(np.sort(stream(master_seed, "random-friends", u).choice(others, k, replace=False)))
    return out


def _random_z(users, friend_lists, train_items, owned: PairIndex, n: int, rng):
    """One-hot item from a uniformly chosen random friend; rows without candidates are invalid."""
    picks = np.full(len(users), -1, dtype=np.int64)
    for r, u in enumerate(users):
        lst = friend_lists[u]
        if len(lst) == 0:
            continue
        f = lst[rng.integers(len(lst))]
        items = train_items[f]
        items = items[~owned.contains(np.full(len(items), u), items)]
        if len(items):
            picks[r] = items[rng.integers(len(items))]
    valid = picks >= 0
    rows = np.flatnonzero(valid)
    Z = sp.csr_matrix((np.ones(len(rows)), (rows, picks[rows])), shape=(len(users), n))
    return Z, valid


def _harden(Z: sp.csr_matrix, valid) -> sp.csr_matrix:
    """Replace every valid row of ``Z`` by a one-hot at its largest entry."""
    Z = sp.csr_matrix(Z)
    rows = np.flatnonzero(valid)
    picks = np.asarray(Z[rows].argmax(axis=1)).ravel()
    return sp.csr_matrix((np.ones(len(rows)), (rows, picks)), shape=Z.shape)


def adversarial_train(dataset: Dataset, fold: FoldSplit, seeds: SeededFriendSet, cfg: TrainConfig,
                      generator: Optional[GeneratorParams] = None, curve_path=None,
                      on_step: Optional[Callable] = None
                      ) -> Tuple[GeneratorParams, DiscriminatorParams, TrainState]:
    """Alternate discriminator descent and generator ascent; return the best-validation snapshot.

    Every batch of samples gets one discriminator step on its quads with the
    generator frozen, and every ``d_steps_per_g_step``-th batch is followed
    by one generator ascent step with the discriminator frozen. With
    ``epoch_alternation`` the generated items for a whole epoch are produced
    before any update, as in the literal two-phase schedule.
    ``on_step(kind, gen, disc)`` is called around every update (for tests).
    With ``friend_sampler='random'`` the generator is replaced by uniformly
    chosen members of fixed random friend lists and never updated.
    """
    m, n = fold.m, fold.n
    use_gen = cfg.friend_sampler == "generator"
    if use_gen and seeds.n_pairs == 0:
        raise ConfigError("no user has seeded friends")
    train = fold.matrix("train")
    owned = PairIndex(train)
    train_items = fold.items_by_user("train")
    seed_matrix = seeds.matrix() if seeds is not None else None
    if use_gen:
        gen = generator.copy() if generator is not None else pretrain_generator(fold, seeds, cfg)
    else:
        gen = generator.copy() if generator is not None else init_generator(
            m, n, cfg.hidden, cfg.tau, cfg.q_corrupt, cfg.master_seed)
        friend_lists = random_friend_lists(m, cfg.random_friends, cfg.master_seed)
    disc = init_discriminator(m, n, cfg.d, cfg.lam, cfg.master_seed)
    epoch = None
    try:
        for epoch in range(cfg.warmup_epochs):
            train_bpr_epoch(disc, fold, owned, cfg, epoch, _lr(cfg.lr_d, cfg, epoch), tag="warmup")

    except NumericFault as exc:
        raise _with_epoch(exc, epoch)
    state = TrainState()
    best = (gen.copy(), disc.copy())
    curve = CurveLog(curve_path, fold.fold_id, cfg.eval_k)
    bs = cfg.batch_size
    epoch = None
    try:
        for epoch in range(cfg.max_epochs):
            lr_d = _lr(cfg.lr_d, cfg, epoch)
            lr_g = _lr(cfg.lr_g, cfg, epoch)
            users, pos = _epoch_samples(fold, cfg, epoch, train_items)
            neg = sample_negatives(users, owned, stream(cfg.master_seed, "negatives", epoch))
            sum_d = sum_g = 0.0
            n_d = n_g = 0

            def forward(start, stop):
                keys = [(epoch, k) for k in range(start, stop)]
                noise = draw_noise(cfg.master_seed, "generator", keys, m, gen.q_corrupt, corrupt=True)
                return noise, generator_forward(gen, users[start:stop], seed_matrix, train, noise)

            staged = None
            if cfg.epoch_alternation and use_gen:
                staged = []
                for start in range(0, len(users), bs):
                    _, fp = forward(start, min(start + bs, len(users)))
                    staged.append((fp.z_matrix(), fp.valid))

            for b, start in enumerate(range(0, len(users), bs)):
                stop = min(start + bs, len(users))
                u, i, j = users[start:stop], pos[start:stop], neg[start:stop]
                fp = noise = None
                if not use_gen:
                    Z, valid = _random_z(u, friend_lists, train_items, owned, n,
                                         stream(cfg.master_seed, "random-z", epoch, b))
                elif staged is not None:
                    Z, valid = staged[b]
                else:
                    noise, fp = forward(start, stop)
                    Z, valid = fp.z_matrix(), fp.valid
                if cfg.hard_z:
                    Z = _harden(Z, valid)
                if on_step:
                    on_step("d", gen, disc)
                if valid.any():
                    sum_d += social_bpr_step(disc, u[valid], i[valid], j[valid], Z[valid], lr_d)
                    n_d += int(valid.sum())
                if on_step:
                    on_step("d-done", gen, disc)
                if use_gen and (b + 1) % cfg.d_steps_per_g_step == 0:
                    if fp is None:
                        noise, fp = forward(start, stop)
                    if on_step:
                        on_step("g", gen, disc)
                    grads, loss_g = generator_backward(gen, disc, fp, i, train)
                    if not math.isfinite(loss_g):
                        raise NumericFault("non-finite generator loss", epoch)
                    apply_generator_grads(gen, grads, lr_g)
                    sum_g += loss_g
                    n_g += int(fp.valid.sum())
                    if on_step:
                        on_step("g-done", gen, disc)
            loss_d = sum_d / max(n_d, 1)
            loss_g = sum_g / max(n_g, 1)
            if not (math.isfinite(loss_d) and math.isfinite(loss_g)):
                raise NumericFault("non-finite training loss", epoch)
            disc.check_finite()
            if use_gen:
                gen.check_finite()
            val = _validation_ndcg(disc, dataset, fold, cfg.eval_k)
            improved = state.record(epoch, loss_d, loss_g, val)
            if improved or math.isnan(val):
                best = (gen.copy(), disc.copy())
            curve.write(epoch, loss_d, loss_g, val)
            log.info("%s fold %d epoch %d: loss_D %.5f loss_G %.5f val ndcg@%d %.5f",
                     "rsgan" if use_gen else "random", fold.fold_id, epoch, loss_d, loss_g,
                     cfg.eval_k, val)
            if state.since_improvement >= cfg.patience:
                break
    except NumericFault as exc:
        raise _with_epoch(exc, epoch)
    return best[0], best[1], state


def planted_mass_ratio(gen: GeneratorParams, seeds: SeededFriendSet, partner: np.ndarray) -> float:
    """Mean friend-distribution mass on each user's planted friend over the mean mass on other users.

    "Other users" excludes the user itself and its planted friend. A ratio of
    1 means the generator cannot tell the planted friend from anyone else.
    """
    dist = noise_free_distribution(gen, seeds.matrix())
    m = len(partner)
    rows = np.arange(m)
    planted = dist[rows, partner].mean()
    others = np.ones((m, m), dtype=bool)
    others[rows, rows] = False
    others[rows, partner] = False
    return float(planted / dist[others].mean())
