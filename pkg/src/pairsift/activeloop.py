"""Ensemble predictions, acquisition strategies, and the round loop.

The search space is the set of unordered target-gene pairs (i < j), indexed
lexicographically; a pair with both indices equal would be a single
knockdown and is excluded.  The world reveals its hidden value exactly when
a pair is measured (noiseless oracle).

Ensemble reductions are computed with fixed, documented arithmetic so an
independent scalar transcription matches them bit for bit:

- median: sort the M member predictions; middle element, or the mean
  (a + b) / 2 of the two middle elements when M is even;
- quantile(q): sort; pos = (M-1)*q, lo = floor(pos), w = pos - lo; the
  convex combination (1-w)*v[lo] + w*v[lo+1];
- std: population convention; the mean and the squared-deviation mean are
  accumulated member by member, in member order, then sqrt(acc / M).

Acquisition ties are broken by a seeded uniform shuffle applied before a
stable sort of the scores, so equal-scoring pairs are chosen uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .heads import badge_scores_batch, predict_pairs
from .autodiff import Tensor
from .hetgraph import HetGraph, TargetSet
from .seeding import child_seed, stream
from .training import (
    ModelParams,
    TrainConfig,
    finetune,
    gene_embeddings,
    member_embeddings,
)

__all__ = [
    "STRATEGIES",
    "World",
    "LoopConfig",
    "EnsemblePrediction",
    "RoundRow",
    "RunRecord",
    "all_pairs",
    "predict_all",
    "acquire",
    "run_loop",
    "coverage_at_k",
    "mae_unseen",
]

STRATEGIES = ("greedy", "optimism", "maxvariance", "badge", "random")


def all_pairs(p: int) -> list[tuple[int, int]]:
    """Unordered index pairs in lexicographic (pair-index) order."""
    return [(i, j) for i in range(p) for j in range(i + 1, p)]


@dataclass
class World:
    """The oracle being searched: targets, hidden pair values, revealed set."""

    targets: TargetSet
    values: np.ndarray                      # (p*(p-1)/2,) in pair-index order
    observed: dict[tuple[int, int], float] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        p = self.targets.p
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (p * (p - 1) // 2,):
            raise ValueError(
                f"expected {p * (p - 1) // 2} pair values for p={p}, got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)) or np.any(self.values <= 0):
            raise ValueError("pair values must be finite and strictly positive")
        self._pairs = all_pairs(p)
        self._pair_index = {pair: k for k, pair in enumerate(self._pairs)}
        for pair, val in self.observed.items():
            if val != self.value(*pair):
                raise ValueError(f"observation {pair} does not match the hidden value")

    @property
    def p(self) -> int:
        return self.targets.p

    @property
    def n_pairs(self) -> int:
        return len(self._pairs)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(self._pairs)

    def pair_index(self, i: int, j: int) -> int:
        return self._pair_index[(i, j)]

    def value(self, i: int, j: int) -> float:
        return float(self.values[self.pair_index(i, j)])

    def unseen_pairs(self) -> list[tuple[int, int]]:
        return [pair for pair in self._pairs if pair not in self.observed]

    def reveal(self, pairs) -> None:
        """Measure pairs; a pair may be revealed once, at its true value."""
        for pair in pairs:
            pair = (int(pair[0]), int(pair[1]))
            if pair not in self._pair_index:
                raise ValueError(f"{pair} is not a valid unordered pair")
            if pair in self.observed:
                raise ValueError(f"pair {pair} was already observed")
            self.observed[pair] = self.value(*pair)


@dataclass(frozen=True)
class LoopConfig:
    """Round loop settings: T rounds of N pair reveals with M members."""

    rounds: int
    batch_size: int
    ensemble_size: int
    strategy: str = "greedy"
    quantile: float = 0.1
    coverage_k: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.batch_size < 1 or self.ensemble_size < 1:
            raise ValueError("rounds, batch_size and ensemble_size must be >= 1")
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must lie strictly inside (0, 1)")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; known: {STRATEGIES}")
        if self.coverage_k < 1:
            raise ValueError("coverage_k must be >= 1")


class EnsemblePrediction:
    """Per-candidate vectors of member predictions with fixed reductions."""

    def __init__(self, pairs, values):
        self.pairs = [tuple(p) for p in pairs]
        self.values = np.asarray(values, dtype=np.float64).reshape(len(self.pairs), -1)
        self._sorted = np.sort(self.values, axis=1)
        self.median = self._median(self._sorted)
        self.std = self._std(self.values)

    @property
    def n_members(self) -> int:
        return self.values.shape[1]

    @staticmethod
    def _median(sorted_vals: np.ndarray) -> np.ndarray:
        m = sorted_vals.shape[1]
        if m % 2:
            return sorted_vals[:, m // 2].copy()
        return (sorted_vals[:, m // 2 - 1] + sorted_vals[:, m // 2]) / 2.0

    @staticmethod
    def _std(vals: np.ndarray) -> np.ndarray:
        n, m = vals.shape
        acc = np.zeros(n)
        for k in range(m):
            acc += vals[:, k]
        mu = acc / m
        acc2 = np.zeros(n)
        for k in range(m):
            acc2 += (vals[:, k] - mu) ** 2
        return np.sqrt(acc2 / m)

    def quantile(self, q: float) -> np.ndarray:
        """Linear interpolation between order statistics at (M-1)*q."""
        m = self.values.shape[1]
        pos = (m - 1) * q
        lo = int(math.floor(pos))
        if lo >= m - 1:
            return self._sorted[:, m - 1].copy()
        w = pos - lo
        return (1.0 - w) * self._sorted[:, lo] + w * self._sorted[:, lo + 1]


@dataclass
class RoundRow:
    """Metrics for one round of one run."""

    strategy: str
    round: int
    observed_pairs: int
    fraction_observed: float
    coverage_at_k: float
    mae_unseen: float
    ablation: str = "none"
    replicate: int = 0
    wallclock_s: float = float("nan")


@dataclass
class RunRecord:
    """Per-round metric rows of one loop run plus its configuration."""

    rows: list[RoundRow]
    loop: LoopConfig
    train: TrainConfig


def predict_all(members, g: HetGraph | None, candidates) -> EnsemblePrediction:
    """Eval-mode predictions of every member for every candidate pair.

    Embeddings are computed once per member and reused across all pairs.
    """
    if not members:
        raise ValueError("need at least one member")
    candidates = [tuple(c) for c in candidates]
    values = np.zeros((len(candidates), len(members)))
    if candidates:
        pi = np.array([c[0] for c in candidates], dtype=np.intp)
        pj = np.array([c[1] for c in candidates], dtype=np.intp)
        for m, member in enumerate(members):
            emb = member_embeddings(member, g, "eval").data
            xi = Tensor(emb[member.gene_rows[pi]])
            xj = Tensor(emb[member.gene_rows[pj]])
            values[:, m] = predict_pairs(xi, xj, member.bilinear, "eval").data
    return EnsemblePrediction(candidates, values)


def acquire(strategy: str, preds: EnsemblePrediction, embeddings, n_select: int,
            seed: int, q: float = 0.1) -> list[tuple[int, int]]:
    """Select ``n_select`` distinct candidate pairs under the given strategy.

    Scores (smaller = chosen first): greedy uses the prediction median,
    optimism the q-quantile, maxvariance the negated std, badge the negated
    member-median of the embedding-product norm (``embeddings`` supplies one
    (p, d) gene-embedding matrix per member), and random scores everything
    equally.  Ties: draw a permutation from stream ``("tie",)`` of ``seed``,
    apply it to the scores, stable-sort, and map back.
    """
    n = len(preds.pairs)
    if n_select > n:
        raise ValueError(f"cannot select {n_select} of {n} candidates")
    if strategy == "greedy":
        key = preds.median
    elif strategy == "optimism":
        key = preds.quantile(q)
    elif strategy == "maxvariance":
        key = -preds.std
    elif strategy == "badge":
        pi = np.array([c[0] for c in preds.pairs], dtype=np.intp)
        pj = np.array([c[1] for c in preds.pairs], dtype=np.intp)
        per_member = np.column_stack(
            [badge_scores_batch(emb[pi], emb[pj]) for emb in embeddings]
        )
        key = -EnsemblePrediction._median(np.sort(per_member, axis=1))
    elif strategy == "random":
        key = np.zeros(n)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; known: {STRATEGIES}")
    perm = stream(seed, "tie").permutation(n)
    order = np.argsort(key[perm], kind="stable")
    return [preds.pairs[perm[k]] for k in order[:n_select]]


def coverage_at_k(observed, world: World, k: int) -> float:
    """Fraction of the k smallest-value pairs already observed.

    Ties at the threshold value resolve by pair index (stable sort of the
    value vector, which is stored in pair-index order).
    """
    if k > world.n_pairs:
        raise ValueError(f"k={k} exceeds the {world.n_pairs} pairs of the world")
    top = np.argsort(world.values, kind="stable")[:k]
    pairs = world.pairs
    observed = set(observed)
    hit = sum(1 for idx in top if pairs[idx] in observed)
    return hit / k


def mae_unseen(members, g: HetGraph | None, world: World) -> float:
    """Mean absolute error of the ensemble-median prediction on unseen pairs."""
    unseen = world.unseen_pairs()
    if not unseen:
        raise ValueError("no unseen pairs left; the error on unseen data is undefined")
    preds = predict_all(members, g, unseen)
    acc = 0.0
    for k, pair in enumerate(unseen):
        acc += abs(float(preds.median[k]) - world.value(*pair))
    return acc / len(unseen)


def run_loop(world: World, g: HetGraph | None, members, cfg: LoopConfig,
             tcfg: TrainConfig) -> RunRecord:
    """Algorithm loop: random batch, then train / predict / acquire / reveal.

    Round 0 reveals ``batch_size`` pairs drawn uniformly without replacement
    (the first entries of a permutation from stream ``("round0",)`` of
    ``cfg.seed``).  Every later round fine-tunes each member on the observed
    set (member ``i`` trains under seed ``child_seed(tcfg.seed, "member",
    i)``), predicts over the complement, and acquires the next batch with
    tie seed ``child_seed(cfg.seed, "acquire", t)``.  Bookkeeping (batch
    accounting, no re-selection, nondecreasing coverage) is asserted every
    round.
    """
    if len(members) != cfg.ensemble_size:
        raise ValueError(f"{len(members)} members but ensemble_size={cfg.ensemble_size}")
    if cfg.rounds * cfg.batch_size > world.n_pairs:
        raise ValueError(
            f"rounds*batch_size={cfg.rounds * cfg.batch_size} exceeds the "
            f"{world.n_pairs} available pairs"
        )
    if world.observed:
        raise ValueError("the loop expects a fresh world with no observations")
    k = min(cfg.coverage_k, world.n_pairs)
    rows: list[RoundRow] = []
    prev_coverage = -1.0

    def log_round(t: int) -> None:
        nonlocal prev_coverage
        n_obs = len(world.observed)
        if n_obs != (t + 1) * cfg.batch_size:
            raise RuntimeError(
                f"bookkeeping violation: {n_obs} observed after round {t}, "
                f"expected {(t + 1) * cfg.batch_size}"
            )
        cov = coverage_at_k(world.observed, world, k)
        if cov < prev_coverage:
            raise RuntimeError("bookkeeping violation: coverage decreased")
        prev_coverage = cov
        mae = (
            mae_unseen(members, g, world)
            if len(world.observed) < world.n_pairs
            else float("nan")
        )
        rows.append(
            RoundRow(
                strategy=cfg.strategy,
                round=t,
                observed_pairs=n_obs,
                fraction_observed=n_obs / world.n_pairs,
                coverage_at_k=cov,
                mae_unseen=mae,
            )
        )

    perm = stream(cfg.seed, "round0").permutation(world.n_pairs)
    pairs = world.pairs
    world.reveal([pairs[int(idx)] for idx in perm[: cfg.batch_size]])
    log_round(0)

    for t in range(1, cfg.rounds):
        snapshot = dict(world.observed)
        for idx, member in enumerate(members):
            finetune(member, g, snapshot, replace(tcfg, seed=child_seed(tcfg.seed, "member", idx)))
        candidates = world.unseen_pairs()
        preds = predict_all(members, g, candidates)
        gene_embs = [gene_embeddings(m, g, "eval") for m in members]
        selected = acquire(
            cfg.strategy, preds, gene_embs, cfg.batch_size,
            child_seed(cfg.seed, "acquire", t), cfg.quantile,
        )
        candidate_set = set(candidates)
        if len(set(selected)) != cfg.batch_size or not set(selected) <= candidate_set:
            raise RuntimeError("bookkeeping violation: acquisition returned bad pairs")
        world.reveal(selected)
        log_round(t)
    return RunRecord(rows=rows, loop=cfg, train=tcfg)
