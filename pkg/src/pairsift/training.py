"""Optimisation loops: self-supervised pretraining and per-round fine-tuning.

Pretraining classifies observed edges against per-epoch resampled
corruptions with binary cross-entropy, updating the representation model and
the relation cores jointly; the regression head is untouched.  Fine-tuning
minimises the mean robust (huber) residual over the observed pair values,
updating the representation model and the regression head while the
relation cores stay frozen; it warm-starts from whatever the member
currently holds, so successive rounds keep refining the same weights.

The optimizer is adaptive-moment estimation with decoupled weight decay
(lr * wd * p subtracted directly in the update).  Group-norm skip strengths
are clamped to be nonnegative after every step.

A member is one ensemble element: its private tape plus parameter blocks.
Three flavours exist: graph members (representation model + both heads),
frozen-feature members (same, but fine-tuning only touches the regression
head), and free members (a bare trainable embedding table per target gene,
no graph, no pretraining).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor, backward
from .heads import (
    BilinearHead,
    DistMultHead,
    distmult_bce_loss,
    init_bilinear_head,
    init_distmult_head,
    predict_pairs,
)
from .hetgraph import HetGraph, TargetSet, sample_negative_edges
from .rgcn import RgcnParams, init_rgcn_params, rgcn_forward
from .seeding import child_seed, stream

__all__ = [
    "TrainingDiverged",
    "TrainConfig",
    "ModelParams",
    "OptimizerState",
    "init_member",
    "init_free_member",
    "copy_member",
    "member_embeddings",
    "gene_embeddings",
    "pretrain",
    "finetune",
    "pretrain_loss",
    "finetune_loss",
]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimisation."""


@dataclass(frozen=True)
class TrainConfig:
    """Budgets and rates for both training phases of one member."""

    pretrain_epochs: int = 200
    finetune_epochs: int = 100
    pretrain_lr: float = 1e-3
    finetune_lr: float = 5e-4
    weight_decay: float = 1e-4
    edge_batch: int = 512
    seed: int = 0
    deterministic: bool = False  # full batch is always used; this also disables dropout

    def __post_init__(self):
        for name in ("pretrain_epochs", "finetune_epochs", "edge_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("pretrain_lr", "finetune_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass
class ModelParams:
    """One ensemble member's learnable state."""

    tape: GradTape
    bilinear: BilinearHead
    rgcn: RgcnParams | None = None
    distmult: DistMultHead | None = None
    free_table: Tensor | None = None
    gene_rows: np.ndarray | None = None
    freeze_features: bool = False
    seed: int = 0
    finetune_calls: int = field(default=0)


def init_member(
    g: HetGraph,
    targets: TargetSet,
    hidden_dim: int = 64,
    embed_dim: int = 50,
    n_layers: int = 3,
    groups: int = 4,
    dropout: float = 0.1,
    seed: int = 0,
    use_norm: bool = True,
) -> ModelParams:
    """Graph-backed member dimensioned for ``g`` with targets resolved to rows."""
    tape = GradTape()
    rgcn = init_rgcn_params(tape, g, hidden_dim, embed_dim, n_layers, groups, seed, use_norm)
    distmult = init_distmult_head(tape, g.relations, embed_dim, seed)
    bilinear = init_bilinear_head(tape, embed_dim, dropout, seed)
    return ModelParams(
        tape=tape,
        bilinear=bilinear,
        rgcn=rgcn,
        distmult=distmult,
        gene_rows=targets.resolve(g),
        seed=seed,
    )


def init_free_member(p: int, embed_dim: int = 50, dropout: float = 0.1, seed: int = 0) -> ModelParams:
    """Member whose embeddings are a bare (p, d) trainable table; no graph."""
    tape = GradTape()
    bound = np.sqrt(6.0 / (2 * embed_dim))
    table = tape.parameter(
        "free/table", stream(seed, "init", "free/table").uniform(-bound, bound, (p, embed_dim))
    )
    bilinear = init_bilinear_head(tape, embed_dim, dropout, seed)
    return ModelParams(
        tape=tape,
        bilinear=bilinear,
        free_table=table,
        gene_rows=np.arange(p, dtype=np.intp),
        seed=seed,
    )


def copy_member(member: ModelParams) -> ModelParams:
    """Independent deep copy (fresh tape, fresh arrays)."""
    return copy.deepcopy(member)


def member_embeddings(member: ModelParams, g: HetGraph | None, mode: str = "eval") -> Tensor:
    """All-node embeddings for graph members, the table for free members."""
    if member.free_table is not None:
        return member.free_table
    if member.rgcn is None:
        raise ValueError("member has neither a representation model nor a free table")
    return rgcn_forward(g, member.rgcn, mode)


def gene_embeddings(member: ModelParams, g: HetGraph | None, mode: str = "eval") -> np.ndarray:
    """Per-target-gene embedding rows as a plain (p, d) array."""
    emb = member_embeddings(member, g, mode)
    return emb.data[member.gene_rows]


class OptimizerState:
    """Adaptive moments with decoupled weight decay over named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clamp_nonneg: tuple[str, ...] = ()):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.clamp_nonneg = set(clamp_nonneg)
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m = self._m[name] = b1 * self._m[name] + (1.0 - b1) * g
            v = self._v[name] = b2 * self._v[name] + (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update
            if name in self.clamp_nonneg:
                np.maximum(p.data, 0.0, out=p.data)


def _subset(tape: GradTape, prefixes: tuple[str, ...]) -> dict[str, Tensor]:
    return {k: v for k, v in tape.params.items() if k.startswith(prefixes)}


def _skip_names(tape: GradTape) -> tuple[str, ...]:
    return tuple(k for k in tape.params if k.startswith("rgcn/norm") and k.endswith("/skip"))


# ---------------------------------------------------------------------------
# loss builders (shared by the loops and the gradient checker)
# ---------------------------------------------------------------------------


def pretrain_loss(member: ModelParams, g: HetGraph, edges: np.ndarray,
                  labels: np.ndarray) -> Tensor:
    """BCE of the edge classifier over the given edge/label batch."""
    emb = rgcn_forward(g, member.rgcn, "train")
    return distmult_bce_loss(emb, g, edges, labels, member.distmult)


def _sorted_observations(observed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    items = observed.items() if hasattr(observed, "items") else observed
    items = sorted(((tuple(pair), float(val)) for pair, val in items))
    if not items:
        raise ValueError("observed set is empty; nothing to fit")
    pi = np.array([p[0] for p, _ in items], dtype=np.intp)
    pj = np.array([p[1] for p, _ in items], dtype=np.intp)
    y = np.array([v for _, v in items])
    return pi, pj, y


def finetune_loss(member: ModelParams, g: HetGraph | None, observed, mode: str = "eval",
                  rng=None, embeddings: Tensor | None = None) -> Tensor:
    """Mean huber residual of the regression head over observed pairs.

    Observations are sorted by pair before batching so that sets and dicts
    give the same result.  ``embeddings`` short-circuits the representation
    forward pass (used by frozen-feature members).
    """
    pi, pj, y = _sorted_observations(observed)
    emb = embeddings if embeddings is not None else member_embeddings(member, g, mode)
    xi = ad.gather_rows(emb, member.gene_rows[pi])
    xj = ad.gather_rows(emb, member.gene_rows[pj])
    pred = predict_pairs(xi, xj, member.bilinear, mode, rng)
    return ad.huber(pred - y).mean()


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def pretrain(member: ModelParams, g: HetGraph, cfg: TrainConfig) -> list[float]:
    """Self-supervised edge-classification training; returns per-epoch mean BCE.

    Each epoch resamples one corruption per edge (stream
    ``("pretrain-neg", epoch)``), shuffles the edge order (stream
    ``("pretrain-shuffle", epoch)``), and walks minibatches of
    ``cfg.edge_batch`` positives plus their corruptions.  Only the
    representation model and relation cores are updated.
    """
    if member.rgcn is None or member.distmult is None:
        raise ValueError("pretraining requires a graph-backed member")
    positives = np.array(g.edges, dtype=np.intp).reshape(-1, 3)
    n_edges = positives.shape[0]
    if n_edges == 0:
        return []
    opt = OptimizerState(
        _subset(member.tape, ("rgcn/", "distmult/")),
        lr=cfg.pretrain_lr,
        weight_decay=cfg.weight_decay,
        clamp_nonneg=_skip_names(member.tape),
    )
    trace: list[float] = []
    for epoch in range(cfg.pretrain_epochs):
        negs = np.array(
            sample_negative_edges(g, g.edges, child_seed(cfg.seed, "pretrain-neg", epoch)),
            dtype=np.intp,
        )
        perm = stream(cfg.seed, "pretrain-shuffle", epoch).permutation(n_edges)
        loss_sum = 0.0
        for start in range(0, n_edges, cfg.edge_batch):
            chunk = perm[start : start + cfg.edge_batch]
            edges = np.concatenate([positives[chunk], negs[chunk]])
            labels = np.concatenate([np.ones(chunk.size), np.zeros(chunk.size)])
            loss = pretrain_loss(member, g, edges, labels)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDiverged(
                    f"pretraining loss non-finite at epoch {epoch} (lr={cfg.pretrain_lr})"
                )
            opt.step(backward(member.tape, loss))
            loss_sum += val * 2 * chunk.size
        trace.append(loss_sum / (2 * n_edges))
    return trace


def finetune(member: ModelParams, g: HetGraph | None, observed, cfg: TrainConfig) -> list[float]:
    """Full-batch regression training on the observed pairs; returns the loss trace.

    Warm-starts from the member's current parameters.  Dropout masks come
    from streams ``("dropout", call_index, epoch)`` of ``cfg.seed``, where
    the call index counts fine-tuning invocations on this member, so
    successive rounds draw fresh but reproducible noise.  Frozen-feature
    members evaluate their embeddings once and only fit the regression head.
    """
    pi, pj, y = _sorted_observations(observed)  # validates non-emptiness
    observed_sorted = list(zip(zip(pi.tolist(), pj.tolist()), y.tolist()))
    if member.free_table is not None:
        prefixes: tuple[str, ...] = ("free/", "bilinear/")
    elif member.freeze_features:
        prefixes = ("bilinear/",)
    else:
        prefixes = ("rgcn/", "bilinear/")
    opt = OptimizerState(
        _subset(member.tape, prefixes),
        lr=cfg.finetune_lr,
        weight_decay=cfg.weight_decay,
        clamp_nonneg=_skip_names(member.tape),
    )
    call_idx = member.finetune_calls
    member.finetune_calls += 1
    frozen_emb: Tensor | None = None
    if member.freeze_features and member.free_table is None:
        frozen_emb = Tensor(member_embeddings(member, g, "eval").data)
    use_dropout = not cfg.deterministic and member.bilinear.dropout_rate > 0.0
    trace: list[float] = []
    for epoch in range(cfg.finetune_epochs):
        rng = stream(cfg.seed, "dropout", call_idx, epoch) if use_dropout else None
        mode = "train" if use_dropout else "eval"
        loss = finetune_loss(member, g, observed_sorted, mode, rng, embeddings=frozen_emb)
        val = loss.item()
        if not np.isfinite(val):
            raise TrainingDiverged(
                f"fine-tuning loss non-finite at epoch {epoch} (lr={cfg.finetune_lr})"
            )
        opt.step(backward(member.tape, loss))
        trace.append(val)
    return trace
