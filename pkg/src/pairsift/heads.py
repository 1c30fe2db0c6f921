"""Output heads over shared node embeddings.

Two heads read the representation model's embeddings: a per-relation
diagonal bilinear scorer for self-supervised edge classification, and a
symmetric bilinear regression head for pair-value prediction.  A third,
parameter-free score (the norm of the elementwise embedding product) serves
the gradient-magnitude acquisition strategy.

The per-pair functions in this module are the reference semantics: they
accumulate strictly left-to-right in plain Python floats so an independent
scalar transcription reproduces them bit for bit, and so that symmetry in
(i, j) holds exactly, not just to rounding:

- diagonal score: sum of (x_i[k] * x_j[k]) * r[k], accumulated over k;
- symmetric quadratic form: diagonal terms A[k,k] * (x_i[k] * x_j[k]) plus
  off-diagonal terms A[k,l] * (x_i[k]*x_j[l] + x_i[l]*x_j[k]) for k < l,
  accumulated in that order.

The batched tensor paths (used for training and bulk prediction) are free
to use vectorised reductions; they agree with the reference semantics to
floating-point noise and are tested against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .hetgraph import HetGraph
from .seeding import stream

__all__ = [
    "DistMultHead",
    "BilinearHead",
    "init_distmult_head",
    "init_bilinear_head",
    "distmult_score",
    "distmult_bce_loss",
    "bilinear_predict",
    "predict_pairs",
    "badge_score",
    "badge_scores_batch",
]


@dataclass
class DistMultHead:
    """One diagonal core vector per relation."""

    rel_vectors: dict[str, Tensor]
    embed_dim: int


@dataclass
class BilinearHead:
    """Symmetric quadratic form plus bias; symmetry is structural.

    Only the packed upper triangle is stored; the full matrix is
    materialised on use, so no optimizer step can break symmetry.
    """

    packed: Tensor  # (d*(d+1)/2,)
    bias: Tensor    # scalar
    dropout_rate: float
    embed_dim: int

    def matrix(self) -> np.ndarray:
        """The symmetric matrix as a plain array (no gradient tracking)."""
        return ad.sym_from_packed(self.packed.data, self.embed_dim).data


def init_distmult_head(tape: GradTape, relations, embed_dim: int, seed: int = 0) -> DistMultHead:
    vecs = {}
    for rel in relations:
        name = f"distmult/{rel}"
        bound = np.sqrt(6.0 / (2 * embed_dim))
        vecs[rel] = tape.parameter(name, stream(seed, "init", name).uniform(-bound, bound, embed_dim))
    return DistMultHead(rel_vectors=vecs, embed_dim=embed_dim)


def init_bilinear_head(tape: GradTape, embed_dim: int, dropout_rate: float = 0.1,
                       seed: int = 0) -> BilinearHead:
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    n_packed = embed_dim * (embed_dim + 1) // 2
    bound = np.sqrt(6.0 / (2 * embed_dim))
    packed = tape.parameter(
        "bilinear/packed", stream(seed, "init", "bilinear/packed").uniform(-bound, bound, n_packed)
    )
    bias = tape.parameter("bilinear/bias", 0.0)
    return BilinearHead(packed=packed, bias=bias, dropout_rate=dropout_rate, embed_dim=embed_dim)


def _sigmoid_scalar(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def distmult_score(x_i, r: str, x_j, head: DistMultHead) -> float:
    """Probability that nodes with embeddings ``x_i`` and ``x_j`` share relation ``r``.

    sigmoid of the diagonal form; exactly symmetric in (i, j) because each
    term multiplies x_i[k] * x_j[k] first.
    """
    if r not in head.rel_vectors:
        raise KeyError(f"relation {r!r} has no trained core vector")
    rv = head.rel_vectors[r].data
    xi = np.asarray(x_i, dtype=np.float64)
    xj = np.asarray(x_j, dtype=np.float64)
    if xi.shape != (head.embed_dim,) or xj.shape != (head.embed_dim,):
        raise ValueError(f"embeddings must have shape ({head.embed_dim},)")
    acc = 0.0
    for k in range(head.embed_dim):
        acc += (float(xi[k]) * float(xj[k])) * float(rv[k])
    return _sigmoid_scalar(acc)


def _symmetric_form(xi: np.ndarray, xj: np.ndarray, A: np.ndarray, d: int) -> float:
    acc = 0.0
    for k in range(d):
        acc += float(A[k, k]) * (float(xi[k]) * float(xj[k]))
        for l in range(k + 1, d):
            acc += float(A[k, l]) * (float(xi[k]) * float(xj[l]) + float(xi[l]) * float(xj[k]))
    return acc


def bilinear_predict(x_i, x_j, head: BilinearHead, mode: str = "eval", rng=None) -> float:
    """Predicted pair value softplus(x_i^T A x_j) + b.

    In train mode the two embeddings are masked by independent inverted
    dropout (requires ``rng``); eval mode is deterministic and exactly
    symmetric in (i, j).
    """
    xi = np.asarray(x_i, dtype=np.float64).copy()
    xj = np.asarray(x_j, dtype=np.float64).copy()
    d = head.embed_dim
    if xi.shape != (d,) or xj.shape != (d,):
        raise ValueError(f"embeddings must have shape ({d},)")
    if mode == "train" and head.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode requires an rng for the dropout masks")
        keep = 1.0 - head.dropout_rate
        xi *= (rng.random(d) >= head.dropout_rate) / keep
        xj *= (rng.random(d) >= head.dropout_rate) / keep
    A = head.matrix()
    q = _symmetric_form(xi, xj, A, d)
    return ad.softplus(q) + float(head.bias.data)


def predict_pairs(emb_i: Tensor, emb_j: Tensor, head: BilinearHead,
                  mode: str = "eval", rng=None) -> Tensor:
    """Batched pair predictions, one per row of (emb_i, emb_j); differentiable."""
    if mode == "train" and head.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode requires an rng for the dropout masks")
        keep = 1.0 - head.dropout_rate
        emb_i = emb_i * ((rng.random(emb_i.shape) >= head.dropout_rate) / keep)
        emb_j = emb_j * ((rng.random(emb_j.shape) >= head.dropout_rate) / keep)
    A = ad.sym_from_packed(head.packed, head.embed_dim)
    q = ((emb_i @ A) * emb_j).sum(axis=1)
    return ad.softplus(q) + head.bias


def distmult_bce_loss(emb: Tensor, g: HetGraph, edges: np.ndarray, labels: np.ndarray,
                      head: DistMultHead) -> Tensor:
    """Mean binary cross-entropy of diagonal-form edge logits.

    ``edges`` is an (n, 3) array of (src, relation, dst) ids of ``g`` and
    ``labels`` holds 1 for observed edges, 0 for corruptions.  Uses the
    logit formulation y*softplus(-z) + (1-y)*softplus(z), grouped by
    relation so each group shares one core vector.
    """
    edges = np.asarray(edges)
    labels = np.asarray(labels, dtype=np.float64)
    if edges.shape[0] != labels.shape[0]:
        raise ValueError("edges and labels must align")
    n = edges.shape[0]
    total: Tensor | None = None
    for r in np.unique(edges[:, 1]):
        mask = edges[:, 1] == r
        rv = head.rel_vectors[g.relation_token(int(r))]
        xi = ad.gather_rows(emb, edges[mask, 0])
        xj = ad.gather_rows(emb, edges[mask, 2])
        z = (xi * xj * rv).sum(axis=1)
        y = labels[mask]
        piece = (ad.softplus(-z) * y + ad.softplus(z) * (1.0 - y)).sum()
        total = piece if total is None else total + piece
    if total is None:
        raise ValueError("no edges to score")
    return total * (1.0 / n)


def badge_score(x_i, x_j) -> float:
    """Euclidean norm of the elementwise embedding product."""
    xi = np.asarray(x_i, dtype=np.float64)
    xj = np.asarray(x_j, dtype=np.float64)
    if xi.shape != xj.shape or xi.ndim != 1:
        raise ValueError("embeddings must be 1-D and of equal length")
    acc = 0.0
    for k in range(xi.size):
        acc += (float(xi[k]) * float(xj[k])) ** 2
    return math.sqrt(acc)


def badge_scores_batch(emb_i: np.ndarray, emb_j: np.ndarray) -> np.ndarray:
    """Row-wise badge scores; accumulates over channels in the reference order."""
    emb_i = np.asarray(emb_i, dtype=np.float64)
    emb_j = np.asarray(emb_j, dtype=np.float64)
    acc = np.zeros(emb_i.shape[0])
    for k in range(emb_i.shape[1]):
        acc += (emb_i[:, k] * emb_j[:, k]) ** 2
    return np.sqrt(acc)
