"""Relational graph convolution over the heterogeneous graph.

Per layer, node i receives the mean of its neighbors' states under each
relation, mapped through a relation-specific weight, and the sum over
relations goes through a ReLU; the self term is added outside the
nonlinearity:

    h_i' = relu( sum_r (1/|N_i^r|) sum_{j in N_i^r} W_r h_j ) + W_0 h_i

Initial states are the standard basis vectors, so the first layer reduces to
an embedding-table lookup: the incoming message is a row of A_hat_r @ W_r^T
and the self term is a row of W_0^T, with no |V|-dimensional intermediate.

Between hidden layers (never after the output layer) states pass through a
differentiable group normalisation: soft-assign nodes to G groups, normalise
each group's masked features over the node dimension, and add the result
back with a learnable skip strength.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .hetgraph import HetGraph
from .seeding import stream

__all__ = [
    "DivergenceError",
    "NormBlock",
    "LayerBlock",
    "RgcnParams",
    "init_rgcn_params",
    "rgcn_forward",
    "diff_group_norm",
    "save_checkpoint",
    "load_checkpoint",
]

_NORM_EPS = 1e-5


class DivergenceError(FloatingPointError):
    """Non-finite activations in a forward pass."""


@dataclass
class NormBlock:
    """Group-normalisation parameters for one inter-layer block."""

    assign: Tensor  # (G, d) soft cluster assignment weights
    scale: Tensor   # (G, d) per-group, per-channel scale
    shift: Tensor   # (G, d) per-group, per-channel shift
    skip: Tensor    # scalar skip strength, kept >= 0 by the optimizer

    @property
    def groups(self) -> int:
        return self.assign.shape[0]


@dataclass
class LayerBlock:
    """One convolution layer: a weight per relation plus the self weight."""

    rel_weights: dict[str, Tensor]  # relation token -> (d_out, d_in)
    self_weight: Tensor             # (d_out, d_in)


@dataclass
class RgcnParams:
    """All layers and norm blocks of one member's representation model."""

    layers: list[LayerBlock]
    norms: list[NormBlock | None]  # one entry per layer; None after the output layer
    n_nodes: int

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].self_weight.shape[0]


def _glorot(rng, d_out: int, d_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_out, d_in))


def init_rgcn_params(
    tape: GradTape,
    g: HetGraph,
    hidden_dim: int = 64,
    embed_dim: int = 50,
    n_layers: int = 3,
    groups: int = 4,
    seed: int = 0,
    use_norm: bool = True,
) -> RgcnParams:
    """Glorot-initialised parameters dimensioned for ``g``.

    Every weight draws from its own stream ``("init", <parameter name>)`` of
    ``seed``, so two members with different seeds are independently
    initialised while a reseeded member reproduces bit-identically.
    """
    if n_layers < 1:
        raise ValueError("need at least one layer")
    dims = [g.n_nodes] + [hidden_dim] * (n_layers - 1) + [embed_dim]
    layers: list[LayerBlock] = []
    norms: list[NormBlock | None] = []
    for l in range(n_layers):
        d_in, d_out = dims[l], dims[l + 1]
        rel_weights = {}
        for rel in g.relations:
            name = f"rgcn/layer{l}/rel/{rel}"
            rel_weights[rel] = tape.parameter(name, _glorot(stream(seed, "init", name), d_out, d_in))
        name = f"rgcn/layer{l}/self"
        self_w = tape.parameter(name, _glorot(stream(seed, "init", name), d_out, d_in))
        layers.append(LayerBlock(rel_weights, self_w))
        if use_norm and l < n_layers - 1:
            aname = f"rgcn/norm{l}/assign"
            norms.append(
                NormBlock(
                    assign=tape.parameter(aname, _glorot(stream(seed, "init", aname), groups, d_out)),
                    scale=tape.parameter(f"rgcn/norm{l}/scale", np.ones((groups, d_out))),
                    shift=tape.parameter(f"rgcn/norm{l}/shift", np.zeros((groups, d_out))),
                    skip=tape.parameter(f"rgcn/norm{l}/skip", 0.01),
                )
            )
        else:
            norms.append(None)
    return RgcnParams(layers=layers, norms=norms, n_nodes=g.n_nodes)


def diff_group_norm(h: Tensor, block: NormBlock, mode: str = "train") -> Tensor:
    """Soft-group normalisation with skip connection.

    s = row-softmax(h @ assign^T) gives the (nodes, G) membership; per group
    the masked features s_k * h are standardised over the node dimension
    (eps 1e-5), scaled and shifted, and the groups' sum is added back as
    ``h + skip * sum_k norm_k``.  With fewer than 2 nodes the statistics are
    undefined and the block acts as the identity.  Statistics are computed
    fresh from the batch in both modes; ``mode`` is accepted for interface
    symmetry.
    """
    n = h.shape[0]
    if n < 2:
        return h
    G, d = block.assign.shape
    s = ad.softmax_rows(h @ block.assign.T)              # (n, G)
    m = ad.expand_dims(s, 2) * ad.expand_dims(h, 1)      # (n, G, d)
    mu = m.mean(axis=0, keepdims=True)                   # (1, G, d)
    var = ((m - mu) ** 2).mean(axis=0, keepdims=True)
    mhat = (m - mu) / ad.sqrt(var + _NORM_EPS)
    scaled = mhat * ad.reshape(block.scale, (1, G, d)) + ad.reshape(block.shift, (1, G, d))
    return h + block.skip * scaled.sum(axis=1)


def rgcn_forward(g: HetGraph, params: RgcnParams, mode: str = "eval") -> Tensor:
    """Node embeddings for every node of ``g``, shape (|V|, embed_dim).

    The forward pass is deterministic in both modes (normalisation always
    uses fresh whole-graph statistics); ``mode`` is threaded through for
    interface symmetry with the heads.
    """
    if params.n_nodes != g.n_nodes:
        raise ValueError(
            f"parameters dimensioned for {params.n_nodes} nodes, graph has {g.n_nodes}"
        )
    h: Tensor | None = None
    for l, layer in enumerate(params.layers):
        msg: Tensor | None = None
        for rel, W in layer.rel_weights.items():
            A = Tensor(g.norm_adjacency(g.relation_id(rel)))
            term = ad.matmul(A, W.T) if h is None else ad.matmul(A, h @ W.T)
            msg = term if msg is None else msg + term
        if msg is None:  # graph without edges
            shape = (g.n_nodes, layer.self_weight.shape[0])
            msg = Tensor(np.zeros(shape))
        self_term = layer.self_weight.T if h is None else h @ layer.self_weight.T
        h = ad.relu(msg) + self_term
        if params.norms[l] is not None:
            h = diff_group_norm(h, params.norms[l], mode)
    if not np.all(np.isfinite(h.data)):
        raise DivergenceError("non-finite activations in representation forward pass")
    return h


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(tape: GradTape, path) -> None:
    """Write every registered parameter as JSON name -> shape + row-major data.

    Floats are serialised with shortest round-trip repr, so loading restores
    them bit-identically.
    """
    payload = {
        name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
        for name, t in sorted(tape.params.items())
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)


def load_checkpoint(tape: GradTape, path) -> None:
    """Restore parameter values in place; names and shapes must match."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    registry = tape.params
    missing = set(registry) - set(payload)
    extra = set(payload) - set(registry)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, entry in payload.items():
        t = registry[name]
        shape = tuple(entry["shape"])
        if shape != t.data.shape:
            raise ValueError(f"shape mismatch for {name!r}: {shape} vs {t.data.shape}")
        t.data[...] = np.array(entry["data"], dtype=np.float64).reshape(shape)
