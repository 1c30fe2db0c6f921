"""Typed-node, typed-edge knowledge graph with walk sampling and corruption.

The graph is immutable after construction: node tokens map to dense integer
ids in declaration order, edges are undirected and stored once in canonical
form (src <= dst), and per-relation neighbor sets are precomputed.  All
sampling takes explicit seeds and draws from named streams (see
:mod:`pairsift.seeding`), so results never depend on iteration order.

File format (UTF-8, tab-separated, ``#`` comments and blank lines ignored):

    N <id> <label>            node declaration, label from NODE_LABELS
    E <src> <relation> <dst>  undirected edge; nodes must be declared first

``save_graph`` emits the canonical form: node lines sorted by token, then
edge lines with token-sorted endpoints sorted by (src, relation, dst).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import stream

__all__ = [
    "NODE_LABELS",
    "GraphFormatError",
    "NegativeSamplingError",
    "HetGraph",
    "SamplerConfig",
    "TargetSet",
    "load_graph",
    "save_graph",
    "random_walk_subgraph",
    "sample_negative_edges",
]

NODE_LABELS = ("Gene", "Protein", "BiologicalProcess", "MolecularFunction", "CellularComponent")

_NEG_RETRY_BUDGET = 100


class GraphFormatError(ValueError):
    """Malformed graph file or inconsistent graph construction input."""


class NegativeSamplingError(RuntimeError):
    """No valid corruption found within the retry budget."""


class HetGraph:
    """Undirected heterogeneous graph over labelled nodes and typed edges."""

    def __init__(self, nodes, edges):
        tokens: list[str] = []
        labels: list[str] = []
        index: dict[str, int] = {}
        for tok, label in nodes:
            tok = str(tok)
            if tok in index:
                raise GraphFormatError(f"duplicate node id {tok!r}")
            if label not in NODE_LABELS:
                raise GraphFormatError(f"unknown node label {label!r} for node {tok!r}")
            index[tok] = len(tokens)
            tokens.append(tok)
            labels.append(label)

        relations: list[str] = []
        rel_index: dict[str, int] = {}
        canon: set[tuple[int, int, int]] = set()
        for src, rel, dst in edges:
            src, rel, dst = str(src), str(rel), str(dst)
            for endpoint in (src, dst):
                if endpoint not in index:
                    raise GraphFormatError(f"edge endpoint {endpoint!r} is not a declared node")
            if rel not in rel_index:
                rel_index[rel] = len(relations)
                relations.append(rel)
            i, j = index[src], index[dst]
            if i > j:
                i, j = j, i
            canon.add((i, rel_index[rel], j))

        self._tokens = tuple(tokens)
        self._labels = tuple(labels)
        self._index = index
        self._relations = tuple(relations)
        self._rel_index = rel_index
        self._edge_set = frozenset(canon)
        self._edges = tuple(sorted(canon))

        nbrs_rel: list[dict[int, set[int]]] = [dict() for _ in tokens]
        for i, r, j in self._edges:
            nbrs_rel[i].setdefault(r, set()).add(j)
            nbrs_rel[j].setdefault(r, set()).add(i)
        self._nbrs_rel = [
            {r: np.array(sorted(s), dtype=np.intp) for r, s in sorted(d.items())}
            for d in nbrs_rel
        ]
        self._nbrs_all = [
            np.array(sorted(set().union(*d.values())) if d else [], dtype=np.intp)
            for d in nbrs_rel
        ]
        self._adj_cache: dict[int, np.ndarray] = {}

    # -- basic queries ---------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self._tokens)

    @property
    def n_edges(self) -> int:
        return len(self._edges)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    @property
    def relations(self) -> tuple[str, ...]:
        return self._relations

    @property
    def edges(self) -> tuple[tuple[int, int, int], ...]:
        """Canonical (src, relation, dst) integer triples, src <= dst, sorted."""
        return self._edges

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise KeyError(f"node {token!r} is not in the graph") from None

    def token(self, i: int) -> str:
        return self._tokens[i]

    def label(self, i: int) -> str:
        return self._labels[i]

    def relation_id(self, rel_token: str) -> int:
        try:
            return self._rel_index[rel_token]
        except KeyError:
            raise KeyError(f"relation {rel_token!r} is not in the graph") from None

    def relation_token(self, r: int) -> str:
        return self._relations[r]

    def has_edge(self, i: int, r: int, j: int) -> bool:
        if i > j:
            i, j = j, i
        return (i, r, j) in self._edge_set

    def neighbors(self, i: int, r: int) -> np.ndarray:
        """Sorted neighbor ids of node ``i`` under relation ``r``."""
        return self._nbrs_rel[i].get(r, np.empty(0, dtype=np.intp))

    def neighbors_all(self, i: int) -> np.ndarray:
        """Sorted unique neighbors of ``i`` across all relations."""
        return self._nbrs_all[i]

    def norm_adjacency(self, r: int) -> np.ndarray:
        """Dense row-normalised adjacency for relation ``r`` (cached).

        Row i holds 1/|N_i^r| at the columns in N_i^r; rows without
        neighbors are zero.
        """
        cached = self._adj_cache.get(r)
        if cached is None:
            n = self.n_nodes
            cached = np.zeros((n, n))
            for i in range(n):
                nb = self.neighbors(i, r)
                if nb.size:
                    cached[i, nb] = 1.0 / nb.size
            self._adj_cache[r] = cached
        return cached

    # -- structural equality ----------------------------------------------
    def _signature(self):
        nodes = frozenset(zip(self._tokens, self._labels))
        edges = frozenset(
            (self._tokens[i], self._relations[r], self._tokens[j]) for i, r, j in self._edges
        )
        return nodes, edges

    def __eq__(self, other):
        if not isinstance(other, HetGraph):
            return NotImplemented
        return self._signature() == other._signature()

    def __hash__(self):
        return hash(self._signature())

    def __repr__(self):
        return (f"HetGraph(nodes={self.n_nodes}, edges={self.n_edges}, "
                f"relations={len(self._relations)})")


@dataclass(frozen=True)
class SamplerConfig:
    """Random-walk extraction settings: w walks of length s per target."""

    walks_per_target: int = 5
    walk_length: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.walks_per_target < 1:
            raise ValueError("walks_per_target must be >= 1")
        if self.walk_length < 0:
            raise ValueError("walk_length must be >= 0")


@dataclass(frozen=True)
class TargetSet:
    """Ordered target genes, identified by node token."""

    genes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.genes)) != len(self.genes):
            raise ValueError("target set contains duplicate genes")
        if len(self.genes) < 2:
            raise ValueError("target set needs at least 2 genes")

    @property
    def p(self) -> int:
        return len(self.genes)

    @classmethod
    def for_graph(cls, g: HetGraph, genes) -> "TargetSet":
        genes = tuple(str(t) for t in genes)
        for tok in genes:
            i = g.index(tok)
            if g.label(i) != "Gene":
                raise ValueError(f"target {tok!r} has label {g.label(i)!r}, expected Gene")
        return cls(genes)

    def resolve(self, g: HetGraph) -> np.ndarray:
        """Dense node ids of the targets in ``g`` (raises if any is missing)."""
        return np.array([g.index(t) for t in self.genes], dtype=np.intp)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def load_graph(path) -> HetGraph:
    """Parse a graph file; nodes must be declared before edges that use them."""
    nodes: list[tuple[str, str]] = []
    edges: list[tuple[str, str, str]] = []
    declared: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            kind = fields[0]
            if kind == "N":
                if len(fields) != 3:
                    raise GraphFormatError(f"line {lineno}: node line needs 3 fields, got {len(fields)}")
                tok, label = fields[1], fields[2]
                if tok in declared:
                    raise GraphFormatError(f"line {lineno}: duplicate node id {tok!r}")
                if label not in NODE_LABELS:
                    raise GraphFormatError(f"line {lineno}: unknown node label {label!r}")
                declared.add(tok)
                nodes.append((tok, label))
            elif kind == "E":
                if len(fields) != 4:
                    raise GraphFormatError(f"line {lineno}: edge line needs 4 fields, got {len(fields)}")
                src, rel, dst = fields[1], fields[2], fields[3]
                for endpoint in (src, dst):
                    if endpoint not in declared:
                        raise GraphFormatError(
                            f"line {lineno}: edge references undeclared node {endpoint!r}"
                        )
                edges.append((src, rel, dst))
            else:
                raise GraphFormatError(f"line {lineno}: unknown record type {kind!r}")
    return HetGraph(nodes, edges)


def save_graph(g: HetGraph, path) -> None:
    """Write the canonical text form (sorted nodes, sorted canonical edges)."""
    node_lines = sorted(zip(g.tokens, (g.label(i) for i in range(g.n_nodes))))
    edge_lines = []
    for i, r, j in g.edges:
        a, b = sorted((g.token(i), g.token(j)))
        edge_lines.append((a, g.relation_token(r), b))
    edge_lines.sort()
    with open(path, "w", encoding="utf-8") as fh:
        for tok, label in node_lines:
            fh.write(f"N\t{tok}\t{label}\n")
        for a, rel, b in edge_lines:
            fh.write(f"E\t{a}\t{rel}\t{b}\n")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def random_walk_subgraph(g: HetGraph, targets: TargetSet, cfg: SamplerConfig) -> HetGraph:
    """Node-induced subgraph visited by seeded random walks from each target.

    For each target token ``t`` and walk index ``k`` a private stream
    ``("walk", t, k)`` is drawn from ``cfg.seed``.  A walk performs
    ``cfg.walk_length`` steps; each step picks uniformly (one ``integers``
    draw) among the sorted unique neighbors of the current node across all
    relations, and stops early at a node with no neighbors.  The returned
    graph contains every visited node plus all targets, and every edge of
    ``g`` with both endpoints in that set.  Node order follows the parent
    graph's id order.
    """
    target_ids = targets.resolve(g)
    visited: set[int] = set(int(i) for i in target_ids)
    for tok, start in zip(targets.genes, target_ids):
        for k in range(cfg.walks_per_target):
            rng = stream(cfg.seed, "walk", tok, k)
            node = int(start)
            for _ in range(cfg.walk_length):
                nb = g.neighbors_all(node)
                if nb.size == 0:
                    break
                node = int(nb[rng.integers(nb.size)])
                visited.add(node)
    keep = sorted(visited)
    keep_set = set(keep)
    nodes = [(g.token(i), g.label(i)) for i in keep]
    edges = [
        (g.token(i), g.relation_token(r), g.token(j))
        for i, r, j in g.edges
        if i in keep_set and j in keep_set
    ]
    return HetGraph(nodes, edges)


def sample_negative_edges(g: HetGraph, positives, seed: int) -> list[tuple[int, int, int]]:
    """One corrupted counterpart per positive edge.

    For positive index ``idx`` the stream ``("neg", idx)`` drives attempts:
    each attempt draws a side (0 = src, 1 = dst, probability 1/2 each) and a
    replacement node uniformly from all nodes.  Replacements that collapse
    the pair onto a single node are discarded (a self-pair is a single
    knockdown, not an edge), as are corruptions already present in the
    graph.  After 100 failed attempts the relation is considered saturated.
    """
    out: list[tuple[int, int, int]] = []
    n = g.n_nodes
    for idx, (s, r, d) in enumerate(positives):
        s, d = (d, s) if s > d else (s, d)
        if (s, r, d) not in g._edge_set:
            raise ValueError(f"positive #{idx} ({s}, {r}, {d}) is not an edge of the graph")
        rng = stream(seed, "neg", idx)
        for _ in range(_NEG_RETRY_BUDGET):
            side = int(rng.integers(2))
            repl = int(rng.integers(n))
            cand = (repl, r, d) if side == 0 else (s, r, repl)
            if cand[0] == cand[2]:
                continue
            a, b = (cand[2], cand[0]) if cand[0] > cand[2] else (cand[0], cand[2])
            if (a, r, b) not in g._edge_set:
                out.append((a, r, b))
                break
        else:
            raise NegativeSamplingError(
                f"could not corrupt positive #{idx} within {_NEG_RETRY_BUDGET} attempts: "
                f"relation {g.relation_token(r)!r} saturates the node pairs"
            )
    return out
