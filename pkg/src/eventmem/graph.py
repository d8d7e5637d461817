"""Heterogeneous session/EDU/argument graph and Personalized PageRank."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptySeed, EventMemError, ValidationError
from .model import ArgumentRecord, Conversation, Edu
from .vectors import VectorStore

logger = logging.getLogger(__name__)

NODE_KINDS = ("session", "edu", "arg")
EDGE_KINDS = ("sess-edu", "edu-arg", "syn")
_EDGE_ENDPOINTS = {"sess-edu": ("session", "edu"), "edu-arg": ("edu", "arg"), "syn": ("arg", "arg")}


class FrozenGraphError(EventMemError):
    pass


class MemoryGraph:
    """Undirected typed graph over session, EDU and argument nodes.

    Nodes are addressed by position; ``node_index(kind, id)`` maps back from
    payload ids. Edges are stored per kind as sorted ``(u, v)`` pairs with
    ``u < v``. Call :meth:`freeze` before running PPR.
    """

    def __init__(self):
        self.nodes: list[tuple[str, str]] = []
        self._index: dict[tuple[str, str], int] = {}
        self._edges: dict[str, set[tuple[int, int]]] = {k: set() for k in EDGE_KINDS}
        self.frozen = False
        self._adj: sp.csr_matrix | None = None

    def add_node(self, kind: str, id: str) -> int:
        self._check_mutable()
        if kind not in NODE_KINDS:
            raise ValidationError(f"unknown node kind {kind!r}")
        key = (kind, id)
        if key not in self._index:
            self._index[key] = len(self.nodes)
            self.nodes.append(key)
        return self._index[key]

    def add_edge(self, kind: str, u: int, v: int) -> bool:
        """Add an undirected edge; returns False when it already existed."""
        self._check_mutable()
        if kind not in EDGE_KINDS:
            raise ValidationError(f"unknown edge kind {kind!r}")
        if u == v:
            raise ValidationError("self-loops are not allowed")
        want = _EDGE_ENDPOINTS[kind]
        got = (self.nodes[u][0], self.nodes[v][0])
        if got != want and got[::-1] != want:
            raise ValidationError(f"{kind} edge cannot join {got[0]} and {got[1]} nodes")
        pair = (min(u, v), max(u, v))
        if pair in self._edges[kind]:
            return False
        self._edges[kind].add(pair)
        return True

    def _check_mutable(self):
        if self.frozen:
            raise FrozenGraphError("graph is frozen")

    def node_index(self, kind: str, id: str) -> int:
        return self._index[(kind, id)]

    def has_node(self, kind: str, id: str) -> bool:
        return (kind, id) in self._index

    def nodes_of(self, kind: str) -> list[int]:
        return [i for i, (k, _) in enumerate(self.nodes) if k == kind]

    def edges(self, kind: str) -> list[tuple[int, int]]:
        return sorted(self._edges[kind])

    def num_nodes(self, kind: str | None = None) -> int:
        return len(self.nodes) if kind is None else sum(1 for k, _ in self.nodes if k == kind)

    def num_edges(self, kind: str | None = None) -> int:
        if kind is None:
            return sum(len(e) for e in self._edges.values())
        return len(self._edges[kind])

    def freeze(self) -> "MemoryGraph":
        if not self.frozen:
            n = len(self.nodes)
            pairs = [p for k in EDGE_KINDS for p in self._edges[k]]
            if pairs:
                u, v = np.array(pairs, dtype=np.int64).T
                rows, cols = np.concatenate([u, v]), np.concatenate([v, u])
            else:
                rows = cols = np.empty(0, dtype=np.int64)
            self._adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            self.frozen = True
        return self

    @property
    def adjacency(self) -> sp.csr_matrix:
        if not self.frozen:
            raise FrozenGraphError("freeze the graph first")
        return self._adj

    def degrees(self) -> np.ndarray:
        if self.frozen:
            return np.asarray(self._adj.sum(axis=1)).ravel()
        deg = np.zeros(len(self.nodes))
        for k in EDGE_KINDS:
            for u, v in self._edges[k]:
                deg[u] += 1
                deg[v] += 1
        return deg

    def neighbors(self, node: int) -> list[int]:
        adj = self.adjacency
        return sorted(adj.indices[adj.indptr[node]:adj.indptr[node + 1]].tolist())

    def __eq__(self, other) -> bool:
        return (isinstance(other, MemoryGraph) and self.nodes == other.nodes
                and all(self._edges[k] == other._edges[k] for k in EDGE_KINDS))


def build_graph(conversation: Conversation, edus: Sequence[Edu], arguments: Sequence[ArgumentRecord]) -> MemoryGraph:
    """Session, EDU and argument nodes with session-EDU and EDU-argument edges.

    The graph is returned unfrozen so synonym edges can still be added.
    """
    g = MemoryGraph()
    for sess in conversation.sessions:
        g.add_node("session", sess.session_id)
    for edu in edus:
        e = g.add_node("edu", edu.edu_id)
        g.add_edge("sess-edu", g.node_index("session", edu.session_id), e)
    by_key = {}
    for rec in arguments:
        by_key[rec.norm_key] = g.add_node("arg", rec.arg_id)
    for rec in arguments:
        a = by_key[rec.norm_key]
        for edu_id in rec.edu_ids:
            g.add_edge("edu-arg", g.node_index("edu", edu_id), a)
    return g


def synonym_nominations(ids: Sequence[str], matrix: np.ndarray, delta: float, syn_cap: int) -> dict[str, list[str]]:
    """For each argument, its up-to-``syn_cap`` most similar others with cosine >= delta."""
    n = len(ids)
    out: dict[str, list[str]] = {}
    if n == 0:
        return out
    block = 1024
    for start in range(0, n, block):
        sims = matrix[start:start + block] @ matrix.T
        for r in range(sims.shape[0]):
            i = start + r
            row = sims[r]
            cand = np.flatnonzero(row >= delta)
            cand = cand[cand != i]
            ranked = sorted(cand.tolist(), key=lambda j: (-row[j], ids[j]))[:syn_cap]
            out[ids[i]] = [ids[j] for j in ranked]
    return out


def add_synonym_edges(graph: MemoryGraph, store: VectorStore, delta: float = 0.9, syn_cap: int = 100) -> MemoryGraph:
    """Link argument nodes whose embeddings have cosine >= ``delta``.

    Each argument nominates at most ``syn_cap`` of its most similar peers; an
    edge exists when either endpoint nominated it.
    """
    arg_ids = [id_ for kind, id_ in graph.nodes if kind == "arg"]
    if not arg_ids:
        return graph
    matrix = np.vstack([store.get("arg", a) for a in arg_ids]).astype(np.float64)
    for a, nominated in synonym_nominations(arg_ids, matrix, delta, syn_cap).items():
        u = graph.node_index("arg", a)
        for b in nominated:
            graph.add_edge("syn", u, graph.node_index("arg", b))
    return graph


@dataclass
class SeedVector:
    """Sparse non-negative personalization weights keyed by node index."""

    weights: dict[int, float] = field(default_factory=dict)
    normalized: bool = False

    def __post_init__(self):
        for node, w in self.weights.items():
            if not np.isfinite(w) or w < 0:
                raise ValidationError(f"seed weight for node {node} must be finite and >= 0, got {w}")

    def total(self) -> float:
        return float(sum(self.weights.values()))

    def normalize(self) -> "SeedVector":
        total = self.total()
        if total <= 0:
            raise EmptySeed("seed vector has no positive weight")
        return SeedVector({n: w / total for n, w in self.weights.items() if w > 0}, normalized=True)

    def dense(self, n: int) -> np.ndarray:
        s = np.zeros(n)
        for node, w in self.weights.items():
            s[node] = w
        return s


@dataclass
class PPRResult:
    scores: np.ndarray
    iterations: int
    converged: bool
    delta_l1: float

    def top(self, graph: MemoryGraph, n: int = 10) -> list[dict]:
        order = sorted(range(len(self.scores)), key=lambda i: (-self.scores[i], i))[:n]
        return [{"kind": graph.nodes[i][0], "id": graph.nodes[i][1], "score": float(self.scores[i])}
                for i in order if self.scores[i] > 0]


def ppr(graph: MemoryGraph, seeds: SeedVector | Mapping[int, float], alpha: float = 0.5,
        tol: float = 1e-8, max_iters: int = 128) -> PPRResult:
    """Personalized PageRank by power iteration.

    Iterates ``pi <- (1 - alpha) * s + alpha * T^T pi`` from ``pi = s``, where
    each node spreads its mass uniformly over its neighbors and nodes without
    neighbors send theirs back to ``s``. Stops when the L1 change drops to
    ``tol`` or after ``max_iters`` steps (a warning, not an error).
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError("alpha must lie strictly inside (0, 1)")
    if not isinstance(seeds, SeedVector):
        seeds = SeedVector(dict(seeds))
    if not seeds.weights or seeds.total() <= 0:
        raise EmptySeed("PPR needs at least one positive seed")
    if not seeds.normalized:
        seeds = seeds.normalize()
    for node in seeds.weights:
        if graph.nodes[node][0] == "session":
            raise ValidationError("seeds may only sit on EDU or argument nodes")
    adj = graph.freeze().adjacency
    n = len(graph.nodes)
    s = seeds.dense(n)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    dangling = deg == 0
    inv_deg = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, deg))
    adj_t = adj.T.tocsr()

    pi = s.copy()
    change = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        nxt = (1.0 - alpha) * s + alpha * (adj_t @ (pi * inv_deg)) + alpha * pi[dangling].sum() * s
        change = float(np.abs(nxt - pi).sum())
        pi = nxt
        if change <= tol:
            break
    converged = change <= tol
    if not converged:
        logger.warning("PPR did not converge in %d iterations (L1 change %.3g)", max_iters, change)
    return PPRResult(pi, it, converged, change)


def select_top_edus(scores: PPRResult | np.ndarray, graph: MemoryGraph, final_top_k: int = 10) -> list[tuple[str, float]]:
    """Highest-scoring EDU nodes, score-descending, ties by EDU id."""
    pi = scores.scores if isinstance(scores, PPRResult) else np.asarray(scores)
    edus = [(id_, float(pi[i])) for i, (kind, id_) in enumerate(graph.nodes) if kind == "edu"]
    edus.sort(key=lambda p: (-p[1], p[0]))
    return edus[:final_top_k]


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else 0.0


def _words(text: str) -> int:
    return len(text.split())


def edu_speaker(edu: Edu, conversation: Conversation) -> str:
    """Speaker credited with an EDU: the most frequent speaker among its source turns."""
    try:
        sess = conversation.session(edu.session_id)
    except KeyError:
        return "unknown"
    speakers = [t.speaker for t in sess.turns if t.index in edu.src]
    if not speakers:
        return "unknown"
    counts = Counter(speakers)
    best = max(counts.values())
    return next(s for s in speakers if counts[s] == best)


def graph_stats(graph: MemoryGraph, edus: Iterable[Edu] = (), conversation: Conversation | None = None) -> dict:
    """Node/edge counts, mean degree per node kind, and per-speaker EDU figures."""
    deg = graph.degrees()
    stats: dict = {
        "sessions": graph.num_nodes("session"),
        "edus": graph.num_nodes("edu"),
        "args": graph.num_nodes("arg"),
        "nodes": graph.num_nodes(),
        "sess-edu": graph.num_edges("sess-edu"),
        "edu-arg": graph.num_edges("edu-arg"),
        "syn": graph.num_edges("syn"),
        "edges": graph.num_edges(),
    }
    for kind in NODE_KINDS:
        idx = graph.nodes_of(kind)
        stats[f"avg_{kind}_degree"] = _mean(deg[idx]) if idx else 0.0
    if conversation is not None:
        sessions = conversation.sessions
        stats["avg_turns_per_session"] = _mean(len(s.turns) for s in sessions)
        stats["avg_session_words"] = _mean(sum(_words(t.text) for t in s.turns) for s in sessions)
    edus = list(edus)
    per_speaker: dict[str, dict] = {}
    for edu in edus:
        who = edu_speaker(edu, conversation) if conversation is not None else "unknown"
        slot = per_speaker.setdefault(who, {"edus": 0, "chunks": 0, "_edu_words": [], "_chunk_words": []})
        if edu.kind == "chunk":
            slot["chunks"] += 1
            slot["_chunk_words"].append(_words(edu.expanded_text))
        else:
            slot["edus"] += 1
            slot["_edu_words"].append(_words(edu.text))
    for slot in per_speaker.values():
        slot["avg_edu_words"] = _mean(slot.pop("_edu_words"))
        slot["avg_chunk_words"] = _mean(slot.pop("_chunk_words"))
    stats["speakers"] = dict(sorted(per_speaker.items()))
    stats["chunks"] = sum(1 for e in edus if e.kind == "chunk")
    stats["avg_chunk_summary_words"] = _mean(_words(e.text) for e in edus if e.kind == "chunk")
    return stats
