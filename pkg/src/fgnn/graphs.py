"""Weighted directed item graphs at three scopes.

A session graph covers one session: a directed edge (u, v) weighted by how
often v was clicked immediately after u, plus a weight-1 self-loop wherever a
node has no explicit one (the attention layers need every node in its own
neighbourhood).  The global graph merges all training sessions by summing
those pair counts.  A cross-session subgraph starts from one session's nodes
("core") and expands it with weighted neighbour sampling on the global graph
for a configured number of hops; its edges are the full induced global-graph
edges among the included nodes, so even a 0-hop subgraph carries edge weights
accumulated across other sessions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedInputError, MissingNodeError


@dataclass
class SamplingConfig:
    """Subgraph expansion knobs: hops and the per-node neighbour cap."""

    n_hops: int = 1
    sample_cap: int = 5


@dataclass
class SessionGraph:
    """Nodes in first-appearance order; edges map (src, dst) -> count."""

    nodes: list[int]
    edges: dict[tuple[int, int], int]


def _pair_counts(items) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for a, b in zip(items[:-1], items[1:]):
        key = (int(a), int(b))
        counts[key] = counts.get(key, 0) + 1
    return counts


def _distinct_in_order(items) -> list[int]:
    seen = set()
    out = []
    for it in items:
        it = int(it)
        if it not in seen:
            seen.add(it)
            out.append(it)
    return out


def build_session_graph(items) -> SessionGraph:
    """Convert a click sequence into its weighted directed graph."""
    if len(items) == 0:
        raise MissingNodeError("build_session_graph: empty session")
    nodes = _distinct_in_order(items)
    edges = _pair_counts(items)
    for v in nodes:
        if (v, v) not in edges:
            edges[(v, v)] = 1
    return SessionGraph(nodes=nodes, edges=edges)


class GlobalGraph:
    """Union of all training session graphs with summed edge weights."""

    def __init__(self, edges: dict[tuple[int, int], int], n_nodes: int):
        self.edges = edges
        self.n_nodes = n_nodes
        self._out: dict[int, list[tuple[int, int]]] = {}
        self._in: dict[int, list[tuple[int, int]]] = {}
        for (u, v), w in edges.items():
            self._out.setdefault(u, []).append((v, w))
            self._in.setdefault(v, []).append((u, w))
        for adj in (self._out, self._in):
            for lst in adj.values():
                lst.sort()
        # sampling candidates per node: in- and out-neighbours merged,
        # self excluded, weight = sum over both directions
        self._expand: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def has_node(self, v: int) -> bool:
        return v in self._out or v in self._in

    def out_edges(self, v: int) -> list[tuple[int, int]]:
        return self._out.get(v, [])

    def in_edges(self, v: int) -> list[tuple[int, int]]:
        return self._in.get(v, [])

    def expansion_candidates(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        cached = self._expand.get(v)
        if cached is not None:
            return cached
        merged: dict[int, int] = {}
        for u, w in self._out.get(v, []):
            if u != v:
                merged[u] = merged.get(u, 0) + w
        for u, w in self._in.get(v, []):
            if u != v:
                merged[u] = merged.get(u, 0) + w
        nbrs = np.array(sorted(merged), dtype=np.int64)
        weights = np.array([merged[int(u)] for u in nbrs], dtype=np.float64)
        self._expand[v] = (nbrs, weights)
        return nbrs, weights

    def save(self, path) -> None:
        """Node count followed by (src, dst, weight) triplets sorted by (src, dst)."""
        triplets = sorted((u, v, w) for (u, v), w in self.edges.items())
        payload = {"nodes": self.n_nodes, "edges": triplets}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GlobalGraph":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        try:
            n_nodes = int(payload["nodes"])
            edges = {(int(u), int(v)): int(w) for u, v, w in payload["edges"]}
        except (KeyError, TypeError, ValueError) as err:
            raise MalformedInputError(f"global graph file {path}: {err}")
        return cls(edges, n_nodes)


def build_global_graph(sessions) -> GlobalGraph:
    """Merge training sessions: summed pair counts, self-loops at >= 1.

    A node's self-loop weight is the summed count of its explicit
    consecutive repeats, floored at 1, so a single-session global graph is
    identical to that session's graph.
    """
    edges: dict[tuple[int, int], int] = {}
    nodes: set[int] = set()
    for items in sessions:
        nodes.update(int(i) for i in items)
        for key, c in _pair_counts(items).items():
            edges[key] = edges.get(key, 0) + c
    for v in nodes:
        if (v, v) not in edges:
            edges[(v, v)] = 1
    return GlobalGraph(edges, n_nodes=len(nodes))


@dataclass
class BCSGraph:
    """A session core expanded with sampled neighbours up to ``hop`` hops.

    ``nodes`` lists core nodes first (session first-appearance order) then
    sampled nodes in insertion order.  ``edges`` are the global-graph edges
    induced on ``nodes``, as (src, dst, weight) arrays sorted by (src, dst)
    in item-id terms.
    """

    core: list[int]
    nodes: list[int]
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_weight: np.ndarray
    hop: int
    core_mask: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def _weighted_sample(nbrs: np.ndarray, weights: np.ndarray, k: int, rng) -> list[int]:
    """k draws without replacement, each proportional to remaining weight."""
    w = weights.copy()
    chosen = []
    for _ in range(k):
        cum = np.cumsum(w)
        i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        i = min(i, w.size - 1)
        chosen.append(int(nbrs[i]))
        w[i] = 0.0
    return chosen


def sample_bcs(
    global_graph: GlobalGraph,
    session_items,
    n_hops: int,
    sample_cap: int = 5,
    rng_seed: int = 0,
) -> BCSGraph:
    """Expand a session's node set over the global graph.

    Per hop, each frontier node draws up to ``sample_cap`` of its global
    neighbours (both directions) without replacement, proportionally to the
    connecting edge weight.  Draws come from a child random stream keyed by
    (seed, hop, node), so runs with the same seed are identical and the
    ``n_hops`` node set is a subset of the ``n_hops + 1`` one.
    """
    core = _distinct_in_order(session_items)
    if not core:
        raise MissingNodeError("sample_bcs: empty session")
    for v in core:
        if not global_graph.has_node(v):
            raise MissingNodeError(f"sample_bcs: item {v} not in the global graph")

    nodes = list(core)
    node_set = set(core)
    frontier = core
    for hop in range(1, n_hops + 1):
        added = []
        for v in sorted(frontier):
            nbrs, weights = global_graph.expansion_candidates(v)
            if nbrs.size == 0:
                continue
            if nbrs.size <= sample_cap:
                # the cap is not binding: every candidate gets included and
                # no random stream needs to be consumed
                chosen = [int(u) for u in nbrs]
            else:
                rng = np.random.default_rng([rng_seed, hop, v])
                chosen = _weighted_sample(nbrs, weights, sample_cap, rng)
            for u in chosen:
                if u not in node_set:
                    node_set.add(u)
                    nodes.append(u)
                    added.append(u)
        frontier = added
        if not frontier:
            break

    src, dst, wts = [], [], []
    for v in sorted(node_set):
        for u, w in global_graph.out_edges(v):
            if u in node_set:
                src.append(v)
                dst.append(u)
                wts.append(w)
    core_set = set(core)
    return BCSGraph(
        core=core,
        nodes=nodes,
        edge_src=np.array(src, dtype=np.int64),
        edge_dst=np.array(dst, dtype=np.int64),
        edge_weight=np.array(wts, dtype=np.float64),
        hop=n_hops,
        core_mask=np.array([v in core_set for v in nodes], dtype=bool),
    )
