"""Segment proximity graph used for neighbourhood feature fusion."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layout import Segment

DISTANCE_THRESHOLD_NM = 250.0


@dataclass(frozen=True)
class SegmentGraph:
    node_ids: tuple[int, ...]
    edges: frozenset[tuple[int, int]]  # (u, v) with u < v, positions in node_ids

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in self.node_ids]
        for u, v in sorted(self.edges):
            nbrs[u].append(v)
            nbrs[v].append(u)
        return nbrs

    def mean_matrix(self) -> np.ndarray:
        """Row-normalised adjacency; an isolated node gets an all-zero row."""
        a = np.zeros((self.n_nodes, self.n_nodes))
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        deg = a.sum(axis=1, keepdims=True)
        return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


def build_graph(segments: list[Segment], threshold_nm: float = DISTANCE_THRESHOLD_NM) -> SegmentGraph:
    """Connect segments whose control points are strictly closer than the threshold."""
    pts = np.array([s.control_point for s in segments], dtype=float).reshape(-1, 2)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    close = d2 < threshold_nm**2
    u, v = np.nonzero(np.triu(close, k=1))
    return SegmentGraph(tuple(s.id for s in segments),
                        frozenset(zip(u.tolist(), v.tolist())))


def dump_edges(graph: SegmentGraph, path) -> None:
    lines = [f"{graph.node_ids[u]} {graph.node_ids[v]}" for u, v in sorted(graph.edges)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_edges(path, node_ids) -> SegmentGraph:
    pos = {nid: i for i, nid in enumerate(node_ids)}
    edges = set()
    for line in Path(path).read_text().splitlines():
        if line.strip():
            a, b = (pos[int(t)] for t in line.split())
            edges.add((min(a, b), max(a, b)))
    return SegmentGraph(tuple(node_ids), frozenset(edges))
