import math

import numpy as np
from hypothesis import given, strategies as st

from opcrl.graph import build_graph, dump_edges, load_edges
from opcrl.layout import Segment, fragment

from conftest import via_layout


def seg_at(i, x, y):
    return Segment(i, 0, "v", (x, y - 1), (x, y + 1), (1, 0), None)


def brute_edges(segments, threshold=250.0):
    out = set()
    for i, a in enumerate(segments):
        for j, b in enumerate(segments):
            if i < j and math.dist(a.control_point, b.control_point) < threshold:
                out.add((i, j))
    return out


def test_threshold_is_strict():
    assert build_graph([seg_at(0, 0, 0), seg_at(1, 0, 249)]).edges == {(0, 1)}
    assert build_graph([seg_at(0, 0, 0), seg_at(1, 0, 250)]).edges == frozenset()


def test_single_segment_has_no_edges():
    g = build_graph([seg_at(0, 5, 5)])
    assert g.n_nodes == 1 and not g.edges
    assert g.mean_matrix().tolist() == [[0.0]]


@given(st.lists(st.tuples(st.integers(0, 600), st.integers(0, 600)), min_size=1, max_size=25))
def test_matches_brute_force_and_is_symmetric(points):
    segs = [seg_at(i, x, y) for i, (x, y) in enumerate(points)]
    g = build_graph(segs)
    assert set(g.edges) == brute_edges(segs)
    assert all(u < v for u, v in g.edges)
    a = g.mean_matrix()
    assert np.allclose((a > 0), (a > 0).T)
    deg = (a > 0).sum(axis=1)
    assert np.allclose(a.sum(axis=1), (deg > 0).astype(float))


@given(st.permutations(range(8)))
def test_invariant_under_input_reordering(perm):
    points = [(0, 0), (100, 0), (300, 0), (0, 200), (260, 260), (500, 500), (510, 520), (900, 0)]
    segs = [seg_at(i, *p) for i, p in enumerate(points)]
    base = {(segs[u].id, segs[v].id) for u, v in build_graph(segs).edges}
    shuffled = [segs[k] for k in perm]
    g = build_graph(shuffled)
    got = {tuple(sorted((shuffled[u].id, shuffled[v].id))) for u, v in g.edges}
    assert got == base


def test_edge_dump_round_trip(tmp_path):
    segs = fragment(via_layout((100, 100), (300, 100)))
    g = build_graph(segs)
    dump_edges(g, tmp_path / "e.txt")
    assert load_edges(tmp_path / "e.txt", g.node_ids) == g
