import numpy as np
import pytest

from tests.helpers import SCENARIOS
from workloads.graph import (
    CsrGraph,
    attribute_records,
    common_neighbors,
    common_neighbors_oracle,
    host_common_neighbors,
    place_graph,
    reachable,
    reachable_oracle,
    traverse,
)

PATH = CsrGraph.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4)])


@pytest.fixture
def ring():
    return CsrGraph.load(SCENARIOS / "data" / "ring_chords.edges")


def test_from_edges_drops_self_loops_and_duplicates():
    graph = CsrGraph.from_edges(3, [(0, 1), (1, 0), (1, 1), (1, 2)])
    assert graph.neighbors(0).tolist() == [1]
    assert graph.neighbors(1).tolist() == [0, 2]
    assert graph.row_offsets.tolist() == [0, 1, 3, 4]

    directed = CsrGraph.from_edges(3, [(0, 1)], symmetric=False)
    assert directed.neighbors(1).tolist() == []


def test_edge_lists():
    graph = CsrGraph.from_edge_list("# tiny\n0 1\n\n1 2  # tail\n")
    assert graph.n_vertices == 3
    with pytest.raises(ValueError, match="line 1"):
        CsrGraph.from_edge_list("0 1 2")


def test_malformed_csr_is_rejected():
    with pytest.raises(ValueError):
        CsrGraph(2, np.array([0, 2, 1], dtype=np.uint32), np.array([1], dtype=np.uint32))
    with pytest.raises(ValueError):
        CsrGraph(2, np.array([0, 1, 1], dtype=np.uint32), np.array([5], dtype=np.uint32))


def test_random_graphs_respect_the_degree_bound():
    graph = CsrGraph.random(200, 6, np.random.default_rng(1))
    degrees = np.diff(graph.row_offsets.astype(np.int64))
    assert degrees.max() <= 6
    assert len(graph.col_indices) > 0


def test_oracles_exclude_the_source():
    assert reachable_oracle(PATH, 0, 1) == {1}
    assert reachable_oracle(PATH, 0, 2) == {1, 2}
    assert reachable_oracle(PATH, 2, 3) == {0, 1, 3, 4}
    assert common_neighbors_oracle(PATH, 0, 4, 2) == [2]
    assert common_neighbors_oracle(PATH, 0, 4, 1) == []


@pytest.mark.parametrize("prefetch", [False, True])
def test_reachable_matches_the_oracle(system, ring, prefetch):
    app = system.create_app("a")
    layout = place_graph(app, ring, "n0")
    _, found = system.execute(app, reachable(app, layout, 0, 2, prefetch))
    assert found == reachable_oracle(ring, 0, 2)


def test_common_neighbors_with_attributes(system, ring):
    app = system.create_app("a")
    layout = place_graph(app, ring, "n0", with_attributes=True, seed=5)
    _, result = system.execute(app, common_neighbors(app, layout, 0, 6, 3, with_attributes=True))
    expected = common_neighbors_oracle(ring, 0, 6, 3)
    assert expected
    assert result.vertices == expected
    assert np.array_equal(result.attributes, attribute_records(ring, 5)[expected])
    assert result.elapsed_ns > 0


def test_host_traversal_agrees(system, ring):
    app = system.create_app("a")
    layout = place_graph(app, ring, "n0")
    _, result = system.execute(app, host_common_neighbors(app, layout, 0, 6, 2))
    assert result.vertices == common_neighbors_oracle(ring, 0, 6, 2)


def test_hop_count_is_bounded(system, ring):
    app = system.create_app("a")
    layout = place_graph(app, ring, "n0")
    with pytest.raises(ValueError):
        next(traverse(app, layout, None, 0, 4))
    with pytest.raises(ValueError):
        next(traverse(app, layout, None, 12, 1))
