"""
n-hop graph traversal over a CSR graph in far memory.

The channel program walks the graph next to the memory and streams the
reached vertex ids to the host; the host intersects the two neighbour
sets. Neighbour sets never include the source vertex itself.

Edge-list input is plain text, one `u v` pair per line, `#` comments.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from sim.address_space import Segment
from sim.errors import BadLength, ConfigError
from sim.host import HostApplication, MccHandle
from sim.interconnect import LINE_SIZE, CacheLine
from workloads.runtime import program, read_id_stream, together

logger = logging.getLogger(__name__)

MAX_VERTICES = 32768
MAX_HOPS = 3
ATTRIBUTE_BYTES = 64
PREFETCH = 0x1


def _padded(nbytes: int) -> int:
    return max(LINE_SIZE, -(-nbytes // LINE_SIZE) * LINE_SIZE)


@dataclass(frozen=True)
class CsrGraph:
    n_vertices: int
    row_offsets: np.ndarray
    col_indices: np.ndarray

    def __post_init__(self):
        offsets, cols = self.row_offsets, self.col_indices
        if len(offsets) != self.n_vertices + 1 or offsets[0] != 0 or offsets[-1] != len(cols):
            raise ValueError("row offsets do not describe the column array")
        if np.any(np.diff(offsets.astype(np.int64)) < 0):
            raise ValueError("row offsets must be non-decreasing")
        if len(cols) and int(cols.max()) >= self.n_vertices:
            raise ValueError("column index out of range")

    @classmethod
    def from_edges(cls, n_vertices: int, edges, symmetric: bool = True) -> "CsrGraph":
        pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if symmetric:
            pairs = np.concatenate([pairs, pairs[:, ::-1]])
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        if len(pairs):
            pairs = np.unique(pairs, axis=0)
        counts = np.bincount(pairs[:, 0], minlength=n_vertices)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.uint32)
        return cls(n_vertices, offsets, pairs[:, 1].astype(np.uint32))

    @classmethod
    def from_edge_list(cls, text: str, n_vertices: int | None = None, symmetric: bool = True) -> "CsrGraph":
        edges = []
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {number}: expected `u v`, got {raw!r}")
            edges.append((int(parts[0]), int(parts[1])))
        highest = max((max(e) for e in edges), default=-1)
        return cls.from_edges(n_vertices if n_vertices is not None else highest + 1, edges, symmetric)

    @classmethod
    def load(cls, path: str | Path, symmetric: bool = True) -> "CsrGraph":
        try:
            return cls.from_edge_list(Path(path).read_text(), symmetric=symmetric)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    @classmethod
    def random(cls, n_vertices: int, max_degree: int, rng: np.random.Generator,
               edges_per_vertex: float | None = None) -> "CsrGraph":
        """Symmetric random graph whose degrees never exceed `max_degree`."""
        target = int(n_vertices * (edges_per_vertex if edges_per_vertex is not None else max_degree / 2))
        degree = np.zeros(n_vertices, dtype=np.int64)
        seen: set[tuple[int, int]] = set()
        candidates = rng.integers(0, n_vertices, size=(target * 2, 2))
        for u, v in candidates:
            if len(seen) >= target:
                break
            u, v = int(u), int(v)
            key = (min(u, v), max(u, v))
            if u == v or key in seen or degree[u] >= max_degree or degree[v] >= max_degree:
                continue
            seen.add(key)
            degree[u] += 1
            degree[v] += 1
        return cls.from_edges(n_vertices, sorted(seen))

    def neighbors(self, vertex: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[vertex]:self.row_offsets[vertex + 1]]

    def to_scipy(self) -> csr_matrix:
        data = np.ones(len(self.col_indices), dtype=np.int8)
        return csr_matrix((data, self.col_indices, self.row_offsets), shape=(self.n_vertices, self.n_vertices))


# ── oracle ───────────────────────────────────────────────────────────────────

def reachable_oracle(graph: CsrGraph, source: int, n_hops: int) -> set[int]:
    distances = dijkstra(graph.to_scipy(), directed=True, indices=source, unweighted=True, limit=n_hops)
    return {int(v) for v in np.flatnonzero(np.isfinite(distances)) if v != source}


def common_neighbors_oracle(graph: CsrGraph, source_a: int, source_b: int, n_hops: int) -> list[int]:
    return sorted(reachable_oracle(graph, source_a, n_hops) & reachable_oracle(graph, source_b, n_hops))


# ── far-memory layout ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GraphLayout:
    graph: CsrGraph
    node_id: str
    offsets: Segment
    columns: Segment
    attributes: Segment | None = None

    @property
    def offsets_va(self) -> int:
        return self.offsets.base_va

    @property
    def columns_va(self) -> int:
        return self.columns.base_va


def attribute_records(graph: CsrGraph, seed: int = 0) -> np.ndarray:
    """One 64-byte record per vertex; word 0 is the vertex id."""
    records = np.random.default_rng(seed).integers(0, 2 ** 32, size=(graph.n_vertices, 16), dtype=np.uint32)
    records[:, 0] = np.arange(graph.n_vertices, dtype=np.uint32)
    return records


def place_graph(app: HostApplication, graph: CsrGraph, node_id: str, with_attributes: bool = False,
                seed: int = 0) -> GraphLayout:
    if graph.n_vertices > MAX_VERTICES:
        raise BadLength(f"{graph.n_vertices} vertices; traversal supports at most {MAX_VERTICES}")
    offsets = app.map_far(node_id, _padded(4 * (graph.n_vertices + 1)))
    columns = app.map_far(node_id, _padded(4 * len(graph.col_indices)))
    app.populate(offsets.base_va, graph.row_offsets.astype("<u4").tobytes())
    app.populate(columns.base_va, graph.col_indices.astype("<u4").tobytes())
    attributes = None
    if with_attributes:
        attributes = app.map_far(node_id, graph.n_vertices * ATTRIBUTE_BYTES)
        app.populate(attributes.base_va, attribute_records(graph, seed).astype("<u4").tobytes())
    return GraphLayout(graph, node_id, offsets, columns, attributes)


# ── drivers ──────────────────────────────────────────────────────────────────

@dataclass
class Traverser:
    """One MCC loaded with the traversal program, plus its BFS queue."""
    handle: MccHandle
    queue: Segment


def prepare_traverser(app: HostApplication, layout: GraphLayout):
    handle = app.mcc_create(layout.node_id)
    queue = app.map_far(layout.node_id, _padded(4 * layout.graph.n_vertices))
    yield from app.load_program(handle, program("traverse"))
    return Traverser(handle, queue)


def traverse(app: HostApplication, layout: GraphLayout, traverser: Traverser, source: int, n_hops: int,
             prefetch: bool = False):
    """Stream the n-hop neighbourhood of `source`; returns the ids in discovery order."""
    if not 0 <= source < layout.graph.n_vertices:
        raise ValueError(f"source {source} outside the graph")
    if not 1 <= n_hops <= MAX_HOPS:
        raise ValueError(f"n_hops must be in [1, {MAX_HOPS}]")
    params = [layout.offsets_va, layout.columns_va, traverser.queue.base_va, source, n_hops,
              PREFETCH if prefetch else 0]
    yield from app.start(traverser.handle, params)
    ids = yield from read_id_stream(app, traverser.handle)
    yield app.wait_done(traverser.handle)
    return ids


def reachable(app: HostApplication, layout: GraphLayout, source: int, n_hops: int, prefetch: bool = False):
    """Single-source stage on its own: the set of vertices within n hops."""
    traverser = yield from prepare_traverser(app, layout)
    ids = yield from traverse(app, layout, traverser, source, n_hops, prefetch)
    return set(int(v) for v in ids)


def fetch_attributes(app: HostApplication, layout: GraphLayout, ids: list[int]):
    """DMA the attribute records of `ids` into host-local memory and read them."""
    if not ids:
        return np.zeros((0, 16), dtype=np.uint32)
    if layout.attributes is None:
        raise ValueError("graph was placed without attributes")
    out = app.map_host(len(ids) * ATTRIBUTE_BYTES)
    handle = app.mcc_create(layout.node_id)
    yield from app.load_program(handle, program("gather"))
    yield from app.start(handle, [layout.attributes.base_va, out.base_va, len(ids)])
    padded = np.full(-(-len(ids) // 16) * 16, 0, dtype="<u4")
    padded[:len(ids)] = ids
    for index, chunk in enumerate(padded.reshape(-1, 16)):
        offset = (index * LINE_SIZE) % 4096
        yield app.data_write(handle.slot_va(offset), CacheLine(chunk.tobytes()))
    yield app.wait_done(handle)
    raw = yield app.local_read(out.base_va, len(ids) * ATTRIBUTE_BYTES)
    return np.frombuffer(raw, dtype="<u4").reshape(len(ids), 16)


@dataclass
class CommonNeighbors:
    vertices: list[int]
    attributes: np.ndarray | None = None
    elapsed_ns: int = 0


def common_neighbors(app: HostApplication, layout: GraphLayout, source_a: int, source_b: int, n_hops: int,
                     prefetch: bool = False, with_attributes: bool = False, traversers=None):
    """Two traversals side by side on two MCCs, intersected on the host.

    Program upload happens before the clock for `elapsed_ns` starts."""
    if traversers is None:
        traversers = yield from together(app, prepare_traverser(app, layout), prepare_traverser(app, layout))
    started = app.engine.now()
    first, second = traversers
    streams = yield from together(app,
                                  traverse(app, layout, first, source_a, n_hops, prefetch),
                                  traverse(app, layout, second, source_b, n_hops, prefetch))
    vertices = sorted(set(streams[0].tolist()) & set(streams[1].tolist()))
    result = CommonNeighbors(vertices, elapsed_ns=app.engine.now() - started)
    if with_attributes:
        result.attributes = yield from fetch_attributes(app, layout, vertices)
    logger.info("common neighbours of %d and %d within %d hops: %d vertices", source_a, source_b, n_hops,
                len(vertices))
    return result


def host_bfs(app: HostApplication, layout: GraphLayout, source: int, n_hops: int):
    """The same traversal done by the host, chasing pointers over far_read."""
    seen = {source}
    frontier = [source]
    found = []
    for _ in range(n_hops):
        following = []
        for vertex in frontier:
            raw = yield app.far_read(layout.offsets_va + 4 * vertex, 8)
            start, end = np.frombuffer(raw, dtype="<u4")
            if end <= start:
                continue
            raw = yield app.far_read(layout.columns_va + 4 * int(start), 4 * int(end - start))
            for neighbor in np.frombuffer(raw, dtype="<u4").tolist():
                if neighbor not in seen:
                    seen.add(neighbor)
                    found.append(neighbor)
                    following.append(neighbor)
        frontier = following
    return found


def host_common_neighbors(app: HostApplication, layout: GraphLayout, source_a: int, source_b: int, n_hops: int):
    started = app.engine.now()
    first = yield from host_bfs(app, layout, source_a, n_hops)
    second = yield from host_bfs(app, layout, source_b, n_hops)
    return CommonNeighbors(sorted(set(first) & set(second)), elapsed_ns=app.engine.now() - started)

