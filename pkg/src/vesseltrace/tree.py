"""Geodesic tree containers and the versioned graph file format.

The tree is a forest over the initial seed components: one node per
component, one edge per merge event, each edge carrying the discrete
geodesic polyline that joined its two regions and the integral distance
U along it. Acyclicity is enforced at construction.

Graph file, version 1 (text):

    vesseltrace-tree v1
    nodes <N>
    <id> <x> <y> <z>                      one per node, position in mm
    edges <E>
    <a> <b> <length_u> <n> <x,y,z> ...    inline polyline of voxel indices
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Path",
    "TreeNode",
    "TreeEdge",
    "GeodesicTree",
    "save_tree",
    "load_tree",
]

FORMAT_HEADER = "vesseltrace-tree v1"


@dataclass(frozen=True)
class Path:
    """Discrete geodesic polyline with its integral distance.

    voxels: (n, 3) integer polyline; consecutive entries 26-adjacent.
    length_u: trapezoidal integral of the distance field along the line.
    """

    voxels: np.ndarray
    length_u: float

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        if v.shape[0] == 0:
            raise ValueError("a path needs at least one voxel")
        if v.shape[0] > 1:
            step = np.abs(np.diff(v, axis=0))
            if step.max() > 1 or (step.max(axis=1) == 0).any():
                raise ValueError("consecutive path voxels must be 26-adjacent")
        length = float(self.length_u)
        if not length >= 0.0:
            raise ValueError("path length_u must be non-negative")
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "length_u", length)

    def __len__(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class TreeNode:
    """One initial seed component: id, centroid position in mm, voxels."""

    id: int
    position: tuple
    voxels: np.ndarray = field(default_factory=lambda: np.empty((0, 3), np.int64))

    def __post_init__(self):
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(
            self, "position", tuple(float(c) for c in self.position)
        )
        object.__setattr__(
            self,
            "voxels",
            np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3),
        )
        if len(self.position) != 3:
            raise ValueError("node position must have three components")


@dataclass(frozen=True)
class TreeEdge:
    """A merge event joining the regions rooted at two nodes."""

    node_a: int
    node_b: int
    path: Path

    def __post_init__(self):
        object.__setattr__(self, "node_a", int(self.node_a))
        object.__setattr__(self, "node_b", int(self.node_b))
        if self.node_a == self.node_b:
            raise ValueError("edge endpoints must differ")

    @property
    def length_u(self) -> float:
        return self.path.length_u


@dataclass(frozen=True)
class GeodesicTree:
    """Forest of connected geodesics over the initial seed components.

    Acyclic by construction (checked): every edge joins two previously
    unconnected components. The optional u and voronoi arrays are the final
    distance and region-label fields, attached on request.
    """

    nodes: tuple
    edges: tuple
    roots: tuple
    u: np.ndarray | None = field(default=None, repr=False)
    voronoi: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        edges = tuple(self.edges)
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids)
        parent = {i: i for i in ids}

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for e in edges:
            if e.node_a not in known or e.node_b not in known:
                raise ValueError("edge references unknown node id")
            ra, rb = find(e.node_a), find(e.node_b)
            if ra == rb:
                raise ValueError(
                    "edge (%d, %d) closes a cycle" % (e.node_a, e.node_b)
                )
            parent[ra] = rb
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "roots", tuple(int(r) for r in self.roots))

    @property
    def n_components(self) -> int:
        return len(self.nodes) - len(self.edges)

    def is_connected(self) -> bool:
        return self.n_components == 1

    def node(self, node_id: int) -> TreeNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)


def save_tree(tree: GeodesicTree, path) -> None:
    """Write the tree in graph file format v1."""
    lines = [FORMAT_HEADER, "nodes %d" % len(tree.nodes)]
    for n in tree.nodes:
        lines.append(
            "%d %.17g %.17g %.17g" % (n.id, *n.position)
        )
    lines.append("edges %d" % len(tree.edges))
    for e in tree.edges:
        poly = " ".join(
            "%d,%d,%d" % (v[0], v[1], v[2]) for v in e.path.voxels
        )
        lines.append(
            "%d %d %.17g %d %s"
            % (e.node_a, e.node_b, e.path.length_u, len(e.path), poly)
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tree(path) -> GeodesicTree:
    """Read a graph file written by save_tree."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != FORMAT_HEADER:
        raise ValueError(
            "not a vesseltrace tree file (expected header %r)" % FORMAT_HEADER
        )
    cursor = 1

    def next_line():
        nonlocal cursor
        if cursor >= len(lines):
            raise ValueError("unexpected end of tree file")
        ln = lines[cursor]
        cursor += 1
        return ln

    def expect_count(keyword):
        ln = next_line()
        parts = ln.split()
        if len(parts) != 2 or parts[0] != keyword:
            raise ValueError("malformed %s line: %r" % (keyword, ln))
        return int(parts[1])

    n_nodes = expect_count("nodes")
    nodes = []
    for _ in range(n_nodes):
        ln = next_line()
        parts = ln.split()
        if len(parts) != 4:
            raise ValueError("malformed node record: %r" % ln)
        nodes.append(
            TreeNode(id=int(parts[0]), position=tuple(map(float, parts[1:])))
        )
    n_edges = expect_count("edges")
    edges = []
    for _ in range(n_edges):
        ln = next_line()
        parts = ln.split()
        if len(parts) < 4:
            raise ValueError("malformed edge record: %r" % ln)
        a, b = int(parts[0]), int(parts[1])
        length_u = float(parts[2])
        n_vox = int(parts[3])
        if len(parts) != 4 + n_vox:
            raise ValueError("edge polyline count mismatch: %r" % ln)
        voxels = np.array(
            [tuple(map(int, p.split(","))) for p in parts[4:]], dtype=np.int64
        )
        edges.append(
            TreeEdge(node_a=a, node_b=b, path=Path(voxels, length_u))
        )
    return GeodesicTree(
        nodes=tuple(nodes),
        edges=tuple(edges),
        roots=tuple(n.id for n in nodes),
    )
