"""Icosphere construction and the discrete tables derived from it.

Node ids are stable across ranks: subdividing keeps every existing vertex id
and appends edge midpoints, and face ``f`` of rank ``r`` becomes faces
``4f .. 4f+3`` of rank ``r+1`` (``4f+3`` is the central child).
"""
from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

TWO_PI = 2.0 * np.pi


class NodeType(str, enum.Enum):
    VERTEX = "hex"
    FACE = "ico"

    @classmethod
    def parse(cls, value: "NodeType | str") -> "NodeType":
        if isinstance(value, NodeType):
            return value
        key = str(value).lower()
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        raise ValueError(f"unknown node type {value!r} (expected 'hex' or 'ico')")


class PoolMode(str, enum.Enum):
    CENTER = "center"
    MAX = "max"
    AVERAGE = "average"


class SymmetryError(ValueError):
    """Raised when a rotated node set has no positional match."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _unique_edges(faces: np.ndarray, n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique (a, b) edges plus, per face side (ab, bc, ca), its edge index."""
    e = np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1).reshape(-1, 2)
    e.sort(axis=1)
    keys = e[:, 0] * np.int64(n_vertices) + e[:, 1]
    uniq, inv = np.unique(keys, return_inverse=True)
    pairs = np.stack([uniq // n_vertices, uniq % n_vertices], axis=1)
    return pairs, inv.reshape(-1)


def cartesian_to_angles(p: np.ndarray) -> np.ndarray:
    """Unit vectors -> (theta, phi) with theta in [0, 2pi), phi in [0, pi]."""
    p = np.asarray(p, dtype=np.float64)
    theta = np.mod(np.arctan2(p[..., 1], p[..., 0]), TWO_PI)
    theta = np.where(theta >= TWO_PI, 0.0, theta)
    phi = np.arccos(np.clip(p[..., 2], -1.0, 1.0))
    return np.stack([theta, phi], axis=-1)


def angles_to_cartesian(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    s = np.sin(phi)
    return np.stack([s * np.cos(theta), s * np.sin(theta), np.cos(phi)], axis=-1)


@dataclass(frozen=True, eq=False)
class SphereGraph:
    """Icosphere mesh at a given rank.

    ``vertex_parents`` holds, for every vertex created at this rank (ids
    ``prev_vertex_count ..``), the two coarse endpoint ids of the edge it
    bisects. It is ``None`` for the base icosahedron.
    """

    rank: int
    vertices: np.ndarray
    faces: np.ndarray
    prev_vertex_count: int = 0
    vertex_parents: np.ndarray | None = None

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def node_count(self, node_type) -> int:
        if NodeType.parse(node_type) is NodeType.VERTEX:
            return self.vertex_count
        return self.face_count

    @property
    def _edge_index(self):
        cached = self.__dict__.get("_edge_cache")
        if cached is None:
            uniq, inv = _unique_edges(self.faces, self.vertex_count)
            cached = (_freeze(uniq), _freeze(inv))
            object.__setattr__(self, "_edge_cache", cached)
        return cached

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected vertex edges as sorted (a, b) pairs, a < b."""
        return self._edge_index[0]

    def positions(self, node_type) -> np.ndarray:
        if NodeType.parse(node_type) is NodeType.VERTEX:
            return self.vertices
        cached = self.__dict__.get("_centroids")
        if cached is None:
            c = self.vertices[self.faces].mean(axis=1)
            cached = _freeze(c / np.linalg.norm(c, axis=1, keepdims=True))
            object.__setattr__(self, "_centroids", cached)
        return cached

    def adjacency(self, node_type) -> sp.csr_matrix:
        """First-order node adjacency (no self loops) as a boolean CSR matrix."""
        node_type = NodeType.parse(node_type)
        key = f"_adj_{node_type.value}"
        cached = self.__dict__.get(key)
        if cached is not None:
            return cached
        if node_type is NodeType.VERTEX:
            e = self.edges
            n = self.vertex_count
            rows = np.concatenate([e[:, 0], e[:, 1]])
            cols = np.concatenate([e[:, 1], e[:, 0]])
        else:
            _, inv = self._edge_index
            face_of = np.repeat(np.arange(self.face_count), 3)
            order = np.argsort(inv, kind="stable")
            pairs = face_of[order].reshape(-1, 2)  # every edge borders exactly two faces
            n = self.face_count
            rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
            cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        adj = sp.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(n, n))
        adj.sort_indices()
        object.__setattr__(self, key, adj)
        return adj

    def neighbors(self, node_type) -> list[np.ndarray]:
        """First-order neighbor lists (self excluded)."""
        adj = self.adjacency(node_type)
        return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]] for i in range(adj.shape[0])]

    def degree_histogram(self, node_type) -> dict[int, int]:
        deg = np.diff(self.adjacency(node_type).indptr)
        values, counts = np.unique(deg, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


def build_base_icosahedron(tilt: float = 0.0) -> SphereGraph:
    """Pole-oriented icosahedron: vertex 0 at +z, vertex 11 at -z.

    Vertices 1-5 form the upper ring at theta = 72k degrees, 6-10 the lower
    ring offset by 36 degrees. ``tilt`` rotates the whole solid about the
    x axis; anything non-zero destroys the z-axis symmetry (test fixture).
    """
    z = 1.0 / np.sqrt(5.0)
    r = 2.0 / np.sqrt(5.0)
    k = np.arange(5)
    upper = np.stack([r * np.cos(TWO_PI * k / 5), r * np.sin(TWO_PI * k / 5), np.full(5, z)], axis=1)
    ang = TWO_PI * k / 5 + np.pi / 5
    lower = np.stack([r * np.cos(ang), r * np.sin(ang), np.full(5, -z)], axis=1)
    verts = np.concatenate([[[0.0, 0.0, 1.0]], upper, lower, [[0.0, 0.0, -1.0]]])

    faces = []
    for i in range(5):
        u0, u1 = 1 + i, 1 + (i + 1) % 5
        l0, l1 = 6 + i, 6 + (i + 1) % 5
        faces += [(0, u0, u1), (u0, l0, u1), (u1, l0, l1), (11, l1, l0)]
    faces = np.array(faces, dtype=np.int64)
    # outward (counter-clockwise seen from outside) orientation
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    if tilt:
        ct, st = np.cos(tilt), np.sin(tilt)
        rot = np.array([[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]])
        verts = verts @ rot.T
    return SphereGraph(0, _freeze(verts), _freeze(faces))


def subdivide(g: SphereGraph) -> SphereGraph:
    """Split every face into four; midpoints are re-projected onto the sphere."""
    f = g.faces
    nv = g.vertex_count
    uniq, inv = _unique_edges(f, nv)
    mid = g.vertices[uniq[:, 0]] + g.vertices[uniq[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    m = inv.reshape(-1, 3) + nv  # (ab, bc, ca) per face
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([ab, b, bc], axis=1),
            np.stack([ca, bc, c], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return SphereGraph(
        g.rank + 1,
        _freeze(np.concatenate([g.vertices, mid])),
        _freeze(children),
        prev_vertex_count=nv,
        vertex_parents=_freeze(uniq.copy()),
    )


def icosphere(rank: int, tilt: float = 0.0) -> SphereGraph:
    """Cached rank-``rank`` icosphere built by repeated subdivision.

    Equal arguments always return the same object.
    """
    if rank < 0:
        raise ValueError(f"rank must be non-negative, got {rank}")
    return _icosphere(int(rank), float(tilt))


@lru_cache(maxsize=None)
def _icosphere(rank: int, tilt: float) -> SphereGraph:
    if rank == 0:
        return build_base_icosahedron(tilt)
    return subdivide(_icosphere(rank - 1, tilt))


def node_coords(g: SphereGraph, node_type) -> np.ndarray:
    """(theta, phi) per node; faces use their normalized centroids."""
    return cartesian_to_angles(g.positions(node_type))


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """K-order neighborhoods, self included, ascending ids, padded at the tail."""

    order: int
    indices: np.ndarray  # (N, W_max), pad entries are -1
    mask: np.ndarray  # (N, W_max) bool

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def lists(self) -> list[np.ndarray]:
        return [row[m] for row, m in zip(self.indices, self.mask)]


def _ball_matrix(adj: sp.csr_matrix, k: int) -> sp.csr_matrix:
    n = adj.shape[0]
    ball = sp.identity(n, dtype=np.int32, format="csr")
    step = (adj.astype(np.int32) + sp.identity(n, dtype=np.int32, format="csr")).tocsr()
    for _ in range(k):
        ball = ball @ step
        ball.data[:] = 1
    ball.sort_indices()
    return ball


def neighbor_table(g: SphereGraph, node_type, k: int) -> NeighborTable:
    """Graph balls of radius ``k`` (BFS order k) for every node."""
    node_type = NodeType.parse(node_type)
    if k < 0:
        raise ValueError(f"neighborhood order must be >= 0, got {k}")
    ball = _ball_matrix(g.adjacency(node_type), k)
    sizes = np.diff(ball.indptr)
    width = int(sizes.max())
    n = ball.shape[0]
    col = np.arange(width)
    mask = col[None, :] < sizes[:, None]
    indices = np.full((n, width), -1, dtype=np.int64)
    indices[mask] = ball.indices
    return NeighborTable(k, _freeze(indices), _freeze(mask))


def bfs_ball(neighbors: list[np.ndarray], start: int, k: int) -> list[int]:
    """Plain breadth-first search; reference for ``neighbor_table``."""
    seen = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        if seen[u] == k:
            continue
        for v in neighbors[u]:
            v = int(v)
            if v not in seen:
                seen[v] = seen[u] + 1
                queue.append(v)
    return sorted(seen)


@dataclass(frozen=True, eq=False)
class PoolMap:
    """Down/up-sampling between two consecutive ranks.

    ``groups`` lists the fine nodes feeding each coarse node (one column for
    center pooling, four children for face max/average pooling). ``unpool``
    is a sparse (N_fine, N_coarse) interpolation matrix.
    """

    node_type: NodeType
    mode: PoolMode
    groups: np.ndarray
    unpool: sp.csr_matrix

    @property
    def coarse_count(self) -> int:
        return self.groups.shape[0]

    @property
    def fine_count(self) -> int:
        return self.unpool.shape[0]

    def pool_matrix(self) -> sp.csr_matrix:
        """Linear pooling operator (N_coarse, N_fine); not defined for max."""
        if self.mode is PoolMode.MAX:
            raise ValueError("max pooling is not linear")
        nc, w = self.groups.shape
        rows = np.repeat(np.arange(nc), w)
        vals = np.full(nc * w, 1.0 / w)
        return sp.csr_matrix((vals, (rows, self.groups.reshape(-1))), shape=(nc, self.fine_count))

    def pool(self, x: np.ndarray) -> np.ndarray:
        gathered = x[self.groups]
        if self.mode is PoolMode.MAX:
            return gathered.max(axis=1)
        return gathered.mean(axis=1)

    def unpool_array(self, x: np.ndarray) -> np.ndarray:
        return self.unpool @ x


def pool_map(fine: SphereGraph, coarse: SphereGraph, node_type, mode="center") -> PoolMap:
    node_type = NodeType.parse(node_type)
    mode = PoolMode(mode)
    if fine.rank != coarse.rank + 1:
        raise ValueError(f"pool_map needs consecutive ranks, got {fine.rank} and {coarse.rank}")
    if node_type is NodeType.VERTEX:
        if mode is not PoolMode.CENTER:
            raise ValueError("vertex (hex) node type only supports center pooling")
        nc, nf = coarse.vertex_count, fine.vertex_count
        if fine.prev_vertex_count != nc:
            raise ValueError("fine graph was not subdivided from the coarse graph")
        groups = np.arange(nc)[:, None]
        parents = fine.vertex_parents
        n_new = nf - nc
        rows = np.concatenate([np.arange(nc), np.repeat(np.arange(nc, nf), 2)])
        cols = np.concatenate([np.arange(nc), parents.reshape(-1)])
        vals = np.concatenate([np.ones(nc), np.full(2 * n_new, 0.5)])
    else:
        nc, nf = coarse.face_count, fine.face_count
        children = np.arange(nf).reshape(nc, 4)
        groups = children[:, 3:] if mode is PoolMode.CENTER else children
        rows = np.arange(nf)
        cols = rows // 4
        vals = np.ones(nf)
    unpool = sp.csr_matrix((vals, (rows, cols)), shape=(nf, nc))
    unpool.sort_indices()
    return PoolMap(node_type, mode, _freeze(np.ascontiguousarray(groups)), unpool)


@dataclass(frozen=True)
class SymmetryPermutation:
    """``perm[u]`` is the node that ``u`` lands on under the transform."""

    perm: np.ndarray
    k: int
    reflect: bool = False

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Move a node signal along with the transform: out[perm[u]] = x[u]."""
        out = np.empty_like(x)
        out[self.perm] = x
        return out

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv


def z_rotation(k: int, reflect: bool = False) -> np.ndarray:
    """Rotation about z by k*72 degrees, optionally followed by y -> -y."""
    a = TWO_PI * k / 5
    rot = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    if reflect:
        rot = np.diag([1.0, -1.0, 1.0]) @ rot
    return rot


def z_symmetry_permutation(g: SphereGraph, node_type, k: int, reflect: bool = False,
                           tol: float = 1e-6) -> SymmetryPermutation:
    if not 0 <= k <= 4:
        raise ValueError(f"k must be in 0..4, got {k}")
    pos = g.positions(node_type)
    moved = pos @ z_rotation(k, reflect).T
    dist, idx = cKDTree(pos).query(moved)
    if dist.max() > tol:
        raise SymmetryError(
            f"rotation by {72 * k} deg (reflect={reflect}) has no node match "
            f"(max distance {dist.max():.3g}); graph is not pole-oriented"
        )
    if len(np.unique(idx)) != len(idx):
        raise SymmetryError("symmetry match is not a bijection")
    return SymmetryPermutation(_freeze(idx.astype(np.int64)), k, reflect)


@lru_cache(maxsize=None)
def _ball_size_sum(rank: int, node_type: NodeType, k: int) -> tuple[int, int]:
    sizes = np.diff(_ball_matrix(icosphere(rank).adjacency(node_type), k).indptr)
    values, counts = np.unique(sizes, return_counts=True)
    return int(sizes.sum()), int(values[np.argmax(counts)])


def mean_neighborhood_size(rank: int, node_type, k: int) -> float:
    """Mean |E^K| over all nodes at ``rank``.

    Exact for rank <= 5. Beyond that the 12 pentagonal defects are isolated,
    so the total is the regular-lattice value minus a per-defect deficit
    measured at rank 5.
    """
    node_type = NodeType.parse(node_type)
    g_n = (10 * 4**rank + 2) if node_type is NodeType.VERTEX else 20 * 4**rank
    if rank <= 5:
        return _ball_size_sum(rank, node_type, k)[0] / g_n
    total5, regular = _ball_size_sum(5, node_type, k)
    n5 = (10 * 4**5 + 2) if node_type is NodeType.VERTEX else 20 * 4**5
    deficit = n5 * regular - total5
    return (g_n * regular - deficit) / g_n


def to_json(g: SphereGraph, node_type) -> str:
    """Small graphs only (rank <= 3)."""
    if g.rank > 3:
        raise ValueError("JSON export is limited to rank <= 3")
    node_type = NodeType.parse(node_type)
    doc = {
        "rank": g.rank,
        "node_type": node_type.value,
        "positions": g.positions(node_type).tolist(),
        "coords": node_coords(g, node_type).tolist(),
        "neighbors": [n.tolist() for n in g.neighbors(node_type)],
        "faces": g.faces.tolist(),
    }
    return json.dumps(doc)


def write_obj(g: SphereGraph, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# icosphere rank {g.rank}\n")
        for x, y, z in g.vertices:
            fh.write(f"v {x:.9f} {y:.9f} {z:.9f}\n")
        for a, b, c in g.faces + 1:
            fh.write(f"f {a} {b} {c}\n")
