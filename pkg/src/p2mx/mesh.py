"""Triangle meshes: icosphere construction, subdivision, hypothesis fans, OBJ I/O.

Vertices are float64 world coordinates, faces are 0-based index triples.
Meshes are immutable; derived structures (edges, adjacency, the row-normalized
neighbor matrix) are computed lazily and cached.
"""

import math

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull

from .errors import MeshError, ObjFormatError

PHI = (1.0 + math.sqrt(5.0)) / 2.0

# rows of the level-0 icosahedron, unit-normalized by sqrt(1 + phi^2)
_C0 = np.array(
    [
        [PHI, 1, 0], [-PHI, 1, 0], [PHI, -1, 0], [-PHI, -1, 0],
        [1, 0, PHI], [1, 0, -PHI], [-1, 0, PHI], [-1, 0, -PHI],
        [0, PHI, 1], [0, -PHI, 1], [0, PHI, -1], [0, -PHI, -1],
    ],
    dtype=np.float64,
) / math.sqrt(1.0 + PHI * PHI)

FAN_SIZE = 43          # center vertex + 42 hypothesis offsets
FAN_EDGE_COUNT = 162   # 120 icosphere surface edges + 42 spokes


class Mesh:
    """Immutable triangle mesh."""

    def __init__(self, vertices, faces):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (M, 3), got {faces.shape}")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise MeshError("face index out of range")
            if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                      | (faces[:, 0] == faces[:, 2])):
                raise MeshError("degenerate face (repeated vertex index)")
        self.vertices = vertices
        self.faces = faces
        self.vertices.flags.writeable = False
        self.faces.flags.writeable = False
        self._edges = None
        self._adjacency = None
        self._neighbor_csr = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def edges(self):
        """Unique undirected edges as a sorted (E, 2) array."""
        if self._edges is None:
            f = self.faces
            pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
            pairs = np.sort(pairs, axis=1)
            self._edges = np.unique(pairs, axis=0)
            self._edges.flags.writeable = False
        return self._edges

    @property
    def n_edges(self):
        return len(self.edges)

    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_faces

    @property
    def adjacency(self):
        if self._adjacency is None:
            adj = [[] for _ in range(self.n_vertices)]
            for a, b in self.edges:
                adj[a].append(int(b))
                adj[b].append(int(a))
            self._adjacency = [sorted(n) for n in adj]
        return self._adjacency

    def neighbor_csr(self):
        """Row-normalized adjacency (mean over neighbors); rows of isolated
        vertices are zero."""
        if self._neighbor_csr is None:
            self._neighbor_csr = neighbor_mean_matrix(self.edges, self.n_vertices)
        return self._neighbor_csr

    def with_vertices(self, vertices):
        """Same connectivity, new coordinates (shares derived caches safely:
        edges and adjacency depend only on faces)."""
        m = Mesh(vertices, self.faces)
        m._edges = self._edges
        m._adjacency = self._adjacency
        m._neighbor_csr = self._neighbor_csr
        return m


def neighbor_mean_matrix(edges, n):
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    vals = 1.0 / np.maximum(deg[rows], 1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _oriented_hull_faces(vertices):
    # convex hull faces, wound so normals point away from the origin,
    # then canonicalized (min index first, faces sorted) for determinism
    hull = ConvexHull(vertices)
    faces = []
    for i, j, k in hull.simplices:
        n = np.cross(vertices[j] - vertices[i], vertices[k] - vertices[i])
        if np.dot(n, vertices[i] + vertices[j] + vertices[k]) < 0:
            i, j, k = i, k, j
        roll = int(np.argmin((i, j, k)))
        tri = ((i, j, k), (j, k, i), (k, i, j))[roll]
        faces.append(tri)
    faces.sort()
    return np.array(faces, dtype=np.int64)


def subdivision_plan(faces, n_vertices):
    """Topology of one edge-midpoint subdivision.

    Returns (new_faces, edge_pairs): new vertex n_vertices + i is the
    midpoint of edge_pairs[i].  Midpoint ids are assigned in first-encounter
    order over faces, which makes the plan deterministic.
    """
    midpoint = {}
    pairs = []

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        idx = midpoint.get(key)
        if idx is None:
            idx = n_vertices + len(pairs)
            pairs.append(key)
            midpoint[key] = idx
        return idx

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = mid(int(a), int(b)), mid(int(b), int(c)), mid(int(c), int(a))
        new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.array(new_faces, dtype=np.int64), np.array(pairs, dtype=np.int64)


def _subdivide_arrays(vertices, faces, project_unit):
    new_faces, pairs = subdivision_plan(faces, len(vertices))
    mids = 0.5 * (vertices[pairs[:, 0]] + vertices[pairs[:, 1]])
    if project_unit:
        mids = mids / np.linalg.norm(mids, axis=1, keepdims=True)
    return np.concatenate([vertices, mids]), new_faces


def icosahedron(level):
    """Unit icosphere: level-0 icosahedron refined by edge-midpoint
    subdivision with re-projection to the sphere."""
    if level not in (0, 1, 2, 3):
        raise MeshError(f"icosahedron level must be in 0..3, got {level}")
    vertices = _C0.copy()
    faces = _oriented_hull_faces(vertices)
    for _ in range(level):
        vertices, faces = _subdivide_arrays(vertices, faces, project_unit=True)
    return Mesh(vertices, faces)


def ellipsoid(radii, level):
    radii = np.asarray(radii, dtype=np.float64)
    if radii.shape != (3,) or np.any(radii <= 0):
        raise MeshError(f"ellipsoid radii must be 3 positive reals, got {radii}")
    ico = icosahedron(level)
    return Mesh(ico.vertices * radii, ico.faces)


def subdivide(mesh):
    """One round of edge-midpoint subdivision without re-projection:
    V' = V + E, F' = 4F; planar faces are preserved pointwise."""
    vertices, faces = _subdivide_arrays(mesh.vertices, mesh.faces, project_unit=False)
    return Mesh(vertices, faces)


# ---------------------------------------------------------------------------
# hypothesis fans

_FAN_CACHE = None


def _fan_template():
    """42 unit offsets (level-1 icosphere vertices in the canonical frame,
    shared by every fan) and the 162 local edges with the center at index 0."""
    global _FAN_CACHE
    if _FAN_CACHE is None:
        ico = icosahedron(1)
        offsets = ico.vertices.copy()
        surface = ico.edges + 1
        spokes = np.stack([np.zeros(len(offsets), dtype=np.int64),
                           np.arange(1, len(offsets) + 1)], axis=1)
        edges = np.concatenate([surface, spokes])
        offsets.flags.writeable = False
        edges.flags.writeable = False
        _FAN_CACHE = (offsets, edges)
    return _FAN_CACHE


class HypothesisFan:
    """Candidate target positions around one vertex plus their local graph."""

    def __init__(self, center_index, positions, local_edges, scale):
        self.center_index = center_index
        self.positions = positions
        self.local_edges = local_edges
        self.scale = scale


def fan_offsets():
    return _fan_template()[0]


def fan_edges():
    return _fan_template()[1]


def hypothesis_fan(mesh, vertex_index, scale):
    if not 0 <= vertex_index < mesh.n_vertices:
        raise MeshError(f"vertex index {vertex_index} out of range")
    if scale <= 0:
        raise MeshError(f"fan scale must be positive, got {scale}")
    offsets, edges = _fan_template()
    center = mesh.vertices[vertex_index]
    positions = np.concatenate([center[None, :], center[None, :] + scale * offsets])
    return HypothesisFan(vertex_index, positions, edges, scale)


_FAN_BLOCK = None


def fan_neighbor_block():
    """Dense (43, 43) row-normalized fan adjacency; identical for every fan,
    so batched dense multiplication covers all fans at once."""
    global _FAN_BLOCK
    if _FAN_BLOCK is None:
        edges = _fan_template()[1]
        _FAN_BLOCK = neighbor_mean_matrix(edges, FAN_SIZE).toarray()
        _FAN_BLOCK.flags.writeable = False
    return _FAN_BLOCK


_FAN_CSR_CACHE = {}


def fan_neighbor_csr(n_fans):
    """Block-diagonal row-normalized adjacency for n_fans disjoint fan graphs
    laid out consecutively (43 nodes per fan)."""
    cached = _FAN_CSR_CACHE.get(n_fans)
    if cached is not None:
        return cached
    edges = _fan_template()[1]
    block = neighbor_mean_matrix(edges, FAN_SIZE).tocoo()
    offs = FAN_SIZE * np.arange(n_fans, dtype=np.int64)
    rows = (block.row[None, :] + offs[:, None]).ravel()
    cols = (block.col[None, :] + offs[:, None]).ravel()
    vals = np.tile(block.data, n_fans)
    csr = sp.csr_matrix((vals, (rows, cols)), shape=(FAN_SIZE * n_fans,) * 2)
    if len(_FAN_CSR_CACHE) > 8:
        _FAN_CSR_CACHE.clear()
    _FAN_CSR_CACHE[n_fans] = csr
    return csr


# ---------------------------------------------------------------------------
# normals

def face_normals(mesh, normalize=True):
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if normalize:
        norms = np.linalg.norm(n, axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            n = np.where(norms > 1e-30, n / norms, 0.0)
    return n


def vertex_normals(mesh):
    """Area-weighted average of incident face normals, unit length.

    A vertex whose incident faces all have (numerically) zero area falls back
    to the normal of any nondegenerate incident face; if none exists it is an
    error.
    """
    v = mesh.vertices
    f = mesh.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # 2*area*n
    acc = np.zeros_like(v)
    for col in range(3):
        np.add.at(acc, f[:, col], cross)
    norms = np.linalg.norm(acc, axis=1)
    bad = np.nonzero(norms < 1e-14)[0]
    if bad.size:
        unit = face_normals(mesh)
        face_ok = np.linalg.norm(cross, axis=1) > 1e-14
        for vi in bad:
            incident = np.nonzero(np.any(f == vi, axis=1) & face_ok)[0]
            if incident.size == 0:
                raise MeshError(f"vertex {vi}: all incident faces are degenerate")
            acc[vi] = unit[incident[0]]
            norms[vi] = 1.0
    return acc / norms[:, None]


# ---------------------------------------------------------------------------
# OBJ I/O

def load_obj(path):
    vertices = []
    faces = []
    face_lines = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            parts = stripped.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) != 4:
                    raise ObjFormatError(line_no, f"expected 'v x y z', got {stripped!r}")
                try:
                    vertices.append([float(p) for p in parts[1:]])
                except ValueError:
                    raise ObjFormatError(line_no, f"bad vertex coordinate in {stripped!r}") from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjFormatError(line_no, "face needs at least 3 indices")
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/", 1)[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ObjFormatError(line_no, f"bad face index {tok!r}") from None
                    if i < 1:
                        raise ObjFormatError(line_no, f"face index must be >= 1, got {i}")
                    idx.append(i - 1)
                for k in range(1, len(idx) - 1):  # fan triangulation
                    faces.append((idx[0], idx[k], idx[k + 1]))
                    face_lines.append(line_no)
            # every other line type is ignored
    for (a, b, c), line_no in zip(faces, face_lines):
        if max(a, b, c) >= len(vertices):
            raise ObjFormatError(line_no, f"face index {max(a, b, c) + 1} exceeds vertex count "
                                          f"{len(vertices)}")
    if not vertices:
        raise ObjFormatError(0, "no vertices found")
    return Mesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh, path):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
