"""Training losses and evaluation metrics.

The training loss is a Chamfer distance over an area-proportional random
re-sampling of the predicted surface (samples plus all mesh vertices)
against the ground-truth cloud, plus edge-length / Laplacian / normal
regularizers.  Metrics are Chamfer distance (mean squared nearest-neighbor
distance, both directions) and F-score at tau and 2*tau.

Nearest neighbors use a k-d tree; tests hold the brute-force O(N*M) oracle
the accelerated path must match.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .errors import MeshError, P2mxError, ShapeMismatchError
from .mesh import face_normals, vertex_normals


@dataclass
class LossWeights:
    chamfer: float = 1.0
    edge: float = 0.1
    laplacian: float = 0.5
    normal: float = 1.6e-4

    def __post_init__(self):
        if self.chamfer <= 0:
            raise P2mxError(f"chamfer weight must be positive, got {self.chamfer}")
        if min(self.edge, self.laplacian, self.normal) < 0:
            raise P2mxError("auxiliary loss weights must be nonnegative")


@dataclass
class MetricConfig:
    tau: float = 1e-4          # squared-distance threshold
    samples: int = 10_000      # evaluation resample count

    def __post_init__(self):
        if self.tau <= 0 or self.samples < 1:
            raise P2mxError(f"invalid metric config tau={self.tau} samples={self.samples}")


def check_cloud(points, name="cloud"):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 1:
        raise ShapeMismatchError(name, points.shape, detail="expected nonempty (P, 3)")
    if not np.all(np.isfinite(points)):
        raise P2mxError(f"{name} contains non-finite coordinates")
    return points


# ---------------------------------------------------------------------------
# surface re-sampling

def sample_triangle(v1, v2, v3, r1, r2):
    """Uniform point via the square-root barycentric form:
    s = (1 - sqrt(r1)) v1 + sqrt(r1) (1 - r2) v2 + sqrt(r1) r2 v3."""
    if not (0.0 <= r1 <= 1.0 and 0.0 <= r2 <= 1.0):
        raise P2mxError(f"triangle sample parameters must be in [0, 1], got {r1}, {r2}")
    s = np.sqrt(r1)
    return ((1.0 - s) * np.asarray(v1, dtype=np.float64)
            + s * (1.0 - r2) * np.asarray(v2, dtype=np.float64)
            + s * r2 * np.asarray(v3, dtype=np.float64))


def triangle_areas(vertices, faces):
    c = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]],
                 vertices[faces[:, 2]] - vertices[faces[:, 0]])
    return 0.5 * np.linalg.norm(c, axis=1)


def allocate_counts(areas, n):
    """Largest-remainder allocation of n samples proportional to areas;
    ties break toward the lower face index.  Counts sum to n exactly."""
    total = areas.sum()
    if total <= 0:
        raise MeshError("all faces are degenerate: cannot sample the surface")
    quota = n * areas / total
    counts = np.floor(quota).astype(np.int64)
    remainder = int(n - counts.sum())
    if remainder:
        frac = quota - counts
        order = np.lexsort((np.arange(len(frac)), -frac))
        counts[order[:remainder]] += 1
    return counts


def resample_plan(vertices, faces, n, rng):
    """(face index, barycentric weights) for n area-proportional samples."""
    counts = allocate_counts(triangle_areas(vertices, faces), n)
    face_idx = np.repeat(np.arange(len(faces)), counts)
    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    weights = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    return face_idx, weights


def resample_mesh(mesh, n, rng):
    """n surface samples plus all mesh vertices -> ((n + V), 3) cloud."""
    if n < 0:
        raise P2mxError(f"sample count must be >= 0, got {n}")
    if n == 0:
        return mesh.vertices.copy()
    face_idx, w = resample_plan(mesh.vertices, mesh.faces, n, rng)
    tri = mesh.faces[face_idx]
    pts = (w[:, 0:1] * mesh.vertices[tri[:, 0]]
           + w[:, 1:2] * mesh.vertices[tri[:, 1]]
           + w[:, 2:3] * mesh.vertices[tri[:, 2]])
    return np.concatenate([pts, mesh.vertices])


def resample_mesh_with_normals(mesh, n, rng):
    """Like resample_mesh but also returns per-point unit normals (face
    normals for samples, area-weighted vertex normals for the vertices)."""
    face_idx, w = resample_plan(mesh.vertices, mesh.faces, n, rng)
    tri = mesh.faces[face_idx]
    pts = (w[:, 0:1] * mesh.vertices[tri[:, 0]]
           + w[:, 1:2] * mesh.vertices[tri[:, 1]]
           + w[:, 2:3] * mesh.vertices[tri[:, 2]])
    cloud = np.concatenate([pts, mesh.vertices])
    normals = np.concatenate([face_normals(mesh)[face_idx], vertex_normals(mesh)])
    return cloud, normals


def resample_vertices_t(verts, faces, face_idx, weights):
    """Differentiable resampled cloud: samples (linear in the vertices via
    fixed barycentric weights) followed by the vertices themselves."""
    tri = faces[face_idx]
    pts = None
    for col in range(3):
        term = ad.mul(ad.tensor(weights[:, col : col + 1].astype(verts.dtype)),
                      ad.gather_rows(verts, tri[:, col]))
        pts = term if pts is None else ad.add(pts, term)
    return ad.concat([pts, verts], axis=0)


# ---------------------------------------------------------------------------
# nearest neighbors and Chamfer

def nearest_indices(query, ref, tree=None):
    """Index of each query point's nearest neighbor in ref (k-d tree)."""
    tree = tree or cKDTree(ref)
    workers = -1 if len(query) >= 20_000 else 1  # thread spawn beats only large batches
    _, idx = tree.query(query, k=1, workers=workers)
    return np.asarray(idx, dtype=np.int64)


def _nn_sq_dist_t(a, b, idx):
    d = ad.sub(a, ad.gather_rows(b, idx))
    return ad.sum_(ad.square(d), axis=1)


def chamfer(a, b, tree_a=None, tree_b=None, squared=True):
    """Fan-style Chamfer: mean_a min_b ||a-b||^2 + mean_b min_a ||b-a||^2.

    Differentiable in both clouds; nearest assignments are held fixed per
    evaluation.  `squared=False` uses unsquared distances instead.
    """
    at = a if isinstance(a, ad.Tensor) else ad.tensor(check_cloud(a, "chamfer A"))
    bt = b if isinstance(b, ad.Tensor) else ad.tensor(check_cloud(b, "chamfer B"))
    if at.size == 0 or bt.size == 0:
        raise ShapeMismatchError("chamfer", at.shape, bt.shape, detail="clouds must be nonempty")
    idx_ab = nearest_indices(at.data, bt.data, tree_b)
    idx_ba = nearest_indices(bt.data, at.data, tree_a)
    d_ab = _nn_sq_dist_t(at, bt, idx_ab)
    d_ba = _nn_sq_dist_t(bt, at, idx_ba)
    if not squared:
        eps = ad.tensor(np.full(1, 1e-12, dtype=at.dtype))
        d_ab = ad.sqrt_(ad.add(d_ab, eps))
        d_ba = ad.sqrt_(ad.add(d_ba, eps))
    return ad.add(ad.mean_(d_ab), ad.mean_(d_ba))


def f_score(pred, gt, tau):
    """(F_tau, F_2tau, precision, recall) in percent; a point counts when its
    squared nearest-neighbor distance is below the threshold."""
    pred = check_cloud(pred, "f_score pred")
    gt = check_cloud(gt, "f_score gt")
    if tau <= 0:
        raise P2mxError(f"tau must be positive, got {tau}")
    d_pg = np.sum((pred - gt[nearest_indices(pred, gt)]) ** 2, axis=1)
    d_gp = np.sum((gt - pred[nearest_indices(gt, pred)]) ** 2, axis=1)

    def f_at(threshold):
        precision = 100.0 * float(np.mean(d_pg < threshold))
        recall = 100.0 * float(np.mean(d_gp < threshold))
        f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return f, precision, recall

    f_tau, precision, recall = f_at(tau)
    f_2tau, _, _ = f_at(2 * tau)
    return f_tau, f_2tau, precision, recall


# ---------------------------------------------------------------------------
# regularizers

def aux_losses(verts, topo, ref_verts=None, gt_points=None, gt_normals=None, gt_tree=None):
    """(edge, laplacian, normal) scalar tensors for vertices `verts` on the
    connectivity of `topo`.

    - edge: mean squared edge length.
    - laplacian: mean squared change of the umbrella vector (v_p - mean of
      neighbors) relative to `ref_verts` (the pre-deformation vertices);
      zero when ref_verts is None.
    - normal: mean over directed edges of <v_p - v_q, n_hat>^2 where n_hat is
      the ground-truth normal at the nearest ground-truth point to v_p;
      zero when gt data is missing.
    """
    vt = verts if isinstance(verts, ad.Tensor) else ad.tensor(np.asarray(verts, dtype=np.float64))
    dt = vt.dtype
    edges = topo.edges
    va = ad.gather_rows(vt, edges[:, 0])
    vb = ad.gather_rows(vt, edges[:, 1])
    diff = ad.sub(va, vb)
    edge_loss = ad.mean_(ad.sum_(ad.square(diff), axis=1))

    csr = topo.neighbor_csr()
    delta = ad.sub(vt, ad.spmm(csr, vt))
    if ref_verts is not None:
        ref = np.asarray(getattr(ref_verts, "data", ref_verts), dtype=np.float64)
        ref_delta = ad.tensor((ref - csr @ ref).astype(dt))
        lap = ad.sub(delta, ref_delta)
        laplacian_loss = ad.mean_(ad.sum_(ad.square(lap), axis=1))
    else:
        laplacian_loss = ad.scale(ad.mean_(ad.sum_(ad.square(delta), axis=1)), 0.0)

    if gt_points is not None and gt_normals is not None:
        nn = nearest_indices(vt.data, gt_points, gt_tree)
        # both edge orientations so every endpoint contributes its own normal
        n_dir = np.concatenate([gt_normals[nn[edges[:, 0]]], gt_normals[nn[edges[:, 1]]]])
        d2 = ad.concat([diff, ad.scale(diff, -1.0)], axis=0)
        dot = ad.sum_(ad.mul(d2, ad.tensor(n_dir.astype(dt))), axis=1)
        normal_loss = ad.mean_(ad.square(dot))
    else:
        normal_loss = ad.tensor(np.zeros(()), dtype=dt)
    return edge_loss, laplacian_loss, normal_loss


def total_loss(verts, topo, gt_points, gt_normals, weights, rng,
               n_samples=4000, ref_verts=None, gt_tree=None, squared=True):
    """Weighted re-sampled Chamfer plus regularizers for one predicted mesh.

    Returns (scalar tensor, {component: float}).  The resampled cloud is the
    union of n_samples area-proportional surface samples and the vertices.
    """
    vt = verts if isinstance(verts, ad.Tensor) else ad.tensor(np.asarray(verts, dtype=np.float64))
    face_idx, w = resample_plan(vt.data, topo.faces, n_samples, rng)
    cloud = resample_vertices_t(vt, topo.faces, face_idx, w)
    gt_t = ad.tensor(np.asarray(gt_points, dtype=vt.dtype))
    cd = chamfer(cloud, gt_t, tree_b=gt_tree, squared=squared)
    edge, lap, norm = aux_losses(vt, topo, ref_verts=ref_verts, gt_points=gt_points,
                                 gt_normals=gt_normals, gt_tree=gt_tree)
    total = ad.scale(cd, weights.chamfer)
    if weights.edge:
        total = ad.add(total, ad.scale(edge, weights.edge))
    if weights.laplacian:
        total = ad.add(total, ad.scale(lap, weights.laplacian))
    if weights.normal:
        total = ad.add(total, ad.scale(norm, weights.normal))
    parts = {"chamfer": float(cd.data), "edge": float(edge.data),
             "laplacian": float(lap.data), "normal": float(norm.data)}
    return total, parts
