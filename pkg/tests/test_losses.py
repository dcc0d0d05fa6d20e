import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2mx import autodiff as ad
from p2mx import losses as L
from p2mx import mesh as M
from p2mx.errors import MeshError, P2mxError, ShapeMismatchError


def chamfer_brute(a, b):
    d = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def fscore_brute(pred, gt, tau):
    d = np.sum((pred[:, None, :] - gt[None, :, :]) ** 2, axis=2)
    d_pg = d.min(axis=1)
    d_gp = d.min(axis=0)

    def f_at(t):
        p = 100.0 * np.mean(d_pg < t)
        r = 100.0 * np.mean(d_gp < t)
        return 2 * p * r / (p + r) if p + r > 0 else 0.0, p, r

    f1, p, r = f_at(tau)
    f2, _, _ = f_at(2 * tau)
    return f1, f2, p, r


# --- triangle sampling --------------------------------------------------------

def test_sample_triangle_corners():
    v1, v2, v3 = np.eye(3)
    assert np.allclose(L.sample_triangle(v1, v2, v3, 0.0, 0.77), v1)
    assert np.allclose(L.sample_triangle(v1, v2, v3, 1.0, 1.0), v3)
    assert np.allclose(L.sample_triangle(v1, v2, v3, 1.0, 0.0), v2)


def test_sample_triangle_rejects_out_of_range():
    v1, v2, v3 = np.eye(3)
    with pytest.raises(P2mxError):
        L.sample_triangle(v1, v2, v3, 1.5, 0.0)
    with pytest.raises(P2mxError):
        L.sample_triangle(v1, v2, v3, 0.5, -0.1)


@given(st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_sample_triangle_stays_inside(r1, r2):
    v1 = np.array([0.0, 0, 0])
    v2 = np.array([1.0, 0, 0])
    v3 = np.array([0.0, 1, 0])
    s = L.sample_triangle(v1, v2, v3, r1, r2)
    assert s[0] >= -1e-12 and s[1] >= -1e-12 and s[0] + s[1] <= 1 + 1e-12


# --- allocation and resampling ---------------------------------------------------

def test_allocation_two_faces_exact_proportion():
    counts = L.allocate_counts(np.array([1.0, 3.0]), 4)
    assert np.array_equal(counts, [1, 3])


@given(st.integers(min_value=1, max_value=30), st.integers(min_value=0, max_value=500),
       st.integers(min_value=0, max_value=10_000))
@settings(max_examples=40, deadline=None)
def test_allocation_largest_remainder_properties(n_faces, n, seed):
    rng = np.random.default_rng(seed)
    areas = rng.uniform(0.01, 5.0, size=n_faces)
    counts = L.allocate_counts(areas, n)
    assert counts.sum() == n
    quota = n * areas / areas.sum()
    assert np.all(np.abs(counts - quota) < 1.0)


def grid_mesh(nx, ny):
    xs, ys = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, ny), indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            faces.append((a, b, a + 1))
            faces.append((b, b + 1, a + 1))
    return M.Mesh(verts, faces)


def test_resample_cloud_size_vertices_plus_samples():
    mesh = grid_mesh(18, 137)  # 2466 vertices
    assert mesh.n_vertices == 2466
    cloud = L.resample_mesh(mesh, 4000, np.random.default_rng(0))
    assert cloud.shape == (6466, 3)


def test_resample_reproducible():
    mesh = M.icosahedron(1)
    a = L.resample_mesh(mesh, 500, np.random.default_rng(42))
    b = L.resample_mesh(mesh, 500, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_resample_rejects_degenerate_only():
    verts = np.zeros((3, 3))
    verts[1] = [1, 0, 0]
    verts[2] = [2, 0, 0]  # collinear: zero area
    mesh = M.Mesh(verts, [[0, 1, 2]])
    with pytest.raises(MeshError):
        L.resample_mesh(mesh, 10, np.random.default_rng(0))


def test_resample_uniformity_moments():
    # unit right triangle: centroid (1/3, 1/3), var 1/18, cov -1/36
    mesh = M.Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), [[0, 1, 2]])
    cloud = L.resample_mesh(mesh, 20_000, np.random.default_rng(3))[:20_000]
    assert np.allclose(cloud.mean(axis=0)[:2], [1 / 3, 1 / 3], atol=0.01)
    cov = np.cov(cloud[:, 0], cloud[:, 1], ddof=0)
    assert abs(cov[0, 0] - 1 / 18) / (1 / 18) < 0.1
    assert abs(cov[0, 1] + 1 / 36) / (1 / 36) < 0.1


def test_resample_with_normals_unit_and_aligned():
    mesh = M.ellipsoid((0.5, 0.5, 0.5), 2)
    cloud, normals = L.resample_mesh_with_normals(mesh, 1000, np.random.default_rng(4))
    assert cloud.shape == normals.shape
    assert np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-9)
    # sphere: normals roughly radial
    radial = cloud / np.linalg.norm(cloud, axis=1, keepdims=True)
    assert np.mean(np.sum(radial * normals, axis=1)) > 0.98


def test_resample_vertices_t_matches_numpy_path():
    mesh = M.icosahedron(1)
    rng = np.random.default_rng(5)
    face_idx, w = L.resample_plan(mesh.vertices, mesh.faces, 200, rng)
    cloud_t = L.resample_vertices_t(ad.tensor(mesh.vertices), mesh.faces, face_idx, w)
    cloud_np = L.resample_mesh(mesh, 200, np.random.default_rng(5))
    assert np.allclose(cloud_t.data, cloud_np, atol=1e-15)


# --- chamfer ------------------------------------------------------------------

def test_chamfer_identical_clouds_zero():
    rng = np.random.default_rng(6)
    a = rng.uniform(size=(50, 3))
    assert float(L.chamfer(a, a).data) == 0.0


def test_chamfer_single_pair():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[1.0, 0, 0]])
    assert float(L.chamfer(a, b).data) == pytest.approx(2.0, abs=1e-15)


def test_chamfer_symmetry():
    rng = np.random.default_rng(7)
    a = rng.uniform(size=(40, 3))
    b = rng.uniform(size=(25, 3))
    assert float(L.chamfer(a, b).data) == pytest.approx(float(L.chamfer(b, a).data), abs=1e-14)


def test_chamfer_empty_cloud_errors():
    with pytest.raises(ShapeMismatchError):
        L.chamfer(np.zeros((0, 3)), np.ones((3, 3)))


def test_chamfer_matches_bruteforce_oracle():
    rng = np.random.default_rng(8)
    for _ in range(10):
        a = rng.uniform(-1, 1, size=(rng.integers(2, 200), 3))
        b = rng.uniform(-1, 1, size=(rng.integers(2, 200), 3))
        assert float(L.chamfer(a, b).data) == pytest.approx(chamfer_brute(a, b), abs=1e-12)


def test_chamfer_gradcheck():
    # two well-separated clusters so nearest assignments are stable
    rng = np.random.default_rng(9)
    b = rng.uniform(size=(7, 3))
    bt = ad.tensor(b)

    def f(a):
        return L.chamfer(a, bt)

    a0 = rng.uniform(size=(5, 3)) + 0.03
    assert ad.grad_check(f, ad.tensor(a0, requires_grad=True), eps=1e-6) < 1e-4


def test_chamfer_gradient_flows_to_both_clouds():
    rng = np.random.default_rng(10)
    a = ad.tensor(rng.uniform(size=(6, 3)), requires_grad=True)
    b = ad.tensor(rng.uniform(size=(9, 3)) + 2.0, requires_grad=True)
    ad.backward(L.chamfer(a, b))
    assert np.abs(a.grad).max() > 0 and np.abs(b.grad).max() > 0


def test_chamfer_unsquared_flag():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[3.0, 4, 0]])  # distance 5
    assert float(L.chamfer(a, b, squared=False).data) == pytest.approx(10.0, rel=1e-6)


# --- f-score -------------------------------------------------------------------

def test_fscore_perfect():
    rng = np.random.default_rng(11)
    a = rng.uniform(size=(100, 3))
    f1, f2, p, r = L.f_score(a, a, 1e-4)
    assert f1 == 100.0 and f2 == 100.0 and p == 100.0 and r == 100.0


def test_fscore_all_far():
    a = np.zeros((5, 3))
    b = np.ones((5, 3)) * 10
    f1, f2, _, _ = L.f_score(a, b, 1e-4)
    assert f1 == 0.0 and f2 == 0.0


@given(st.integers(min_value=0, max_value=9999))
@settings(max_examples=25, deadline=None)
def test_fscore_threshold_monotone(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(30, 3))
    b = rng.uniform(size=(40, 3))
    f1, f2, _, _ = L.f_score(a, b, 2e-2)
    assert f2 >= f1


def test_fscore_matches_bruteforce():
    rng = np.random.default_rng(12)
    for _ in range(5):
        a = rng.uniform(size=(80, 3))
        b = rng.uniform(size=(60, 3))
        got = L.f_score(a, b, 5e-3)
        want = fscore_brute(a, b, 5e-3)
        assert np.allclose(got, want, atol=1e-12)


# --- regularizers ----------------------------------------------------------------

def test_edge_loss_zero_for_coincident_vertices():
    verts = np.zeros((3, 3))
    mesh = M.Mesh(verts, [[0, 1, 2]])
    edge, _, _ = L.aux_losses(verts, mesh)
    assert float(edge.data) == 0.0


def test_laplacian_zero_without_deformation():
    mesh = M.icosahedron(1)
    _, lap, _ = L.aux_losses(mesh.vertices, mesh, ref_verts=mesh.vertices)
    assert float(lap.data) == pytest.approx(0.0, abs=1e-18)


def test_laplacian_positive_after_deformation():
    mesh = M.icosahedron(1)
    moved = mesh.vertices.copy()
    moved[0] += [0.3, 0, 0]
    _, lap, _ = L.aux_losses(moved, mesh, ref_verts=mesh.vertices)
    assert float(lap.data) > 0


def test_normal_loss_zero_when_edges_orthogonal_to_normal():
    # flat grid in z=0; gt normals all +z: every edge is orthogonal
    mesh = grid_mesh(4, 4)
    gt_pts = mesh.vertices + [0, 0, 0.001]
    gt_n = np.tile([0.0, 0, 1], (len(gt_pts), 1))
    _, _, normal = L.aux_losses(mesh.vertices, mesh, gt_points=gt_pts, gt_normals=gt_n)
    assert float(normal.data) == pytest.approx(0.0, abs=1e-18)


def test_normal_loss_positive_for_spike():
    mesh = grid_mesh(4, 4)
    gt_pts = mesh.vertices.copy()
    gt_n = np.tile([0.0, 0, 1], (len(gt_pts), 1))
    moved = mesh.vertices.copy()
    moved[5] += [0, 0, 0.5]
    _, _, normal = L.aux_losses(moved, mesh, gt_points=gt_pts, gt_normals=gt_n)
    assert float(normal.data) > 1e-4


# --- total loss -------------------------------------------------------------------

def test_total_loss_chamfer_only_equals_chamfer():
    mesh = M.icosahedron(1)
    rng = np.random.default_rng(13)
    gt = L.resample_mesh(M.ellipsoid((0.8, 0.8, 0.8), 1), 300, rng)
    weights = L.LossWeights(chamfer=1.0, edge=0.0, laplacian=0.0, normal=0.0)
    total, parts = L.total_loss(mesh.vertices, mesh, gt, None, weights,
                                np.random.default_rng(14), n_samples=200)
    assert float(total.data) == pytest.approx(parts["chamfer"], rel=1e-12)


def test_total_loss_self_comparison_bound():
    # predicting the very mesh the gt cloud was sampled from: the loss is
    # pure sampling noise, bounded by the chamfer between the gt cloud and
    # an independent (sparser, hence strictly noisier) resample
    mesh = M.ellipsoid((0.6, 0.5, 0.7), 2)
    gt = L.resample_mesh(mesh, 2000, np.random.default_rng(15))
    weights = L.LossWeights(chamfer=1.0, edge=0.0, laplacian=0.0, normal=0.0)
    total, _ = L.total_loss(mesh.vertices, mesh, gt, None, weights,
                            np.random.default_rng(16), n_samples=2000)
    other = L.resample_mesh(mesh, 1000, np.random.default_rng(17))
    bound = float(L.chamfer(gt, other).data)
    assert float(total.data) < bound + 1e-9


def test_spike_discrimination_resampled_vs_vertex_only():
    # smooth flat grid vs the same grid with one vertex pulled far out of plane
    smooth = grid_mesh(5, 5)
    spike_verts = smooth.vertices.copy()
    spike_verts[12] += [0, 0, 0.8]
    spike = smooth.with_vertices(spike_verts)
    gt = L.resample_mesh(grid_mesh(40, 40), 4000, np.random.default_rng(18))

    rng_a, rng_b = np.random.default_rng(19), np.random.default_rng(19)
    res_smooth = float(L.chamfer(L.resample_mesh(smooth, 2000, rng_a), gt).data)
    res_spike = float(L.chamfer(L.resample_mesh(spike, 2000, rng_b), gt).data)
    v_smooth = float(L.chamfer(smooth.vertices, gt).data)
    v_spike = float(L.chamfer(spike_verts, gt).data)

    assert res_spike / res_smooth > v_spike / v_smooth


def test_weights_validation():
    with pytest.raises(P2mxError):
        L.LossWeights(chamfer=0.0)
    with pytest.raises(P2mxError):
        L.LossWeights(edge=-1.0)
    with pytest.raises(P2mxError):
        L.MetricConfig(tau=0.0)


def test_total_loss_gradient_reaches_vertices():
    mesh = M.icosahedron(1)
    gt = L.resample_mesh(M.ellipsoid((0.7, 0.7, 0.7), 1), 200, np.random.default_rng(20))
    vt = ad.tensor(mesh.vertices, requires_grad=True)
    total, _ = L.total_loss(vt, mesh, gt, None, L.LossWeights(),
                            np.random.default_rng(21), n_samples=100,
                            ref_verts=mesh.vertices)
    ad.backward(total)
    assert vt.grad is not None and np.abs(vt.grad).max() > 0
