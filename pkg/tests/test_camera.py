import numpy as np
import pytest

from p2mx import autodiff as ad
from p2mx import camera as C
from p2mx.errors import CameraFormatError


def intr(fx=100.0, fy=100.0, cx=64.0, cy=64.0, w=128, h=128):
    return C.CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h)


def test_world_to_camera_identity():
    ext = C.CameraExtrinsics(np.eye(3), np.zeros(3))
    assert np.allclose(C.world_to_camera([1.0, 2.0, 3.0], ext), [1, 2, 3])


def test_world_to_camera_translation():
    ext = C.CameraExtrinsics(np.eye(3), [0.0, 0.0, 5.0])
    assert np.allclose(C.world_to_camera([1.0, 1.0, 0.0], ext), [1, 1, 5])


def test_world_to_camera_yaw180():
    ext = C.CameraExtrinsics(np.diag([-1.0, 1.0, -1.0]), np.zeros(3))
    assert np.allclose(C.world_to_camera([1.0, 0.0, 2.0], ext), [-1, 0, -2])


def test_project_formula():
    x, y, valid = C.project([1.0, 1.0, 2.0], intr())
    assert (x, y, valid) == (114.0, 114.0, True)


def test_project_principal_point():
    x, y, valid = C.project([0.0, 0.0, 1.0], intr(cx=64.0, cy=48.0))
    assert (x, y, valid) == (64.0, 48.0, True)


def test_project_behind_camera_invalid():
    _, _, valid = C.project([0.0, 0.0, -1.0], intr())
    assert not valid


def test_project_points_identity_pose_matches_project():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.3, 0.3, size=(20, 3)) + [0, 0, 2.0]
    ext = C.CameraExtrinsics(np.eye(3), np.zeros(3))
    xs, ys, valid = C.project_points_np(pts, intr(), ext)
    for i, p in enumerate(pts):
        x, y, v = C.project(p, intr())
        assert np.isclose(xs[i], x) and np.isclose(ys[i], y) and valid[i] == v


def test_project_points_all_behind():
    pts = np.array([[0.0, 0, -1], [0.3, 0.1, -2]])
    ext = C.CameraExtrinsics(np.eye(3), np.zeros(3))
    _, _, valid = C.project_points_np(pts, intr(), ext)
    assert not valid.any()


def test_projective_invariance_along_ray():
    # scaling the camera-space position leaves the pixel unchanged
    ext = C.CameraExtrinsics(np.eye(3), np.zeros(3))
    p = np.array([[0.2, -0.1, 1.5]])
    x1, y1, _ = C.project_points_np(p, intr(), ext)
    x2, y2, _ = C.project_points_np(3.7 * p, intr(), ext)
    assert abs(x1[0] - x2[0]) < 1e-9 and abs(y1[0] - y2[0]) < 1e-9


def test_rotation_compatibility():
    # p -> R0 p with R -> R R0^T leaves projections unchanged
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    r0 = q * np.sign(np.linalg.det(q))
    eye = np.array([0.0, -2.5, 0.4])
    ext = C.look_at(eye, np.zeros(3))
    pts = rng.uniform(-0.4, 0.4, size=(30, 3))
    x1, y1, v1 = C.project_points_np(pts, intr(), ext)
    ext2 = C.CameraExtrinsics(ext.R @ r0.T, ext.T)
    x2, y2, v2 = C.project_points_np(pts @ r0.T, intr(), ext2)
    assert np.array_equal(v1, v2)
    assert np.allclose(x1, x2, atol=1e-9) and np.allclose(y1, y2, atol=1e-9)


def test_out_of_bounds_clamped_and_flagged():
    ext = C.CameraExtrinsics(np.eye(3), np.zeros(3))
    pts = np.array([[10.0, 0.0, 1.0]])  # projects far off-screen
    xs, _, valid = C.project_points_np(pts, intr(), ext)
    assert xs[0] == 127.0 and not valid[0]


def test_projection_gradient():
    ext = C.look_at([0.0, -2.0, 0.0], np.zeros(3))
    it = intr()

    def fx_proj(t):
        x, y, _ = C.project_points_t(t, it, ext)
        return ad.sum_(ad.square(x)) + ad.sum_(ad.square(y))

    rng = np.random.default_rng(1)
    pts = ad.tensor(rng.uniform(-0.3, 0.3, size=(6, 3)), requires_grad=True)
    assert ad.grad_check(fx_proj, pts, eps=1e-6) < 1e-5


def test_tensor_and_numpy_paths_agree():
    ext = C.look_at([1.5, -1.5, 1.0], np.zeros(3))
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.4, 0.4, size=(25, 3))
    xs_n, ys_n, v_n = C.project_points_np(pts, intr(), ext)
    xs_t, ys_t, v_t = C.project_points_t(ad.tensor(pts), intr(), ext)
    assert np.allclose(xs_n, xs_t.data, atol=1e-12)
    assert np.allclose(ys_n, ys_t.data, atol=1e-12)
    assert np.array_equal(v_n, v_t)


def test_extrinsics_validation():
    with pytest.raises(CameraFormatError):
        C.CameraExtrinsics(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(CameraFormatError):
        C.CameraExtrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # det -1


def test_intrinsics_validation():
    with pytest.raises(CameraFormatError):
        intr(fx=-1.0)


def test_camera_json_roundtrip(tmp_path):
    cams = [(intr(), C.look_at([0.0, -2.0, 0.5], np.zeros(3))),
            (intr(fx=80.0, cx=31.5, cy=31.5, w=64, h=64), C.look_at([2.0, 0.0, 0.0], np.zeros(3)))]
    path = tmp_path / "cameras.json"
    C.save_cameras(path, cams)
    back = C.load_cameras(path)
    assert len(back) == 2
    for (i1, e1), (i2, e2) in zip(cams, back):
        assert i1 == i2
        assert np.allclose(e1.R, e2.R, atol=1e-15)
        assert np.allclose(e1.T, e2.T, atol=1e-15)


def test_camera_json_bad_file(tmp_path):
    p = tmp_path / "cameras.json"
    p.write_text("{not json")
    with pytest.raises(CameraFormatError):
        C.load_cameras(p)
    p.write_text('{"views": [{"fx": 1.0}]}')
    with pytest.raises(CameraFormatError):
        C.load_cameras(p)


def test_look_at_points_camera_at_target():
    ext = C.look_at([0.0, -3.0, 0.0], np.zeros(3))
    cam = C.world_to_camera([0.0, 0.0, 0.0], ext)
    assert np.allclose(cam, [0, 0, 3.0], atol=1e-12)  # target straight ahead at +Z


def test_view_pyramid_shape_validation():
    from p2mx import autodiff as ad

    view = C.View(intrinsics=intr(w=64, h=64), extrinsics=C.look_at([0, -2, 0], np.zeros(3)),
                  pyramid=[ad.tensor(np.zeros((2, 64, 64))), ad.tensor(np.zeros((3, 32, 32)))],
                  strides=(1, 2))
    view.check_pyramid()
    bad = C.View(intrinsics=intr(w=64, h=64), extrinsics=view.extrinsics,
                 pyramid=[ad.tensor(np.zeros((2, 16, 64)))], strides=(1,))
    with pytest.raises(CameraFormatError):
        bad.check_pyramid()
