"""Synthetic scene generation.

Each scene gets a ground-truth mesh (box / ellipsoid / cylinder / union of
two shapes), a fixed evaluation cloud with normals, a ring of posed cameras,
and one flat-shaded grayscale render (PGM) per view.  Everything is
deterministic under the seed.
"""

import json
import math

import numpy as np

from .camera import CameraIntrinsics, look_at, project_points_np, save_cameras
from .errors import DatasetError
from .losses import resample_mesh_with_normals
from .mesh import Mesh, _oriented_hull_faces, ellipsoid, face_normals, save_obj

DEFAULT_RANGES = {
    "box_half": (0.3, 0.65),
    "ellipsoid_radius": (0.3, 0.7),
    "cylinder_radius": (0.25, 0.5),
    "cylinder_half_height": (0.3, 0.65),
    "union_offset": (0.15, 0.3),
}

FAMILIES = ("box", "ellipsoid", "cylinder", "union")


# ---------------------------------------------------------------------------
# shape constructors (convex pieces are hull-built: closed, outward winding)

def box_mesh(half):
    hx, hy, hz = half
    corners = np.array([[sx * hx, sy * hy, sz * hz]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    return Mesh(corners, _oriented_hull_faces(corners))


def cylinder_mesh(radius, half_height, segments=20):
    angles = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    top = np.concatenate([ring, np.full((segments, 1), half_height)], axis=1)
    bottom = np.concatenate([ring, np.full((segments, 1), -half_height)], axis=1)
    verts = np.concatenate([top, bottom])
    return Mesh(verts, _oriented_hull_faces(verts))


def merge_meshes(a, b):
    verts = np.concatenate([a.vertices, b.vertices])
    faces = np.concatenate([a.faces, b.faces + a.n_vertices])
    return Mesh(verts, faces)


def _rand_in(rng, lo_hi):
    return rng.uniform(lo_hi[0], lo_hi[1])


def make_shape(family, rng, ranges):
    if family == "box":
        return box_mesh([_rand_in(rng, ranges["box_half"]) for _ in range(3)])
    if family == "ellipsoid":
        return ellipsoid([_rand_in(rng, ranges["ellipsoid_radius"]) for _ in range(3)], 2)
    if family == "cylinder":
        return cylinder_mesh(_rand_in(rng, ranges["cylinder_radius"]),
                             _rand_in(rng, ranges["cylinder_half_height"]))
    if family == "union":
        off = _rand_in(rng, ranges["union_offset"])
        first = make_shape(FAMILIES[rng.integers(0, 3)], rng, _shrink(ranges))
        second = make_shape(FAMILIES[rng.integers(0, 3)], rng, _shrink(ranges))
        d = rng.normal(size=3)
        d = off * d / np.linalg.norm(d)
        return merge_meshes(Mesh(first.vertices - d, first.faces),
                            Mesh(second.vertices + d, second.faces))
    raise DatasetError(f"unknown shape family '{family}'")


def _shrink(ranges, factor=0.75):
    return {k: (v[0] * factor, v[1] * factor) for k, v in ranges.items()}


# ---------------------------------------------------------------------------
# rendering

def rasterize(mesh, intrinsics, extrinsics, light=(0.45, 0.3, 0.85), ambient=0.25):
    """Flat-shaded z-buffered render -> uint8 (H, W) image."""
    h, w = intrinsics.height, intrinsics.width
    cam = mesh.vertices @ extrinsics.R.T + extrinsics.T
    z = np.maximum(cam[:, 2], 1e-9)
    px = cam[:, 0] / z * intrinsics.fx + intrinsics.cx
    py = cam[:, 1] / z * intrinsics.fy + intrinsics.cy

    normals = face_normals(mesh)
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = ambient + (1 - ambient) * np.maximum(normals @ light, 0.0)

    img = np.zeros((h, w))
    zbuf = np.full((h, w), np.inf)
    for fi, (a, b, c) in enumerate(mesh.faces):
        n_cam = normals[fi] @ extrinsics.R.T
        centroid = (cam[a] + cam[b] + cam[c]) / 3.0
        if np.dot(n_cam, centroid) >= 0:  # back-facing
            continue
        x0, x1, x2 = px[a], px[b], px[c]
        y0, y1, y2 = py[a], py[b], py[c]
        denom = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(denom) < 1e-12:
            continue
        xmin = max(int(math.floor(min(x0, x1, x2))), 0)
        xmax = min(int(math.ceil(max(x0, x1, x2))), w - 1)
        ymin = max(int(math.floor(min(y0, y1, y2))), 0)
        ymax = min(int(math.ceil(max(y0, y1, y2))), h - 1)
        if xmin > xmax or ymin > ymax:
            continue
        gx, gy = np.meshgrid(np.arange(xmin, xmax + 1), np.arange(ymin, ymax + 1))
        w0 = ((y1 - y2) * (gx - x2) + (x2 - x1) * (gy - y2)) / denom
        w1 = ((y2 - y0) * (gx - x2) + (x0 - x2) * (gy - y2)) / denom
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        depth = w0 * cam[a, 2] + w1 * cam[b, 2] + w2 * cam[c, 2]
        patch = zbuf[ymin : ymax + 1, xmin : xmax + 1]
        update = inside & (depth < patch)
        patch[update] = depth[update]
        img[ymin : ymax + 1, xmin : xmax + 1][update] = shade[fi]
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def write_pgm(path, img):
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path):
    """PGM (P5) -> float (1, H, W) in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise DatasetError(f"{path}: not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return (data.reshape(1, h, w) / float(maxval)).astype(np.float64)


# ---------------------------------------------------------------------------
# cloud file: "x y z nx ny nz" per line

def write_cloud(path, points, normals):
    with open(path, "w", encoding="utf-8") as fh:
        for p, n in zip(points, normals):
            fh.write(f"{p[0]:.8f} {p[1]:.8f} {p[2]:.8f} {n[0]:.8f} {n[1]:.8f} {n[2]:.8f}\n")


def read_cloud(path):
    data = np.loadtxt(path, dtype=np.float64).reshape(-1, 6)
    if len(data) < 1:
        raise DatasetError(f"{path}: empty cloud")
    return data[:, :3].copy(), data[:, 3:].copy()


# ---------------------------------------------------------------------------
# scene synthesis

def load_synth_spec(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON ({exc})") from None
    known = {"scenes", "families", "views", "image_size", "ring_radius",
             "cloud_samples", "elevation", "param_ranges"}
    unknown = set(doc) - known
    if unknown:
        raise DatasetError(f"{path}: unknown keys {sorted(unknown)}")
    doc.setdefault("scenes", 4)
    doc.setdefault("families", list(FAMILIES))
    doc.setdefault("views", 5)
    doc.setdefault("image_size", 64)
    doc.setdefault("ring_radius", 2.6)
    doc.setdefault("cloud_samples", 4000)
    doc.setdefault("elevation", 0.3)
    ranges = dict(DEFAULT_RANGES)
    ranges.update({k: tuple(v) for k, v in doc.get("param_ranges", {}).items()})
    doc["param_ranges"] = ranges
    for fam in doc["families"]:
        if fam not in FAMILIES:
            raise DatasetError(f"{path}: unknown family '{fam}'")
    return doc


def ring_cameras(k, image_size, ring_radius, elevation):
    intr = CameraIntrinsics(fx=0.8 * image_size, fy=0.8 * image_size,
                            cx=(image_size - 1) / 2, cy=(image_size - 1) / 2,
                            width=image_size, height=image_size)
    cams = []
    for i in range(k):
        angle = 2 * np.pi * i / k
        eye = np.array([ring_radius * np.cos(angle), ring_radius * np.sin(angle),
                        elevation * ring_radius])
        cams.append((intr, look_at(eye, np.zeros(3))))
    return cams


def synth_scene(out_dir, scene_id, family, spec, rng):
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = make_shape(family, rng, spec["param_ranges"])
    cams = ring_cameras(spec["views"], spec["image_size"], spec["ring_radius"],
                        spec["elevation"])
    for vi, (intr, ext) in enumerate(cams):
        _, _, valid = project_points_np(mesh.vertices, intr, ext)
        if not valid.all():
            raise DatasetError(
                f"{scene_id}: {np.count_nonzero(~valid)} gt vertices project outside view {vi}; "
                f"increase ring_radius")
    save_obj(mesh, out_dir / "gt.obj")
    cloud, normals = resample_mesh_with_normals(mesh, spec["cloud_samples"], rng)
    write_cloud(out_dir / "gt_cloud.xyz", cloud, normals)
    save_cameras(out_dir / "cameras.json", cams)
    for vi, (intr, ext) in enumerate(cams):
        write_pgm(out_dir / f"view{vi:02d}.pgm", rasterize(mesh, intr, ext))
    (out_dir / "category.txt").write_text(family + "\n", encoding="utf-8")


def synth_dataset(spec_path, out_dir, seed):
    """Generate all scenes; returns the scene count."""
    from pathlib import Path

    spec = load_synth_spec(spec_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    families = spec["families"]
    for idx in range(spec["scenes"]):
        family = families[idx % len(families)]
        scene_id = f"scene{idx:03d}_{family}"
        rng = np.random.default_rng([seed, idx])
        synth_scene(out / scene_id, scene_id, family, spec, rng)
    return spec["scenes"]
