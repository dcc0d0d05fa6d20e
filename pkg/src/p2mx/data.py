"""Scene loading and dataset splits.

A scene directory contains gt.obj, gt_cloud.xyz, cameras.json,
category.txt, and per-view inputs viewNN.pgm (raw render, pushed through
the backbone) or viewNN.fmap (precomputed pyramid, used as-is).
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .camera import View, load_cameras
from .errors import DatasetError
from .pooling import load_fmap
from .synth import read_cloud, read_pgm


@dataclass
class Scene:
    scene_id: str
    root: Path
    mesh_path: Path
    gt_points: np.ndarray
    gt_normals: np.ndarray
    cameras: list          # [(intrinsics, extrinsics)]
    view_files: list       # Path per view (.pgm or .fmap)
    category: str

    _tree = None

    def gt_tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.gt_points)
        return self._tree

    @property
    def n_views(self):
        return len(self.view_files)


def load_scene(scene_dir):
    root = Path(scene_dir)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a scene directory")
    cam_path = root / "cameras.json"
    if not cam_path.exists():
        raise DatasetError(f"{root}: missing cameras.json")
    cameras = load_cameras(cam_path)
    cloud_path = root / "gt_cloud.xyz"
    if not cloud_path.exists():
        raise DatasetError(f"{root}: missing gt_cloud.xyz")
    points, normals = read_cloud(cloud_path)
    view_files = []
    for vi in range(len(cameras)):
        fmap = root / f"view{vi:02d}.fmap"
        pgm = root / f"view{vi:02d}.pgm"
        if fmap.exists():
            view_files.append(fmap)
        elif pgm.exists():
            view_files.append(pgm)
        else:
            raise DatasetError(f"{root}: no input (pgm or fmap) for view {vi}")
    if not view_files:
        raise DatasetError(f"{root}: scene has no views")
    category_path = root / "category.txt"
    category = category_path.read_text(encoding="utf-8").strip() if category_path.exists() else ""
    return Scene(scene_id=root.name, root=root, mesh_path=root / "gt.obj",
                 gt_points=points, gt_normals=normals, cameras=cameras,
                 view_files=view_files, category=category)


def list_scenes(dataset_root):
    root = Path(dataset_root)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset root does not exist")
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "cameras.json").exists())
    if not dirs:
        raise DatasetError(f"{root}: no scenes found")
    return [load_scene(d) for d in dirs]


def split_scenes(scenes, train_ids, test_ids):
    """Resolve split id lists; empty train list means every non-test scene.
    Train and test must be disjoint."""
    by_id = {s.scene_id: s for s in scenes}
    for sid in list(train_ids) + list(test_ids):
        if sid not in by_id:
            raise DatasetError(f"split references unknown scene '{sid}'")
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise DatasetError(f"train/test splits intersect: {sorted(overlap)}")
    if train_ids:
        train = [by_id[s] for s in train_ids]
    else:
        train = [s for s in scenes if s.scene_id not in set(test_ids)]
    test = [by_id[s] for s in test_ids] if test_ids else list(scenes)
    return train, test


def prepare_views(scene, model, view_indices):
    """Build View objects with pyramids for the chosen view indices.

    PGM inputs run through the model backbone (recorded on the tape, so the
    backbone trains); FMAP inputs become constant pyramids.
    """
    views = []
    dt = ad.default_dtype()
    for vi in view_indices:
        intr, ext = scene.cameras[vi]
        path = scene.view_files[vi]
        if path.suffix == ".fmap":
            pyramid = [ad.tensor(level.astype(dt)) for level in load_fmap(path)]
            view = View(intrinsics=intr, extrinsics=ext, pyramid=pyramid, strides=(1, 2, 4))
        else:
            img = read_pgm(path).astype(dt)
            if img.shape[0] != model.config.in_channels:
                img = np.repeat(img, model.config.in_channels, axis=0)
            pyramid = model.backbone(ad.tensor(img))
            view = View(intrinsics=intr, extrinsics=ext, pyramid=pyramid,
                        strides=(1, 2, 4), image=img)
        view.check_pyramid()
        views.append(view)
    return views
