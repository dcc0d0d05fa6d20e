"""Inference drivers: full-scene evaluation reports and mesh refinement.

The evaluation report is a JSON array with one record per scene plus a
final mean row: {scene_id, cd, f_tau, f_2tau, precision, recall, n_pred,
n_gt}.
"""

import json
import shutil

import numpy as np

from . import autodiff as ad
from .data import load_scene, prepare_views
from .losses import MetricConfig, chamfer, f_score, resample_mesh
from .mesh import load_obj, save_obj
from .model import RefineConfig, load_model

EVAL_SEED = 0xE7A1


def evaluate_scenes(model, scenes, metric_cfg: MetricConfig, refine_cfg: RefineConfig,
                    views_k=None):
    """Coarse-generate + refine every scene, score against its gt cloud."""
    rows = []
    with ad.no_grad():
        for idx, scene in enumerate(sorted(scenes, key=lambda s: s.scene_id)):
            k = scene.n_views if not views_k else min(views_k, scene.n_views)
            views = prepare_views(scene, model, list(range(k)))
            stages = model.coarse_vertex_stages(views)
            final_verts, topo, _ = stages[-1]
            steps = model.refine_vertex_steps(final_verts, views, refine_cfg)
            mesh = topo.with_vertices(steps[-1].data.astype(np.float64))
            rng = np.random.default_rng([EVAL_SEED, idx])
            pred = resample_mesh(mesh, metric_cfg.samples, rng)
            cd = float(chamfer(pred, scene.gt_points, tree_b=scene.gt_tree()).data)
            f_tau, f_2tau, precision, recall = f_score(pred, scene.gt_points, metric_cfg.tau)
            rows.append({"scene_id": scene.scene_id, "cd": cd, "f_tau": f_tau,
                         "f_2tau": f_2tau, "precision": precision, "recall": recall,
                         "n_pred": len(pred), "n_gt": len(scene.gt_points)})
    return rows


def mean_row(rows):
    keys = ("cd", "f_tau", "f_2tau", "precision", "recall", "n_pred", "n_gt")
    mean = {"scene_id": "mean"}
    for key in keys:
        mean[key] = float(np.mean([r[key] for r in rows])) if rows else 0.0
    return mean


def write_report(path, rows):
    out = list(rows) + [mean_row(rows)]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1)
        fh.write("\n")
    return out


def evaluate_cmd(ckpt_path, dataset_scenes, metric_cfg, refine_cfg, report_path, views_k=None):
    model, _ = load_model(ckpt_path)
    rows = evaluate_scenes(model, dataset_scenes, metric_cfg, refine_cfg, views_k=views_k)
    return write_report(report_path, rows)


def refine_cmd(mesh_path, scene_dir, ckpt_path, iterations, out_path, print_fn=print):
    """Refine an external mesh against a scene's views; writes the OBJ and
    reports per-iteration resampled CD against the gt cloud when present."""
    mesh = load_obj(mesh_path)
    if iterations == 0:
        shutil.copyfile(mesh_path, out_path)
        return out_path
    model, _ = load_model(ckpt_path)
    scene = load_scene(scene_dir)
    with ad.no_grad():
        views = prepare_views(scene, model, list(range(scene.n_views)))
        verts = ad.tensor(mesh.vertices.astype(ad.default_dtype()))
        cfg = RefineConfig(iterations=iterations)
        steps = model.refine_vertex_steps(verts, views, cfg)
        for it, step in enumerate(steps, start=1):
            refined = mesh.with_vertices(step.data.astype(np.float64))
            if scene.gt_points is not None:
                pred = resample_mesh(refined, 10_000, np.random.default_rng([EVAL_SEED, it]))
                cd = float(chamfer(pred, scene.gt_points, tree_b=scene.gt_tree()).data)
                print_fn(f"iteration {it}: cd {cd:.6f}")
    save_obj(refined, out_path)
    return out_path
