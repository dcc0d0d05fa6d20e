"""Training driver: Adam, the two-phase schedule, and the loss CSV.

Phase 1 trains the coarse stage only; phase 2 makes everything trainable
(coarse + refiner + backbone).  One step = one scene (mini-batch size 1);
views are drawn without replacement per step from a per-(seed, step)
generator, so a resumed run replays the identical stream.
"""

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .data import list_scenes, prepare_views, split_scenes
from .errors import P2mxError, TrainingDivergedError
from .losses import LossWeights, total_loss
from .model import DeformationModel, ModelConfig, RefineConfig, save_model


class Adam:
    """Adam with decoupled weight decay; state is checkpointable."""

    def __init__(self, named_params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            update = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data = (p.data - update).astype(p.dtype)
            p.grad = None

    def state_entries(self, prefix):
        out = {f"{prefix}/t": np.array([self.t], dtype=np.float32)}
        for name in self.m:
            out[f"{prefix}/m/{name}"] = self.m[name].astype(np.float32)
            out[f"{prefix}/v/{name}"] = self.v[name].astype(np.float32)
        return out

    def load_entries(self, state, prefix):
        key = f"{prefix}/t"
        if key not in state:
            return
        self.t = int(state[key][0])
        for name, p in self.named:
            self.m[name] = state[f"{prefix}/m/{name}"].astype(p.dtype)
            self.v[name] = state[f"{prefix}/v/{name}"].astype(p.dtype)


def model_config_from_run(cfg: RunConfig):
    return ModelConfig(in_channels=cfg.in_channels,
                       backbone_channels=tuple(cfg.backbone_channels),
                       scoring_width=cfg.scoring_width, coarse_width=cfg.coarse_width,
                       coarse_level=cfg.coarse_level, coarse_radius=cfg.coarse_radius,
                       seed=cfg.seed)


def refine_config_from_run(cfg: RunConfig):
    return RefineConfig(iterations=cfg.iterations, scales=tuple(cfg.hypothesis_scale),
                        view_limit=cfg.view_limit or None)


def _first_nonfinite(tape):
    for i, node in enumerate(tape.entries):
        if not np.all(np.isfinite(node.out.data)):
            return f"op '{node.op}' (tape index {i})"
    return "loss (no recorded tensor is non-finite)"


def step_loss(model, scene, views, weights, refine_cfg, rng, run_cfg, phase2):
    """Sum of the re-sampled losses over every coarse block output and, in
    phase 2, every refinement iteration output."""
    gt_tree = scene.gt_tree()
    parts_sum = {"chamfer": 0.0, "edge": 0.0, "laplacian": 0.0, "normal": 0.0}
    total = None

    def accumulate(loss_t, parts):
        nonlocal total
        total = loss_t if total is None else ad.add(total, loss_t)
        for k, v in parts.items():
            parts_sum[k] += v

    stages = model.coarse_vertex_stages(views)
    if not np.all(np.isfinite(stages[-1][0].data)):
        culprit = _first_nonfinite(ad.active_tape())
        ad.active_tape().clear()
        raise TrainingDivergedError(
            f"non-finite vertex positions; first non-finite tensor: {culprit}")
    for verts, topo, verts_in in stages:
        accumulate(*total_loss(verts, topo, scene.gt_points, scene.gt_normals, weights,
                               rng, n_samples=run_cfg.resample_count, ref_verts=verts_in,
                               gt_tree=gt_tree, squared=run_cfg.chamfer_squared))
    if phase2:
        final_verts, final_topo, _ = stages[-1]
        prev = final_verts.data
        for verts in model.refine_vertex_steps(final_verts, views, refine_cfg):
            accumulate(*total_loss(verts, final_topo, scene.gt_points, scene.gt_normals,
                                   weights, rng, n_samples=run_cfg.resample_count,
                                   ref_verts=prev, gt_tree=gt_tree,
                                   squared=run_cfg.chamfer_squared))
            prev = verts.data
    return total, parts_sum


def _set_trainable(model, phase2):
    for name, p in model.store:
        p.requires_grad = True if phase2 else name.startswith("coarse/")


def train(run_cfg: RunConfig):
    """Run both phases; returns (checkpoint path, loss rows)."""
    if not run_cfg.dataset_root:
        raise P2mxError("config needs dataset_root")
    prev_dtype = ad.default_dtype()
    ad.set_default_dtype(np.float32)
    try:
        model = DeformationModel(model_config_from_run(run_cfg))
        scenes = list_scenes(run_cfg.dataset_root)
        train_scenes, _ = split_scenes(scenes, run_cfg.train_scenes, run_cfg.test_scenes)
        weights = LossWeights(chamfer=run_cfg.weight_chamfer, edge=run_cfg.weight_edge,
                              laplacian=run_cfg.weight_laplacian, normal=run_cfg.weight_normal)
        refine_cfg = refine_config_from_run(run_cfg)

        coarse_params = [(n, p) for n, p in model.store if n.startswith("coarse/")]
        opt1 = Adam(coarse_params, run_cfg.lr_phase1, run_cfg.weight_decay)
        opt2 = Adam(list(model.store), run_cfg.lr_phase2, run_cfg.weight_decay)

        start_step = 0
        if run_cfg.resume:
            from .checkpoint import load_checkpoint

            state = load_checkpoint(run_cfg.resume)
            model.store.load_state(state)
            opt1.load_entries(state, "opt1")
            opt2.load_entries(state, "opt2")
            if "train/step" in state:
                start_step = int(state["train/step"][0])

        steps_phase1 = round(run_cfg.epochs_phase1 * run_cfg.epoch_scale) * len(train_scenes)
        steps_phase2 = round(run_cfg.epochs_phase2 * run_cfg.epoch_scale) * len(train_scenes)
        total_steps = steps_phase1 + steps_phase2
        rows = []
        for step in range(start_step, total_steps):
            phase2 = step >= steps_phase1
            _set_trainable(model, phase2)
            scene = train_scenes[step % len(train_scenes)]
            rng = np.random.default_rng([run_cfg.seed, step])
            k = min(run_cfg.views_per_step, scene.n_views)
            view_idx = sorted(int(i) for i in
                              rng.choice(scene.n_views, size=k, replace=False))
            views = prepare_views(scene, model, view_idx)
            try:
                loss_t, parts = step_loss(model, scene, views, weights, refine_cfg, rng,
                                          run_cfg, phase2)
            except TrainingDivergedError:
                raise
            except (P2mxError, ValueError, IndexError, FloatingPointError) as exc:
                # a diverged forward can fail inside a kernel before the loss
                # exists; report the first non-finite tensor if there is one
                culprit = _first_nonfinite(ad.active_tape())
                ad.active_tape().clear()
                if "no recorded tensor" not in culprit:
                    raise TrainingDivergedError(
                        f"non-finite values at step {step}; first non-finite tensor: "
                        f"{culprit}") from None
                raise exc
            total_val = float(loss_t.data)
            if not np.isfinite(total_val):
                culprit = _first_nonfinite(ad.active_tape())
                ad.active_tape().clear()
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}; first non-finite tensor: {culprit}")
            ad.backward(loss_t)
            (opt2 if phase2 else opt1).step()
            rows.append((step, total_val, parts["chamfer"], parts["edge"],
                         parts["laplacian"], parts["normal"]))

        _set_trainable(model, True)
        extras = {"train/step": np.array([total_steps], dtype=np.float32)}
        extras.update(opt1.state_entries("opt1"))
        extras.update(opt2.state_entries("opt2"))
        save_model(run_cfg.checkpoint_out, model, extras)
        write_loss_csv(run_cfg.loss_csv, rows)
        return run_cfg.checkpoint_out, rows
    finally:
        ad.set_default_dtype(prev_dtype)


def write_loss_csv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,total,chamfer,edge,laplacian,normal\n")
        for row in rows:
            fh.write(",".join(repr(v) for v in row) + "\n")


def read_loss_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            step, *vals = line.strip().split(",")
            rows.append((int(step), *[float(v) for v in vals]))
    return rows
