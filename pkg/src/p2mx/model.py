"""The deformation network.

Pieces: a small trainable CNN producing three-level feature pyramids at
strides (1, 2, 4); graph convolutions with mean neighbor aggregation; a
six-layer residual scoring stack that turns per-node features into
hypothesis scores; soft-argmax deformation reasoning (softmax-weighted sum
of candidate positions); the iterative refiner; and the coarse-stage
deformer that grows an ellipsoid through three blocks with subdivision in
between.

Scoring weights are shared across every vertex: all fans are processed as
one disjoint union graph.  Parameter namespaces: "backbone/*", "coarse/*",
"mdn/*".
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, P2mxError, ShapeMismatchError
from .mesh import (FAN_SIZE, ellipsoid, fan_neighbor_block, fan_offsets,
                   subdivide, subdivision_plan)
from .pooling import pool_node_features


class ParamStore:
    """Named trainable tensors, created in a fixed order from one seeded
    generator so initialization is reproducible."""

    def __init__(self, rng):
        self.params = {}
        self.rng = rng

    def create(self, name, shape, fan_in=None, fan_out=None, zero=False):
        if name in self.params:
            raise P2mxError(f"duplicate parameter name '{name}'")
        if zero:
            data = np.zeros(shape, dtype=ad.default_dtype())
        else:
            data = ad.glorot_uniform(self.rng, shape, fan_in, fan_out)
        t = ad.tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def names(self):
        return list(self.params)

    def tensors(self):
        return list(self.params.values())

    def zero_(self):
        for p in self.params.values():
            p.data = np.zeros_like(p.data)

    def state_dict(self):
        return {name: p.data.astype(np.float32) for name, p in self.params.items()}

    def load_state(self, state):
        """Load parameter arrays by name; unknown extra names are ignored,
        missing or mis-shaped parameters are errors."""
        for name, p in self.params.items():
            if name not in state:
                raise CheckpointError(f"checkpoint is missing parameter '{name}'")
            arr = np.asarray(state[name])
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(
                    f"parameter '{name}': checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype)


class GraphConv:
    """out_p = W_self^T f_p + W_neigh^T mean_{q in N(p)} f_q + bias.

    The adjacency is a constant row-normalized matrix: sparse CSR for mesh
    graphs, or a dense (43, 43) block applied per fan.  An isolated node's
    neighbor term is the zero vector.
    """

    def __init__(self, store, prefix, d_in, d_out):
        self.w_self = store.create(f"{prefix}/w_self", (d_in, d_out), d_in, d_out)
        self.w_neigh = store.create(f"{prefix}/w_neigh", (d_in, d_out), d_in, d_out)
        self.bias = store.create(f"{prefix}/bias", (d_out,), zero=True)
        self.d_in = d_in
        self.d_out = d_out

    def __call__(self, x, adj, activate=True):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeMismatchError("graph_conv", x.shape, (self.d_in, self.d_out))
        neigh = ad.matmul(x, self.w_neigh)
        if isinstance(adj, np.ndarray):       # repeated per-fan block
            agg = ad.block_matmul(adj, neigh)
        else:                                 # general sparse adjacency
            agg = ad.spmm(adj, neigh)
        out = ad.add(ad.add(ad.matmul(x, self.w_self), agg), self.bias)
        return ad.relu(out) if activate else out


def graph_conv(features, adjacency, layer):
    """Spec surface: apply one graph convolution layer (ReLU included)."""
    return layer(features, adjacency, activate=True)


class GraphResidualStack:
    """Six graph convolutions: d_in -> width (1), width convs (2..5) with
    additive skips combining (2,3) and (4,5), and a linear width -> d_out
    head (6)."""

    def __init__(self, store, prefix, d_in, width, d_out):
        self.layers = [GraphConv(store, f"{prefix}/gc1", d_in, width)]
        for i in range(2, 6):
            self.layers.append(GraphConv(store, f"{prefix}/gc{i}", width, width))
        self.layers.append(GraphConv(store, f"{prefix}/gc6", width, d_out))

    def __call__(self, x, adj):
        gc1, gc2, gc3, gc4, gc5, gc6 = self.layers
        h1 = gc1(x, adj)
        h2 = gc2(h1, adj)
        h3 = gc3(h2, adj)
        a1 = ad.add(h2, h3)
        h4 = gc4(a1, adj)
        h5 = gc5(h4, adj)
        a2 = ad.add(h4, h5)
        return gc6(a2, adj, activate=False)


class Backbone:
    """Three-level pyramid: two 3x3 conv+ReLU blocks per level, 2x2 max
    pooling between levels, strides (1, 2, 4)."""

    def __init__(self, store, prefix, in_channels, channels):
        self.channels = tuple(channels)
        self.convs = []
        prev = in_channels
        for level, ch in enumerate(self.channels, start=1):
            for j in (1, 2):
                name = f"{prefix}/l{level}c{j}"
                fan_in = prev * 9
                fan_out = ch * 9
                w = store.create(f"{name}/w", (ch, prev, 3, 3), fan_in, fan_out)
                b = store.create(f"{name}/b", (ch,), zero=True)
                self.convs.append((w, b))
                prev = ch

    def __call__(self, image):
        if image.ndim != 3 or image.shape[1] % 4 or image.shape[2] % 4:
            raise ShapeMismatchError("backbone", image.shape,
                                     detail="image must be (C, H, W) with H, W divisible by 4")
        x = image
        pyramid = []
        it = iter(self.convs)
        for level in range(3):
            if level:
                x = ad.maxpool2(x)
            for _ in range(2):
                w, b = next(it)
                x = ad.relu(ad.conv2d(x, w, b, stride=1, pad=1))
            pyramid.append(x)
        return pyramid


@dataclass
class ModelConfig:
    in_channels: int = 1
    backbone_channels: tuple = (16, 32, 64)
    scoring_width: int = 192
    coarse_width: int = 192
    coarse_level: int = 2
    coarse_radius: float = 0.9
    coarse_pyramid_levels: tuple = (1, 2)  # the two coarsest levels
    seed: int = 0

    @property
    def feature_dim(self):
        return 3 * sum(self.backbone_channels) + 3

    @property
    def coarse_feature_dim(self):
        return 3 * sum(self.backbone_channels[i] for i in self.coarse_pyramid_levels) + 3


@dataclass
class RefineConfig:
    iterations: int = 3
    scales: tuple = (0.02,)
    view_limit: int | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise P2mxError(f"refine iterations must be >= 1, got {self.iterations}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise P2mxError(f"hypothesis scales must be positive, got {self.scales}")

    def scale_for(self, iteration):
        return self.scales[min(iteration, len(self.scales) - 1)]


class DeformationModel:
    """Backbone + coarse deformer + hypothesis scoring, one parameter store."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore(np.random.default_rng(config.seed))
        self.backbone = Backbone(self.store, "backbone", config.in_channels,
                                 config.backbone_channels)
        self.coarse_blocks = [
            GraphResidualStack(self.store, f"coarse/block{i}",
                               config.coarse_feature_dim, config.coarse_width, 3)
            for i in range(3)
        ]
        self.scoring = GraphResidualStack(self.store, "mdn/score",
                                          config.feature_dim, config.scoring_width, 1)

        r = config.coarse_radius
        self.coarse_meshes = [ellipsoid((r, r, r), config.coarse_level)]
        self.coarse_meshes.append(subdivide(self.coarse_meshes[0]))
        self.coarse_meshes.append(subdivide(self.coarse_meshes[1]))
        self.coarse_plans = [
            subdivision_plan(self.coarse_meshes[0].faces, self.coarse_meshes[0].n_vertices)[1],
            subdivision_plan(self.coarse_meshes[1].faces, self.coarse_meshes[1].n_vertices)[1],
        ]

    # -- feature extraction --------------------------------------------------

    def pyramid_for_image(self, image):
        """Spec surface backbone_forward: (C, H, W) array or tensor -> pyramid."""
        t = image if isinstance(image, ad.Tensor) else ad.tensor(
            np.asarray(image, dtype=ad.default_dtype()))
        return self.backbone(t)

    # -- coarse stage ----------------------------------------------------------

    def coarse_vertex_stages(self, views):
        """Three deformation blocks with subdivision between them.

        Returns [(vertices Tensor, topology Mesh, input vertex array)] per
        block; the last entry is the coarse mesh handed to the refiner.  The
        input vertices serve as the Laplacian reference for each block.
        """
        if not views:
            raise P2mxError("coarse stage needs at least one view")
        levels = self.config.coarse_pyramid_levels
        verts = ad.tensor(self.coarse_meshes[0].vertices.astype(ad.default_dtype()))
        stages = []
        for i, block in enumerate(self.coarse_blocks):
            topo = self.coarse_meshes[i]
            verts_in = verts.data
            feats = pool_node_features(verts, views, levels=levels)
            offsets = block(feats, topo.neighbor_csr())
            verts = ad.add(verts, offsets)
            stages.append((verts, topo, verts_in))
            if i < 2:
                verts = subdivide_vertices_t(verts, self.coarse_plans[i])
        return stages

    # -- refinement ------------------------------------------------------------

    def refine_vertex_steps(self, vertices, views, refine_cfg: RefineConfig):
        """Iteratively deform (N, 3) vertices; returns the per-iteration
        vertex tensors.

        Each iteration re-centers the hypothesis fans on the current
        vertices, scores all fans with shared weights, and applies the
        soft-argmax update to every vertex simultaneously (fans are all
        built from the same pre-iteration vertex set).
        """
        if not views:
            raise P2mxError("refinement needs at least one view")
        if refine_cfg.view_limit is not None:
            views = views[: refine_cfg.view_limit]
        n = vertices.shape[0]
        adj = fan_neighbor_block()
        offsets = fan_offsets().astype(vertices.dtype)
        v = vertices
        out = []
        for it in range(refine_cfg.iterations):
            scale = refine_cfg.scale_for(it)
            centers = ad.reshape(v, (n, 1, 3))
            hyp = ad.add(centers, ad.tensor((scale * offsets)[None, :, :]))
            pos = ad.concat([centers, hyp], axis=1)            # (N, 43, 3)
            flat = ad.reshape(pos, (n * FAN_SIZE, 3))
            feats = pool_node_features(flat, views)
            logits = self.scoring(feats, adj)                  # (43N, 1)
            scores = ad.softmax(ad.reshape(logits, (n, FAN_SIZE)))
            v = ad.sum_(ad.mul(ad.reshape(scores, (n, FAN_SIZE, 1)), pos), axis=1)
            out.append(v)
        return out


def subdivide_vertices_t(verts, pairs):
    """Differentiable edge-midpoint subdivision given a plan's edge pairs."""
    mids = ad.scale(ad.add(ad.gather_rows(verts, pairs[:, 0]),
                           ad.gather_rows(verts, pairs[:, 1])), 0.5)
    return ad.concat([verts, mids], axis=0)


# ---------------------------------------------------------------------------
# spec operation surfaces

def score_hypotheses(model, fan, node_features):
    """Scores for one fan's 43 nodes; they sum to 1 (softmax over the fan)."""
    feats = node_features if isinstance(node_features, ad.Tensor) else ad.tensor(node_features)
    if feats.shape != (FAN_SIZE, model.config.feature_dim):
        raise ShapeMismatchError("score_hypotheses", feats.shape,
                                 (FAN_SIZE, model.config.feature_dim))
    logits = model.scoring(feats, fan_neighbor_block())
    return ad.reshape(ad.softmax(ad.reshape(logits, (1, FAN_SIZE))), (FAN_SIZE,))


def deformation_reasoning(fan, scores):
    """Soft-argmax: new vertex position = sum_i s_i * positions_i."""
    s = scores if isinstance(scores, ad.Tensor) else ad.tensor(scores)
    total = float(np.sum(s.data))
    if abs(total - 1.0) > 1e-6:
        raise ShapeMismatchError("deformation_reasoning", s.shape,
                                 detail=f"scores must sum to 1, got {total}")
    pos = ad.tensor(fan.positions.astype(s.dtype))
    return ad.sum_(ad.mul(ad.reshape(s, (FAN_SIZE, 1)), pos), axis=0)


def mdn_refine(mesh, views, model, refine_cfg):
    """Refine a mesh's vertices; faces are unchanged."""
    verts = ad.tensor(mesh.vertices.astype(ad.default_dtype()))
    steps = model.refine_vertex_steps(verts, views, refine_cfg)
    return mesh.with_vertices(steps[-1].data.astype(np.float64))


def coarse_generate(views, model):
    """Generate the coarse mesh from the model's starting ellipsoid."""
    stages = model.coarse_vertex_stages(views)
    verts, topo, _ = stages[-1]
    return topo.with_vertices(verts.data.astype(np.float64))


# ---------------------------------------------------------------------------
# persistence: parameters plus enough architecture metadata to rebuild

def _meta_vector(config: ModelConfig):
    return np.array([config.in_channels, *config.backbone_channels,
                     config.scoring_width, config.coarse_width,
                     config.coarse_level, config.coarse_radius], dtype=np.float32)


def save_model(path, model, extras=None):
    from .checkpoint import save_checkpoint

    state = model.store.state_dict()
    state["meta/architecture"] = _meta_vector(model.config)
    if extras:
        state.update(extras)
    save_checkpoint(path, state)


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, leftover entries)."""
    from .checkpoint import load_checkpoint

    state = load_checkpoint(path)
    meta = state.get("meta/architecture")
    if meta is None or meta.shape != (8,):
        raise CheckpointError(f"{path}: missing or malformed architecture metadata")
    config = ModelConfig(in_channels=int(meta[0]),
                         backbone_channels=(int(meta[1]), int(meta[2]), int(meta[3])),
                         scoring_width=int(meta[4]), coarse_width=int(meta[5]),
                         coarse_level=int(meta[6]), coarse_radius=float(meta[7]))
    model = DeformationModel(config)
    model.store.load_state(state)
    known = set(model.store.names()) | {"meta/architecture"}
    extras = {k: v for k, v in state.items() if k not in known}
    return model, extras
