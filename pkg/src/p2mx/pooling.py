"""Cross-view perceptual feature pooling.

Per graph node: project into every view, bilinearly sample each pyramid
level at the scaled coordinate, concatenate levels, then reduce across
views with order-invariant statistics (mean | max | std) over the valid
views only.  The node's world coordinate is appended, giving
D = 3 * C_total + 3 (1347 for backbone channels 64/128/256).

Also owns the FMAP binary format for precomputed pyramids.
"""

import struct

import numpy as np

from . import autodiff as ad
from .camera import project_points_t
from .errors import FmapFormatError, ShapeMismatchError

STD_EPS = 1e-12


def bilinear_sample(feature_map, x, y):
    """Sample one point from a (C, H, W) map; returns a (C,) tensor."""
    fmap = feature_map if isinstance(feature_map, ad.Tensor) else ad.tensor(feature_map)
    xs = x if isinstance(x, ad.Tensor) else ad.tensor(np.array([float(x)], dtype=fmap.dtype))
    ys = y if isinstance(y, ad.Tensor) else ad.tensor(np.array([float(y)], dtype=fmap.dtype))
    return ad.reshape(ad.bilinear(fmap, xs, ys), (-1,))


def pool_levels(view, xs, ys, levels=None):
    """Sample pyramid levels of a view at image coordinates (P,) and
    concatenate in pyramid order -> (P, C_total).  `levels` optionally
    selects a subset of pyramid indices."""
    if not view.pyramid:
        raise ShapeMismatchError("pool_pyramid", detail="view has an empty pyramid")
    chosen = range(len(view.pyramid)) if levels is None else levels
    outs = []
    for i in chosen:
        fmap, stride = view.pyramid[i], view.strides[i]
        _, h, w = fmap.shape
        lx = ad.clamp(ad.scale(xs, 1.0 / stride), 0.0, float(w - 1))
        ly = ad.clamp(ad.scale(ys, 1.0 / stride), 0.0, float(h - 1))
        outs.append(ad.bilinear(fmap, lx, ly))
    return ad.concat(outs, axis=1)


def pool_pyramid(view, x_img, y_img):
    """Spec surface for a single point -> (C_total,) tensor."""
    dt = view.pyramid[0].dtype if view.pyramid else np.float64
    xs = ad.tensor(np.array([float(x_img)], dtype=dt))
    ys = ad.tensor(np.array([float(y_img)], dtype=dt))
    return ad.reshape(pool_levels(view, xs, ys), (-1,))


def cross_view_stats_batch(feats, valids):
    """Order-invariant per-node statistics over valid views.

    feats: list of (P, C) tensors, one per view; valids: list of (P,) bools.
    Returns (P, 3C): mean | max | std, all-zero rows where no view is valid.
    Population std is sqrt(max(E[f^2] - E[f]^2, 0) + eps), defined for a
    single view and differentiable at zero variance.  Max ties route the
    gradient to the lowest view index.
    """
    k = len(feats)
    if k == 0 or len(valids) != k:
        raise ShapeMismatchError("cross_view_stats", detail="need >= 1 view with matching masks")
    c = feats[0].shape[1]
    for f in feats:
        if f.ndim != 2 or f.shape[1] != c:
            raise ShapeMismatchError("cross_view_stats", *[f.shape for f in feats])

    dt = feats[0].dtype
    masks = [np.asarray(v, dtype=bool).reshape(-1) for v in valids]
    count = np.zeros(feats[0].shape[0], dtype=dt)
    for m in masks:
        count += m
    has_any = count > 0
    inv = ad.tensor((1.0 / np.maximum(count, 1.0))[:, None].astype(dt))

    masked = [f if m.all() else ad.mul(f, ad.tensor(m[:, None].astype(dt)))
              for f, m in zip(feats, masks)]
    total = masked[0]
    total_sq = ad.mul(masked[0], masked[0])
    for f in masked[1:]:
        total = ad.add(total, f)
        total_sq = ad.add(total_sq, ad.mul(f, f))
    mean = ad.mul(total, inv)
    ex2 = ad.mul(total_sq, inv)
    var = ad.clamp(ad.sub(ex2, ad.mul(mean, mean)), lo=0.0)
    std = ad.sqrt_(ad.add(var, ad.tensor(np.full(1, STD_EPS, dtype=dt))))

    run = feats[0]
    run_has = masks[0].copy()
    for f, m in zip(feats[1:], masks[1:]):
        take = m[:, None] & (~run_has[:, None] | (f.data > run.data))
        run = ad.where(take, f, run)
        run_has |= m
    if has_any.all():
        return ad.concat([mean, run, std], axis=1)
    zero_fill = ad.tensor(has_any[:, None].astype(dt))
    return ad.concat([ad.mul(mean, zero_fill), ad.mul(run, zero_fill),
                      ad.mul(std, zero_fill)], axis=1)


def cross_view_stats(per_view, valid):
    """Spec surface for a single node: list of (C,) vectors -> (3C,) tensor."""
    feats = []
    for f in per_view:
        t = f if isinstance(f, ad.Tensor) else ad.tensor(f)
        feats.append(ad.reshape(t, (1, -1)))
    out = cross_view_stats_batch(feats, [np.array([bool(v)]) for v in valid])
    return ad.reshape(out, (-1,))


def assemble_node_feature(stats, coord):
    """stats (3C,) | coord (3,) -> (D,) tensor."""
    s = stats if isinstance(stats, ad.Tensor) else ad.tensor(stats)
    p = coord if isinstance(coord, ad.Tensor) else ad.tensor(np.asarray(coord, dtype=s.dtype))
    return ad.concat([s, p], axis=0)


def pool_node_features(points, views, levels=None):
    """Full per-node feature assembly for (P, 3) points across all views.

    Returns (P, 3*C_total + 3).  Invalid projections contribute zero feature
    vectors and are excluded from the statistics; a node with no valid view
    gets all-zero statistics.
    """
    feats = []
    valids = []
    for view in views:
        xs, ys, valid = project_points_t(points, view.intrinsics, view.extrinsics)
        feats.append(pool_levels(view, xs, ys, levels=levels))
        valids.append(valid)
    stats = cross_view_stats_batch(feats, valids)
    return ad.concat([stats, points], axis=1)


# ---------------------------------------------------------------------------
# FMAP binary format

FMAP_MAGIC = b"FMAP"


def save_fmap(path, pyramid):
    """Write a list of (C, H, W) arrays as little-endian f32."""
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<I", len(pyramid)))
        for level in pyramid:
            arr = np.asarray(getattr(level, "data", level), dtype="<f4")
            if arr.ndim != 3:
                raise FmapFormatError(f"pyramid level must be (C, H, W), got {arr.shape}")
            fh.write(struct.pack("<III", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_fmap(path):
    """Read an FMAP file -> list of float32 (C, H, W) arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FMAP_MAGIC:
        raise FmapFormatError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    try:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        levels = []
        for _ in range(count):
            c, h, w = struct.unpack_from("<III", raw, off)
            off += 12
            n = c * h * w
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(c, h, w)
            off += 4 * n
            levels.append(arr.copy())
    except (struct.error, ValueError) as exc:
        raise FmapFormatError(f"{path}: truncated ({exc})") from None
    if off != len(raw):
        raise FmapFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return levels
