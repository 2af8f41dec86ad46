"""Voxel-based ray sampling, occupancy compositing, losses, training.

A ray is sampled only inside allocated leaf voxels of the octree (a
fixed number of stratified samples per pierced voxel), features are
interpolated and decoded to occupancy/color, and depth and color are
composited with weights w_i = o_i * prod_{j<i}(1 - o_j).  The paper's
printed transmittance uses an inclusive product, under which an opaque
first sample would receive zero weight; the standard exclusive product
is used here so an opaque sample terminates the ray with full weight.

The training step backpropagates the photometric + geometric loss
through compositing, the decoders and trilinear interpolation, then
applies one Adam step to the decoder weights and the touched grid
features.  Everything is deterministic given the caller's RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, KeyframePacket, Pose, camera_rays
from .nets import (
    AdamState,
    MlpDecoder,
    RowAdamState,
    adam_step,
    adam_step_rows,
    decode_color,
    decode_occupancy,
    occupancy_backward,
)
from .octree import OctreeFeatureGrid

UNOBSERVED_VARIANCE = 0.25


@dataclass
class RayBundle:
    """Flat per-sample arrays plus per-ray composited outputs."""

    n_rays: int
    ray_index: np.ndarray      # (n_samples,) which ray each sample feeds
    depths: np.ndarray         # (n_samples,)
    points: np.ndarray         # (n_samples, 3)
    occupancies: np.ndarray | None = None
    colors: np.ndarray | None = None
    weights: np.ndarray | None = None
    depth_out: np.ndarray | None = None   # (n_rays,)
    color_out: np.ndarray | None = None   # (n_rays, 3)
    variance: np.ndarray | None = None    # (n_rays,)
    observed: np.ndarray | None = None    # (n_rays,) bool


@dataclass
class LossReport:
    photometric: float
    geometric: float
    total: float
    n_rays: int
    n_observed: int
    n_depth: int


def sample_segments(ray_index, t_entry, t_exit, n_rays, n_point,
                    rng: np.random.Generator | None = None):
    """Stratified depths per voxel interval.

    Each interval [t_entry, t_exit) contributes exactly ``n_point``
    samples, one per stratum; jitter comes from ``rng`` (midpoints when
    None, for deterministic evaluation renders).  Returns flat
    (sample_ray_index, depths) ordered by ray and depth.
    """
    if n_point < 1:
        raise ValueError("n_point must be >= 1")
    n_seg = len(t_entry)
    if n_seg == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    width = (t_exit - t_entry) / n_point
    strata = np.arange(n_point)
    if rng is None:
        u = np.full((n_seg, n_point), 0.5)
    else:
        u = rng.random((n_seg, n_point))
    depths = t_entry[:, None] + (strata[None, :] + u) * width[:, None]
    sample_ray = np.repeat(ray_index, n_point)
    return sample_ray, depths.reshape(-1)


def sample_ray(grid: OctreeFeatureGrid, ray, n_point: int,
               rng: np.random.Generator | None = None):
    """Voxel-based samples of one ray: (depths, points, observed).

    Each allocated leaf voxel pierced by the ray contributes exactly
    ``n_point`` stratified samples, so the total is n_point times the
    pierced-voxel count; rays that hit nothing are unobserved.
    """
    ridx, te, tx, _ = grid.intersect_rays(
        ray.origin[None, :], ray.direction[None, :]
    )
    _, depths = sample_segments(ridx, te, tx, 1, n_point, rng)
    return depths, ray.at(depths), depths.size > 0


def _pad_by_ray(ray_index, values, n_rays):
    """Scatter flat per-sample values into a (n_rays, max_n) padded array."""
    counts = np.bincount(ray_index, minlength=n_rays)
    max_n = int(counts.max()) if counts.size else 0
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    slot = np.arange(len(ray_index)) - offsets[ray_index]
    shape = (n_rays, max_n) + values.shape[1:]
    padded = np.zeros(shape)
    padded[ray_index, slot] = values
    valid = np.zeros((n_rays, max_n), dtype=bool)
    valid[ray_index, slot] = True
    return padded, valid, (ray_index, slot)


def composite(depths, occupancies, colors):
    """Depth/color compositing of one ray (Eq. of the adopted convention).

    w_i = o_i * prod_{j<i} (1 - o_j); empty input renders depth 0,
    color 0 and is unobserved.
    """
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    o = np.asarray(occupancies, dtype=np.float64).reshape(-1)
    c = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    if not (len(d) == len(o) == c.shape[0]):
        raise ValueError("depths, occupancies and colors must align")
    if len(o) and (o.min() < 0.0 or o.max() > 1.0):
        raise ValueError("occupancy outside [0, 1]")
    if len(o) == 0:
        return 0.0, np.zeros(3), np.empty(0)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - o)[:-1]])
    w = trans * o
    return float(w @ d), w @ c, w


def composite_bundle(bundle: RayBundle):
    """Vectorized compositing of a whole bundle (fills output fields)."""
    if bundle.ray_index.size == 0:
        n = bundle.n_rays
        bundle.depth_out = np.zeros(n)
        bundle.color_out = np.zeros((n, 3))
        bundle.variance = np.full(n, UNOBSERVED_VARIANCE)
        bundle.observed = np.zeros(n, dtype=bool)
        bundle.weights = np.empty(0)
        valid = np.zeros((n, 0), dtype=bool)
        scatter = (bundle.ray_index, np.empty(0, dtype=np.int64))
        return np.zeros((n, 0)), np.zeros((n, 0)), np.zeros((n, 0, 3)), valid, scatter
    padded_o, valid, scatter = _pad_by_ray(bundle.ray_index, bundle.occupancies, bundle.n_rays)
    padded_d, _, _ = _pad_by_ray(bundle.ray_index, bundle.depths, bundle.n_rays)
    padded_c, _, _ = _pad_by_ray(bundle.ray_index, bundle.colors, bundle.n_rays)
    one_minus = np.where(valid, 1.0 - padded_o, 1.0)
    trans = np.cumprod(one_minus, axis=1)
    trans = np.concatenate([np.ones((bundle.n_rays, 1)), trans[:, :-1]], axis=1)
    w = trans * padded_o
    bundle.depth_out = (w * padded_d).sum(axis=1)
    bundle.color_out = (w[:, :, None] * padded_c).sum(axis=1)
    var = np.where(valid, padded_o * (1.0 - padded_o), 0.0).sum(axis=1)
    counts = valid.sum(axis=1)
    observed = counts > 0
    bundle.variance = np.where(
        observed, var / np.maximum(counts, 1), UNOBSERVED_VARIANCE
    )
    bundle.observed = observed
    ridx, slot = scatter
    bundle.weights = w[ridx, slot]
    return w, padded_d, padded_c, valid, scatter


def composite_backward(bundle, w, padded_d, padded_c, valid, scatter,
                       d_depth, d_color):
    """Gradients of the composited outputs wrt occupancies and colors.

    ``d_depth`` (n_rays,), ``d_color`` (n_rays, 3) are upstream loss
    gradients; returns flat per-sample (d_occ, d_color_sample).
    """
    ridx, slot = scatter
    padded_o, _, _ = _pad_by_ray(bundle.ray_index, bundle.occupancies, bundle.n_rays)
    one_minus = np.where(valid, 1.0 - padded_o, 1.0)
    trans = np.cumprod(one_minus, axis=1)
    trans = np.concatenate([np.ones((bundle.n_rays, 1)), trans[:, :-1]], axis=1)
    # dL/dw_i, then through w_i = o_i T_i with T suffix dependence:
    # dL/do_k = g_k T_k - S_k / (1 - o_k),  S_k = sum_{i>k} g_i w_i
    g = d_depth[:, None] * padded_d + np.einsum("rc,rnc->rn", d_color, padded_c)
    gw = g * w
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1]
    suffix = np.concatenate([suffix[:, 1:], np.zeros((bundle.n_rays, 1))], axis=1)
    denom = np.maximum(one_minus, 1e-15)
    d_occ_padded = np.where(valid, g * trans - suffix / denom, 0.0)
    d_col_padded = w[:, :, None] * d_color[:, None, :]
    return d_occ_padded[ridx, slot], d_col_padded[ridx, slot]


def render_uncertainty(occupancies) -> float:
    """Mean Bernoulli variance along a ray; 0.25 when unobserved."""
    o = np.asarray(occupancies, dtype=np.float64).reshape(-1)
    if o.size == 0:
        return UNOBSERVED_VARIANCE
    return float(np.mean(o * (1.0 - o)))


def compute_losses(color_pred, color_gt, depth_pred, depth_gt, observed,
                   depth_valid=None, photometric_weight: float = 1.0) -> LossReport:
    """Photometric MSE plus geometric L1 over observed rays.

    Rays with invalid ground-truth depth are excluded from the
    geometric term only.  Raises when no ray is observed.
    """
    observed = np.asarray(observed, dtype=bool)
    n_obs = int(observed.sum())
    if n_obs == 0:
        raise ValueError("no observed rays in the batch")
    if depth_valid is None:
        depth_valid = np.asarray(depth_gt) > 0
    cdiff = np.asarray(color_pred)[observed] - np.asarray(color_gt)[observed]
    l_p = float(np.mean(np.square(cdiff)))
    dmask = observed & np.asarray(depth_valid, dtype=bool)
    n_depth = int(dmask.sum())
    l_g = float(np.mean(np.abs(np.asarray(depth_pred)[dmask] - np.asarray(depth_gt)[dmask]))) if n_depth else 0.0
    return LossReport(
        photometric=l_p,
        geometric=l_g,
        total=photometric_weight * l_p + l_g,
        n_rays=len(observed),
        n_observed=n_obs,
        n_depth=n_depth,
    )


class NeuralField:
    """One octree feature grid plus its occupancy and color decoders."""

    def __init__(self, grid: OctreeFeatureGrid, hidden: int = 32,
                 lr_features: float = 1e-2, lr_decoders: float = 1e-3,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.grid = grid
        self.lr_features = lr_features
        self.occ_decoder = MlpDecoder(grid.feature_dim, 1, hidden, rng)
        self.color_decoder = MlpDecoder(grid.feature_dim, 3, hidden, rng)
        self.occ_adam = AdamState.for_params(self.occ_decoder.params(), lr_decoders)
        self.color_adam = AdamState.for_params(self.color_decoder.params(), lr_decoders)
        self.feature_adam = {
            level: RowAdamState(lr=lr_features) for level in grid.active_levels
        }

    def rebind_grid(self, grid: OctreeFeatureGrid):
        """Swap in a restored grid, resetting the feature optimizer."""
        self.grid = grid
        self.feature_adam = {
            level: RowAdamState(lr=self.lr_features) for level in grid.active_levels
        }

    def query(self, points: np.ndarray):
        """(occupancy, color, record) at arbitrary in-extent points."""
        feats, rec = self.grid.interpolate_many(points)
        occ, _ = decode_occupancy(self.occ_decoder, feats)
        col, _ = decode_color(self.color_decoder, feats)
        return occ, col, rec


def build_bundle(field: NeuralField, origins, dirs, n_point: int,
                 rng: np.random.Generator | None = None,
                 t_min: float = 0.0, t_max: float = np.inf,
                 max_voxels_per_ray: int = 0) -> RayBundle:
    """Sample rays through the grid (local frame) into a RayBundle."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    n_rays = o.shape[0]
    ridx, te, tx, _ = field.grid.intersect_rays(o, d, t_min, t_max,
                                                max_voxels_per_ray)
    sray, sdep = sample_segments(ridx, te, tx, n_rays, n_point, rng)
    pts = o[sray] + sdep[:, None] * d[sray]
    return RayBundle(n_rays=n_rays, ray_index=sray, depths=sdep, points=pts)


def render_rays(field: NeuralField, origins, dirs, n_point: int = 10,
                rng: np.random.Generator | None = None):
    """Render a local-frame ray batch; returns the completed bundle."""
    bundle = build_bundle(field, origins, dirs, n_point, rng)
    if bundle.points.shape[0]:
        feats, rec = field.grid.interpolate_many(bundle.points)
        occ, _ = decode_occupancy(field.occ_decoder, feats)
        col, _ = decode_color(field.color_decoder, feats)
        bundle.occupancies = occ
        bundle.colors = col
    else:
        bundle.occupancies = np.empty(0)
        bundle.colors = np.empty((0, 3))
    composite_bundle(bundle)
    return bundle


def render_view(field: NeuralField, cam_to_local: Pose, intr: Intrinsics,
                n_point: int = 10, chunk: int = 4096):
    """Deterministic full-image render from a camera pose in grid frame.

    Rays are processed in chunks to bound the padded compositing
    buffers.  Returns (color, depth, variance, observed) images; color
    is clamped to [0, 1].
    """
    origin, dirs = camera_rays(intr, cam_to_local)
    flat_dirs = dirs.reshape(-1, 3)
    n = flat_dirs.shape[0]
    color = np.empty((n, 3))
    depth = np.empty(n)
    var = np.empty(n)
    observed = np.empty(n, dtype=bool)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        d = flat_dirs[sl]
        bundle = render_rays(field, np.broadcast_to(origin, d.shape), d,
                             n_point, rng=None)
        color[sl] = bundle.color_out
        depth[sl] = bundle.depth_out
        var[sl] = bundle.variance
        observed[sl] = bundle.observed
    h, w = intr.height, intr.width
    return (
        np.clip(color, 0.0, 1.0).reshape(h, w, 3),
        depth.reshape(h, w),
        var.reshape(h, w),
        observed.reshape(h, w),
    )


def train_step(field: NeuralField, keyframes: list[KeyframePacket],
               m_pixels: int, rng: np.random.Generator,
               n_point: int = 10, photometric_weight: float = 1.0,
               max_voxels_per_ray: int = 0) -> LossReport:
    """One optimization step of Eq.-style joint feature/decoder training.

    Keyframe poses must already be expressed in the grid (anchor) frame.
    Samples ``m_pixels`` uniformly across the keyframes, renders with
    stratified jitter, backpropagates the weighted loss and applies one
    Adam step to decoder weights and touched grid features.
    """
    if not keyframes:
        raise ValueError("train_step needs at least one keyframe")
    kf_choice = rng.integers(0, len(keyframes), m_pixels)
    origins = np.empty((m_pixels, 3))
    dirs = np.empty((m_pixels, 3))
    color_gt = np.empty((m_pixels, 3))
    depth_gt = np.empty(m_pixels)
    for i, kf in enumerate(keyframes):
        sel = np.nonzero(kf_choice == i)[0]
        if sel.size == 0:
            continue
        h, w = kf.depth.shape
        us = rng.integers(0, w, sel.size)
        vs = rng.integers(0, h, sel.size)
        cam_dirs = np.stack(
            [
                (us - kf.intrinsics.cx) / kf.intrinsics.fx,
                (vs - kf.intrinsics.cy) / kf.intrinsics.fy,
                np.ones(sel.size),
            ],
            axis=-1,
        )
        cam_dirs /= np.linalg.norm(cam_dirs, axis=-1, keepdims=True)
        origins[sel] = kf.pose.translation
        dirs[sel] = cam_dirs @ kf.pose.rotation.T
        color_gt[sel] = kf.rgb[vs, us]
        depth_gt[sel] = kf.depth[vs, us]

    bundle = build_bundle(field, origins, dirs, n_point, rng,
                          max_voxels_per_ray=max_voxels_per_ray)
    if bundle.points.shape[0] == 0:
        raise ValueError("no observed rays in the batch")
    feats, rec = field.grid.interpolate_many(bundle.points)
    occ, occ_acts = decode_occupancy(field.occ_decoder, feats)
    col, col_acts = decode_color(field.color_decoder, feats)
    bundle.occupancies = occ
    bundle.colors = col
    w, padded_d, padded_c, valid, scatter = composite_bundle(bundle)

    report = compute_losses(
        bundle.color_out, color_gt, bundle.depth_out, depth_gt,
        bundle.observed, depth_gt > 0, photometric_weight,
    )

    observed = bundle.observed
    n_obs = int(observed.sum())
    dmask = observed & (depth_gt > 0)
    n_depth = max(int(dmask.sum()), 1)
    d_color = np.zeros((bundle.n_rays, 3))
    d_color[observed] = (
        photometric_weight * 2.0 * (bundle.color_out[observed] - color_gt[observed])
        / (n_obs * 3)
    )
    d_depth = np.zeros(bundle.n_rays)
    d_depth[dmask] = np.sign(bundle.depth_out[dmask] - depth_gt[dmask]) / n_depth

    d_occ, d_col = composite_backward(
        bundle, w, padded_d, padded_c, valid, scatter, d_depth, d_color
    )
    dz_occ, occ_grads = occupancy_backward(field.occ_decoder, occ_acts, occ, d_occ)
    dz_col, col_grads = field.color_decoder.backward(col_acts, d_col)
    field.grid.scatter_gradient(rec, dz_occ + dz_col)

    adam_step(field.occ_decoder.params(), occ_grads, field.occ_adam)
    adam_step(field.color_decoder.params(), col_grads, field.color_adam)
    for level, (rows, grads) in field.grid.touched_gradients().items():
        if rows.size:
            adam_step_rows(
                field.grid.features[level], rows, grads,
                field.feature_adam[level], field.grid.feature_count(level),
            )
    field.grid.zero_gradients()
    return report
