"""Neural fields: decoder MLPs evaluated on interpolated grid features.

A field query couples three differentiable stages: trilinear interpolation
(per level), coarse-to-fine combination, and the decoder MLP, possibly
restricted to a column slice of the combined vector (the panoptic split).
Geometry and semantic tables share voxel locations (corners are allocated
jointly), so one BatchLocation feeds every loss term of a training step.

The spatial gradient of the scalar geometry field is analytic: the decoder's
input gradient chained through the spatial derivatives of the interpolation
weights. Training on the eikonal residual needs derivatives OF that gradient;
with ReLU decoders the second derivative w.r.t. the input vanishes a.e., so
the remaining terms are closed-form (see eikonal_backward).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import Mlp
from .octree import (
    LevelQuery,
    OctreeFeatureGrid,
    SparseGrads,
    trilinear_weight_gradients,
    trilinear_weight_hessians,
)


def _restrict(q: LevelQuery, keep: np.ndarray) -> LevelQuery:
    return LevelQuery(q.level, q.side, q.rows[keep], q.weights[keep], q.t[keep], q.present[keep])


@dataclass
class BatchLocation:
    """Per-level interpolation info for one batch of points."""

    xs: np.ndarray  # (n, 3)
    queries: list  # per-level LevelQuery
    present: np.ndarray  # (n,) finest level allocated

    def restrict(self, keep: np.ndarray) -> "BatchLocation":
        return BatchLocation(self.xs[keep], [_restrict(q, keep) for q in self.queries], self.present[keep])


def locate_batch(grid: OctreeFeatureGrid, xs: np.ndarray) -> BatchLocation:
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    queries = [grid.locate(xs, level) for level in range(grid.levels)]
    return BatchLocation(xs, queries, queries[0].present.copy())


def combined_features(grid: OctreeFeatureGrid, loc: BatchLocation, table: str) -> np.ndarray:
    """Coarse-to-fine combined feature vectors (zeros at absent levels)."""
    parts = [grid.gather(q, table) for q in loc.queries]
    order = range(grid.levels - 1, -1, -1)
    if grid.config.level_combine == "concat":
        return np.concatenate([parts[level] for level in order], axis=1)
    out = np.zeros_like(parts[0])
    for level in order:
        out += parts[level]
    return out


@dataclass
class FieldQuery:
    """One batched field evaluation with its backward bookkeeping.

    All arrays cover only the present points; `present` maps them back to
    the caller's batch.
    """

    loc: BatchLocation  # present points only
    present: np.ndarray  # mask into the original batch
    concat: np.ndarray  # (n, concat_width) combined features
    trace: object  # decoder ForwardTrace on the sliced input
    values: np.ndarray  # (n, out) decoder outputs
    table: str
    cols: slice

    @property
    def xs(self) -> np.ndarray:
        return self.loc.xs

    @property
    def queries(self) -> list:
        return self.loc.queries


def field_forward_located(
    grid: OctreeFeatureGrid,
    decoder: Mlp,
    loc: BatchLocation,
    table: str,
    cols: slice | None = None,
) -> FieldQuery:
    """Evaluate the decoder at the present points of an existing location."""
    keep = loc.present
    loc_p = loc.restrict(keep) if not keep.all() else loc
    concat = combined_features(grid, loc_p, table)
    cols = cols if cols is not None else slice(0, concat.shape[1])
    values, trace = decoder.forward(concat[:, cols])
    return FieldQuery(loc_p, keep, concat, trace, values, table, cols)


def field_forward(
    grid: OctreeFeatureGrid,
    decoder: Mlp,
    xs: np.ndarray,
    table: str,
    cols: slice | None = None,
) -> FieldQuery:
    """Locate + evaluate in one call (absent points are dropped)."""
    return field_forward_located(grid, decoder, locate_batch(grid, xs), table, cols)


def field_backward(
    grid: OctreeFeatureGrid,
    decoder: Mlp,
    fq: FieldQuery,
    d_values: np.ndarray,
):
    """Backprop d(loss)/d(values) to decoder params and corner features.

    Returns (MlpGrads, per-level feature gradient arrays).
    """
    mlp_grads, d_sliced = decoder.backward(fq.trace, d_values)
    d_concat = np.zeros_like(fq.concat)
    d_concat[:, fq.cols] = d_sliced
    feat_grads = grid.scatter_feature_grads(fq.queries, fq.table, d_concat)
    return mlp_grads, feat_grads


def spatial_gradient(grid: OctreeFeatureGrid, decoder: Mlp, fq: FieldQuery) -> np.ndarray:
    """Analytic d f / d x for a scalar field query: (n, 3).

    g = sum_levels (d u_level / d x)^T v_level with v the decoder input
    gradient and d u_level / d x = sum_corners F_c (grad w_c)^T.
    """
    v_full = np.zeros_like(fq.concat)
    v_full[:, fq.cols] = decoder.input_jacobian_scalar(fq.trace)
    g = np.zeros((fq.concat.shape[0], 3))
    for q in fq.queries:
        sl = grid.level_slice(q.level, fq.table)
        v = v_full[:, sl]  # (n, h)
        pool = grid.pool(q.level, fq.table)
        safe = np.where(q.rows >= 0, q.rows, 0)
        feats = pool[safe]  # (n, 8, h)
        wg = trilinear_weight_gradients(q.t, q.side)  # (n, 8, 3)
        vf = np.einsum("nh,nch->nc", v, feats)  # v . F_c
        vf = np.where(q.present[:, None], vf, 0.0)
        g += np.einsum("nc,nca->na", vf, wg)
    return g


def eikonal_loss(
    grid: OctreeFeatureGrid, decoder: Mlp, fq: FieldQuery
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean | ||grad f|| - 1 | over the query batch.

    Returns (loss, g, gnorm) with g the per-sample spatial gradients.
    """
    g = spatial_gradient(grid, decoder, fq)
    gnorm = np.linalg.norm(g, axis=1)
    loss = float(np.mean(np.abs(gnorm - 1.0))) if len(gnorm) else 0.0
    return loss, g, gnorm


def eikonal_backward(
    grid: OctreeFeatureGrid,
    decoder: Mlp,
    fq: FieldQuery,
    g: np.ndarray,
    gnorm: np.ndarray,
):
    """Gradients of mean | ||g|| - 1 | w.r.t. decoder params and features.

    Let s = sign(||g|| - 1) and ghat = g / ||g||. Parameter gradients come
    from the directional derivative v . (J ghat) via the dotted pass (ReLU
    input Hessian is 0 a.e.); feature gradients from the explicit F_c
    dependence of J: dL/dF_c = c * (grad w_c . ghat) v_level.
    """
    n = len(gnorm)
    width = grid.h1 if fq.table == "geometry" else grid.h2
    if n == 0:
        return decoder.zero_grads(), [SparseGrads.empty(width) for _ in range(grid.levels)]
    safe_norm = np.where(gnorm > 1e-12, gnorm, 1.0)
    s = np.sign(gnorm - 1.0)
    coeff = s / n  # d loss / d ||g||, per sample
    ghat = g / safe_norm[:, None]

    v_full = np.zeros_like(fq.concat)
    v_full[:, fq.cols] = decoder.input_jacobian_scalar(fq.trace)

    # input-space direction r = J ghat, built per level block
    r_full = np.zeros_like(fq.concat)
    feat_grads = []
    for q in fq.queries:
        sl = grid.level_slice(q.level, fq.table)
        pool = grid.pool(q.level, fq.table)
        safe = np.where(q.rows >= 0, q.rows, 0)
        feats = pool[safe]  # (n, 8, h)
        wg = trilinear_weight_gradients(q.t, q.side)  # (n, 8, 3)
        wg = np.where(q.present[:, None, None], wg, 0.0)
        wdotg = np.einsum("nca,na->nc", wg, ghat)  # (n, 8)
        r_full[:, sl] += np.einsum("nc,nch->nh", wdotg, feats)
        # feature grads: coeff * (grad w_c . ghat) * v_level
        v = v_full[:, sl]
        contrib = (coeff[:, None] * wdotg)[:, :, None] * v[:, None, :]  # (n, 8, h)
        ok = q.present
        if np.any(ok):
            feat_grads.append(
                SparseGrads.accumulate(
                    q.rows[ok].reshape(-1), contrib[ok].reshape(-1, contrib.shape[2])
                )
            )
        else:
            feat_grads.append(SparseGrads.empty(width))
    mlp_grads = decoder.directional_param_grads(fq.trace, r_full[:, fq.cols], coeff)
    return mlp_grads, feat_grads


def eikonal_spatial_gradient(
    grid: OctreeFeatureGrid,
    decoder: Mlp,
    fq: FieldQuery,
    g: np.ndarray,
    gnorm: np.ndarray,
) -> np.ndarray:
    """d(mean | ||g|| - 1 |)/d x per sample: (n, 3).

    Uses the interpolation-weight Hessians; the decoder contributes nothing
    a.e. (piecewise-linear in its input).
    """
    n = len(gnorm)
    safe_norm = np.where(gnorm > 1e-12, gnorm, 1.0)
    coeff = np.sign(gnorm - 1.0) / max(n, 1)
    ghat = g / safe_norm[:, None]
    v_full = np.zeros_like(fq.concat)
    v_full[:, fq.cols] = decoder.input_jacobian_scalar(fq.trace)
    out = np.zeros((n, 3))
    for q in fq.queries:
        sl = grid.level_slice(q.level, fq.table)
        v = v_full[:, sl]
        pool = grid.pool(q.level, fq.table)
        safe = np.where(q.rows >= 0, q.rows, 0)
        feats = pool[safe]
        vf = np.einsum("nh,nch->nc", v, feats)
        vf = np.where(q.present[:, None], vf, 0.0)
        wh = trilinear_weight_hessians(q.t, q.side)  # (n, 8, 3, 3)
        dg_dx = np.einsum("nc,ncab->nab", vf, wh)  # d g_a / d x_b
        out += np.einsum("na,nab->nb", ghat, dg_dx)
    return coeff[:, None] * out
