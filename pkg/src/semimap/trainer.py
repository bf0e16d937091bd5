"""Joint optimization of octree features and decoder parameters.

Four mapping modes combine the loss terms:

    batch-semantic          L1 + l2*L2 + l4*L4
    batch-panoptic          L1 + l2*L2 + l4*L4 + l5*L5
    incremental-semantic    L1 + l2*L2 + l3*L3 + l4*L4
    incremental-panoptic    L1 + l2*L2 + l3*L3 + l4*L4 + l5*L5

Batch modes train on all scans jointly; incremental modes consume scans in
order, accumulating per-parameter importance from the SDF-term gradients and
penalizing drift from the previous scan's parameter snapshot.

Scans fed to the trainer must already carry dense instance ids in [0, q)
(see datasets.build_instance_vocab).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import fields
from .errors import ConfigError, TrainingError
from .losses import (
    ImportanceStore,
    LossWeights,
    cross_entropy_loss,
    forgetting_loss,
    instance_targets,
    sdf_loss,
)
from .mlp import Adam, AdamConfig, Mlp, MlpGrads, SparseRowAdam
from .octree import GEOMETRY, SEMANTIC, OctreeFeatureGrid, SparseGrads
from .sampler import RayPool, SampleBatch, build_batch

MODES = (
    "batch-semantic",
    "batch-panoptic",
    "incremental-semantic",
    "incremental-panoptic",
)


def is_incremental(mode: str) -> bool:
    return mode.startswith("incremental")


def is_panoptic(mode: str) -> bool:
    return mode.endswith("panoptic")


@dataclass
class TrainConfig:
    mode: str = "batch-semantic"
    steps: int = 2000  # batch modes: total optimization steps
    steps_per_scan: int = 200  # incremental modes
    rays_per_step: int = 1024
    n_per_ray: int = 6
    band_width: float = 0.3  # [m], surface-band half width
    min_range: float = 1.5  # [m], free-space sampling starts here
    seed: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    eik_fd_step: float = 1e-4  # finite-difference step for gradient audits
    lr_features: float = 1e-3
    lr_mlp: float = 1e-3
    sigma: float = 1.0 / 3.0  # panoptic split fraction of the semantic vector
    hidden_width: int = 32
    hidden_layers: int = 2
    filter_dynamic: bool = True
    checkpoint_every: int = 200

    def validate(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"unknown mode {self.mode!r}")
        if self.n_per_ray % 2 != 0 or self.n_per_ray < 2:
            problems.append("n_per_ray must be even and >= 2")
        if self.rays_per_step < 1:
            problems.append("rays_per_step must be positive")
        if self.band_width <= 0.0:
            problems.append("band_width must be positive")
        if self.mode in MODES:
            if not is_incremental(self.mode) and self.weights.lambda3 != 0.0:
                problems.append("lambda3 applies only to incremental modes")
            if not is_panoptic(self.mode) and self.weights.lambda5 != 0.0:
                problems.append("lambda5 applies only to panoptic modes")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


@dataclass
class Decoders:
    """The decoder set for one mapping mode."""

    gnf: Mlp
    snf: Mlp | None = None
    pnf_sem: Mlp | None = None
    pnf_inst: Mlp | None = None
    sem_cols: slice | None = None  # panoptic class slice of the combined vector
    inst_cols: slice | None = None

    def named(self):
        for name in ("gnf", "snf", "pnf_sem", "pnf_inst"):
            dec = getattr(self, name)
            if dec is not None:
                yield name, dec

    def copy(self) -> "Decoders":
        return Decoders(
            self.gnf.copy(),
            self.snf.copy() if self.snf else None,
            self.pnf_sem.copy() if self.pnf_sem else None,
            self.pnf_inst.copy() if self.pnf_inst else None,
            self.sem_cols,
            self.inst_cols,
        )


def split_columns(grid: OctreeFeatureGrid, sigma: float) -> tuple[slice, slice]:
    """Class/instance column ranges of the combined semantic vector."""
    width = grid.concat_width(SEMANTIC)
    exact = sigma * width
    sem_w = int(round(exact))
    if abs(exact - sem_w) > 1e-9 or not 0 < sem_w < width:
        raise ConfigError(
            f"sigma={sigma} does not split the combined width {width} on an integer boundary"
        )
    return slice(0, sem_w), slice(sem_w, width)


def build_decoders(
    mode: str,
    grid: OctreeFeatureGrid,
    num_classes: int,
    num_instances: int = 0,
    hidden_width: int = 32,
    hidden_layers: int = 2,
    sigma: float = 1.0 / 3.0,
    seed: int = 0,
) -> Decoders:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    hid = [hidden_width] * hidden_layers
    gnf = Mlp([grid.concat_width(GEOMETRY)] + hid + [1], seed=seed)
    dec = Decoders(gnf)
    if is_panoptic(mode):
        if num_instances < 1:
            raise ConfigError("panoptic modes need num_instances >= 1")
        sem_cols, inst_cols = split_columns(grid, sigma)
        dec.sem_cols = sem_cols
        dec.inst_cols = inst_cols
        dec.pnf_sem = Mlp(
            [sem_cols.stop - sem_cols.start] + hid + [num_classes], seed=seed + 1
        )
        dec.pnf_inst = Mlp(
            [inst_cols.stop - inst_cols.start] + hid + [num_instances], seed=seed + 2
        )
    else:
        dec.snf = Mlp([grid.concat_width(SEMANTIC)] + hid + [num_classes], seed=seed + 1)
    return dec


@dataclass
class StepResult:
    """Losses and gradients of one optimization step (before the update)."""

    losses: dict
    mlp_grads: dict  # name -> MlpGrads, weighted sum over terms
    geo_grads: list  # per-level SparseGrads, weighted sum
    sem_grads: list
    l1_mlp_grads: MlpGrads  # unweighted SDF-term gradients (importance input)
    l1_geo_grads: list  # per-level SparseGrads
    n_present: int
    n_absent: int
    term_mlp_grads: dict | None = None  # per-term copies when requested
    term_feat_grads: dict | None = None  # term -> (table, per-level SparseGrads)


def _empty_feat(grid: OctreeFeatureGrid, table: str):
    width = grid.h1 if table == GEOMETRY else grid.h2
    return [SparseGrads.empty(width) for _ in range(grid.levels)]


def _combine_levels(grid: OctreeFeatureGrid, table: str, parts):
    """parts: list of (scale, per-level SparseGrads list) -> combined list."""
    width = grid.h1 if table == GEOMETRY else grid.h2
    out = []
    for level in range(grid.levels):
        pairs = [(s, p[level]) for s, p in parts if len(p[level].rows)]
        out.append(SparseGrads.combine(pairs) if pairs else SparseGrads.empty(width))
    return out


def compute_step(
    batch: SampleBatch,
    grid: OctreeFeatureGrid,
    decoders: Decoders,
    config: TrainConfig,
    thing_ids=(),
    store: ImportanceStore | None = None,
    keep_terms: bool = False,
) -> StepResult:
    """Evaluate the composite loss and all gradients for one sample batch."""
    w = config.weights
    mode = config.mode
    losses = {"L1": 0.0, "L2": 0.0, "L3": 0.0, "L4": 0.0, "L5": 0.0}
    mlp_grads = {name: dec.zero_grads() for name, dec in decoders.named()}
    geo_parts = []  # (scale, per-level SparseGrads)
    sem_parts = []
    terms_mlp = {} if keep_terms else None
    terms_feat = {} if keep_terms else None

    # one shared locate: geometry/semantic tables use identical voxel rows
    loc = fields.locate_batch(grid, batch.x)

    # --- L1: soft-SDF BCE over every present sample ---
    fq = fields.field_forward_located(grid, decoders.gnf, loc, GEOMETRY)
    present = fq.present
    n_present = int(present.sum())
    n_absent = len(batch) - n_present
    l1_mlp = decoders.gnf.zero_grads()
    l1_geo = _empty_feat(grid, GEOMETRY)
    if n_present:
        d_present = batch.d[present]
        losses["L1"], d_pred = sdf_loss(fq.values[:, 0], d_present, w.alpha)
        g_mlp, l1_geo = fields.field_backward(grid, decoders.gnf, fq, d_pred[:, None])
        l1_mlp.add_scaled(g_mlp)
    mlp_grads["gnf"].add_scaled(l1_mlp)
    geo_parts.append((1.0, l1_geo))
    if keep_terms:
        terms_mlp["L1"] = {"gnf": l1_mlp}
        terms_feat["L1"] = (GEOMETRY, l1_geo)

    # --- L2: eikonal on present surface-band samples ---
    if w.lambda2 != 0.0 and np.any(batch.surface):
        fqs = fields.field_forward_located(
            grid, decoders.gnf, loc.restrict(batch.surface), GEOMETRY
        )
        if fqs.present.any():
            l2, gvec, gnorm = fields.eikonal_loss(grid, decoders.gnf, fqs)
            losses["L2"] = l2
            g_mlp, g_feat = fields.eikonal_backward(grid, decoders.gnf, fqs, gvec, gnorm)
            mlp_grads["gnf"].add_scaled(g_mlp, w.lambda2)
            geo_parts.append((w.lambda2, g_feat))
            if keep_terms:
                terms_mlp["L2"] = {"gnf": g_mlp}
                terms_feat["L2"] = (GEOMETRY, g_feat)

    # --- L4: class cross entropy on labeled surface samples ---
    labeled = batch.surface & (batch.class_id > 0)
    if w.lambda4 != 0.0 and np.any(labeled):
        if is_panoptic(mode):
            head, head_name, cols = decoders.pnf_sem, "pnf_sem", decoders.sem_cols
        else:
            head, head_name, cols = decoders.snf, "snf", None
        fql = fields.field_forward_located(
            grid, head, loc.restrict(labeled), SEMANTIC, cols=cols
        )
        if fql.present.any():
            targets = batch.class_id[labeled][fql.present]
            losses["L4"], d_logits = cross_entropy_loss(fql.values, targets)
            g_mlp, g_feat = fields.field_backward(grid, head, fql, d_logits)
            mlp_grads[head_name].add_scaled(g_mlp, w.lambda4)
            sem_parts.append((w.lambda4, g_feat))
            if keep_terms:
                terms_mlp["L4"] = {head_name: g_mlp}
                terms_feat["L4"] = (SEMANTIC, g_feat)

    # --- L5: instance cross entropy (panoptic modes) ---
    if is_panoptic(mode) and w.lambda5 != 0.0 and np.any(labeled):
        fqi = fields.field_forward_located(
            grid, decoders.pnf_inst, loc.restrict(labeled), SEMANTIC, cols=decoders.inst_cols
        )
        if fqi.present.any():
            cls = batch.class_id[labeled][fqi.present]
            inst = batch.instance_id[labeled][fqi.present]
            targets = instance_targets(cls, inst, tuple(thing_ids))
            if targets.size and targets.max() >= decoders.pnf_inst.out_dim:
                raise TrainingError(
                    f"instance id {int(targets.max())} outside head width "
                    f"{decoders.pnf_inst.out_dim}; rebuild the instance vocabulary"
                )
            losses["L5"], d_logits = cross_entropy_loss(fqi.values, targets)
            g_mlp, g_feat = fields.field_backward(grid, decoders.pnf_inst, fqi, d_logits)
            mlp_grads["pnf_inst"].add_scaled(g_mlp, w.lambda5)
            sem_parts.append((w.lambda5, g_feat))
            if keep_terms:
                terms_mlp["L5"] = {"pnf_inst": g_mlp}
                terms_feat["L5"] = (SEMANTIC, g_feat)

    # --- L3: drift penalty against the previous-scan snapshot ---
    if is_incremental(mode) and store is not None and w.lambda3 != 0.0:
        l3_total = 0.0
        for name, dec in decoders.named():
            for l, (wt, bt) in enumerate(zip(dec.weights, dec.biases)):
                for suffix, tensor, acc in (
                    (f"w{l}", wt, mlp_grads[name].weights[l]),
                    (f"b{l}", bt, mlp_grads[name].biases[l]),
                ):
                    val, g = store.penalty(f"{name}.{suffix}", tensor)
                    l3_total += val
                    acc += w.lambda3 * g
        for table, parts in ((GEOMETRY, geo_parts), (SEMANTIC, sem_parts)):
            sparse = []
            for l in range(grid.levels):
                val, g = store.penalty(f"{table}{l}", grid.pool(l, table))
                l3_total += val
                sparse.append(SparseGrads.from_dense(g))
            parts.append((w.lambda3, sparse))
        losses["L3"] = l3_total

    losses["total"] = (
        losses["L1"]
        + w.lambda2 * losses["L2"]
        + w.lambda3 * losses["L3"]
        + w.lambda4 * losses["L4"]
        + w.lambda5 * losses["L5"]
    )
    return StepResult(
        losses,
        mlp_grads,
        _combine_levels(grid, GEOMETRY, geo_parts),
        _combine_levels(grid, SEMANTIC, sem_parts),
        l1_mlp,
        l1_geo,
        n_present,
        n_absent,
        terms_mlp,
        terms_feat,
    )


@dataclass
class TrainResult:
    history: np.ndarray  # (steps, 7): step, L1, L2, L3, L4, L5, total
    counters: dict
    store: ImportanceStore | None


class _Optimizers:
    def __init__(self, decoders: Decoders, grid: OctreeFeatureGrid, config: TrainConfig):
        mlp_cfg = AdamConfig(lr=config.lr_mlp)
        feat_cfg = AdamConfig(lr=config.lr_features)
        self.mlp = {
            name: Adam(dec, mlp_cfg, name=name) for name, dec in decoders.named()
        }
        self.geo = [
            SparseRowAdam(feat_cfg, name=f"{GEOMETRY}{l}") for l in range(grid.levels)
        ]
        self.sem = [
            SparseRowAdam(feat_cfg, name=f"{SEMANTIC}{l}") for l in range(grid.levels)
        ]

    def apply(self, grid: OctreeFeatureGrid, decoders: Decoders, step: StepResult):
        for name, dec in decoders.named():
            self.mlp[name].step(dec, step.mlp_grads[name])
        for table, opts, grads in (
            (GEOMETRY, self.geo, step.geo_grads),
            (SEMANTIC, self.sem, step.sem_grads),
        ):
            for l in range(grid.levels):
                sg = grads[l]
                opts[l].step(grid.pool(l, table), sg.rows, sg.values)


def allocation_points(scan, band_width: float) -> np.ndarray:
    """Endpoints plus band extremes along each ray, for corner allocation."""
    delta = scan.points - scan.origin
    t = np.linalg.norm(delta, axis=1)
    ok = t > 1e-9
    u = np.zeros_like(delta)
    u[ok] = delta[ok] / t[ok, None]
    pts = scan.points[ok]
    u = u[ok]
    return np.concatenate([pts, pts - band_width * u, pts + band_width * u])


def _dynamic_keep_masks(scans, dynamic_ids, enabled: bool):
    if not enabled or not dynamic_ids:
        return [np.ones(len(s), dtype=bool) for s in scans]
    dyn = np.fromiter(dynamic_ids, dtype=np.int64, count=len(dynamic_ids))
    return [~np.isin(s.labels, dyn) for s in scans]


def _masked_scan(scan, keep):
    from .sampler import LabeledScan

    return LabeledScan(
        scan.origin, scan.points[keep], scan.labels[keep], scan.instances[keep], scan.pose
    )


def train(
    scans,
    grid: OctreeFeatureGrid,
    decoders: Decoders,
    config: TrainConfig,
    thing_ids=(),
    dynamic_class_ids=(),
    store: ImportanceStore | None = None,
    on_step=None,
) -> TrainResult:
    """Run the configured mapping mode over the scans.

    Deterministic for a fixed seed: every random draw flows from
    SeedSequence(seed) children in a fixed order. Raises TrainingError with
    the last good parameter checkpoint attached if the loss goes non-finite.
    """
    config.validate()
    if not scans:
        raise ValueError("train needs at least one scan")
    incremental = is_incremental(config.mode)
    if incremental and store is None:
        store = ImportanceStore(config.weights.beta_m)

    keep = _dynamic_keep_masks(scans, dynamic_class_ids, config.filter_dynamic)
    kept_scans = [_masked_scan(s, k) for s, k in zip(scans, keep)]

    history = []
    counters = {"skipped_rays": 0, "absent_samples": 0, "steps": 0}
    opt = _Optimizers(decoders, grid, config)
    checkpoint = None
    step_idx = 0

    def run_steps(pool: RayPool, n_steps: int, rng: np.random.Generator):
        nonlocal checkpoint, step_idx
        for _ in range(n_steps):
            if step_idx % max(config.checkpoint_every, 1) == 0:
                checkpoint = _snapshot_params(grid, decoders)
            batch, skipped = build_batch(
                pool,
                config.rays_per_step,
                config.n_per_ray,
                config.band_width,
                config.min_range,
                rng,
            )
            counters["skipped_rays"] += skipped
            step = compute_step(
                batch, grid, decoders, config, thing_ids=thing_ids, store=store
            )
            counters["absent_samples"] += step.n_absent
            if not np.isfinite(step.losses["total"]):
                bad = [k for k, v in step.losses.items() if not np.isfinite(v)]
                raise TrainingError(
                    f"non-finite loss at step {step_idx}: {', '.join(bad)}",
                    checkpoint=checkpoint,
                    step=step_idx,
                )
            if incremental and config.weights.lambda3 != 0.0:
                update_importance(store, grid, decoders, step)
            opt.apply(grid, decoders, step)
            history.append(
                [
                    step_idx,
                    step.losses["L1"],
                    step.losses["L2"],
                    step.losses["L3"],
                    step.losses["L4"],
                    step.losses["L5"],
                    step.losses["total"],
                ]
            )
            if on_step is not None:
                on_step(step_idx, step)
            step_idx += 1

    if incremental:
        for si, scan in enumerate(kept_scans):
            grid.allocate_for_points(allocation_points(scan, config.band_width))
            if len(scan) == 0:
                continue
            pool = RayPool.build([scan])
            rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1, si)))
            run_steps(pool, config.steps_per_scan, rng)
            _snapshot_all(store, grid, decoders)
    else:
        for scan in kept_scans:
            grid.allocate_for_points(allocation_points(scan, config.band_width))
        pool = RayPool.build([s for s in kept_scans if len(s)])
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
        run_steps(pool, config.steps, rng)

    counters["steps"] = step_idx
    return TrainResult(np.asarray(history, dtype=np.float64), counters, store)


def _snapshot_params(grid: OctreeFeatureGrid, decoders: Decoders):
    return {
        "decoders": decoders.copy(),
        "geo": [grid.pool(l, GEOMETRY).copy() for l in range(grid.levels)],
        "sem": [grid.pool(l, SEMANTIC).copy() for l in range(grid.levels)],
    }


def update_importance(store: ImportanceStore, grid, decoders, step: StepResult):
    """Fold the SDF-term gradient magnitudes of one step into the store."""
    for l, (gw, gb) in enumerate(zip(step.l1_mlp_grads.weights, step.l1_mlp_grads.biases)):
        store.accumulate(f"gnf.w{l}", decoders.gnf.weights[l], gw)
        store.accumulate(f"gnf.b{l}", decoders.gnf.biases[l], gb)
    for l in range(grid.levels):
        sg = step.l1_geo_grads[l]
        store.accumulate_rows(f"{GEOMETRY}{l}", grid.pool(l, GEOMETRY), sg.rows, sg.values)


def _snapshot_all(store: ImportanceStore, grid: OctreeFeatureGrid, decoders: Decoders):
    for name, dec in decoders.named():
        for l, (wt, bt) in enumerate(zip(dec.weights, dec.biases)):
            store.take_snapshot(f"{name}.w{l}", wt)
            store.take_snapshot(f"{name}.b{l}", bt)
    for table in (GEOMETRY, SEMANTIC):
        for l in range(grid.levels):
            store.take_snapshot(f"{table}{l}", grid.pool(l, table))


def write_loss_csv(history: np.ndarray, path):
    """Loss history CSV: step, L1..L5, total; %.17g keeps bytes reproducible."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "L1", "L2", "L3", "L4", "L5", "total"])
        for row in history:
            writer.writerow([int(row[0])] + [f"{v:.17g}" for v in row[1:]])
