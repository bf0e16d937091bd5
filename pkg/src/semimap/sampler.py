"""Turns posed, labeled LiDAR scans into SDF training samples along rays.

Per ray of length t: half the samples land in a band of +-band_width around
the endpoint (target d = signed offset, positive on the sensor side), half
uniformly in the free segment between min_range and the band start (target
d = remaining distance to the endpoint). Signs follow the free-space-positive
convention: d > 0 between sensor and surface, d < 0 past the surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LabeledScan:
    """One LiDAR scan in world coordinates."""

    origin: np.ndarray  # (3,) sensor position
    points: np.ndarray  # (n, 3) beam endpoints
    labels: np.ndarray  # (n,) semantic class ids
    instances: np.ndarray  # (n,) raw instance ids, 0 = none/stuff
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        self.instances = np.asarray(self.instances, dtype=np.int32).reshape(-1)
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if not (len(self.points) == len(self.labels) == len(self.instances)):
            raise ValueError("points, labels, instances must have equal length")
        r = self.pose[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0.0:
            raise ValueError("pose rotation must be orthonormal with det +1")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TrainingSample:
    """A single supervised point (scalar API; batches use SampleBatch)."""

    x: np.ndarray
    d: float
    class_id: int  # -1 when the sample carries no label target
    instance_id: int
    band: str  # "surface" or "free"


@dataclass
class SampleBatch:
    """Structure-of-arrays batch of training samples."""

    x: np.ndarray  # (m, 3)
    d: np.ndarray  # (m,)
    class_id: np.ndarray  # (m,) int32, -1 for free-space samples
    instance_id: np.ndarray  # (m,) int32, -1 for free-space samples
    surface: np.ndarray  # (m,) bool

    def __len__(self) -> int:
        return len(self.d)

    @staticmethod
    def empty() -> "SampleBatch":
        return SampleBatch(
            np.empty((0, 3)),
            np.empty(0),
            np.empty(0, dtype=np.int32),
            np.empty(0, dtype=np.int32),
            np.empty(0, dtype=bool),
        )

    @staticmethod
    def concat(batches) -> "SampleBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return SampleBatch.empty()
        return SampleBatch(
            np.concatenate([b.x for b in batches]),
            np.concatenate([b.d for b in batches]),
            np.concatenate([b.class_id for b in batches]),
            np.concatenate([b.instance_id for b in batches]),
            np.concatenate([b.surface for b in batches]),
        )


def sample_rays(
    origin: np.ndarray,
    endpoints: np.ndarray,
    labels: np.ndarray,
    instances: np.ndarray,
    n_per_ray: int,
    band_width: float,
    min_range: float,
    rng: np.random.Generator,
) -> tuple[SampleBatch, int]:
    """Vectorized ray sampling; returns (batch, skipped_ray_count).

    Rays too short to hold both a free segment and the surface band are
    skipped and counted, not errors. Uniform draws are consumed for every
    input ray regardless of validity so the stream layout is stable.
    """
    if n_per_ray % 2 != 0 or n_per_ray < 2:
        raise ValueError("n_per_ray must be even and >= 2")
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    endpoints = np.atleast_2d(np.asarray(endpoints, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int32).reshape(-1)
    instances = np.asarray(instances, dtype=np.int32).reshape(-1)
    n_rays = len(endpoints)
    half = n_per_ray // 2

    delta = endpoints - origin
    t = np.linalg.norm(delta, axis=1)
    valid = t > band_width + min_range
    skipped = int(np.count_nonzero(~valid))

    u_surf = rng.uniform(-band_width, band_width, size=(n_rays, half))
    u_free = rng.uniform(0.0, 1.0, size=(n_rays, half))
    if not np.any(valid):
        return SampleBatch.empty(), skipped

    dirs = np.zeros_like(delta)
    dirs[valid] = delta[valid] / t[valid, None]
    # surface band: x = endpoint - offset * dir, d = offset
    d_surf = u_surf[valid]  # (v, half)
    x_surf = endpoints[valid, None, :] - d_surf[:, :, None] * dirs[valid, None, :]
    # free segment: arc length s in [min_range, t - band_width), d = t - s
    span = (t[valid] - band_width - min_range)[:, None]
    s_free = min_range + u_free[valid] * span
    x_free = origin[None, None, :] + s_free[:, :, None] * dirs[valid, None, :]
    d_free = t[valid, None] - s_free

    v = int(np.count_nonzero(valid))
    lab = labels[valid]
    inst = instances[valid]
    x = np.concatenate([x_surf.reshape(-1, 3), x_free.reshape(-1, 3)])
    d = np.concatenate([d_surf.reshape(-1), d_free.reshape(-1)])
    class_id = np.concatenate(
        [np.repeat(lab, half), np.full(v * half, -1, dtype=np.int32)]
    )
    instance_id = np.concatenate(
        [np.repeat(inst, half), np.full(v * half, -1, dtype=np.int32)]
    )
    surface = np.concatenate(
        [np.ones(v * half, dtype=bool), np.zeros(v * half, dtype=bool)]
    )
    return SampleBatch(x, d, class_id.astype(np.int32), instance_id.astype(np.int32), surface), skipped


def sample_ray(
    origin,
    endpoint,
    label: int,
    instance: int,
    n_per_ray: int,
    band_width: float,
    rng: np.random.Generator,
    min_range: float = 1.5,
) -> list[TrainingSample]:
    """Single-ray convenience wrapper over sample_rays."""
    batch, skipped = sample_rays(
        origin,
        np.asarray(endpoint, dtype=np.float64)[None, :],
        np.array([label]),
        np.array([instance]),
        n_per_ray,
        band_width,
        min_range,
        rng,
    )
    if skipped:
        return []
    return [
        TrainingSample(
            batch.x[i],
            float(batch.d[i]),
            int(batch.class_id[i]),
            int(batch.instance_id[i]),
            "surface" if batch.surface[i] else "free",
        )
        for i in range(len(batch))
    ]


@dataclass
class RayPool:
    """Flat view over the rays of several scans for batch selection."""

    scans: list
    scan_of_ray: np.ndarray  # (total,) scan index per global ray id
    point_of_ray: np.ndarray  # (total,) endpoint index within the scan

    @staticmethod
    def build(scans, keep_masks=None) -> "RayPool":
        scan_ids, point_ids = [], []
        for si, scan in enumerate(scans):
            n = len(scan)
            keep = keep_masks[si] if keep_masks is not None else np.ones(n, dtype=bool)
            ids = np.nonzero(keep)[0]
            scan_ids.append(np.full(len(ids), si, dtype=np.int64))
            point_ids.append(ids.astype(np.int64))
        return RayPool(
            list(scans),
            np.concatenate(scan_ids) if scan_ids else np.empty(0, dtype=np.int64),
            np.concatenate(point_ids) if point_ids else np.empty(0, dtype=np.int64),
        )

    @property
    def total(self) -> int:
        return len(self.scan_of_ray)


def build_batch(
    pool: RayPool,
    rays_per_step: int,
    n_per_ray: int,
    band_width: float,
    min_range: float,
    rng: np.random.Generator,
) -> tuple[SampleBatch, int]:
    """Draw rays uniformly without replacement and sample them.

    Deterministic under a fixed generator state; rays are grouped per scan
    but emitted in global selection order-independent layout (per-scan
    blocks), which is stable for a fixed seed.
    """
    if pool.total == 0:
        raise ValueError("build_batch needs at least one ray")
    k = min(rays_per_step, pool.total)
    chosen = rng.choice(pool.total, size=k, replace=False)
    chosen.sort()
    batches = []
    skipped = 0
    for si in np.unique(pool.scan_of_ray[chosen]):
        sel = chosen[pool.scan_of_ray[chosen] == si]
        pts = pool.point_of_ray[sel]
        scan = pool.scans[si]
        b, sk = sample_rays(
            scan.origin,
            scan.points[pts],
            scan.labels[pts],
            scan.instances[pts],
            n_per_ray,
            band_width,
            min_range,
            rng,
        )
        batches.append(b)
        skipped += sk
    return SampleBatch.concat(batches), skipped
