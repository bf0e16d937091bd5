"""Synthetic labeled LiDAR scenes with exact analytic oracles.

Scenes are unions of primitives (horizontal ground plane, axis-aligned
boxes, spheres), each tagged with a class, an optional instance id, and an
optional per-scan motion offset. Simulated scans cast rays against the
primitives and return exact first hits along with exact labels; the scene
also provides the analytic signed distance (positive outside) used as an
independent oracle in tests.

Scene spec text format, one record per line:

    classes count=5
    things ids=2,3
    dynamic ids=4
    plane z=0 class=1
    box center=2,0,0.5 size=1,1,1 class=2 instance=1
    sphere center=0,3,1 radius=0.8 class=3
    box center=0,-3,0.6 size=1.2,1,1.2 class=4 motion=0.8,0,0
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .palette import ClassPalette, synthetic_palette
from .sampler import LabeledScan

_EPS = 1e-12


@dataclass
class Plane:
    """Horizontal ground plane z = z0, solid below."""

    z0: float
    class_id: int
    instance_id: int = 0
    motion: np.ndarray | None = None

    def position(self, scan_index: int) -> float:
        if self.motion is None:
            return self.z0
        return self.z0 + self.motion[2] * scan_index

    def sdf(self, p: np.ndarray, scan_index: int = 0) -> np.ndarray:
        return p[:, 2] - self.position(scan_index)

    def ray_hit(self, origin, dirs, scan_index: int = 0):
        z0 = self.position(scan_index)
        dz = dirs[:, 2]
        t = np.full(len(dirs), np.inf)
        moving = np.abs(dz) > _EPS
        tt = (z0 - origin[2]) / np.where(moving, dz, 1.0)
        t = np.where(moving & (tt > _EPS), tt, np.inf)
        return t


@dataclass
class Box:
    """Axis-aligned box given by center and full side lengths."""

    center: np.ndarray
    size: np.ndarray
    class_id: int
    instance_id: int = 0
    motion: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if self.motion is not None:
            self.motion = np.asarray(self.motion, dtype=np.float64).reshape(3)

    def position(self, scan_index: int) -> np.ndarray:
        if self.motion is None:
            return self.center
        return self.center + self.motion * scan_index

    def sdf(self, p: np.ndarray, scan_index: int = 0) -> np.ndarray:
        half = self.size / 2.0
        q = np.abs(p - self.position(scan_index)) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def ray_hit(self, origin, dirs, scan_index: int = 0):
        half = self.size / 2.0
        c = self.position(scan_index)
        lo, hi = c - half, c + half
        inv = 1.0 / np.where(np.abs(dirs) > _EPS, dirs, _EPS)
        t0 = (lo[None, :] - origin[None, :]) * inv
        t1 = (hi[None, :] - origin[None, :]) * inv
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        hit = (tmax >= tmin) & (tmax > _EPS)
        t = np.where(hit & (tmin > _EPS), tmin, np.inf)
        return t


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    class_id: int
    instance_id: int = 0
    motion: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.motion is not None:
            self.motion = np.asarray(self.motion, dtype=np.float64).reshape(3)

    def position(self, scan_index: int) -> np.ndarray:
        if self.motion is None:
            return self.center
        return self.center + self.motion * scan_index

    def sdf(self, p: np.ndarray, scan_index: int = 0) -> np.ndarray:
        return np.linalg.norm(p - self.position(scan_index), axis=1) - self.radius

    def ray_hit(self, origin, dirs, scan_index: int = 0):
        oc = origin - self.position(scan_index)
        b = np.einsum("nd,d->n", dirs, oc)
        cc = oc @ oc - self.radius**2
        disc = b * b - cc
        t = np.full(len(dirs), np.inf)
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -b - sq
        t_far = -b + sq
        tt = np.where(t_near > _EPS, t_near, t_far)
        t = np.where(ok & (tt > _EPS), tt, np.inf)
        return t


@dataclass
class SceneSpec:
    primitives: list
    palette: ClassPalette

    def dynamic_primitive_ids(self):
        return [i for i, p in enumerate(self.primitives) if p.motion is not None]

    def sdf(self, points: np.ndarray, scan_index: int = 0, include_dynamic: bool = True):
        """Union signed distance; dynamic primitives optionally excluded."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        best = np.full(len(points), np.inf)
        for prim in self.primitives:
            if not include_dynamic and prim.motion is not None:
                continue
            best = np.minimum(best, prim.sdf(points, scan_index))
        return best

    def nearest_primitive_class(self, points: np.ndarray, include_dynamic: bool = False):
        """Class of the closest primitive surface (the nearest-region oracle)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        best = np.full(len(points), np.inf)
        cls = np.zeros(len(points), dtype=np.int32)
        for prim in self.primitives:
            if not include_dynamic and prim.motion is not None:
                continue
            d = np.abs(prim.sdf(points, 0))
            closer = d < best
            best = np.where(closer, d, best)
            cls = np.where(closer, prim.class_id, cls)
        return cls

    def cast(self, origin: np.ndarray, dirs: np.ndarray, scan_index: int = 0, max_range: float = 80.0):
        """First-hit distances, classes, instances; misses get t = inf."""
        origin = np.asarray(origin, dtype=np.float64).reshape(3)
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        best = np.full(len(dirs), np.inf)
        cls = np.zeros(len(dirs), dtype=np.int32)
        inst = np.zeros(len(dirs), dtype=np.int32)
        for prim in self.primitives:
            t = prim.ray_hit(origin, dirs, scan_index)
            closer = t < best
            best = np.where(closer, t, best)
            cls = np.where(closer, prim.class_id, cls)
            inst = np.where(closer, prim.instance_id, inst)
        beyond = best > max_range
        best[beyond] = np.inf
        return best, cls, inst


def _parse_vec(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


def _parse_ids(text: str):
    return [int(v) for v in text.split(",") if v != ""]


def read_scene(path) -> SceneSpec:
    primitives = []
    count = None
    things: list = []
    dynamic: list = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind, kv = parts[0], {}
            for tok in parts[1:]:
                if "=" not in tok:
                    raise FormatError(f"{path}:{ln}: expected key=value, got {tok!r}")
                k, v = tok.split("=", 1)
                kv[k] = v
            try:
                if kind == "classes":
                    count = int(kv["count"])
                elif kind == "things":
                    things = _parse_ids(kv["ids"])
                elif kind == "dynamic":
                    dynamic = _parse_ids(kv["ids"])
                elif kind == "plane":
                    primitives.append(
                        Plane(float(kv["z"]), int(kv["class"]), int(kv.get("instance", 0)),
                              _parse_vec(kv["motion"]) if "motion" in kv else None)
                    )
                elif kind == "box":
                    primitives.append(
                        Box(_parse_vec(kv["center"]), _parse_vec(kv["size"]), int(kv["class"]),
                            int(kv.get("instance", 0)),
                            _parse_vec(kv["motion"]) if "motion" in kv else None)
                    )
                elif kind == "sphere":
                    primitives.append(
                        Sphere(_parse_vec(kv["center"]), float(kv["radius"]), int(kv["class"]),
                               int(kv.get("instance", 0)),
                               _parse_vec(kv["motion"]) if "motion" in kv else None)
                    )
                else:
                    raise FormatError(f"{path}:{ln}: unknown primitive {kind!r}")
            except (KeyError, ValueError) as exc:
                raise FormatError(f"{path}:{ln}: {exc}") from exc
    if not primitives:
        raise FormatError(f"{path}: scene has no primitives")
    if count is None:
        count = max(p.class_id for p in primitives) + 1
    palette = synthetic_palette(count, thing_ids=things, dynamic_ids=dynamic)
    return SceneSpec(primitives, palette)


def write_scene(scene: SceneSpec, path):
    with open(path, "w") as fh:
        fh.write(f"classes count={scene.palette.num_classes}\n")
        if scene.palette.thing_ids:
            fh.write(f"things ids={','.join(str(i) for i in sorted(scene.palette.thing_ids))}\n")
        if scene.palette.dynamic_ids:
            fh.write(f"dynamic ids={','.join(str(i) for i in sorted(scene.palette.dynamic_ids))}\n")
        for p in scene.primitives:
            motion = (
                f" motion={p.motion[0]:g},{p.motion[1]:g},{p.motion[2]:g}"
                if p.motion is not None
                else ""
            )
            inst = f" instance={p.instance_id}" if p.instance_id else ""
            if isinstance(p, Plane):
                fh.write(f"plane z={p.z0:g} class={p.class_id}{inst}{motion}\n")
            elif isinstance(p, Box):
                c, s = p.center, p.size
                fh.write(
                    f"box center={c[0]:g},{c[1]:g},{c[2]:g} size={s[0]:g},{s[1]:g},{s[2]:g} "
                    f"class={p.class_id}{inst}{motion}\n"
                )
            elif isinstance(p, Sphere):
                c = p.center
                fh.write(
                    f"sphere center={c[0]:g},{c[1]:g},{c[2]:g} radius={p.radius:g} "
                    f"class={p.class_id}{inst}{motion}\n"
                )


@dataclass
class ScanSimConfig:
    n_scans: int = 8
    rays_per_scan: int = 4000
    seed: int = 0
    origin_start: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.8]))
    origin_step: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.0, 0.0]))
    elevation_deg: tuple = (-60.0, 5.0)
    max_range: float = 40.0


def simulate_scans(scene: SceneSpec, cfg: ScanSimConfig) -> list:
    """Pose a sensor along a line and cast seeded random ray fans."""
    if cfg.rays_per_scan < 1:
        raise ConfigError("rays_per_scan must be positive")
    scans = []
    for si in range(cfg.n_scans):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7, si)))
        origin = cfg.origin_start + cfg.origin_step * si
        az = rng.uniform(0.0, 2.0 * np.pi, cfg.rays_per_scan)
        lo, hi = np.radians(cfg.elevation_deg[0]), np.radians(cfg.elevation_deg[1])
        el = rng.uniform(lo, hi, cfg.rays_per_scan)
        dirs = np.stack(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1
        )
        t, cls, inst = scene.cast(origin, dirs, scan_index=si, max_range=cfg.max_range)
        hit = np.isfinite(t)
        points = origin[None, :] + t[hit, None] * dirs[hit]
        pose = np.eye(4)
        pose[:3, 3] = origin
        scans.append(LabeledScan(origin, points, cls[hit], inst[hit], pose))
    return scans


def surface_points(scans) -> tuple[np.ndarray, np.ndarray]:
    """Accumulated endpoints and classes across scans (ground-truth cloud)."""
    pts = np.concatenate([s.points for s in scans]) if scans else np.empty((0, 3))
    cls = np.concatenate([s.labels for s in scans]) if scans else np.empty(0, dtype=np.int32)
    return pts, cls
