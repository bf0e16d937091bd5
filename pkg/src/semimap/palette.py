"""Class palettes: names, colors, thing/dynamic flags, raw-label remapping.

Class id 0 is always "unlabeled" and is excluded from semantic supervision.
The built-in SemanticKITTI palette follows the standard 19-class learning
map (moving raw ids collapse onto their static classes); which train ids
count as dynamic is a per-run choice, e.g. `dynamic_classes = car` in a
config marks every car dynamic for Fig.-5-style filtering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError


@dataclass
class ClassPalette:
    names: list
    colors: np.ndarray  # (c, 3) uint8
    thing_ids: frozenset = frozenset()
    dynamic_ids: frozenset = frozenset()
    raw_to_train: dict | None = None  # raw label -> train id; None = identity

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.names) != len(self.colors):
            raise ValueError("names/colors length mismatch")
        if len(self.names) < 2:
            raise ValueError("palette needs at least unlabeled + one class")
        bad = [i for i in self.thing_ids | self.dynamic_ids if not 0 <= i < len(self.names)]
        if bad:
            raise ConfigError(f"palette flags reference unknown class ids {sorted(bad)}")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def remap(self, raw: np.ndarray) -> tuple[np.ndarray, int]:
        """Map raw labels to train ids; unknown raws -> 0, counted."""
        raw = np.asarray(raw, dtype=np.int64)
        if self.raw_to_train is None:
            known = raw < self.num_classes
            out = np.where(known, raw, 0)
            return out.astype(np.int32), int(np.count_nonzero(~known))
        out = np.zeros_like(raw)
        known = np.zeros(raw.shape, dtype=bool)
        for r, t in self.raw_to_train.items():
            m = raw == r
            out[m] = t
            known |= m
        return out.astype(np.int32), int(np.count_nonzero(~known))

    def resolve_names(self, names) -> frozenset:
        """Class names -> ids; unknown names raise ConfigError."""
        ids = set()
        for n in names:
            if n not in self.names:
                raise ConfigError(f"unknown class name {n!r}")
            ids.add(self.names.index(n))
        return frozenset(ids)

    def with_dynamic(self, dynamic_ids) -> "ClassPalette":
        return ClassPalette(
            self.names, self.colors, self.thing_ids, frozenset(dynamic_ids), self.raw_to_train
        )


_KITTI_CLASSES = [
    # name, color (RGB), thing
    ("unlabeled", (0, 0, 0), False),
    ("car", (100, 150, 245), True),
    ("bicycle", (100, 230, 245), True),
    ("motorcycle", (30, 60, 150), True),
    ("truck", (80, 30, 180), True),
    ("other-vehicle", (0, 0, 255), True),
    ("person", (255, 30, 30), True),
    ("bicyclist", (255, 40, 200), True),
    ("motorcyclist", (150, 30, 90), True),
    ("road", (255, 0, 255), False),
    ("parking", (255, 150, 255), False),
    ("sidewalk", (75, 0, 75), False),
    ("other-ground", (175, 0, 75), False),
    ("building", (255, 200, 0), False),
    ("fence", (255, 120, 50), False),
    ("vegetation", (0, 175, 0), False),
    ("trunk", (135, 60, 0), False),
    ("terrain", (150, 240, 80), False),
    ("pole", (255, 240, 150), False),
    ("traffic-sign", (255, 0, 0), False),
]

# standard SemanticKITTI learning map (raw id -> train id above)
_KITTI_RAW_MAP = {
    0: 0, 1: 0, 10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5,
    30: 6, 31: 7, 32: 8, 40: 9, 44: 10, 48: 11, 49: 12, 50: 13,
    51: 14, 52: 0, 60: 9, 70: 15, 71: 16, 72: 17, 80: 18, 81: 19,
    99: 0, 252: 1, 253: 7, 254: 6, 255: 8, 256: 5, 257: 5, 258: 4, 259: 5,
}


def semantic_kitti() -> ClassPalette:
    names = [c[0] for c in _KITTI_CLASSES]
    colors = np.array([c[1] for c in _KITTI_CLASSES], dtype=np.uint8)
    things = frozenset(i for i, c in enumerate(_KITTI_CLASSES) if c[2])
    return ClassPalette(names, colors, things, frozenset(), dict(_KITTI_RAW_MAP))


# distinct hues for generated palettes (synthetic scenes)
_SYNTH_COLORS = np.array(
    [
        (0, 0, 0),
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (210, 245, 60),
        (250, 190, 212),
        (0, 128, 128),
        (220, 190, 255),
        (170, 110, 40),
        (255, 250, 200),
        (128, 0, 0),
    ],
    dtype=np.uint8,
)


def synthetic_palette(num_classes: int, thing_ids=(), dynamic_ids=()) -> ClassPalette:
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    names = ["unlabeled"] + [f"class{i}" for i in range(1, num_classes)]
    colors = _SYNTH_COLORS[
        np.arange(num_classes) % len(_SYNTH_COLORS)
    ].copy()
    colors[0] = (0, 0, 0)
    return ClassPalette(names, colors, frozenset(thing_ids), frozenset(dynamic_ids))


def write_palette(palette: ClassPalette, path):
    """Plain-text palette: `class id name r g b [thing] [dynamic]` + raw maps."""
    with open(path, "w") as fh:
        for i, name in enumerate(palette.names):
            r, g, b = (int(v) for v in palette.colors[i])
            flags = []
            if i in palette.thing_ids:
                flags.append("thing")
            if i in palette.dynamic_ids:
                flags.append("dynamic")
            fh.write(f"class {i} {name} {r} {g} {b}{' ' + ' '.join(flags) if flags else ''}\n")
        if palette.raw_to_train is not None:
            for raw, train in sorted(palette.raw_to_train.items()):
                fh.write(f"map {raw} {train}\n")


def read_palette(path) -> ClassPalette:
    entries = {}
    raw_map = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "class":
                if len(parts) < 6:
                    raise FormatError(f"{path}:{ln}: malformed class line")
                idx = int(parts[1])
                entries[idx] = (
                    parts[2],
                    (int(parts[3]), int(parts[4]), int(parts[5])),
                    "thing" in parts[6:],
                    "dynamic" in parts[6:],
                )
            elif parts[0] == "map":
                if len(parts) != 3:
                    raise FormatError(f"{path}:{ln}: malformed map line")
                raw_map[int(parts[1])] = int(parts[2])
            else:
                raise FormatError(f"{path}:{ln}: unknown record {parts[0]!r}")
    if not entries:
        raise FormatError(f"{path}: no class entries")
    count = max(entries) + 1
    if sorted(entries) != list(range(count)):
        raise FormatError(f"{path}: class ids must be contiguous from 0")
    names = [entries[i][0] for i in range(count)]
    colors = np.array([entries[i][1] for i in range(count)], dtype=np.uint8)
    things = frozenset(i for i in range(count) if entries[i][2])
    dynamic = frozenset(i for i in range(count) if entries[i][3])
    return ClassPalette(names, colors, things, dynamic, raw_map or None)
