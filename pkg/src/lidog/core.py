"""Point clouds, the class vocabulary, label remapping and scan I/O.

Internal frame is y-up: x and z span the ground plane and BEV rasters drop y.
KITTI ``.bin`` files are z-up and get their y/z axes swapped on load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import yaml

from .errors import FormatError, ValidationError

IGNORE = -1

NATIVE_MAGIC = b"LDGSCAN1"
NATIVE_IGNORE = 0xFFFF
NATIVE_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"), ("label", "<u2")]
)
KITTI_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple = ("vehicle", "person", "road", "sidewalk", "terrain", "manmade", "vegetation")
    ignore: int = IGNORE

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate class names in {self.names}")
        if 0 <= self.ignore < len(self.names):
            raise ValidationError("IGNORE id must lie outside [0, K)")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        if name.lower() == "ignore":
            return self.ignore
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown class name '{name}'") from None


DEFAULT_VOCAB = ClassVocabulary()


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered points with optional per-point labels.

    ``xyz`` is (N, 3) float64, ``intensity`` (N,), ``labels`` (N,) int64 or None.
    Arrays are read-only; every transform returns a new cloud.
    """

    xyz: np.ndarray
    intensity: np.ndarray = None
    labels: Optional[np.ndarray] = None
    frame_id: str = ""

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = xyz.shape[0]
        bad = ~np.isfinite(xyz).all(axis=1)
        if bad.any():
            raise ValidationError(f"non-finite coordinate at point index {int(np.flatnonzero(bad)[0])}")
        inten = np.zeros(n) if self.intensity is None else np.asarray(self.intensity, dtype=np.float64)
        if inten.shape != (n,):
            raise ValidationError(f"intensity has shape {inten.shape}, expected ({n},)")
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(inten))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (n,):
                raise ValidationError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} points")
            if np.any((labels < 0) & (labels != IGNORE)):
                raise ValidationError("labels must be class ids or IGNORE")
            object.__setattr__(self, "labels", _frozen(labels))

    def __len__(self):
        return self.xyz.shape[0]

    def point(self, i: int) -> Point:
        x, y, z = self.xyz[i]
        return Point(float(x), float(y), float(z), float(self.intensity[i]))

    @property
    def points(self) -> list:
        return [self.point(i) for i in range(len(self))]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.frame_id == other.frame_id
            and np.array_equal(self.xyz, other.xyz)
            and np.array_equal(self.intensity, other.intensity)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )

    __hash__ = None

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(
            self.xyz[idx],
            self.intensity[idx],
            None if self.labels is None else self.labels[idx],
            self.frame_id,
        )

    @classmethod
    def from_points(cls, points: Sequence, labels=None, frame_id: str = "") -> "PointCloud":
        pts = [Point(*p) for p in points]
        xyz = np.array([[p.x, p.y, p.z] for p in pts], dtype=np.float64).reshape(-1, 3)
        inten = np.array([p.intensity for p in pts], dtype=np.float64)
        return cls(xyz, inten, labels, frame_id)


@dataclass(frozen=True)
class LabelRemap:
    """Raw dataset label id -> common ClassId (or IGNORE). Unknown ids map to IGNORE."""

    mapping: dict = field(default_factory=dict)

    def __call__(self, raw_ids) -> np.ndarray:
        raw = np.asarray(raw_ids, dtype=np.int64)
        if raw.size == 0:
            return np.zeros(raw.shape, dtype=np.int64)
        lut_size = max(int(raw.max()), max(self.mapping, default=0)) + 1
        lut = np.full(lut_size, IGNORE, dtype=np.int64)
        for k, v in self.mapping.items():
            lut[k] = v
        return lut[raw]

    @classmethod
    def identity(cls, num_classes: int) -> "LabelRemap":
        return cls({i: i for i in range(num_classes)})

    @classmethod
    def from_config(cls, path_or_dict, vocab: ClassVocabulary = DEFAULT_VOCAB) -> "LabelRemap":
        """Build from a YAML file (or dict) of ``raw_id: class_name | ignore``."""
        if isinstance(path_or_dict, dict):
            raw = path_or_dict
        else:
            with open(path_or_dict) as f:
                raw = yaml.safe_load(f) or {}
            raw = raw.get("mapping", raw)
        mapping = {}
        for key, name in raw.items():
            mapping[int(key)] = vocab.index(str(name))
        return cls(mapping)


def default_semantickitti_remap() -> LabelRemap:
    path = os.path.join(os.path.dirname(__file__), "configs", "semantickitti_remap.yaml")
    return LabelRemap.from_config(path)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def load_scan(path, format: str = "native") -> PointCloud:
    """Load a scan as a :class:`PointCloud`.

    ``kitti_bin``: float32 records (x, y, z, intensity), z-up, no labels.
    ``native``: ``LDGSCAN1`` header, u64 count, packed (4 x f32, u16 label) records.
    """
    buf = _read_bytes(path)
    frame_id = os.path.splitext(os.path.basename(str(path)))[0]
    if format == "kitti_bin":
        rec = KITTI_DTYPE.itemsize
        if len(buf) % rec:
            raise FormatError(f"truncated kitti_bin file {path}", offset=len(buf) // rec * rec)
        arr = np.frombuffer(buf, dtype=KITTI_DTYPE)
        xyz = np.stack([arr["x"], arr["z"], arr["y"]], axis=1).astype(np.float64)
        return _build_cloud(xyz, arr["intensity"].astype(np.float64), None, frame_id)
    if format == "native":
        return _parse_native(buf, frame_id, path)
    raise ValidationError(f"unknown scan format '{format}'")


def _build_cloud(xyz, intensity, labels, frame_id):
    bad = ~np.isfinite(xyz).all(axis=1)
    if bad.any():
        raise ValidationError(f"non-finite coordinate at point index {int(np.flatnonzero(bad)[0])}")
    return PointCloud(xyz, intensity, labels, frame_id)


def _parse_native(buf: bytes, frame_id: str, path="<buffer>") -> PointCloud:
    if len(buf) < 16:
        raise FormatError(f"native scan {path} shorter than its header", offset=0)
    if buf[:8] != NATIVE_MAGIC:
        raise FormatError(f"bad magic in {path}", offset=0)
    count = int(np.frombuffer(buf, dtype="<u8", count=1, offset=8)[0])
    rec = NATIVE_DTYPE.itemsize
    body = len(buf) - 16
    if body != count * rec:
        good = min(count, body // rec)
        raise FormatError(f"native scan {path} declares {count} points", offset=16 + good * rec)
    arr = np.frombuffer(buf, dtype=NATIVE_DTYPE, count=count, offset=16)
    xyz = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    labels = arr["label"].astype(np.int64)
    labels[labels == NATIVE_IGNORE] = IGNORE
    return _build_cloud(xyz, arr["intensity"].astype(np.float64), labels, frame_id)


def serialize_native(cloud: PointCloud) -> bytes:
    n = len(cloud)
    arr = np.zeros(n, dtype=NATIVE_DTYPE)
    arr["x"], arr["y"], arr["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    arr["intensity"] = cloud.intensity
    if cloud.labels is None:
        arr["label"] = NATIVE_IGNORE
    else:
        lab = cloud.labels
        if np.any(lab >= NATIVE_IGNORE):
            raise ValidationError("class id does not fit the native u16 label field")
        arr["label"] = np.where(lab == IGNORE, NATIVE_IGNORE, lab)
    return NATIVE_MAGIC + np.uint64(n).astype("<u8").tobytes() + arr.tobytes()


def save_scan(cloud: PointCloud, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_native(cloud))


def serialize_kitti_bin(cloud: PointCloud) -> bytes:
    arr = np.zeros(len(cloud), dtype=KITTI_DTYPE)
    arr["x"], arr["y"], arr["z"] = cloud.xyz[:, 0], cloud.xyz[:, 2], cloud.xyz[:, 1]
    arr["intensity"] = cloud.intensity
    return arr.tobytes()


def load_labels(path, remap: LabelRemap) -> np.ndarray:
    """Read SemanticKITTI ``.label`` records (u32 LE, semantic id in the low 16 bits)."""
    buf = _read_bytes(path)
    if len(buf) % 4:
        raise FormatError(f"truncated label file {path}", offset=len(buf) // 4 * 4)
    raw = np.frombuffer(buf, dtype="<u4")
    return remap(raw & 0xFFFF)


def attach_labels(cloud: PointCloud, labels) -> PointCloud:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != len(cloud):
        raise ValidationError(f"{labels.shape[0]} labels for {len(cloud)} points")
    return PointCloud(cloud.xyz, cloud.intensity, labels, cloud.frame_id)
