"""Procedural street scenes and a ray-casting LiDAR simulator.

Worlds are built from analytic primitives (planes, boxes, vertical cylinders,
spheres), each carrying one class id. The sensor sits at ``(0, mount_height, 0)``
and points are emitted in that world frame (y up).
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from ._ext import kernels
from .core import DEFAULT_VOCAB, PointCloud, serialize_native
from .errors import ValidationError
from .seeding import derive_seed

PLANE, BOX, CYLINDER, SPHERE = 0, 1, 2, 3
N_PARAMS = 6

VEHICLE, PERSON, ROAD, SIDEWALK, TERRAIN, MANMADE, VEGETATION = range(7)
CONSTANT_INTENSITY = 0.5


@dataclass(frozen=True)
class SensorSpec:
    beam_count: int = 64
    elevation_min: float = -25.0
    elevation_max: float = 3.0
    azimuth_step: float = 1.0
    max_range: float = 50.0
    range_noise_sigma: float = 0.01
    mount_height: float = 1.8

    def __post_init__(self):
        if self.beam_count < 1:
            raise ValidationError("beam_count must be >= 1")
        if not self.max_range > 0:
            raise ValidationError("max_range must be positive")
        if self.range_noise_sigma < 0:
            raise ValidationError("range noise must be non-negative")
        if not self.azimuth_step > 0:
            raise ValidationError("azimuth_step must be positive")

    def elevations(self) -> np.ndarray:
        if self.beam_count == 1:
            return np.array([self.elevation_min], dtype=np.float64)
        return np.linspace(self.elevation_min, self.elevation_max, self.beam_count)

    def azimuths(self) -> np.ndarray:
        return np.arange(0.0, 360.0 - 1e-9, self.azimuth_step)

    def directions(self) -> np.ndarray:
        """Unit ray directions, beam-major: (beam_count * n_azimuth, 3)."""
        e = np.radians(self.elevations())[:, None]
        a = np.radians(self.azimuths())[None, :]
        d = np.stack(
            [np.cos(e) * np.cos(a), np.broadcast_to(np.sin(e), (e.shape[0], a.shape[1])), np.cos(e) * np.sin(a)],
            axis=-1,
        )
        return np.ascontiguousarray(d.reshape(-1, 3))


# dense 64-beam vs sparse 32-beam, same world
DOMAIN_A = SensorSpec(beam_count=64, elevation_min=-25.0, elevation_max=3.0)
DOMAIN_B = SensorSpec(beam_count=32, elevation_min=-30.0, elevation_max=10.0)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    extent: float = 40.0  # world spans [-extent, extent] in x and z
    road_half_width: Tuple[float, float] = (3.5, 5.0)
    sidewalk_width: Tuple[float, float] = (1.5, 3.0)
    vehicles: Tuple[int, int] = (2, 6)
    persons: Tuple[int, int] = (2, 6)
    buildings: Tuple[int, int] = (2, 6)
    trees: Tuple[int, int] = (3, 8)
    terrain_tile: float = 8.0

    def __post_init__(self):
        if not self.extent > 0:
            raise ValidationError("scene extent must be positive")


class Primitive(NamedTuple):
    kind: int
    params: tuple
    label: int

    def padded(self) -> np.ndarray:
        p = np.zeros(N_PARAMS)
        p[: len(self.params)] = self.params
        return p


def plane(h, label=TERRAIN):
    return Primitive(PLANE, (float(h),), label)


def box(lo, hi, label):
    return Primitive(BOX, tuple(float(v) for v in (*lo, *hi)), label)


def cylinder(cx, cz, r, y0, y1, label):
    return Primitive(CYLINDER, tuple(float(v) for v in (cx, cz, r, y0, y1)), label)


def sphere(c, r, label):
    return Primitive(SPHERE, tuple(float(v) for v in (*c, r)), label)


def _count(rng, rng_range):
    lo, hi = rng_range
    return int(rng.integers(lo, hi + 1)) if hi > 0 else 0


def generate_scene(spec: SceneSpec) -> List[Primitive]:
    """Road strip along z, flanking sidewalks, terrain tiles, then objects."""
    rng = np.random.default_rng(derive_seed(spec.seed, "scene"))
    E = spec.extent
    rw = min(rng.uniform(*spec.road_half_width), E)
    sw = rng.uniform(*spec.sidewalk_width)
    edge = min(rw + sw, E)
    prims = [box((-rw, -1.0, -E), (rw, 0.0, E), ROAD)]
    for s in (-1, 1):
        x0, x1 = sorted((s * rw, s * edge))
        prims.append(box((x0, -1.0, -E), (x1, 0.15, E), SIDEWALK))
    n_tiles = max(1, int(np.ceil(2 * E / spec.terrain_tile)))
    zs = np.linspace(-E, E, n_tiles + 1)
    if edge < E:
        for s in (-1, 1):
            x0, x1 = sorted((s * edge, s * E))
            for t in range(n_tiles):
                top = rng.uniform(0.05, 0.35)
                prims.append(box((x0, -1.0, zs[t]), (x1, top, zs[t + 1]), TERRAIN))

    for _ in range(_count(rng, spec.vehicles)):
        lane = rng.choice([-1, 1]) * rng.uniform(0.3, max(0.31, rw - 1.0))
        z = rng.uniform(-E + 3, max(-E + 3, E - 3))
        if abs(lane) < 1.5 and abs(z) < 4.0:
            z = np.sign(z or 1.0) * rng.uniform(4.0, max(4.0, E - 3))
        hw, hl, h = rng.uniform(0.8, 1.0), rng.uniform(1.9, 2.4), rng.uniform(1.4, 1.9)
        x0, x1 = np.clip([lane - hw, lane + hw], -rw, rw)
        z0, z1 = np.clip([z - hl, z + hl], -E, E)
        if z1 - z0 > 0.5 and x1 - x0 > 0.5:
            prims.append(box((x0, 0.0, z0), (x1, h, z1), VEHICLE))

    for _ in range(_count(rng, spec.persons)):
        s = rng.choice([-1, 1])
        x = s * rng.uniform(rw + 0.4, max(rw + 0.41, edge - 0.4))
        z = rng.uniform(-E + 1, max(-E + 1, E - 1))
        top = 0.15 + rng.uniform(1.6, 1.9)
        if abs(x) + 0.3 <= E and abs(z) + 0.3 <= E:
            prims.append(cylinder(x, z, 0.3, 0.15, top, PERSON))

    room = E - edge
    if room > 3.0:
        for _ in range(_count(rng, spec.buildings)):
            s = rng.choice([-1, 1])
            depth = rng.uniform(3.0, min(12.0, room - 0.5))
            x_in = edge + rng.uniform(0.5, max(0.51, room - depth))
            length = min(rng.uniform(4.0, 14.0), 2 * E)
            z = rng.uniform(-E + length / 2, E - length / 2)
            x0, x1 = sorted((s * x_in, s * min(x_in + depth, E)))
            prims.append(box((x0, 0.0, z - length / 2), (x1, rng.uniform(3.0, 10.0), z + length / 2), MANMADE))
        for _ in range(_count(rng, spec.trees)):
            s = rng.choice([-1, 1])
            crown = rng.uniform(1.0, 2.0)
            x = s * rng.uniform(edge + crown, max(edge + crown + 0.01, E - crown))
            z = rng.uniform(-E + crown, E - crown)
            trunk_h = rng.uniform(2.0, 3.5)
            if abs(x) + crown > E:
                continue
            prims.append(cylinder(x, z, 0.2, 0.0, trunk_h, VEGETATION))
            prims.append(sphere((x, trunk_h + crown * 0.8, z), crown, VEGETATION))
    return prims


def _pack(scene: List[Primitive]):
    kinds = np.array([p.kind for p in scene], dtype=np.int64)
    prm = np.array([p.padded() for p in scene], dtype=np.float64).reshape(-1, N_PARAMS)
    labels = np.array([p.label for p in scene], dtype=np.int64)
    return kinds, np.ascontiguousarray(prm), labels


class CastResult(NamedTuple):
    cloud: PointCloud
    clean_xyz: np.ndarray  # hit points before range noise
    primitive: np.ndarray  # index of the hit primitive per point


def cast(scene: List[Primitive], sensor: SensorSpec, rng: np.random.Generator, frame_id: str = "") -> CastResult:
    dirs = sensor.directions()
    origin = np.array([0.0, sensor.mount_height, 0.0])
    noise = rng.normal(0.0, 1.0, dirs.shape[0]) * sensor.range_noise_sigma
    if not scene:
        empty = np.zeros((0, 3))
        return CastResult(PointCloud(empty, None, np.zeros(0, dtype=np.int64), frame_id), empty, np.zeros(0, np.int64))
    kinds, prm, labels = _pack(scene)
    t, hit = kernels.raycast(origin, dirs, kinds, prm)
    keep = (hit >= 0) & (t <= sensor.max_range)
    t, hit, d = t[keep], hit[keep], dirs[keep]
    clean = origin + t[:, None] * d
    noisy = origin + (t + noise[keep])[:, None] * d
    inten = np.full(noisy.shape[0], CONSTANT_INTENSITY)
    return CastResult(PointCloud(noisy, inten, labels[hit], frame_id), clean, hit)


def raycast_scan(scene: List[Primitive], sensor: SensorSpec, rng: np.random.Generator, frame_id: str = "") -> PointCloud:
    """One ray per (beam, azimuth); nearest hit within ``max_range`` becomes a labeled point."""
    return cast(scene, sensor, rng, frame_id).cloud


def surface_distance(prim: Primitive, pts: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to the primitive's surface."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    p = prim.params
    if prim.kind == PLANE:
        return np.abs(pts[:, 1] - p[0])
    if prim.kind == SPHERE:
        return np.abs(np.linalg.norm(pts - np.array(p[:3]), axis=1) - p[3])
    if prim.kind == BOX:
        lo, hi = np.array(p[:3]), np.array(p[3:6])
        q = np.maximum(lo - pts, pts - hi)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)
    cx, cz, r, y0, y1 = p
    radial = np.hypot(pts[:, 0] - cx, pts[:, 2] - cz) - r
    axial = np.maximum(y0 - pts[:, 1], pts[:, 1] - y1)
    q = np.stack([radial, axial], axis=1)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)


def scene_bounds_ok(scene: List[Primitive], extent: float, tol: float = 1e-9) -> bool:
    for prim in scene:
        p = prim.params
        if prim.kind == BOX:
            xs, zs = (p[0], p[3]), (p[2], p[5])
        elif prim.kind == CYLINDER:
            xs, zs = (p[0] - p[2], p[0] + p[2]), (p[1] - p[2], p[1] + p[2])
        elif prim.kind == SPHERE:
            xs, zs = (p[0] - p[3], p[0] + p[3]), (p[2] - p[3], p[2] + p[3])
        else:
            continue
        if min(xs + zs) < -extent - tol or max(xs + zs) > extent + tol:
            return False
    return True


def scan_rng(scene_seed: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(scene_seed, "noise"))


def generate_domain(
    n_scans: int,
    scene_seed_base: int,
    sensor: SensorSpec,
    out_dir,
    scene_template: Optional[SceneSpec] = None,
    vocab=DEFAULT_VOCAB,
) -> str:
    """Write ``scans/NNNNNN.ldg`` plus ``manifest.json``; returns ``out_dir``.

    Scan ``i`` uses scene seed ``scene_seed_base + i``, so two domains with the
    same base share their worlds.
    """
    template = scene_template or SceneSpec()
    scan_dir = os.path.join(out_dir, "scans")
    os.makedirs(scan_dir, exist_ok=True)
    hist = Counter()
    seeds = []
    for i in range(n_scans):
        seed = scene_seed_base + i
        seeds.append(seed)
        scene = generate_scene(_with_seed(template, seed))
        cloud = raycast_scan(scene, sensor, scan_rng(seed), frame_id=f"{i:06d}")
        hist.update(int(v) for v in cloud.labels)
        path = os.path.join(scan_dir, f"{i:06d}.ldg")
        _write_if_changed(path, cloud)
    manifest = {
        "format": "LDGSCAN1",
        "n_scans": n_scans,
        "sensor": asdict(sensor),
        "scene": {k: v for k, v in asdict(template).items() if k != "seed"},
        "scene_seeds": seeds,
        "class_histogram": {vocab.names[k]: int(hist.get(k, 0)) for k in range(len(vocab))},
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    mpath = os.path.join(out_dir, "manifest.json")
    if not (os.path.exists(mpath) and open(mpath).read() == text):
        with open(mpath, "w") as f:
            f.write(text)
    return str(out_dir)


def _with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    d = asdict(spec)
    d["seed"] = seed
    return SceneSpec(**d)


def _write_if_changed(path, cloud):
    data = serialize_native(cloud)
    if os.path.exists(path):
        with open(path, "rb") as f:
            if f.read() == data:
                return
    with open(path, "wb") as f:
        f.write(data)


def load_manifest(dataset_dir) -> dict:
    with open(os.path.join(dataset_dir, "manifest.json")) as f:
        return json.load(f)
