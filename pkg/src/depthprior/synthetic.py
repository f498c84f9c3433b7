"""Deterministic ray-cast multi-view scenes with exact depth, for end-to-end checks."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Intrinsics, Pose, ViewCalibration
from .imaging import DepthMap, RgbImage

TEXTURE_AMPLITUDE = 0.6


@dataclass(frozen=True)
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float] = (0.0, 0.0, -1.0)
    half_extent: float = math.inf
    texture_seed: int = 0
    base_color: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class Box:
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]
    texture_seed: int = 0
    base_color: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    camera_count: int = 5
    ring_radius: float = 0.8
    look_at: tuple[float, float, float] = (0.0, 0.0, 5.0)
    image_size: tuple[int, int] = (96, 96)  # (width, height)
    focal: float = 100.0
    texture_scale: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        if self.camera_count < 2:
            raise ValueError("a scene needs at least two cameras")


def default_scene(seed: int = 0, size: int = 96, cameras: int = 5) -> SceneSpec:
    """A tilted textured back wall with a textured box in front of it."""
    return SceneSpec(
        primitives=(
            Plane(point=(0.0, 0.0, 6.0), normal=(0.25, -0.1, -1.0), texture_seed=seed * 7 + 1,
                  base_color=(0.55, 0.5, 0.45)),
            Box(lower=(-0.9, -0.5, 3.9), upper=(0.5, 0.8, 4.7), texture_seed=seed * 7 + 2,
                base_color=(0.45, 0.55, 0.6)),
        ),
        camera_count=cameras,
        ring_radius=0.8,
        look_at=(0.0, 0.0, 5.0),
        image_size=(size, size),
        focal=size * 1.1,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# texture


def _lattice(ix, iy, iz, seed: int) -> np.ndarray:
    # integer hash -> [0, 1); stable across platforms
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (iz.astype(np.int64) * 83492791)
    h = (h ^ ((seed * 2654435761) & 0xFFFFFFFF)) & 0xFFFFFFFF
    h = (h ^ (h >> 16)) * 0x45D9F3B & 0xFFFFFFFF
    h = (h ^ (h >> 16)) * 0x45D9F3B & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return (h & 0xFFFFFF) / float(0x1000000)


def value_noise(points: np.ndarray, seed: int, scale: float) -> np.ndarray:
    """Smooth 3-D value noise in [0, 1] with lattice spacing ``scale``."""
    p = np.asarray(points, dtype=np.float64) / scale
    base = np.floor(p)
    f = p - base
    f = f * f * (3 - 2 * f)
    ix, iy, iz = (base[..., k].astype(np.int64) for k in range(3))
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1 - f[..., 2]
                out += wx * wy * wz * _lattice(ix + dx, iy + dy, iz + dz, seed)
    return out


def surface_color(points: np.ndarray, seed: int, base_color, scale: float) -> np.ndarray:
    channels = []
    for c in range(3):
        n = 0.65 * value_noise(points, seed * 3 + c, 2 * scale) + 0.35 * value_noise(points, seed * 3 + c + 101, scale)
        channels.append(base_color[c] + TEXTURE_AMPLITUDE * (n - 0.5))
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0)


# ---------------------------------------------------------------------------
# cameras and ray casting


def look_at_pose(center, target, up=(0.0, -1.0, 0.0)) -> Pose:
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), center)


def ring_cameras(spec: SceneSpec) -> list[ViewCalibration]:
    w, h = spec.image_size
    k = Intrinsics(spec.focal, spec.focal, (w - 1) / 2, (h - 1) / 2)
    views = []
    for i in range(spec.camera_count):
        a = 2 * math.pi * i / spec.camera_count
        center = (spec.ring_radius * math.cos(a), spec.ring_radius * math.sin(a), 0.0)
        views.append(ViewCalibration(i, k, look_at_pose(center, spec.look_at), (w, h)))
    return views


def _intersect_plane(origin, dirs, plane: Plane):
    n = np.asarray(plane.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    p0 = np.asarray(plane.point, dtype=np.float64)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p0 - origin) @ n) / denom
    hit = np.isfinite(t) & (t > 0)
    if math.isfinite(plane.half_extent):
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(n, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        rel = origin + np.where(hit, t, 0.0)[..., None] * dirs - p0
        hit &= (np.abs(rel @ e1) <= plane.half_extent) & (np.abs(rel @ e2) <= plane.half_extent)
    return np.where(hit, t, np.inf)


def _intersect_box(origin, dirs, box: Box):
    lo = np.asarray(box.lower, dtype=np.float64)
    hi = np.asarray(box.upper, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    t_near = np.nanmax(np.minimum(t0, t1), axis=-1)
    t_far = np.nanmin(np.maximum(t0, t1), axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def render_view(spec: SceneSpec, calib: ViewCalibration) -> tuple[RgbImage, DepthMap]:
    k = calib.intrinsics
    vv, uu = np.meshgrid(np.arange(calib.height, dtype=np.float64), np.arange(calib.width, dtype=np.float64),
                         indexing="ij")
    rays_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
    # camera-z component of each direction is 1, so ray parameter == depth
    dirs = rays_cam @ calib.pose.rotation.T
    origin = calib.pose.center
    depth = np.full(uu.shape, np.inf)
    owner = np.full(uu.shape, -1)
    for idx, prim in enumerate(spec.primitives):
        t = _intersect_plane(origin, dirs, prim) if isinstance(prim, Plane) else _intersect_box(origin, dirs, prim)
        closer = t < depth
        depth = np.where(closer, t, depth)
        owner = np.where(closer, idx, owner)
    valid = np.isfinite(depth)
    points = origin + np.where(valid, depth, 0.0)[..., None] * dirs
    rgb = np.zeros(uu.shape + (3,))
    for idx, prim in enumerate(spec.primitives):
        sel = owner == idx
        if sel.any():
            rgb[sel] = surface_color(points[sel], prim.texture_seed, prim.base_color, spec.texture_scale)
    return RgbImage(rgb), DepthMap(np.where(valid, depth, 0.0), valid)


def render_scene(spec: SceneSpec) -> list[tuple[RgbImage, DepthMap, ViewCalibration]]:
    """Render every ring camera; returns ``(image, depth, calibration)`` per view."""
    views = []
    for calib in ring_cameras(spec):
        image, depth = render_view(spec, calib)
        if not depth.valid.any():
            raise ValueError(f"camera {calib.view_id} sees no primitive")
        views.append((image, depth, calib))
    return views


def corrupt_depth(depth: DepthMap, hole_fraction: float, noise_sigma: float, seed: int) -> DepthMap:
    """Punch holes (one rectangle of a quarter of the budget, the rest scattered) and add noise."""
    if not 0.0 <= hole_fraction <= 1.0:
        raise ValueError("hole_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    h, w = depth.data.shape
    valid = depth.valid.copy()
    n_valid = int(valid.sum())
    budget = int(round(hole_fraction * n_valid))
    if budget > 0:
        rect_area = hole_fraction / 4 * h * w
        aspect = rng.uniform(0.5, 2.0)
        rh = int(np.clip(round(math.sqrt(rect_area * aspect)), 0, h))
        rw = int(np.clip(round(rect_area / max(rh, 1)), 0, w))
        if rh > 0 and rw > 0:
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            rect = np.zeros_like(valid)
            rect[top : top + rh, left : left + rw] = True
            removable = np.flatnonzero((rect & valid).ravel())[:budget]
            valid.ravel()[removable] = False
        remaining = budget - (n_valid - int(valid.sum()))
        if remaining > 0:
            candidates = np.flatnonzero(valid.ravel())
            picked = rng.choice(candidates, size=remaining, replace=False)
            valid.ravel()[np.sort(picked)] = False
    data = depth.data.copy()
    if noise_sigma > 0:
        noise = rng.normal(0.0, noise_sigma, size=data.shape)
        data = np.where(valid, np.maximum(data + noise, 1e-6), 0.0)
    return DepthMap(np.where(valid, data, 0.0), valid)


# ---------------------------------------------------------------------------
# declarative scene files (INI sections: [scene], [cameras], [plane.*], [box.*])


def _vec(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def scene_from_config(parser: configparser.ConfigParser) -> SceneSpec:
    sc = parser["scene"] if parser.has_section("scene") else {}
    cams = parser["cameras"] if parser.has_section("cameras") else {}
    primitives = []
    for section in parser.sections():
        kind, _, _ = section.partition(".")
        s = parser[section]
        if kind == "plane":
            primitives.append(Plane(
                point=_vec(s["point"]), normal=_vec(s.get("normal", "0 0 -1")),
                half_extent=float(s.get("half_extent", "inf")), texture_seed=int(s.get("texture_seed", "0")),
                base_color=_vec(s.get("base_color", "0.5 0.5 0.5"))))
        elif kind == "box":
            primitives.append(Box(
                lower=_vec(s["lower"]), upper=_vec(s["upper"]), texture_seed=int(s.get("texture_seed", "0")),
                base_color=_vec(s.get("base_color", "0.5 0.5 0.5"))))
    width = int(sc.get("width", "96"))
    height = int(sc.get("height", str(width)))
    return SceneSpec(
        primitives=tuple(primitives),
        camera_count=int(cams.get("count", "5")),
        ring_radius=float(cams.get("radius", "0.8")),
        look_at=_vec(cams.get("look_at", "0 0 5")),
        image_size=(width, height),
        focal=float(sc.get("focal", str(width * 1.1))),
        texture_scale=float(sc.get("texture_scale", "0.25")),
        seed=int(sc.get("seed", "0")),
    )


def read_scene(path) -> SceneSpec:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    return scene_from_config(parser)


def write_scene(spec: SceneSpec, path) -> None:
    parser = configparser.ConfigParser()
    w, h = spec.image_size
    fmt = lambda v: " ".join(repr(float(x)) for x in v)  # noqa: E731
    parser["scene"] = {"width": str(w), "height": str(h), "focal": repr(spec.focal),
                       "texture_scale": repr(spec.texture_scale), "seed": str(spec.seed)}
    parser["cameras"] = {"count": str(spec.camera_count), "radius": repr(spec.ring_radius),
                         "look_at": fmt(spec.look_at)}
    for i, prim in enumerate(spec.primitives):
        if isinstance(prim, Plane):
            parser[f"plane.{i}"] = {"point": fmt(prim.point), "normal": fmt(prim.normal),
                                    "half_extent": repr(float(prim.half_extent)),
                                    "texture_seed": str(prim.texture_seed), "base_color": fmt(prim.base_color)}
        else:
            parser[f"box.{i}"] = {"lower": fmt(prim.lower), "upper": fmt(prim.upper),
                                  "texture_seed": str(prim.texture_seed), "base_color": fmt(prim.base_color)}
    with open(path, "w") as f:
        parser.write(f)
