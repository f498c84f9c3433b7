"""Consistency-filtered fusion of per-view depth maps into a colored point cloud."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import ViewCalibration, backproject, project
from .imaging import DepthMap, RgbImage


@dataclass(frozen=True)
class FusionParams:
    disparity_threshold: float
    min_consistent_views: int = 1

    def __post_init__(self):
        if not self.disparity_threshold > 0:
            raise ValueError("disparity_threshold must be positive")
        if self.min_consistent_views < 1:
            raise ValueError("min_consistent_views must be at least 1")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) float32
    colors: np.ndarray  # (N, 3) uint8
    support: np.ndarray  # (N,) int32, number of agreeing observations

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        support = np.asarray(self.support, dtype=np.int32).reshape(-1)
        if not len(points) == len(colors) == len(support):
            raise ValueError("points, colors and support must have equal length")
        if not np.all(np.isfinite(points)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "support", support)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)


def nearest_pixel(x: np.ndarray) -> np.ndarray:
    """Round-half-up to the nearest pixel index."""
    return np.floor(x + 0.5).astype(np.int64)


def _match_table(src: int, dst: int, depths, calibs, world, threshold: float) -> np.ndarray:
    """For every pixel of view ``src``, the flat index of its consistent pixel in ``dst`` or -1."""
    h, w = depths[dst].data.shape
    u, v, z = project(world[src], calibs[dst])
    with np.errstate(invalid="ignore"):
        front = np.isfinite(u) & np.isfinite(v) & (z > 0)
    qx = nearest_pixel(np.where(front, u, -1.0))
    qy = nearest_pixel(np.where(front, v, -1.0))
    inside = front & (qx >= 0) & (qx < w) & (qy >= 0) & (qy < h)
    flat = np.where(inside, qy * w + qx, 0)
    stored = depths[dst].data.ravel()[flat]
    ok = inside & depths[dst].valid.ravel()[flat] & depths[src].valid.ravel()
    with np.errstate(divide="ignore", invalid="ignore"):
        ok &= np.abs(1.0 / np.where(ok, z, 1.0) - 1.0 / np.where(ok, stored, 1.0)) <= threshold
    return np.where(ok, flat, -1)


def fuse_depth_maps(
    depths: Sequence[DepthMap],
    images: Sequence[RgbImage],
    calibs: Sequence[ViewCalibration],
    params: FusionParams,
) -> PointCloud:
    """Fuse depth maps, keeping points observed consistently in enough views.

    Views are visited by ascending ``view_id`` and pixels in row-major order.
    A pixel's 3-D point is transferred into every other view; an observation
    agrees when the other view's pixel (nearest to the transferred location)
    is valid and its disparity differs from the transferred disparity by at
    most the threshold. The reference observation counts itself, so
    ``min_consistent_views=1`` keeps unverified points. An accepted point is
    the mean of the agreeing 3-D positions; every contributing pixel is then
    consumed and never starts a point of its own (it may still agree with a
    later reference pixel).
    """
    if not (len(depths) == len(images) == len(calibs)):
        raise ValueError("depths, images and calibrations must be aligned")
    if not depths:
        raise ValueError("need at least one view")
    for d, im, c in zip(depths, images, calibs):
        if d.data.shape != (c.height, c.width) or im.data.shape[:2] != d.data.shape:
            raise ValueError(f"view {c.view_id}: raster sizes disagree with calibration")

    order = sorted(range(len(calibs)), key=lambda i: calibs[i].view_id)
    world = []
    for d, c in zip(depths, calibs):
        vv, uu = np.meshgrid(np.arange(c.height), np.arange(c.width), indexing="ij")
        world.append(backproject(uu, vv, d.data, c).reshape(-1, 3))
    tables = {
        (s, t): _match_table(s, t, depths, calibs, world, params.disparity_threshold)
        for s in order for t in order if s != t
    }
    consumed = [np.zeros(d.data.size, dtype=bool) for d in depths]

    points, colors, support = [], [], []
    for s in order:
        valid = np.flatnonzero(depths[s].valid.ravel())
        rgb = images[s].data.reshape(-1, 3)
        others = [t for t in order if t != s]
        for p in valid:
            if consumed[s][p]:
                continue
            members = [(s, p)]
            for t in others:
                q = tables[(s, t)][p]
                if q >= 0:
                    members.append((t, q))
            if len(members) < params.min_consistent_views:
                continue
            acc = np.zeros(3)
            for t, q in members:
                acc += world[t][q]
                consumed[t][q] = True
            points.append(acc / len(members))
            colors.append(rgb[p])
            support.append(len(members))
    if not points:
        return PointCloud.empty()
    return PointCloud(np.array(points), to_uint8(np.array(colors)), np.array(support))


# ---------------------------------------------------------------------------
# PLY

class PlyError(ValueError):
    pass


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(cloud: PointCloud, path) -> None:
    """Binary little-endian PLY: float x/y/z, uchar red/green/blue, int support."""
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("support", "<i4")])
    rows = np.empty(len(cloud), dtype=dtype)
    for k, name in enumerate("xyz"):
        rows[name] = cloud.points[:, k]
    for k, name in enumerate(("red", "green", "blue")):
        rows[name] = cloud.colors[:, k]
    rows["support"] = cloud.support
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property int support\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rows.tobytes())


def read_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise PlyError(f"{path}: missing 'ply' magic")
        count = None
        fields = []
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise PlyError(f"{path}: header ended without end_header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens or tokens[0] in ("comment", "obj_info"):
                continue
            if tokens[0] == "end_header":
                break
            if tokens[0] == "format":
                if tokens[1:2] != ["binary_little_endian"]:
                    raise PlyError(f"{path}: only binary_little_endian PLY is supported")
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    try:
                        count = int(tokens[2])
                    except (IndexError, ValueError) as exc:
                        raise PlyError(f"{path}: malformed vertex element line") from exc
                elif count is not None and not fields:
                    raise PlyError(f"{path}: vertex element has no properties")
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list" or tokens[1] not in _PLY_TYPES or len(tokens) != 3:
                    raise PlyError(f"{path}: unsupported vertex property {' '.join(tokens[1:])}")
                fields.append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
            else:
                raise PlyError(f"{path}: unexpected header line {line!r}")
        payload = f.read()
    if count is None:
        raise PlyError(f"{path}: no vertex element")
    names = [n for n, _ in fields]
    for required in ("x", "y", "z", "red", "green", "blue"):
        if required not in names:
            raise PlyError(f"{path}: missing vertex property '{required}'")
    dtype = np.dtype(fields)
    if len(payload) != count * dtype.itemsize:
        raise PlyError(f"{path}: header declares {count} vertices but payload holds "
                       f"{len(payload) / dtype.itemsize:g}")
    rows = np.frombuffer(payload, dtype=dtype)
    support = rows["support"] if "support" in names else np.ones(count)
    return PointCloud(
        np.stack([rows["x"], rows["y"], rows["z"]], axis=1),
        np.stack([rows["red"], rows["green"], rows["blue"]], axis=1),
        support,
    )
