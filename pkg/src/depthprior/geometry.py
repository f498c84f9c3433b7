"""Calibrated pinhole geometry: reprojection, differentiable backward warping, view selection.

Conventions: poses are world-from-camera (``X_world = R @ X_cam + t``) acting on
column vectors; pixel ``(u, v)`` = (column, row) with integer coordinates at
pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .imaging import DepthMap, RgbImage

# Sample coordinates this close to a pixel center are treated as exactly on it.
_KNOT_SNAP = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2]

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ViewCalibration:
    view_id: int
    intrinsics: Intrinsics
    pose: Pose
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        w, h = (int(s) for s in self.image_size)
        if w <= 0 or h <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        object.__setattr__(self, "image_size", (w, h))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def same_camera(self, other: ViewCalibration) -> bool:
        return (
            self.intrinsics == other.intrinsics
            and self.pose == other.pose
            and self.image_size == other.image_size
        )


class Reprojection(NamedTuple):
    u: float
    v: float
    depth: float
    behind: bool


@dataclass
class WarpResult:
    warped: torch.Tensor  # (H, W, 3) in reference-view pixel grid
    validity: torch.Tensor  # (H, W) bool

    def to_image(self) -> RgbImage:
        return RgbImage(self.warped.detach().cpu().double().numpy().clip(0.0, 1.0))


# ---------------------------------------------------------------------------
# camera files


def read_camera(path, view_id: int | None = None) -> ViewCalibration:
    """Parse a six-line camera file (intrinsics, rotation rows, translation, size)."""
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                rows.append([float(tok) for tok in line.split()])
    if len(rows) != 6 or [len(r) for r in rows] != [4, 3, 3, 3, 3, 2]:
        raise ValueError(f"{path}: expected lines of 4, 3, 3, 3, 3 and 2 numbers")
    if view_id is None:
        digits = "".join(ch for ch in str(path).rsplit("/", 1)[-1] if ch.isdigit())
        view_id = int(digits) if digits else 0
    fx, fy, cx, cy = rows[0]
    return ViewCalibration(
        view_id=view_id,
        intrinsics=Intrinsics(fx, fy, cx, cy),
        pose=Pose(np.array(rows[1:4]), np.array(rows[4])),
        image_size=(int(rows[5][0]), int(rows[5][1])),
    )


def write_camera(calib: ViewCalibration, path) -> None:
    k = calib.intrinsics
    lines = [f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in calib.pose.rotation]
    lines.append(" ".join(repr(float(x)) for x in calib.pose.translation))
    lines.append(f"{calib.width} {calib.height}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# point transfer


def relative_transform(ref: ViewCalibration, nbr: ViewCalibration) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation taking ref-camera coordinates to nbr-camera coordinates."""
    if ref.pose == nbr.pose:
        return np.eye(3), np.zeros(3)
    r_n_t = nbr.pose.rotation.T
    return r_n_t @ ref.pose.rotation, r_n_t @ (ref.pose.translation - nbr.pose.translation)


def backproject(u, v, depth, calib: ViewCalibration) -> np.ndarray:
    """World coordinates of pixels ``(u, v)`` at the given camera depths; shape (..., 3)."""
    k = calib.intrinsics
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    cam = np.stack([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], axis=-1)
    return cam @ calib.pose.rotation.T + calib.pose.translation


def project(points: np.ndarray, calib: ViewCalibration) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points; returns (u, v, depth-in-camera)."""
    k = calib.intrinsics
    cam = (np.asarray(points, dtype=np.float64) - calib.pose.translation) @ calib.pose.rotation
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[..., 0] / z + k.cx
        v = k.fy * cam[..., 1] / z + k.cy
    return u, v, z


def reproject_pixel(u: float, v: float, depth: float, ref: ViewCalibration, nbr: ViewCalibration) -> Reprojection:
    """Transfer pixel ``(u, v)`` seen at ``depth`` in ``ref`` into ``nbr``."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    kr, kn = ref.intrinsics, nbr.intrinsics
    rot, trans = relative_transform(ref, nbr)
    ray = np.array([(u - kr.cx) / kr.fx, (v - kr.cy) / kr.fy, 1.0])
    p = depth * (rot @ ray) + trans
    z = float(p[2])
    if z <= 0:
        return Reprojection(math.nan, math.nan, z, True)
    return Reprojection(float(kn.fx * p[0] / z + kn.cx), float(kn.fy * p[1] / z + kn.cy), z, False)


def _snap_to_knots(x: torch.Tensor) -> torch.Tensor:
    # straight-through: value lands on the knot, derivative is untouched
    r = torch.round(x)
    near = (x - r).abs() < _KNOT_SNAP
    return x + torch.where(near, r - x, torch.zeros_like(x)).detach()


def reproject_grid(depth: torch.Tensor, ref: ViewCalibration, nbr: ViewCalibration):
    """Per-pixel transfer of the whole reference grid.

    Returns ``(u', v', z')`` float64 tensors shaped like ``depth``; gradients
    flow back to ``depth``.
    """
    h, w = depth.shape
    kr, kn = ref.intrinsics, nbr.intrinsics
    rot, trans = relative_transform(ref, nbr)
    rot = torch.as_tensor(rot, dtype=torch.float64)
    trans = torch.as_tensor(trans, dtype=torch.float64)
    vv, uu = torch.meshgrid(
        torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij"
    )
    rays = torch.stack([(uu - kr.cx) / kr.fx, (vv - kr.cy) / kr.fy, torch.ones_like(uu)], dim=-1)
    dirs = rays @ rot.T
    d = depth.to(torch.float64).unsqueeze(-1)
    p = d * dirs + trans
    z = p[..., 2]
    safe_z = torch.where(z > 0, z, torch.ones_like(z))
    u2 = kn.fx * p[..., 0] / safe_z + kn.cx
    v2 = kn.fy * p[..., 1] / safe_z + kn.cy
    return u2, v2, z


def bilinear_sample(image, x, y):
    """Sample an (H, W, C) image at continuous pixel coordinates.

    Returns ``(values, validity)``. A sample is valid when every tap carrying
    non-zero weight lies inside the image, i.e. ``0 <= x <= W-1`` and
    ``0 <= y <= H-1``. Invalid samples are 0. Derivatives with respect to the
    image and to the coordinates are the exact piecewise-bilinear ones
    (available through autograd).
    """
    if isinstance(image, RgbImage):
        image = torch.from_numpy(image.data)
    image = torch.as_tensor(image)
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image.unsqueeze(-1)
    h, w, _ = image.shape
    finite = torch.isfinite(x) & torch.isfinite(y)
    x = _snap_to_knots(torch.where(finite, x, torch.zeros_like(x)))
    y = _snap_to_knots(torch.where(finite, y, torch.zeros_like(y)))
    valid = finite & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = torch.where(valid, x, torch.zeros_like(x))
    ys = torch.where(valid, y, torch.zeros_like(y))
    x0 = torch.clamp(torch.floor(xs.detach()), 0, max(w - 2, 0)).long()
    y0 = torch.clamp(torch.floor(ys.detach()), 0, max(h - 2, 0)).long()
    x1 = torch.clamp(x0 + 1, max=w - 1)
    y1 = torch.clamp(y0 + 1, max=h - 1)
    wx = (xs - x0.to(xs.dtype)).to(image.dtype).unsqueeze(-1)
    wy = (ys - y0.to(ys.dtype)).to(image.dtype).unsqueeze(-1)
    i00, i01 = image[y0, x0], image[y0, x1]
    i10, i11 = image[y1, x0], image[y1, x1]
    top = (1 - wx) * i00 + wx * i01
    bottom = (1 - wx) * i10 + wx * i11
    values = (1 - wy) * top + wy * bottom
    values = torch.where(valid.unsqueeze(-1), values, torch.zeros_like(values))
    if squeeze:
        values = values.squeeze(-1)
    return values, valid


def warp_image(d_ref, i_nbr, ref: ViewCalibration, nbr: ViewCalibration, valid=None) -> WarpResult:
    """Backward-warp the neighbor image into the reference view through reference depth.

    ``d_ref`` may be a :class:`DepthMap` or a depth tensor (gradients flow
    through the latter). Validity combines depth validity, a positive depth in
    the neighbor camera, and in-bounds sampling.
    """
    if isinstance(d_ref, DepthMap):
        if valid is None:
            valid = torch.from_numpy(d_ref.valid)
        d_ref = torch.from_numpy(d_ref.data)
    d_ref = torch.as_tensor(d_ref)
    if tuple(d_ref.shape) != (ref.height, ref.width):
        raise ValueError(f"depth shape {tuple(d_ref.shape)} does not match reference size {ref.image_size}")
    if isinstance(i_nbr, RgbImage):
        i_nbr = torch.from_numpy(i_nbr.data)
    if tuple(i_nbr.shape[:2]) != (nbr.height, nbr.width):
        raise ValueError("neighbor image does not match its calibration size")
    depth_ok = torch.isfinite(d_ref) & (d_ref > 0)
    if valid is not None:
        depth_ok = depth_ok & torch.as_tensor(valid, dtype=torch.bool)
    safe_depth = torch.where(depth_ok, d_ref, torch.ones_like(d_ref))
    u2, v2, z = reproject_grid(safe_depth, ref, nbr)
    values, in_bounds = bilinear_sample(i_nbr, u2, v2)
    validity = in_bounds & depth_ok & (z > 0)
    warped = torch.where(validity.unsqueeze(-1), values, torch.zeros_like(values))
    return WarpResult(warped, validity)


# ---------------------------------------------------------------------------
# neighbor selection

_PREFERRED_ANGLE = 10.0
_SIGMA_BELOW = 5.0
_SIGMA_ABOVE = 15.0


def view_pair_angle(ref: ViewCalibration, other: ViewCalibration, mean_depth: float) -> float:
    """Triangulation angle (degrees) at the midpoint of the two viewing-axis points at ``mean_depth``."""
    c_r, c_o = ref.pose.center, other.pose.center
    target = 0.5 * (c_r + mean_depth * ref.pose.optical_axis + c_o + mean_depth * other.pose.optical_axis)
    a, b = target - c_r, target - c_o
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    cos = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return math.degrees(math.acos(cos))


def view_pair_score(ref: ViewCalibration, other: ViewCalibration, mean_depth: float) -> float:
    if np.linalg.norm(ref.pose.center - other.pose.center) <= 1e-12:
        return 0.0  # zero baseline carries no parallax
    theta = view_pair_angle(ref, other, mean_depth)
    sigma = _SIGMA_BELOW if theta <= _PREFERRED_ANGLE else _SIGMA_ABOVE
    return math.exp(-((theta - _PREFERRED_ANGLE) ** 2) / (2 * sigma**2))


def select_neighbors(ref_id, views: Sequence[ViewCalibration], n: int, mean_depth: float = 1.0) -> list:
    """Pick the ``n`` best-scored views for ``ref_id`` (ties broken by ascending view id).

    ``mean_depth`` should be the mean valid depth of the reference map.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    by_id = {v.view_id: v for v in views}
    if ref_id not in by_id:
        raise KeyError(f"unknown reference view {ref_id}")
    ref = by_id[ref_id]
    candidates = [v for v in views if v.view_id != ref_id]
    if len(candidates) < n:
        raise ValueError(f"need {n} neighbor views, only {len(candidates)} available")
    scored = sorted(candidates, key=lambda v: (-view_pair_score(ref, v, mean_depth), v.view_id))
    return [v.view_id for v in scored[:n]]
