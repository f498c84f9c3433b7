"""Image and depth containers, hole masks, depth/disparity conversion and raster I/O."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class PfmError(ValueError):
    """Base class for PFM decoding failures."""


class PfmHeaderError(PfmError):
    pass


class PfmDimensionError(PfmError):
    pass


class PfmTruncatedError(PfmError):
    pass


@dataclass(frozen=True)
class RgbImage:
    """An H x W x 3 color image with intensities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) raster, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
            raise ValueError("RGB intensities must be finite and within [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _masked_raster(data, valid) -> tuple[np.ndarray, np.ndarray]:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {data.shape}")
    if valid is None:
        valid = np.isfinite(data) & (data > 0)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != data.shape:
        raise ValueError("validity raster does not match data shape")
    # holes always carry the zero sentinel
    data = np.where(valid, data, 0.0)
    return data, valid


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth with a boolean validity raster.

    Invalid pixels hold 0. When ``valid`` is omitted it is derived with
    :func:`compute_hole_mask` semantics.
    """

    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        data, valid = _masked_raster(self.data, self.valid)
        if np.any(~(data[valid] > 0)) or not np.all(np.isfinite(data)):
            raise ValueError("valid depth pixels must be finite and positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DisparityMap:
    """Per-pixel inverse depth with a boolean validity raster (holes hold 0)."""

    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        data, valid = _masked_raster(self.data, self.valid)
        if not np.all(np.isfinite(data)):
            raise ValueError("disparity values must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PreprocessParams:
    """Depth clipping range and constant offset applied before inversion."""

    d_min: float
    d_max: float
    d_offset: float = 0.0

    def __post_init__(self):
        if not self.d_min > 0:
            raise ValueError(f"d_min must be positive, got {self.d_min}")
        if not self.d_max > self.d_min:
            raise ValueError(f"d_max ({self.d_max}) must exceed d_min ({self.d_min})")
        if not self.d_offset >= 0:
            raise ValueError(f"d_offset must be non-negative, got {self.d_offset}")

    @property
    def z_max(self) -> float:
        return 1.0 / self.d_min


# Per-scene clipping presets used for the Tanks and Temples sequences.
TNT_PREPROCESS = {
    "ignatius": PreprocessParams(2.0, 7.5, 0.0),
    "barn": PreprocessParams(2.0, 16.5, 2.0),
    "caterpillar": PreprocessParams(2.0, 7.5, 0.0),
    "meetingroom": PreprocessParams(0.2, 25.0, 4.0),
    "truck": PreprocessParams(0.5, 10.0, 2.0),
    "courtroom": PreprocessParams(0.2, 46.0, 4.0),
    "church": PreprocessParams(0.2, 16.0, 4.0),
}


@dataclass(frozen=True)
class RgbdTarget:
    """Reference color image plus the (hole-ridden) disparity it should reproduce."""

    image: RgbImage
    disparity: DisparityMap
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        mask = self.disparity.valid if self.mask is None else np.asarray(self.mask, dtype=bool)
        if self.image.data.shape[:2] != self.disparity.data.shape:
            raise ValueError("image and disparity dimensions differ")
        if not np.array_equal(mask, self.disparity.valid):
            raise ValueError("target mask must equal the disparity validity raster")
        object.__setattr__(self, "mask", mask)


def compute_hole_mask(depth) -> np.ndarray:
    """True where the depth is finite and strictly positive."""
    data = depth.data if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        mask = np.isfinite(data) & (data > 0)
    if isinstance(depth, DepthMap):
        mask &= depth.valid
    return mask


def depth_to_disparity(depth: DepthMap, params: PreprocessParams) -> DisparityMap:
    """Clip ``depth + offset`` to ``[d_min, d_max]`` and invert it."""
    if not params.d_min > 0:
        raise ValueError("d_min must be positive")
    clipped = np.clip(depth.data + params.d_offset, params.d_min, params.d_max)
    z = np.where(depth.valid, 1.0 / clipped, 0.0)
    return DisparityMap(z, depth.valid.copy())


def disparity_to_depth(disp: DisparityMap, params: PreprocessParams) -> DepthMap:
    bad = disp.valid & ~(disp.data > 0)
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        raise ValueError(f"non-positive disparity {disp.data[r, c]} at valid pixel ({r}, {c})")
    with np.errstate(divide="ignore"):
        d = np.where(disp.valid, 1.0 / np.where(disp.valid, disp.data, 1.0) - params.d_offset, 0.0)
    valid = disp.valid.copy()
    # an offset larger than the stored depth would produce a non-positive depth
    if np.any(valid & ~(d > 0)):
        raise ValueError("disparity inverts to a non-positive depth after removing the offset")
    return DepthMap(d, valid)


def normalize_disparity(disp: DisparityMap, params: PreprocessParams) -> np.ndarray:
    """Scale disparities by ``d_min`` so the admissible range maps onto [0, 1]."""
    return np.where(disp.valid, disp.data * params.d_min, 0.0)


def denormalize_disparity(z_norm: np.ndarray, params: PreprocessParams) -> np.ndarray:
    return np.asarray(z_norm, dtype=np.float64) / params.d_min


# ---------------------------------------------------------------------------
# PFM

_PFM_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def write_pfm(raster: np.ndarray, path) -> None:
    """Write a 1- or 3-channel float raster as little-endian PFM (rows bottom-up)."""
    raster = np.asarray(raster)
    if raster.ndim == 2:
        header = b"Pf"
    elif raster.ndim == 3 and raster.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3) rasters, got {raster.shape}")
    height, width = raster.shape[:2]
    payload = np.ascontiguousarray(np.flipud(raster).astype("<f4"))
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{width} {height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(payload.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array of shape (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise PfmHeaderError(f"{path}: bad PFM magic {magic!r}")
        dims = _PFM_DIMS.match(f.readline())
        if dims is None:
            raise PfmDimensionError(f"{path}: malformed dimension line")
        width, height = int(dims.group(1)), int(dims.group(2))
        if width <= 0 or height <= 0:
            raise PfmDimensionError(f"{path}: non-positive dimensions {width}x{height}")
        try:
            scale = float(f.readline().strip())
        except ValueError as exc:
            raise PfmHeaderError(f"{path}: malformed scale line") from exc
        if scale == 0:
            raise PfmHeaderError(f"{path}: scale must be non-zero")
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        payload = f.read()
    if len(payload) < count * 4:
        raise PfmTruncatedError(f"{path}: expected {count * 4} payload bytes, found {len(payload)}")
    if len(payload) > count * 4:
        raise PfmDimensionError(f"{path}: payload larger than {width}x{height}x{channels}")
    data = np.frombuffer(payload, dtype=dtype).astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(data.reshape(shape)).copy()


# ---------------------------------------------------------------------------
# 16-bit PNG depth

def read_depth_png16(path, scale: float) -> DepthMap:
    """Load a 16-bit single-channel PNG; raw 0 marks a hole."""
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise ValueError(f"{path}: expected 16-bit single-channel image, got mode {img.mode}")
        raw = np.array(img)
    if raw.ndim != 2:
        raise ValueError(f"{path}: expected a single channel")
    if raw.dtype != np.uint16:
        if raw.min(initial=0) < 0 or raw.max(initial=0) > 65535:
            raise ValueError(f"{path}: values exceed the 16-bit range")
        raw = raw.astype(np.uint16)
    valid = raw > 0
    return DepthMap(raw.astype(np.float64) * scale, valid)


def write_depth_png16(depth: DepthMap, path, scale: float) -> None:
    raw = np.where(depth.valid, np.rint(depth.data / scale), 0)
    if raw.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit range at this scale")
    Image.fromarray(raw.astype(np.uint16)).save(path)


def read_rgb(path) -> RgbImage:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return RgbImage(arr)


def write_rgb(image: RgbImage, path) -> None:
    Image.fromarray(np.rint(image.data * 255).astype(np.uint8)).save(path)


def load_raster(path) -> np.ndarray:
    """Read a float raster from ``.pfm`` or ``.npy`` by extension."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        return np.load(path)
    return read_pfm(path)
