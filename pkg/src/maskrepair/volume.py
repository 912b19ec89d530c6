"""Dense 3D grids, normalized coordinates, sampling, and the nvol file format.

Conventions used throughout the toolkit:

* Grid arrays are indexed ``(d, h, w)`` = axes 0, 1, 2, stored C-contiguous.
* ``spacing_mm[i]`` is millimeters per voxel along array axis ``i``.
* Normalized query coordinates live in ``[-1, 1]`` per axis, aligned so that
  -1 and +1 hit the centers of the first and last voxel along that axis
  (point column ``i`` maps to array axis ``i``).  Coordinates outside the
  range are clamped before any lookup.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InvalidResolutionError,
    InvalidWindowError,
    ShapeMismatchError,
)


class GridKind(str, Enum):
    APPEARANCE = "appearance"
    MASK = "mask"
    DISTANCE = "distance"


@dataclass
class VolumeGrid:
    """A dense scalar grid with physical spacing.

    ``kind`` constrains the values: appearance grids hold floats in [0, 1],
    mask grids hold {0, 1} (stored uint8), distance grids hold non-negative
    floats (inf marks "no foreground anywhere").
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: GridKind = GridKind.APPEARANCE

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"expected a 3D array, got ndim={self.data.ndim}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing must be 3 positive floats, got {self.spacing_mm}")
        self.kind = GridKind(self.kind)
        self._validate_values()

    def _validate_values(self):
        if self.kind is GridKind.MASK:
            if not np.isin(self.data, (0, 1)).all():
                raise ValueError("mask grid must contain only 0 and 1")
            self.data = self.data.astype(np.uint8, copy=False)
        elif self.kind is GridKind.APPEARANCE:
            if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
                raise ValueError("appearance grid must lie in [0, 1]")
        else:  # distance
            if self.data.size and not (self.data[np.isfinite(self.data)] >= 0.0).all():
                raise ValueError("distance grid must be non-negative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "VolumeGrid":
        return VolumeGrid(self.data.copy(), self.spacing_mm, self.kind)


def mask_grid(data, spacing_mm=(1.0, 1.0, 1.0)) -> VolumeGrid:
    """Wrap a boolean/binary array as a mask grid."""
    return VolumeGrid(np.asarray(data).astype(np.uint8), spacing_mm, GridKind.MASK)


def window_normalize(hu: np.ndarray, lo: float, hi: float,
                     spacing_mm=(1.0, 1.0, 1.0)) -> VolumeGrid:
    """Clip a raw intensity volume to the window [lo, hi] and rescale to [0, 1]."""
    if lo >= hi:
        raise InvalidWindowError(f"window lower bound {lo} must be < upper bound {hi}")
    hu = np.asarray(hu, dtype=np.float32)
    out = np.clip((hu - lo) / (hi - lo), 0.0, 1.0)
    return VolumeGrid(out, spacing_mm, GridKind.APPEARANCE)


def center_crop(vol: VolumeGrid, center, size: int) -> VolumeGrid:
    """Crop a size^3 block whose low corner sits at ``center - size // 2``.

    Regions falling outside the source volume are zero-padded, so crops near
    the border are lossless with respect to the in-bounds voxels.
    """
    if size <= 0:
        raise ValueError(f"crop size must be positive, got {size}")
    center = tuple(int(c) for c in center)
    out = np.zeros((size, size, size), dtype=vol.data.dtype)
    src_lo = [c - size // 2 for c in center]
    slices_src, slices_dst = [], []
    for axis in range(3):
        lo = src_lo[axis]
        hi = lo + size
        src_a, src_b = max(lo, 0), min(hi, vol.shape[axis])
        if src_a >= src_b:
            return VolumeGrid(out, vol.spacing_mm, vol.kind)
        slices_src.append(slice(src_a, src_b))
        slices_dst.append(slice(src_a - lo, src_b - lo))
    out[tuple(slices_dst)] = vol.data[tuple(slices_src)]
    return VolumeGrid(out, vol.spacing_mm, vol.kind)


# ---------------------------------------------------------------------------
# Normalized coordinates
# ---------------------------------------------------------------------------

def grid_points(shape) -> np.ndarray:
    """Normalized coordinates of every voxel center of ``shape``, C order."""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def meshgrid(resolution: int) -> np.ndarray:
    """Uniform resolution^3 points spanning [-1, 1]^3, endpoints included."""
    if resolution < 2:
        raise InvalidResolutionError(f"resolution must be >= 2, got {resolution}")
    return grid_points((resolution,) * 3)


def jitter(points: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb each coordinate with independent N(0, sigma^2) noise."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    points = np.asarray(points, dtype=np.float64)
    return points + rng.normal(0.0, sigma, size=points.shape)


def _index_coords(points: np.ndarray, shape) -> np.ndarray:
    """Clamp normalized points and map them to fractional voxel indices."""
    pts = np.clip(np.asarray(points, dtype=np.float64), -1.0, 1.0)
    scale = np.array([(n - 1) / 2.0 for n in shape])
    return (pts + 1.0) * scale


def trilinear_weights(shape, points):
    """Corner gather indices and blend weights for trilinear interpolation.

    Returns ``(idx, w)`` with ``idx`` (N, 8) flat indices into a C-ordered
    array of ``shape`` and ``w`` (N, 8) weights summing to 1 per point.
    Corner order is the C order of the (lo/hi) choices per axis.
    """
    f = _index_coords(np.atleast_2d(points), shape)
    n = np.array(shape)
    lo = np.floor(f).astype(np.int64)
    lo = np.minimum(np.maximum(lo, 0), np.maximum(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    frac = f - lo

    strides = np.array((shape[1] * shape[2], shape[2], 1), dtype=np.int64)
    lo_s, hi_s = lo * strides, hi * strides
    # corner c uses the high neighbor on axis a iff bit (2 - a) of c is set
    bits_d = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    bits_h = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    bits_w = np.array([0, 1, 0, 1, 0, 1, 0, 1])
    corners = (
        np.where(bits_d, hi_s[:, :1], lo_s[:, :1])
        + np.where(bits_h, hi_s[:, 1:2], lo_s[:, 1:2])
        + np.where(bits_w, hi_s[:, 2:3], lo_s[:, 2:3])
    )
    weights = (
        np.where(bits_d, frac[:, :1], 1.0 - frac[:, :1])
        * np.where(bits_h, frac[:, 1:2], 1.0 - frac[:, 1:2])
        * np.where(bits_w, frac[:, 2:3], 1.0 - frac[:, 2:3])
    )
    return corners, weights


def trilinear_sample(grid, points):
    """Trilinearly interpolate ``grid`` at normalized points.

    Accepts a VolumeGrid or a plain 3D array.  A single (3,) point returns a
    scalar; an (N, 3) batch returns an (N,) array.
    """
    data = grid.data if isinstance(grid, VolumeGrid) else np.asarray(grid)
    single = np.asarray(points).ndim == 1
    idx, w = trilinear_weights(data.shape, points)
    vals = (data.ravel()[idx] * w).sum(axis=1)
    return float(vals[0]) if single else vals


def nearest_label(mask, points):
    """Label of the voxel center nearest to each point (clamp, then round).

    Rounding is round-half-to-even per axis, which only matters for points
    exactly halfway between centers.
    """
    data = mask.data if isinstance(mask, VolumeGrid) else np.asarray(mask)
    single = np.asarray(points).ndim == 1
    f = _index_coords(np.atleast_2d(points), data.shape)
    idx = np.rint(f).astype(np.int64)
    vals = data[idx[:, 0], idx[:, 1], idx[:, 2]]
    return int(vals[0]) if single else vals


# ---------------------------------------------------------------------------
# nvol container format: a JSON header plus a raw little-endian blob
# ---------------------------------------------------------------------------

_NVOL_DTYPES = {"u8": np.dtype("u1"), "f32": np.dtype("<f4")}
_KIND_TO_DTYPE = {GridKind.MASK: "u8", GridKind.APPEARANCE: "f32"}


def save_nvol(grid: VolumeGrid, header_path) -> Path:
    """Write ``grid`` as an nvol pair: ``<path>`` (JSON) and ``<path minus .json>.bin``.

    Only appearance and mask grids are persisted; masks go out as u8,
    appearance as little-endian f32, both in C order.
    """
    if grid.kind not in _KIND_TO_DTYPE:
        raise FormatError(f"cannot persist grids of kind {grid.kind.value}")
    header_path = Path(header_path)
    bin_path = header_path.with_suffix(".bin") if header_path.suffix == ".json" \
        else header_path.with_name(header_path.name + ".bin")
    dtype = _KIND_TO_DTYPE[grid.kind]
    header = {
        "dtype": dtype,
        "shape": list(grid.shape),
        "spacing_mm": list(grid.spacing_mm),
        "kind": grid.kind.value,
        "data": bin_path.name,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    blob = np.ascontiguousarray(grid.data.astype(_NVOL_DTYPES[dtype], copy=False))
    bin_path.write_bytes(blob.tobytes())
    return header_path


def load_nvol(header_path) -> VolumeGrid:
    """Read an nvol pair written by :func:`save_nvol`."""
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad nvol header {header_path}: {exc}") from exc
    for key in ("dtype", "shape", "spacing_mm", "kind", "data"):
        if key not in header:
            raise FormatError(f"nvol header {header_path} missing '{key}'")
    if header["dtype"] not in _NVOL_DTYPES:
        raise FormatError(f"unsupported nvol dtype {header['dtype']!r}")
    shape = tuple(int(n) for n in header["shape"])
    dtype = _NVOL_DTYPES[header["dtype"]]
    blob = (header_path.parent / header["data"]).read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"nvol blob for {header_path} has {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype=dtype).reshape(shape)
    return VolumeGrid(data.copy(), tuple(header["spacing_mm"]), GridKind(header["kind"]))
