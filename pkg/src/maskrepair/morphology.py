"""Binary morphology, connected components, and distance transforms.

All operations use 6-connectivity: the radius-1 structuring element is a
voxel plus its 6 face neighbors, and the radius-r element is the discrete
L1 ball obtained by iterating it r times.  Everything outside the grid
counts as background.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import NoForegroundError
from .volume import GridKind, VolumeGrid

STRUCT6 = ndimage.generate_binary_structure(3, 1)


def _as_bool(mask):
    if isinstance(mask, VolumeGrid):
        return mask.data.astype(bool), mask
    return np.asarray(mask).astype(bool), None


def _wrap_like(out, template):
    if template is None:
        return out.astype(np.uint8)
    return VolumeGrid(out.astype(np.uint8), template.spacing_mm, GridKind.MASK)


def dilate(mask, radius: int = 1):
    """Minkowski sum with the 6-connected ball of ``radius``."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    arr, template = _as_bool(mask)
    out = ndimage.binary_dilation(arr, STRUCT6, iterations=radius)
    return _wrap_like(out, template)


def erode(mask, radius: int = 1):
    """Minkowski difference with the 6-connected ball of ``radius``."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    arr, template = _as_bool(mask)
    out = ndimage.binary_erosion(arr, STRUCT6, iterations=radius, border_value=0)
    return _wrap_like(out, template)


def morphological_close(mask, radius: int = 1):
    """Dilate then erode with the same radius; the result contains the input."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    arr, template = _as_bool(mask)
    # Pad so the intermediate dilation is not clipped by the grid border,
    # which would break extensivity for foreground near the edge.
    padded = np.pad(arr, radius)
    closed = ndimage.binary_erosion(
        ndimage.binary_dilation(padded, STRUCT6, iterations=radius),
        STRUCT6, iterations=radius, border_value=0)
    out = closed[radius:-radius, radius:-radius, radius:-radius]
    return _wrap_like(out, template)


def connected_components(mask, keep="largest"):
    """Restrict foreground to selected 6-connected components.

    ``keep="largest"`` keeps the single largest component (size ties go to
    the component containing the lexicographically smallest voxel index);
    ``keep=k`` (an int) keeps every component with at least k voxels.
    """
    arr, template = _as_bool(mask)
    labels, n = ndimage.label(arr, structure=STRUCT6)
    if n == 0:
        return _wrap_like(np.zeros_like(arr), template)
    sizes = np.bincount(labels.ravel())[1:]
    if keep == "largest":
        # scipy labels components in C-scan order, so among equal-sized
        # components argmax picks the one whose first voxel is smallest.
        target = int(np.argmax(sizes)) + 1
        out = labels == target
    elif isinstance(keep, (int, np.integer)) and not isinstance(keep, bool):
        wanted = np.flatnonzero(sizes >= int(keep)) + 1
        out = np.isin(labels, wanted)
    else:
        raise ValueError(f"keep must be 'largest' or an int, got {keep!r}")
    return _wrap_like(out, template)


def count_components(mask) -> int:
    arr, _ = _as_bool(mask)
    return int(ndimage.label(arr, structure=STRUCT6)[1])


def edt(mask) -> VolumeGrid:
    """Exact Euclidean distance (mm) to the nearest foreground voxel center.

    Anisotropic spacing is honored.  Foreground voxels map to 0.
    """
    arr, template = _as_bool(mask)
    if not arr.any():
        raise NoForegroundError("distance transform of an empty mask")
    spacing = template.spacing_mm if template is not None else (1.0, 1.0, 1.0)
    dist = ndimage.distance_transform_edt(~arr, sampling=spacing)
    return VolumeGrid(dist, spacing, GridKind.DISTANCE)


def boundary_mask(mask):
    """Foreground voxels with a 6-connected background neighbor.

    The volume border counts as background, so foreground touching the edge
    of the grid is part of the boundary.
    """
    arr, template = _as_bool(mask)
    interior = ndimage.binary_erosion(arr, STRUCT6, border_value=0)
    return _wrap_like(arr & ~interior, template)
