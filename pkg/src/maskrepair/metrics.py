"""Volume- and surface-based similarity between binary masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatchError
from .morphology import boundary_mask
from .volume import VolumeGrid


def _mask_and_spacing(m):
    if isinstance(m, VolumeGrid):
        return m.data.astype(bool), m.spacing_mm
    return np.asarray(m).astype(bool), (1.0, 1.0, 1.0)


def dsc(a, b) -> float:
    """Dice similarity 2|A n B| / (|A| + |B|); two empty masks score 1."""
    arr_a, _ = _mask_and_spacing(a)
    arr_b, _ = _mask_and_spacing(b)
    if arr_a.shape != arr_b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {arr_a.shape} vs {arr_b.shape}")
    total = int(arr_a.sum()) + int(arr_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((arr_a & arr_b).sum()) / total


def nsd(a, b, tau_mm: float = 1.0) -> float:
    """Normalized surface Dice at tolerance ``tau_mm``.

    Boundary voxels are foreground voxels with a 6-connected background
    neighbor (the volume border counts as background).  The score is the
    fraction of boundary voxels of each mask lying within ``tau_mm`` of the
    other mask's boundary, pooled over both directions.  Both masks empty
    scores 1, exactly one empty scores 0.
    """
    if tau_mm < 0:
        raise ValueError(f"tolerance must be >= 0, got {tau_mm}")
    arr_a, sp_a = _mask_and_spacing(a)
    arr_b, sp_b = _mask_and_spacing(b)
    if arr_a.shape != arr_b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {arr_a.shape} vs {arr_b.shape}")
    if sp_a != sp_b:
        raise ShapeMismatchError(f"mask spacings differ: {sp_a} vs {sp_b}")
    empty_a, empty_b = not arr_a.any(), not arr_b.any()
    if empty_a and empty_b:
        return 1.0
    if empty_a or empty_b:
        return 0.0

    surf_a = boundary_mask(arr_a).astype(bool)
    surf_b = boundary_mask(arr_b).astype(bool)
    dist_to_b = ndimage.distance_transform_edt(~surf_b, sampling=sp_a)
    dist_to_a = ndimage.distance_transform_edt(~surf_a, sampling=sp_a)
    hits = int((dist_to_b[surf_a] <= tau_mm).sum()) + int((dist_to_a[surf_b] <= tau_mm).sum())
    return hits / (int(surf_a.sum()) + int(surf_b.sum()))


@dataclass
class MetricReport:
    """Scores for one case."""

    case_id: str
    dsc: float
    nsd: float
    tolerance_mm: float = 1.0


@dataclass
class MetricSummary:
    """Mean and population std over cases, per metric."""

    n_cases: int
    mean_dsc: float
    std_dsc: float
    mean_nsd: float
    std_nsd: float
    tolerance_mm: float

    def as_percent_strings(self):
        """Percentages formatted to two decimals, e.g. '81.07'."""
        return {
            "dsc": f"{self.mean_dsc * 100:.2f}",
            "dsc_std": f"{self.std_dsc * 100:.2f}",
            "nsd": f"{self.mean_nsd * 100:.2f}",
            "nsd_std": f"{self.std_nsd * 100:.2f}",
        }


def aggregate(reports) -> MetricSummary:
    """Arithmetic mean and population std of per-case scores."""
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate needs at least one report")
    d = np.array([r.dsc for r in reports], dtype=np.float64)
    s = np.array([r.nsd for r in reports], dtype=np.float64)
    return MetricSummary(
        n_cases=len(reports),
        mean_dsc=float(d.mean()), std_dsc=float(d.std()),
        mean_nsd=float(s.mean()), std_nsd=float(s.std()),
        tolerance_mm=reports[0].tolerance_mm,
    )
