"""Synthesize imperfect annotations from gold-standard masks.

The corruption pipeline stacks three artefact types on a clean mask: cubes
added to or cut from the boundary, one global dilation or erosion, and
salt-and-pepper voxel flips near the shape.  The whole pipeline is rejection
sampled until the corrupted mask's Dice against the original lands inside a
configured band, so a dataset of distortions has a controlled severity
distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BandUnreachableError, NoForegroundError
from .metrics import dsc
from .morphology import boundary_mask, dilate, erode
from .volume import GridKind, VolumeGrid


@dataclass
class DistortionConfig:
    """Defaults are calibrated on 64^3 blob phantoms so that raw attempts
    straddle the target band with the damage dominated by high-frequency
    boundary artefacts (many small cubes, both added and cut) rather than by
    a global volume bias a smooth shape model could simply reproduce.  The
    wide cube-count range lets rejection sampling match the severity to the
    individual shape's size.  Morphology is off (radius 0) in this profile:
    applied after boundary roughening it erodes/dilates proportionally to
    the inflated surface area and reintroduces exactly that volume bias;
    enable it via ``morph_radius_choices`` when wanted."""

    n_cubes_range: tuple[int, int] = (2, 240)
    cube_side_range: tuple[int, int] = (3, 6)
    p_add: float = 0.5
    morph_radius_choices: tuple[int, ...] = (0,)
    p_dilate: float = 0.5
    salt_pepper_density: float = 0.002
    dice_band: tuple[float, float] = (0.65, 0.75)
    max_attempts: int = 300

    def __post_init__(self):
        if not 0.0 <= self.p_add <= 1.0 or not 0.0 <= self.p_dilate <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.dice_band
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"dice band must satisfy 0 <= lo < hi <= 1, got {self.dice_band}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if not 0.0 <= self.salt_pepper_density <= 1.0:
            raise ValueError("salt_pepper_density must lie in [0, 1]")
        # radius 0 in the choices means "skip the morphology stage"
        if any(r < 0 for r in self.morph_radius_choices) or not self.morph_radius_choices:
            raise ValueError("morph_radius_choices must be non-negative and non-empty")

    def to_dict(self):
        return {
            "n_cubes_range": list(self.n_cubes_range),
            "cube_side_range": list(self.cube_side_range),
            "p_add": self.p_add,
            "morph_radius_choices": list(self.morph_radius_choices),
            "p_dilate": self.p_dilate,
            "salt_pepper_density": self.salt_pepper_density,
            "dice_band": list(self.dice_band),
            "max_attempts": self.max_attempts,
        }

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        for key in cls.__dataclass_fields__:
            if key in d:
                value = d[key]
                kwargs[key] = tuple(value) if isinstance(value, list) else value
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown distortion config keys: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(_read_config_file(path))


def _read_config_file(path):
    """Read a JSON object or a flat ``key = value`` file into a dict."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        if not _:
            raise ValueError(f"bad config line (expected key = value): {line!r}")
        value = value.strip()
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value
    return out


def _as_mask_array(mask):
    if isinstance(mask, VolumeGrid):
        return mask.data.astype(bool), mask.spacing_mm
    return np.asarray(mask).astype(bool), (1.0, 1.0, 1.0)


def add_cut_cubes(mask, cfg: DistortionConfig, rng: np.random.Generator):
    """Add or cut random axis-aligned cubes centered on boundary voxels.

    Cube centers are drawn uniformly from the input mask's boundary; each
    cube is unioned into the mask with probability ``p_add``, otherwise
    subtracted.
    """
    arr, spacing = _as_mask_array(mask)
    if not arr.any():
        raise NoForegroundError("cannot place boundary cubes on an empty mask")
    out = arr.copy()
    lo, hi = cfg.n_cubes_range
    n = int(rng.integers(lo, hi + 1))
    boundary = np.argwhere(boundary_mask(arr).astype(bool))
    for _ in range(n):
        center = boundary[rng.integers(len(boundary))]
        side = int(rng.integers(cfg.cube_side_range[0], cfg.cube_side_range[1] + 1))
        add = rng.random() < cfg.p_add
        sl = tuple(
            slice(max(int(c) - side // 2, 0), min(int(c) - side // 2 + side, dim))
            for c, dim in zip(center, arr.shape)
        )
        out[sl] = add
    return VolumeGrid(out.astype(np.uint8), spacing, GridKind.MASK) \
        if isinstance(mask, VolumeGrid) else out.astype(np.uint8)


def salt_pepper(mask, density: float, rng: np.random.Generator):
    """Flip voxels with probability ``density`` near the foreground.

    Flips are confined to the foreground bounding box padded by 4 voxels;
    an empty mask passes through untouched.
    """
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    arr, spacing = _as_mask_array(mask)
    out = arr.copy()
    coords = np.argwhere(arr)
    if len(coords):
        lo = np.maximum(coords.min(axis=0) - 4, 0)
        hi = np.minimum(coords.max(axis=0) + 5, arr.shape)
        box = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
        flips = rng.random(out[box].shape) < density
        out[box] ^= flips
    return VolumeGrid(out.astype(np.uint8), spacing, GridKind.MASK) \
        if isinstance(mask, VolumeGrid) else out.astype(np.uint8)


def synthesize_distortion(mask, cfg: DistortionConfig = None,
                          rng: np.random.Generator = None):
    """Corrupt ``mask`` until the result's Dice lands in ``cfg.dice_band``.

    Each attempt redraws every random choice (cubes, morphology, noise), so
    accepted samples keep the full mix of artefact types.  Returns
    ``(distorted, dice)``; raises BandUnreachableError (carrying the closest
    attempt) when ``max_attempts`` rejections pile up.
    """
    cfg = cfg or DistortionConfig()
    rng = rng if rng is not None else np.random.default_rng()
    arr, spacing = _as_mask_array(mask)
    if not arr.any():
        raise NoForegroundError("cannot distort an empty mask")
    lo_band, hi_band = cfg.dice_band
    radii = sorted(cfg.morph_radius_choices)
    best, best_dice, best_gap = None, None, np.inf
    for _ in range(cfg.max_attempts):
        working = add_cut_cubes(arr, cfg, rng)
        radius = int(radii[rng.integers(len(radii))])
        if radius > 0:
            grow = rng.random() < cfg.p_dilate
            working = dilate(working, radius) if grow else erode(working, radius)
        working = salt_pepper(working, cfg.salt_pepper_density, rng)
        achieved = dsc(working, arr)
        if lo_band <= achieved <= hi_band:
            if isinstance(mask, VolumeGrid):
                working = VolumeGrid(working, spacing, GridKind.MASK)
            return working, achieved
        gap = max(lo_band - achieved, achieved - hi_band)
        if gap < best_gap:
            best, best_dice, best_gap = working, achieved, gap
    raise BandUnreachableError(
        f"no attempt out of {cfg.max_attempts} reached dice band "
        f"[{lo_band}, {hi_band}]; closest was {best_dice:.4f}",
        best_mask=best, best_dice=best_dice)
