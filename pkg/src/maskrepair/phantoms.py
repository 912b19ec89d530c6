"""Synthetic blob phantoms with an appearance channel tied to the shape.

Each phantom is a union of a few overlapping, randomly rotated ellipsoids
voxelized into a cubic grid.  The appearance volume is built from the same
continuous field: a bright interior plateau, a smooth intensity ramp across
the true boundary, and additive texture noise.  The intensity ramp crosses
its midpoint exactly on the mask surface, so the image carries genuine
boundary information that an appearance-conditioned model can exploit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .morphology import count_components
from .volume import GridKind, VolumeGrid, save_nvol

INTERIOR_LEVEL = 0.75
EXTERIOR_LEVEL = 0.25
EDGE_SHARPNESS = 8.0
TEXTURE_SIGMA = 0.04


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _ellipsoid_field(shape, center, semi_axes, rotation):
    """Quadratic form of one ellipsoid: <= 1 inside, growing outside."""
    coords = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape],
                                  indexing="ij"), axis=-1)
    rel = (coords - center) @ rotation.T
    return np.linalg.norm(rel / semi_axes, axis=-1)


def make_phantom(resolution: int, rng: np.random.Generator):
    """One (appearance, mask) pair; the mask is a single 6-connected blob."""
    shape = (resolution,) * 3
    center = np.array(shape, dtype=np.float64) / 2.0
    base_radius = rng.uniform(0.14, 0.20) * resolution

    field = None
    n_lobes = int(rng.integers(2, 5))
    for lobe in range(n_lobes):
        if lobe == 0:
            c = center + rng.uniform(-0.02, 0.02, size=3) * resolution
            radius = base_radius
        else:
            # seed later lobes inside the current blob so the union stays
            # one connected component
            interior = np.argwhere(field <= 0.9)
            c = interior[rng.integers(len(interior))].astype(np.float64)
            c += rng.uniform(-1.0, 1.0, size=3)
            radius = base_radius * rng.uniform(0.5, 0.8)
        semi = radius * rng.uniform(0.7, 1.3, size=3)
        rot = _random_rotation(rng)
        q = _ellipsoid_field(shape, c, semi, rot)
        field = q if field is None else np.minimum(field, q)

    mask = (field <= 1.0).astype(np.uint8)
    # keep a safety margin so the blob never touches the volume border
    border = np.ones(shape, dtype=bool)
    border[3:-3, 3:-3, 3:-3] = False
    mask[border] = 0

    ramp = 1.0 / (1.0 + np.exp(np.clip(EDGE_SHARPNESS * (field - 1.0), -60, 60)))
    texture = rng.normal(0.0, TEXTURE_SIGMA, size=shape)
    texture += 1.5 * ndimage.gaussian_filter(rng.normal(0.0, TEXTURE_SIGMA, size=shape), 3.0)
    appearance = EXTERIOR_LEVEL + (INTERIOR_LEVEL - EXTERIOR_LEVEL) * ramp + texture
    appearance = np.clip(appearance, 0.0, 1.0).astype(np.float32)

    return (VolumeGrid(appearance, (1.0, 1.0, 1.0), GridKind.APPEARANCE),
            VolumeGrid(mask, (1.0, 1.0, 1.0), GridKind.MASK))


def make_phantoms(n: int, resolution: int, seed: int, out_dir) -> Path:
    """Write ``n`` phantom cases as nvol pairs plus a manifest.

    Returns the manifest path.  Each case gets its own rng stream derived
    from (seed, index), so the dataset is reproducible case by case.
    """
    if n < 1:
        raise ValueError("need at least one phantom")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        for attempt in range(20):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), i, attempt]))
            appearance, mask = make_phantom(resolution, rng)
            inside = mask.data.astype(bool)
            contrast = float(appearance.data[inside].mean() - appearance.data[~inside].mean())
            if count_components(mask) == 1 and contrast > 0.2:
                break
        else:
            raise RuntimeError(f"could not generate a valid phantom for index {i}")
        case_id = f"phantom_{i:03d}"
        app_path = save_nvol(appearance, out_dir / f"{case_id}_appearance.json")
        mask_path = save_nvol(mask, out_dir / f"{case_id}_mask.json")
        records.append({
            "case_id": case_id,
            "appearance_path": app_path.name,
            "mask_path": mask_path.name,
        })
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(records, sort_keys=True, indent=2) + "\n")
    return manifest_path
