"""Volume containers, intensity windowing, and normalized-coordinate sampling.

Walks through the substrate the rest of the toolkit builds on: wrapping raw
scalar grids, windowing CT-style intensities to [0, 1], cropping, and the
two samplers (trilinear for appearance, nearest for labels) that drive both
training and inference.
"""

import numpy as np

from maskrepair import (
    center_crop,
    jitter,
    load_nvol,
    mask_grid,
    meshgrid,
    nearest_label,
    save_nvol,
    trilinear_sample,
    window_normalize,
)

rng = np.random.default_rng(0)

# A fake CT-like volume in Hounsfield units: soft tissue around -20..60
hu = rng.normal(20.0, 40.0, size=(48, 48, 48))
appearance = window_normalize(hu, lo=-60.0, hi=140.0)
print(f"windowed volume: range [{appearance.data.min():.3f}, {appearance.data.max():.3f}]")

# Center-crop a 32^3 block around a structure of interest; out-of-bounds
# regions would be zero-padded, so border crops are safe.
crop = center_crop(appearance, center=(24, 24, 24), size=32)
print(f"crop shape: {crop.shape}, spacing {crop.spacing_mm}")

# Normalized coordinates: [-1, 1] spans first to last voxel center.
pts = meshgrid(4)
print(f"meshgrid(4): {len(pts)} points, first {pts[0]}, last {pts[-1]}")

# Trilinear interpolation at jittered points, the way training samples
# appearance values.
noisy_pts = jitter(pts, sigma=0.01, rng=rng)
vals = trilinear_sample(crop, noisy_pts)
print(f"sampled appearance: mean {vals.mean():.3f}")

# Labels always come from the nearest full-resolution voxel.
mask = mask_grid(rng.random((48, 48, 48)) < 0.2)
labels = nearest_label(mask, noisy_pts)
print(f"labels at jittered points: {labels.sum()} foreground of {len(labels)}")

# Round-trip through the nvol container format.
path = save_nvol(crop, "/tmp/demo_crop.json")
again = load_nvol(path)
assert np.array_equal(again.data, crop.data)
print(f"nvol round trip OK -> {path}")
