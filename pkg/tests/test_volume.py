import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskrepair.errors import FormatError, InvalidResolutionError, InvalidWindowError
from maskrepair.volume import (
    GridKind,
    VolumeGrid,
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


class TestVolumeGrid:
    def test_mask_values_validated(self):
        with pytest.raises(ValueError):
            VolumeGrid(np.full((2, 2, 2), 2), kind=GridKind.MASK)

    def test_appearance_range_validated(self):
        with pytest.raises(ValueError):
            VolumeGrid(np.full((2, 2, 2), 1.5), kind=GridKind.APPEARANCE)

    def test_spacing_positive(self):
        with pytest.raises(ValueError):
            VolumeGrid(np.zeros((2, 2, 2)), spacing_mm=(1, 0, 1))

    def test_shape_matches_data(self):
        g = VolumeGrid(np.zeros((3, 4, 5)))
        assert g.shape == (3, 4, 5)


class TestWindowNormalize:
    def test_window_endpoints(self):
        hu = np.array([[[-60.0, 140.0]]])
        out = window_normalize(hu, -60.0, 140.0)
        assert out.data[0, 0, 0] == 0.0
        assert out.data[0, 0, 1] == 1.0

    def test_linear_midpoint(self):
        out = window_normalize(np.full((1, 1, 1), 40.0), -60.0, 140.0)
        assert out.data[0, 0, 0] == pytest.approx(0.5)

    def test_clipping_outside_window(self):
        out = window_normalize(np.array([[[-500.0, 900.0]]]), -60.0, 140.0)
        assert out.data[0, 0, 0] == 0.0
        assert out.data[0, 0, 1] == 1.0

    def test_bad_window_rejected(self):
        with pytest.raises(InvalidWindowError):
            window_normalize(np.zeros((1, 1, 1)), 10.0, 10.0)


class TestCenterCrop:
    def test_central_block(self):
        rng = np.random.default_rng(0)
        vol = VolumeGrid(rng.random((8, 8, 8)))
        out = center_crop(vol, (4, 4, 4), 4)
        np.testing.assert_array_equal(out.data, vol.data[2:6, 2:6, 2:6])

    def test_corner_crop_zero_pads(self):
        rng = np.random.default_rng(1)
        vol = VolumeGrid(rng.random((8, 8, 8)))
        out = center_crop(vol, (0, 0, 0), 4)
        # oracle: direct index arithmetic over the output block
        expected = np.zeros((4, 4, 4))
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    si, sj, sk = i - 2, j - 2, k - 2
                    if min(si, sj, sk) >= 0:
                        expected[i, j, k] = vol.data[si, sj, sk]
        np.testing.assert_array_equal(out.data, expected)

    def test_full_size_crop_is_copy(self):
        rng = np.random.default_rng(2)
        vol = VolumeGrid(rng.random((8, 8, 8)))
        out = center_crop(vol, (4, 4, 4), 8)
        np.testing.assert_array_equal(out.data, vol.data)


class TestMeshgrid:
    def test_resolution_two_gives_corners(self):
        pts = meshgrid(2)
        expected = {(-1.0, -1.0, -1.0), (-1.0, -1.0, 1.0), (-1.0, 1.0, -1.0),
                    (-1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (1.0, -1.0, 1.0),
                    (1.0, 1.0, -1.0), (1.0, 1.0, 1.0)}
        assert {tuple(p) for p in pts} == expected

    def test_resolution_three_contains_origin(self):
        pts = meshgrid(3)
        assert len(pts) == 27
        assert any((p == 0).all() for p in pts)

    def test_spacing_closed_form(self):
        pts = meshgrid(64)
        assert len(pts) == 64 ** 3
        # C order: the last axis varies fastest
        np.testing.assert_allclose(pts[1] - pts[0], [0, 0, 2 / 63], atol=1e-15)
        assert pts[0].tolist() == [-1, -1, -1]
        assert pts[-1].tolist() == [1, 1, 1]

    def test_too_small_rejected(self):
        with pytest.raises(InvalidResolutionError):
            meshgrid(1)


class TestJitter:
    def test_sigma_zero_identity(self):
        pts = meshgrid(3)
        out = jitter(pts, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, pts)

    def test_deterministic_under_seed(self):
        pts = meshgrid(4)
        a = jitter(pts, 0.01, np.random.default_rng(7))
        b = jitter(pts, 0.01, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_empirical_std(self):
        pts = np.zeros((100_000, 3))
        out = jitter(pts, 0.01, np.random.default_rng(3))
        assert abs(out.std() - 0.01) < 0.0005


class TestTrilinearSample:
    def test_exact_at_voxel_centers(self):
        rng = np.random.default_rng(4)
        grid = rng.random((5, 6, 7))
        pts = meshgrid(5)  # centers only along the first axis; build exact centers
        for _ in range(50):
            ijk = [rng.integers(0, n) for n in grid.shape]
            p = [2 * ijk[a] / (grid.shape[a] - 1) - 1 for a in range(3)]
            assert trilinear_sample(grid, np.array(p)) == pytest.approx(grid[tuple(ijk)], abs=1e-12)

    def test_cell_center_averages_corners(self):
        grid = np.arange(8, dtype=float).reshape(2, 2, 2)
        assert trilinear_sample(grid, np.zeros(3)) == pytest.approx(3.5)

    def test_constant_region_returns_constant(self):
        grid = np.full((4, 4, 4), 0.37)
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1, 1, (100, 3))
        np.testing.assert_allclose(trilinear_sample(grid, pts), 0.37, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_bounded_by_corner_extremes(self, seed):
        rng = np.random.default_rng(seed)
        grid = rng.random((4, 5, 3))
        pts = rng.uniform(-1.2, 1.2, (20, 3))
        vals = trilinear_sample(grid, pts)
        assert (vals >= grid.min() - 1e-12).all()
        assert (vals <= grid.max() + 1e-12).all()

    def test_out_of_range_clamps(self):
        grid = np.arange(27, dtype=float).reshape(3, 3, 3)
        assert trilinear_sample(grid, np.array([-5.0, -5.0, -5.0])) == grid[0, 0, 0]
        assert trilinear_sample(grid, np.array([5.0, 5.0, 5.0])) == grid[2, 2, 2]


class TestNearestLabel:
    def test_voxel_center_hits(self):
        mask = np.zeros((3, 3, 3), dtype=np.uint8)
        mask[1, 1, 1] = 1
        assert nearest_label(mask, np.zeros(3)) == 1

    def test_small_jitter_rounds_back(self):
        mask = np.zeros((5, 5, 5), dtype=np.uint8)
        mask[2, 2, 2] = 1
        # less than half a voxel (= 0.25 in normalized units for n=5)
        assert nearest_label(mask, np.array([0.2, -0.2, 0.1])) == 1
        assert nearest_label(mask, np.array([0.3, 0.0, 0.0])) == 0

    def test_outside_range_uses_clamped_voxel(self):
        rng = np.random.default_rng(6)
        mask = (rng.random((4, 4, 4)) < 0.5).astype(np.uint8)
        pts = rng.uniform(-1.8, 1.8, (200, 3))
        got = nearest_label(mask, pts)
        # oracle: explicit clamp then round per axis
        f = (np.clip(pts, -1, 1) + 1) / 2 * 3
        idx = np.rint(f).astype(int)
        expected = mask[idx[:, 0], idx[:, 1], idx[:, 2]]
        np.testing.assert_array_equal(got, expected)

    def test_meshgrid_identity_reproduces_mask(self):
        rng = np.random.default_rng(7)
        mask = (rng.random((6, 6, 6)) < 0.4).astype(np.uint8)
        pts = meshgrid(6)
        np.testing.assert_array_equal(nearest_label(mask, pts).reshape(6, 6, 6), mask)


class TestNvolFormat:
    def test_round_trip_mask(self, tmp_path):
        rng = np.random.default_rng(8)
        grid = mask_grid(rng.random((5, 6, 7)) < 0.5, spacing_mm=(1.0, 1.5, 2.0))
        path = save_nvol(grid, tmp_path / "m.json")
        loaded = load_nvol(path)
        np.testing.assert_array_equal(loaded.data, grid.data)
        assert loaded.spacing_mm == grid.spacing_mm
        assert loaded.kind is GridKind.MASK

    def test_round_trip_bytes_identical(self, tmp_path):
        rng = np.random.default_rng(9)
        grid = VolumeGrid(rng.random((4, 4, 4)).astype(np.float32))
        p1 = save_nvol(grid, tmp_path / "a.json")
        blob1 = (p1.read_bytes(), (tmp_path / "a.bin").read_bytes())
        loaded = load_nvol(p1)
        p2 = save_nvol(loaded, tmp_path / "b.json")
        blob2 = (p2.read_bytes().replace(b"b.bin", b"a.bin"),
                 (tmp_path / "b.bin").read_bytes())
        assert blob1 == blob2

    def test_header_fields(self, tmp_path):
        grid = mask_grid(np.ones((2, 3, 4)))
        path = save_nvol(grid, tmp_path / "m.json")
        header = json.loads(path.read_text())
        assert header["dtype"] == "u8"
        assert header["shape"] == [2, 3, 4]
        assert header["kind"] == "mask"
        assert (tmp_path / header["data"]).exists()

    def test_truncated_blob_rejected(self, tmp_path):
        grid = mask_grid(np.ones((4, 4, 4)))
        path = save_nvol(grid, tmp_path / "m.json")
        (tmp_path / "m.bin").write_bytes(b"\x01" * 10)
        with pytest.raises(FormatError):
            load_nvol(path)

    def test_missing_key_rejected(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"dtype": "u8"}))
        with pytest.raises(FormatError):
            load_nvol(tmp_path / "bad.json")
