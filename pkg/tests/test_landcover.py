import math

import numpy as np
import pytest

from heteo.errors import BoundsError, ComparisonError, DomainError
from heteo.landcover import (
    LandCoverRaster,
    eo_vs_landcover,
    cate_correlation,
    landcover_features,
    logit_features,
    read_raster,
    sequence_class_features,
    summarize,
    write_raster,
)
from heteo.rate import RateReport
from heteo.simulation import SimConfig, generate


def small_raster(grid, labels=None, origin=(-84.0, 34.0), cell=30.0):
    grid = np.asarray(grid)
    if labels is None:
        labels = {int(c): f"class{c}" for c in np.unique(grid)}
    return LandCoverRaster(grid=grid, class_labels=labels, cell_size_m=cell,
                           origin=origin)


def report(ratio, weighting="autoc"):
    return RateReport(weighting=weighting, point=ratio, se=1.0, ratio=ratio,
                      folds=5, per_fold=((ratio, 1.0),), significant=ratio > 1.96,
                      degenerate=False)


class TestRaster:
    def test_codes_must_be_labeled(self):
        with pytest.raises(DomainError):
            LandCoverRaster(grid=np.array([[1, 2]]), class_labels={1: "a"},
                            cell_size_m=30.0, origin=(0.0, 0.0))

    def test_cell_indexing_round_trip(self):
        raster = small_raster(np.zeros((10, 10), dtype=int))
        for row, col in ((0, 0), (3, 7), (9, 9)):
            lon, lat = raster.center_of(row, col)
            assert raster.cell_of(lon, lat) == (row, col)

    def test_io_round_trip(self, tmp_path):
        grid = np.random.default_rng(0).integers(0, 4, size=(6, 8))
        raster = small_raster(grid)
        write_raster(raster, tmp_path / "lc.eot", tmp_path / "lc.json")
        back = read_raster(tmp_path / "lc.eot", tmp_path / "lc.json")
        assert np.array_equal(back.grid, grid)
        assert back.class_labels == raster.class_labels
        assert back.cell_size_m == 30.0


class TestSummarize:
    def test_uniform_window_is_one_hot(self):
        raster = small_raster(np.full((9, 9), 2, dtype=int), labels={2: "x", 5: "y"})
        lon, lat = raster.center_of(4, 4)
        props = summarize(raster, (lon, lat), window_cells=1)
        np.testing.assert_array_equal(props, [1.0, 0.0])

    def test_counting_example(self):
        # 3x3 window: 5 cells class 0, 4 cells class 1 -> (5/9, 4/9)
        grid = np.zeros((3, 3), dtype=int)
        grid[0, :2] = 1
        grid[1, :2] = 1
        raster = small_raster(grid)
        lon, lat = raster.center_of(1, 1)
        props = summarize(raster, (lon, lat), window_cells=1)
        np.testing.assert_allclose(props, [5 / 9, 4 / 9])

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            grid = rng.integers(0, 5, size=(12, 14))
            raster = small_raster(grid)
            row, col = int(rng.integers(0, 12)), int(rng.integers(0, 14))
            w = int(rng.integers(1, 4))
            lon, lat = raster.center_of(row, col)
            props = summarize(raster, (lon, lat), window_cells=w)
            counts = {}
            total = 0
            for r in range(max(0, row - w), min(12, row + w + 1)):
                for c in range(max(0, col - w), min(14, col + w + 1)):
                    counts[grid[r, c]] = counts.get(grid[r, c], 0) + 1
                    total += 1
            expect = [counts.get(code, 0) / total for code in raster.codes]
            np.testing.assert_allclose(props, expect)
            assert abs(props.sum() - 1.0) < 1e-12

    def test_point_outside_raster(self):
        raster = small_raster(np.zeros((4, 4), dtype=int))
        with pytest.raises(BoundsError):
            summarize(raster, (raster.origin[0] - 1.0, raster.origin[1]), 1)


class TestLogit:
    def test_half_maps_to_zero(self):
        assert logit_features([0.5])[0] == 0.0

    def test_zero_clamps(self):
        got = logit_features([0.0])[0]
        assert got == pytest.approx(math.log(1e-3 / (1 - 1e-3)), rel=1e-12)
        assert got == pytest.approx(-6.9068, abs=5e-4)

    def test_monotone_on_grid(self):
        grid = np.linspace(0.0, 1.0, 101)
        out = logit_features(grid)
        assert np.all(np.diff(out) >= 0.0)
        assert np.all(np.isfinite(out))

    def test_domain_check(self):
        with pytest.raises(DomainError):
            logit_features([1.2])


class TestFeatures:
    def test_fixed_width_and_class_order(self):
        rng = np.random.default_rng(2)
        grid = rng.integers(0, 6, size=(20, 20))
        raster = small_raster(grid)
        pts = [raster.center_of(int(rng.integers(2, 18)), int(rng.integers(2, 18)))
               for _ in range(7)]
        feats = landcover_features(raster, pts, window_cells=2)
        assert feats.shape == (7, len(raster.codes))
        assert np.all(np.isfinite(feats))

    def test_sequence_features_rotation_blind(self):
        sim = generate(SimConfig(n=40, sigma2=0.01, seed=3))
        feats = sequence_class_features(sim.sequences)
        # rotate every slice of every unit: features must not move
        rotated = np.rot90(sim.sequences, 1, axes=(2, 3))
        feats_rot = sequence_class_features(np.ascontiguousarray(rotated))
        np.testing.assert_array_equal(feats, feats_rot)
        assert feats.shape == (40, 8)


class TestComparison:
    def test_identical_reports_zero_lift(self):
        assert eo_vs_landcover(report(3.0), report(3.0)) == 0.0

    def test_lift_direction(self):
        assert eo_vs_landcover(report(6.0), report(0.5)) == 5.5

    def test_weighting_mismatch(self):
        with pytest.raises(ComparisonError):
            eo_vs_landcover(report(1.0, "autoc"), report(1.0, "qini"))

    def test_cate_correlation_identity(self):
        tau = np.random.default_rng(4).normal(size=50)
        assert cate_correlation(tau, tau).value == pytest.approx(1.0)
