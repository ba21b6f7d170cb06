"""Per-unit land-cover proportion features and the EO-vs-land-cover comparison.

Rasters are integer class grids with a lon/lat origin at the top-left
corner and a cell size in meters (indexed through a fixed flat-earth
meters-per-degree conversion; no real reprojection happens here). Features
are logit-transformed class proportions over a clipped square window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data_model import read_tensor, write_tensor
from .errors import BoundsError, ComparisonError, DomainError, ShapeError
from .rate import RateReport, TruthCorrelation, truth_correlation

METERS_PER_DEGREE = 111_320.0
LOGIT_EPS = 1e-3


@dataclass(frozen=True)
class LandCoverRaster:
    grid: np.ndarray  # (H, W) integer class codes
    class_labels: dict  # code -> name
    cell_size_m: float
    origin: tuple  # (lon, lat) of the top-left corner

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2:
            raise ShapeError(f"raster grid must be 2-d, got {grid.shape}")
        if not np.issubdtype(grid.dtype, np.integer):
            grid = grid.astype(np.int64)
        codes = set(np.unique(grid).tolist())
        missing = codes - set(int(c) for c in self.class_labels)
        if missing:
            raise DomainError(f"grid codes {sorted(missing)} missing from class_labels")
        g = np.ascontiguousarray(grid)
        g.flags.writeable = False
        object.__setattr__(self, "grid", g)

    @property
    def codes(self):
        return tuple(sorted(int(c) for c in self.class_labels))

    def _cell_deg(self):
        lat0 = self.origin[1]
        deg_lat = self.cell_size_m / METERS_PER_DEGREE
        deg_lon = self.cell_size_m / (METERS_PER_DEGREE * np.cos(np.radians(lat0)))
        return deg_lon, deg_lat

    def cell_of(self, lon, lat):
        deg_lon, deg_lat = self._cell_deg()
        col = int(np.floor((lon - self.origin[0]) / deg_lon))
        row = int(np.floor((self.origin[1] - lat) / deg_lat))
        return row, col

    def center_of(self, row, col):
        deg_lon, deg_lat = self._cell_deg()
        return (
            float(self.origin[0] + (col + 0.5) * deg_lon),
            float(self.origin[1] - (row + 0.5) * deg_lat),
        )


def write_raster(raster: LandCoverRaster, grid_path, legend_path):
    write_tensor(raster.grid.astype(np.float32), grid_path)
    legend = {
        "cell_size_m": raster.cell_size_m,
        "origin": [raster.origin[0], raster.origin[1]],
        "classes": {str(c): raster.class_labels[c] for c in raster.class_labels},
    }
    with open(legend_path, "w", encoding="utf-8") as fh:
        json.dump(legend, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_raster(grid_path, legend_path) -> LandCoverRaster:
    grid = np.rint(read_tensor(grid_path)).astype(np.int64)
    with open(legend_path, encoding="utf-8") as fh:
        legend = json.load(fh)
    return LandCoverRaster(
        grid=grid,
        class_labels={int(k): v for k, v in legend["classes"].items()},
        cell_size_m=float(legend["cell_size_m"]),
        origin=(float(legend["origin"][0]), float(legend["origin"][1])),
    )


def summarize(raster: LandCoverRaster, point, window_cells):
    """Class proportions over the (2w+1)^2 window centered at the point's
    cell, clipped at raster edges; proportions sum to 1."""
    lon, lat = point
    row, col = raster.cell_of(lon, lat)
    h, w = raster.grid.shape
    if not (0 <= row < h and 0 <= col < w):
        raise BoundsError(f"point ({lon}, {lat}) falls outside the raster")
    r0 = max(0, row - window_cells)
    r1 = min(h, row + window_cells + 1)
    c0 = max(0, col - window_cells)
    c1 = min(w, col + window_cells + 1)
    window = raster.grid[r0:r1, c0:c1]
    total = window.size
    codes = raster.codes
    props = np.empty(len(codes))
    for k, code in enumerate(codes):
        props[k] = (window == code).sum() / total
    return props


def logit_features(proportions, epsilon=LOGIT_EPS):
    """Clamped logit: log(p' / (1 - p')) with p' = clip(p, eps, 1 - eps)."""
    p = np.asarray(proportions, dtype=float)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise DomainError("proportions must lie in [0, 1]")
    clamped = np.clip(p, epsilon, 1.0 - epsilon)
    return np.log(clamped / (1.0 - clamped))


def landcover_features(raster: LandCoverRaster, lonlats, window_cells=3,
                       epsilon=LOGIT_EPS):
    """Per-unit logit class proportions, fixed class order across units."""
    rows = [logit_features(summarize(raster, (lon, lat), window_cells), epsilon)
            for lon, lat in lonlats]
    return np.vstack(rows)


def sequence_class_features(sequences, n_classes=8, epsilon=LOGIT_EPS):
    """Chip-level stand-in for an external land-cover product: quantize the
    band-mean intensity of every pixel into global quantile classes and take
    per-slice class proportions, averaged over time. Rotations permute the
    pixels of a slice, so these features are rotation-blind by construction.
    """
    seq = np.asarray(sequences, dtype=float)
    if seq.ndim != 5:
        raise ShapeError(f"expected (N, T, H, W, B), got {seq.shape}")
    intensity = seq.mean(axis=-1)  # (N, T, H, W)
    qs = np.quantile(intensity, np.linspace(0.0, 1.0, n_classes + 1)[1:-1])
    classes = np.digitize(intensity, qs)  # 0..n_classes-1
    n, t = classes.shape[:2]
    flat = classes.reshape(n, t, -1)
    props = np.empty((n, n_classes))
    for k in range(n_classes):
        props[:, k] = (flat == k).mean(axis=(1, 2))
    return logit_features(props, epsilon)


def eo_vs_landcover(report_eo: RateReport, report_lc: RateReport) -> float:
    """Ratio lift of raw imagery features over land-cover features."""
    if report_eo.weighting != report_lc.weighting:
        raise ComparisonError(
            f"weightings differ: {report_eo.weighting} vs {report_lc.weighting}"
        )
    return report_eo.ratio - report_lc.ratio


def cate_correlation(tau_eo, tau_lc) -> TruthCorrelation:
    """Pearson correlation between the two CATE vectors (flagged if constant)."""
    return truth_correlation(tau_eo, tau_lc)
