"""Scoring non-experimental sites and emitting transport map artifacts.

A fitted CATE model only accepts site embeddings carrying the exact
pipeline fingerprint it was trained under; anything else raises, because
silently mixing embedding spaces produces plausible-looking nonsense maps.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ._svg import colored_point_map
from .cate import CausalForestModel, RLearnerModel, predict_forest, predict_rlearner
from .data_model import EmbeddingMatrix
from .errors import BoundsError, DomainError, PipelineDriftError, WeightError
from .rate import truth_correlation


@dataclass(frozen=True)
class PopulationWeights:
    """Nonnegative density raster over a bbox (lon_min, lat_min, lon_max, lat_max)."""

    density: np.ndarray  # (rows, cols)
    bbox: tuple

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        if d.ndim != 2:
            raise DomainError(f"density must be 2-d, got {d.shape}")
        if np.any(d < 0.0) or not np.all(np.isfinite(d)):
            raise DomainError("densities must be finite and nonnegative")
        object.__setattr__(self, "density", d)


def _check_bbox(bbox):
    lon_min, lat_min, lon_max, lat_max = bbox
    if not (lon_min < lon_max and lat_min < lat_max):
        raise BoundsError(f"invalid bbox {bbox}")
    return lon_min, lat_min, lon_max, lat_max


def sample_sites(region_bbox, n, weights: PopulationWeights | None = None, seed=0):
    """n lon/lat points: uniform over the bbox, or density-weighted by cell
    then uniform within the chosen cell. Deterministic in seed."""
    if n < 1:
        raise DomainError("n must be >= 1")
    lon_min, lat_min, lon_max, lat_max = _check_bbox(region_bbox)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    if weights is None:
        lon = rng.uniform(lon_min, lon_max, size=n)
        lat = rng.uniform(lat_min, lat_max, size=n)
        return np.column_stack([lon, lat])
    dens = weights.density
    total = dens.sum()
    if total <= 0.0:
        raise WeightError("population raster has zero total mass")
    rows, cols = dens.shape
    probs = (dens / total).ravel()
    cells = rng.choice(rows * cols, size=n, p=probs)
    r = cells // cols
    c = cells % cols
    cell_w = (lon_max - lon_min) / cols
    cell_h = (lat_max - lat_min) / rows
    lon = lon_min + (c + rng.random(n)) * cell_w
    lat = lat_max - (r + rng.random(n)) * cell_h  # row 0 at the top
    return np.column_stack([lon, lat])


def transport_cate(model, site_embeddings: EmbeddingMatrix):
    """Predict site effects with the full model (no OOB restriction).

    Refuses embeddings whose pipeline fingerprint differs from the one the
    model was fitted under.
    """
    if not isinstance(site_embeddings, EmbeddingMatrix):
        raise DomainError("transport scoring requires an EmbeddingMatrix")
    model_fp = getattr(model, "fingerprint", "")
    if not model_fp or not site_embeddings.fingerprint:
        raise PipelineDriftError(
            "both the model and the site embeddings must carry a pipeline fingerprint"
        )
    if model_fp != site_embeddings.fingerprint:
        raise PipelineDriftError(
            "site embeddings were produced under a different pipeline state "
            f"({site_embeddings.fingerprint[:12]}... vs model {model_fp[:12]}...)"
        )
    if isinstance(model, CausalForestModel):
        tau = predict_forest(model, site_embeddings.values, oob=False)
    elif isinstance(model, RLearnerModel):
        tau = predict_rlearner(model, site_embeddings.values)
    else:
        raise DomainError(f"unsupported model type {type(model).__name__}")
    if not np.all(np.isfinite(tau)):
        raise DomainError("transport predictions are not finite")
    return tau


def emit_map(sites, tau_hat, out_prefix):
    """Write CSV, GeoJSON point collection, and an SVG map for the sites.

    CSV and GeoJSON carry identical coordinate strings (repr round-trip).
    Returns the three paths.
    """
    sites = np.asarray(sites, dtype=float)
    tau_hat = np.asarray(tau_hat, dtype=float)
    if sites.shape[0] != tau_hat.shape[0]:
        raise DomainError("sites and tau_hat must have equal length")
    out_dir = os.path.dirname(out_prefix)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    csv_path = out_prefix + ".csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("lon,lat,tau_hat\n")
        for (lon, lat), tau in zip(sites.tolist(), tau_hat.tolist()):
            fh.write(f"{lon!r},{lat!r},{tau!r}\n")

    geojson_path = out_prefix + ".geojson"
    features = [
        {
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [lon, lat]},
            "properties": {"tau_hat": tau},
        }
        for (lon, lat), tau in zip(sites.tolist(), tau_hat.tolist())
    ]
    with open(geojson_path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh)
        fh.write("\n")

    svg_path = out_prefix + ".svg"
    svg = colored_point_map(sites[:, 0].tolist(), sites[:, 1].tolist(),
                            tau_hat.tolist(), title="transported effects")
    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    return {"csv": csv_path, "geojson": geojson_path, "svg": svg_path}


def representation_agreement(tau_image, tau_video, split):
    """Image-vs-sequence CATE correlations for one split.

    tau_image / tau_video are {"raw": vector, "pc": vector} mappings; split
    is "experimental" or "transport". Returns {(space, split): result}.
    """
    if split not in ("experimental", "transport"):
        raise DomainError(f"split must be experimental|transport, got {split!r}")
    cells = {}
    for space in ("raw", "pc"):
        if space in tau_image and space in tau_video:
            cells[(space, split)] = truth_correlation(tau_image[space], tau_video[space])
    return cells


def agreement_table(cells):
    """Render the (raw/pc) x (experimental/transport) correlation grid."""
    lines = [f"{'':14s} {'experimental':>14s} {'transport':>14s}"]
    for space in ("raw", "pc"):
        row = [f"{space:14s}"]
        for split in ("experimental", "transport"):
            result = cells.get((space, split))
            if result is None:
                row.append(f"{'-':>14s}")
            elif result.degenerate:
                row.append(f"{'degenerate':>14s}")
            else:
                row.append(f"{result.value:14.4f}")
        lines.append(" ".join(row))
    return "\n".join(lines)
