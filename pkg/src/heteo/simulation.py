"""Rotation-coded synthetic RCT and the estimator-by-noise evaluation grid.

Each unit gets a two-slice image sequence drawn from a chip pool; with
probability 0.5 the second slice is the first rotated 90 degrees CCW. The
rotation flag fixes a unit effect of +1 (rotated) or -1 (unrotated):

    Y = (2 * rotated - 1) * W + eps,   eps ~ Normal(0, sigma2)

The grid runner embeds each cell's sequences, fits a CATE model, and
reports the truth correlation plus the cross-fitted ratio.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._backend import thread_count
from ._svg import ScatterPlot
from .cate import CausalForestSpec, RLearnerSpec, fit_causal_forest, predict_forest
from .cate import fit_rlearner, predict_rlearner
from .embedders import default_specs, embed_sequences
from .errors import DomainError, ShapeError
from .rate import cross_fit_rate, truth_correlation

MODEL_COLORS = {"rand-cnn": "#d95f02", "rand-vit": "#1b9e77", "oracle": "#7570b3"}


def rotate90(image):
    """90-degree counterclockwise rotation: out[h][w] = in[w][H-1-h]."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected (H, W, B), got {image.shape}")
    if image.shape[0] != image.shape[1]:
        raise ShapeError(f"rotation needs a square image, got {image.shape[:2]}")
    return np.ascontiguousarray(np.rot90(image, 1, axes=(0, 1)))


def make_image_pool(pool_size=32, chip_size=16, bands=3, seed=0):
    """Procedural chip pool: smooth random plane-wave fields scaled to [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    h = w = chip_size
    yy, xx = np.mgrid[0:h, 0:w]
    pool = np.empty((pool_size, h, w, bands), dtype=np.float32)
    for p in range(pool_size):
        for b in range(bands):
            field_ = np.zeros((h, w))
            for _ in range(4):
                fy, fx = rng.uniform(0.5, 2.5, size=2)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                amp = rng.uniform(0.3, 1.0)
                field_ += amp * np.sin(2.0 * np.pi * (fy * yy + fx * xx) / chip_size + phase)
            lo, hi = field_.min(), field_.max()
            pool[p, :, :, b] = ((field_ - lo) / (hi - lo)) if hi > lo else 0.5
    return pool


def load_image_pool(arr):
    """Accept a (P, H, W, B) stack; center-crop to square chips."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 4:
        raise ShapeError(f"pool must be (P, H, W, B), got {arr.shape}")
    _, h, w, _ = arr.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return np.ascontiguousarray(arr[:, top:top + side, left:left + side, :])


@dataclass(frozen=True)
class SimConfig:
    n: int = 1000
    sigma2: float = 0.01
    treat_prob: float = 0.5
    rotate_prob: float = 0.5
    seed: int = 0
    image_pool: np.ndarray | None = None  # None -> procedural pool
    pool_size: int = 32
    chip_size: int = 16
    bands: int = 3

    def __post_init__(self):
        if self.sigma2 <= 0.0:
            raise DomainError("sigma2 must be positive")
        for p in (self.treat_prob, self.rotate_prob):
            if not 0.0 < p < 1.0:
                raise DomainError("probabilities must lie strictly inside (0, 1)")
        if self.image_pool is not None and len(self.image_pool) == 0:
            raise DomainError("image pool must be nonempty")


@dataclass(frozen=True)
class SimDataset:
    sequences: np.ndarray  # (n, 2, H, W, B) float32
    rotated: np.ndarray  # bool
    W: np.ndarray  # int 0/1
    Y: np.ndarray
    tau_true: np.ndarray  # +1 rotated, -1 not
    epsilon: np.ndarray
    pool_index: np.ndarray = field(repr=False, default=None)

    @property
    def n(self):
        return self.W.shape[0]


def generate(config: SimConfig) -> SimDataset:
    """Draw the synthetic experiment; bit-reproducible in config.seed."""
    if config.image_pool is not None:
        pool = load_image_pool(config.image_pool)
    else:
        pool = make_image_pool(config.pool_size, config.chip_size, config.bands,
                               seed=config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    n = config.n
    pool_idx = rng.integers(0, pool.shape[0], size=n)
    rotated = rng.random(n) < config.rotate_prob
    W = (rng.random(n) < config.treat_prob).astype(np.int64)
    epsilon = rng.normal(0.0, np.sqrt(config.sigma2), size=n)

    h = pool.shape[1]
    seq = np.empty((n, 2, h, h, pool.shape[3]), dtype=np.float32)
    for i in range(n):
        base = pool[pool_idx[i]]
        seq[i, 0] = base
        seq[i, 1] = rotate90(base) if rotated[i] else base

    tau_true = 2.0 * rotated.astype(np.float64) - 1.0
    Y = tau_true * W + epsilon
    return SimDataset(
        sequences=seq, rotated=rotated, W=W, Y=Y,
        tau_true=tau_true, epsilon=epsilon, pool_index=pool_idx,
    )


# ---------------------------------------------------------------------------
# Evaluation grid


def hash_key(text):
    """Stable small int from a label (for seeding streams by cell key)."""
    acc = 0
    for ch in str(text):
        acc = (acc * 131 + ord(ch)) % (2**31 - 1)
    return acc


def _cell_seed(seed, model, sigma2, tag):
    ss = np.random.SeedSequence(
        [seed, hash_key(model), int(round(sigma2 * 10_000)), hash_key(tag)]
    )
    return int(ss.generate_state(1)[0])


def run_cell(n, sigma2, model_kind, seed, estimator="forest", weighting="autoc",
             n_trees=200, folds=5, bootstrap_reps=200, pool=None,
             chip_size=16, bands=3):
    """One grid cell: simulate, embed, fit, compute both quality measures."""
    cfg = SimConfig(n=n, sigma2=sigma2, seed=_cell_seed(seed, model_kind, sigma2, "sim"),
                    image_pool=pool, chip_size=chip_size, bands=bands)
    sim = generate(cfg)

    if model_kind == "oracle":
        X = sim.tau_true[:, None].copy()
    else:
        spatial, temporal = default_specs(
            model_kind, seed=_cell_seed(seed, model_kind, sigma2, "embed")
        )
        X = embed_sequences(sim.sequences, spatial, temporal).values

    fit_seed = _cell_seed(seed, model_kind, sigma2, "fit")
    if estimator == "forest":
        spec = CausalForestSpec(n_trees=n_trees, seed=fit_seed)
        model = fit_causal_forest(X, sim.W, sim.Y, spec)
        tau_hat = predict_forest(model, X, oob=True)
        rate_estimator = spec
    elif estimator == "rlearner":
        spec = RLearnerSpec(seed=fit_seed)
        model = fit_rlearner(X, sim.W, sim.Y, spec=spec)
        tau_hat = predict_rlearner(model, X)
        rate_estimator = spec
    elif estimator == "oracle":
        tau_hat = X[:, 0]
        rate_estimator = "oracle"
    else:
        raise DomainError(f"unknown estimator {estimator!r}")

    corr = truth_correlation(tau_hat, sim.tau_true)
    report = cross_fit_rate(
        sim.W, sim.Y, cfg.treat_prob, X, rate_estimator, weighting=weighting,
        folds=folds, bootstrap_reps=bootstrap_reps,
        seed=_cell_seed(seed, model_kind, sigma2, "rate"),
    )
    return {
        "model": model_kind,
        "sigma2": sigma2,
        "seed": seed,
        "corr": corr.value,
        "corr_degenerate": corr.degenerate,
        "rate_ratio": report.ratio,
        "rate_degenerate": report.degenerate,
    }


def run_grid(n, sigma2s, models, seeds, estimator="forest", weighting="autoc",
             n_trees=200, folds=5, bootstrap_reps=200, pool=None,
             chip_size=16, bands=3):
    """All cells of sigma2 x model x seed, rows sorted by cell key."""
    cells = sorted(
        (model, float(s2), int(sd)) for model in models for s2 in sigma2s for sd in seeds
    )
    rows = [None] * len(cells)

    def fill(i):
        model, s2, sd = cells[i]
        rows[i] = run_cell(n, s2, model, sd, estimator=estimator, weighting=weighting,
                           n_trees=n_trees, folds=folds, bootstrap_reps=bootstrap_reps,
                           pool=pool, chip_size=chip_size, bands=bands)

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as tp:
            list(tp.map(fill, range(len(cells))))
    else:
        for i in range(len(cells)):
            fill(i)
    return rows


def write_grid_csv(rows, path):
    fields = ["model", "sigma2", "seed", "corr", "rate_ratio"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([row[f] for f in fields])


def plot_grid(rows, out_dir):
    """Two panels: truth correlation and rate ratio against the noise level."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for metric, fname, ylabel in (
        ("corr", "sim_correlation.svg", "corr(tau_hat, tau)"),
        ("rate_ratio", "sim_rate_ratio.svg", "rate ratio"),
    ):
        plot = ScatterPlot(title=f"{ylabel} by noise level", xlabel="log10 sigma2",
                           ylabel=ylabel)
        models = sorted({row["model"] for row in rows})
        for model in models:
            xs = [np.log10(row["sigma2"]) for row in rows if row["model"] == model]
            ys = [row[metric] for row in rows if row["model"] == model]
            plot.add(xs, ys, MODEL_COLORS.get(model, "#666666"), label=model)
        path = os.path.join(out_dir, fname)
        plot.save(path)
        paths.append(path)
    return paths
