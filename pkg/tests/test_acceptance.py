"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The simulation grid
(criteria 1-2) fits 30 cells at n=1000 and dominates the runtime; the whole
module targets the default (numba) backend.
"""

import json
import math
import time

import numpy as np
import pytest

from heteo.cate import CausalForestSpec, fit_causal_forest, fit_rlearner, predict_forest
from heteo.cate.rlearner import RLearnerSpec, _solve_lasso, lambda_max_value
from heteo.cli import main as cli_main
from heteo.data_model import read_tensor, write_tensor
from heteo.embedders import apply_pca, default_specs, embed_sequences, fit_pca
from heteo.landcover import sequence_class_features
from heteo.rate import (
    cross_fit_rate,
    rate_point_scores,
    toc_curve,
    rate_point,
    truth_correlation,
)
from heteo.simulation import SimConfig, generate, rotate90, run_grid

GRID_TIME_BUDGET_S = 600.0


def check(criterion, description, condition):
    status = "PASS" if condition else "FAIL"
    print(f"[{status}] criterion {criterion}: {description}")
    assert condition, f"criterion {criterion} failed: {description}"


@pytest.fixture(scope="module")
def grid():
    t0 = time.time()
    rows = run_grid(
        n=1000,
        sigma2s=[0.01, 0.1, 1.0],
        models=["rand-cnn", "rand-vit"],
        seeds=[1, 2, 3, 4, 5],
        estimator="forest",
        weighting="autoc",
        n_trees=200,
        bootstrap_reps=200,
    )
    elapsed = time.time() - t0
    return rows, elapsed


def cell_mean(rows, model, sigma2, field="corr"):
    vals = [r[field] for r in rows if r["model"] == model and r["sigma2"] == sigma2]
    return float(np.mean(vals))


def test_criterion_1_simulation_correlation_floor(grid):
    rows, elapsed = grid
    mins = {}
    for model in ("rand-cnn", "rand-vit"):
        for s2 in (0.01, 0.1, 1.0):
            mins[(model, s2)] = cell_mean(rows, model, s2)
    worst = min(mins.values())
    check(
        1,
        f"mean truth correlation > 0.15 in every cell (worst={worst:.3f}) "
        f"and grid time {elapsed:.0f}s < {GRID_TIME_BUDGET_S:.0f}s",
        worst > 0.15 and elapsed < GRID_TIME_BUDGET_S,
    )


def test_criterion_2_noise_monotonicity(grid):
    rows, _ = grid
    ok = True
    detail = []
    for model in ("rand-cnn", "rand-vit"):
        low = cell_mean(rows, model, 0.01)
        high = cell_mean(rows, model, 1.0)
        detail.append(f"{model}: {low:.3f} > {high:.3f}")
        ok = ok and (low > high)
    check(2, "mean corr falls as noise rises (" + "; ".join(detail) + ")", ok)


def test_criterion_3_oracle_rate_strength():
    sim = generate(SimConfig(n=1000, sigma2=0.01, seed=42))
    report = cross_fit_rate(sim.W, sim.Y, 0.5, sim.tau_true[:, None].copy(),
                            "oracle", weighting="autoc", seed=1)
    check(3, f"oracle-score cross-fit AUTOC ratio {report.ratio:.2f} > 5",
          report.ratio > 5.0)


def test_criterion_4_null_calibration():
    hits = 0
    runs = 50
    for s in range(runs):
        rng = np.random.default_rng(s)
        n = 200
        X = rng.normal(size=(n, 10))
        W = rng.integers(0, 2, size=n)
        Y = rng.normal(size=n)  # tau identically zero
        report = cross_fit_rate(W, Y, 0.5, X, CausalForestSpec(n_trees=50, seed=s),
                                bootstrap_reps=100, seed=s)
        if abs(report.ratio) <= 1.96:
            hits += 1
    check(4, f"|ratio| <= 1.96 in {hits}/{runs} null runs (needs >= 45)",
          hits >= 45)


def brute_force_rate(scores, gamma, weighting):
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    ssum = 0.0
    for i in order:
        ssum += gamma[i]
    overall = ssum / n
    acc = 0.0
    prefix = 0.0
    for k in range(1, n + 1):
        prefix += gamma[order[k - 1]]
        toc = prefix / k - overall
        alpha = 1.0 if weighting == "autoc" else k / n
        acc += alpha * toc / n
    return acc


def test_criterion_5_enumeration_equivalence():
    rng = np.random.default_rng(11)
    exact = 0
    total = 0
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        scores = rng.normal(size=n)
        if rng.random() < 0.25:
            scores = np.round(scores)
        gamma = rng.normal(size=n)
        for weighting in ("autoc", "qini"):
            total += 1
            got = rate_point_scores(scores, gamma, weighting)
            if scores.min() == scores.max():
                expect = 0.0
            else:
                expect = brute_force_rate(scores.tolist(), gamma.tolist(), weighting)
            if got == expect:
                exact += 1
    check(5, f"rate equals the brute-force double sum exactly ({exact}/{total})",
          exact == total)


def test_criterion_6_closed_form_weightings():
    n = 20000
    tau = np.concatenate([np.ones(n // 2), -np.ones(n // 2)])
    tau = tau[np.random.default_rng(6).permutation(n)]
    autoc = rate_point_scores(tau, tau, "autoc")
    qini = rate_point_scores(tau, tau, "qini")
    check(
        6,
        f"AUTOC {autoc:.4f} = ln2 +- 0.02, QINI {qini:.4f} = 0.25 +- 0.01, AUTOC > QINI",
        abs(autoc - math.log(2.0)) < 0.02 and abs(qini - 0.25) < 0.01 and autoc > qini,
    )


def test_criterion_7_rank_invariance():
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(100):
        n = int(rng.integers(5, 50))
        scores = rng.normal(size=n)
        gamma = rng.normal(size=n)
        for weighting in ("autoc", "qini"):
            base = rate_point_scores(scores, gamma, weighting)
            ok = ok and rate_point_scores(np.exp(scores), gamma, weighting) == base
            ok = ok and rate_point_scores(2.5 * scores + 7.0, gamma, weighting) == base
    check(7, "rate invariant bit-exact under exp and positive-affine transforms", ok)


def test_criterion_8_rlearner_optimality():
    rng = np.random.default_rng(8)
    n, d = 300, 8
    X = rng.normal(size=(n, d))
    W = rng.integers(0, 2, size=n)
    beta_true = np.zeros(d)
    beta_true[0] = 1.0
    beta_true[1] = -0.5
    Y = 0.2 * X[:, 2] + (X @ beta_true) * W + 0.1 * rng.normal(size=n)
    model = fit_rlearner(X, W, Y, spec=RLearnerSpec(seed=8))
    cv_ok = all(k < 1e-6 for k in model.diagnostics["cv_kkt"])
    final_ok = model.diagnostics["kkt_residual"] < 1e-6

    # lam >= lam_max: all-zero coefficients, constant scores, degenerate rate
    null_model = fit_rlearner(X, W, Y, lambda_grid=[2.0 * model.lambda_max + 1.0],
                              spec=RLearnerSpec(seed=8))
    zeroed = bool(np.all(null_model.beta == 0.0))
    scores = np.full(n, null_model.intercept)
    gamma = (2.0 * W - 1.0) * Y * 2.0  # IPW at p=0.5
    curve = toc_curve(scores, gamma)
    degenerate_rate = curve.degenerate and rate_point(curve, "autoc") == 0.0
    check(
        8,
        f"KKT residual < 1e-6 on {len(model.diagnostics['cv_kkt'])} CV fits and the "
        f"final fit; lam >= lam_max zeroes coefficients and flags the rate degenerate",
        cv_ok and final_ok and zeroed and degenerate_rate,
    )


def test_criterion_9_forest_sanity():
    rng = np.random.default_rng(9)
    n, d = 2000, 5
    X = rng.normal(size=(n, d))
    W = rng.integers(0, 2, size=n)
    tau = np.sign(X[:, 0])
    Y = tau * W + 0.1 * rng.normal(size=n)
    model = fit_causal_forest(X, W, Y, CausalForestSpec(seed=9))
    oob = predict_forest(model, X, oob=True)
    corr = truth_correlation(oob, tau)
    honest = all(
        np.intersect1d(t.structure_idx, t.estimation_idx).size == 0
        for t in model.trees
    )
    check(9, f"OOB corr {corr.value:.3f} > 0.9 with honesty disjoint on all "
             f"{len(model.trees)} trees", corr.value > 0.9 and honest)


def test_criterion_10_landcover_lift():
    sim = generate(SimConfig(n=1000, sigma2=0.01, seed=7))
    spatial, temporal = default_specs("rand-vit", seed=3)
    eo = embed_sequences(sim.sequences, spatial, temporal).values
    lc = sequence_class_features(sim.sequences)
    spec = CausalForestSpec(n_trees=200, seed=4)
    rep_eo = cross_fit_rate(sim.W, sim.Y, 0.5, eo, spec, seed=5)
    rep_lc = cross_fit_rate(sim.W, sim.Y, 0.5, lc, spec, seed=5)
    lift = rep_eo.ratio - rep_lc.ratio
    check(
        10,
        f"EO ratio {rep_eo.ratio:.2f} > 5, land-cover ratio {rep_lc.ratio:.2f} "
        f"within +-1.96, lift {lift:.2f} > 3",
        rep_eo.ratio > 5.0 and abs(rep_lc.ratio) < 1.96 and lift > 3.0,
    )


def test_criterion_11_numerics(tmp_path):
    rng = np.random.default_rng(11)
    # PCA orthonormality
    x = rng.normal(size=(60, 20))
    model = fit_pca(x, k=8)
    gram_err = float(np.abs(model.components @ model.components.T - np.eye(8)).max())
    # exact-rank reconstruction
    basis = rng.normal(size=(3, 10))
    flat = rng.normal(size=(40, 3)) @ basis + rng.normal(size=10)
    pm = fit_pca(flat, k=3)
    recon = apply_pca(pm, flat) @ pm.components + pm.mean
    recon_err = float(np.abs(recon - flat).max())
    # rotation group property
    img = rng.random((12, 12, 3)).astype(np.float32)
    rot_ok = np.array_equal(rotate90(rotate90(rotate90(rotate90(img)))), img)
    # container round trip
    arr = rng.standard_normal((4, 7, 3)).astype(np.float32)
    path = tmp_path / "t.eot"
    write_tensor(arr, path)
    rt_ok = np.array_equal(read_tensor(path).view(np.uint32), arr.view(np.uint32))
    check(
        11,
        f"PCA orthonormality {gram_err:.1e} < 1e-8, reconstruction {recon_err:.1e} "
        f"< 1e-8, rotate90^4 identity, EOT1 round trip bit-exact",
        gram_err < 1e-8 and recon_err < 1e-8 and rot_ok and rt_ok,
    )


def test_criterion_12_end_to_end_determinism(tmp_path, monkeypatch):
    def config(out_dir):
        return {
            "version": "v1",
            "data": {"simulation": {"n": 120, "sigma2": 0.01, "seed": 3}},
            "embed": {"model": "rand-vit", "seed": 1, "pca": 0, "with_tabular": False},
            "estimator": {"kind": "forest", "params": {"n_trees": 30, "seed": 2}},
            "rate": {"weighting": "autoc", "folds": 5, "bootstrap": 50, "seed": 4},
            "outputs": {"dir": str(out_dir)},
        }

    c1 = tmp_path / "c1.json"
    c2 = tmp_path / "c2.json"
    c1.write_text(json.dumps(config(tmp_path / "o1")))
    c2.write_text(json.dumps(config(tmp_path / "o2")))
    monkeypatch.setenv("HETEO_THREADS", "1")
    rc1 = cli_main(["run", str(c1)])
    monkeypatch.setenv("HETEO_THREADS", "4")
    rc2 = cli_main(["run", str(c2)])
    same_report = ((tmp_path / "o1" / "report.json").read_bytes()
                   == (tmp_path / "o2" / "report.json").read_bytes())
    same_rate = ((tmp_path / "o1" / "rate_report.json").read_bytes()
                 == (tmp_path / "o2" / "rate_report.json").read_bytes())
    check(12, "identical reports byte-for-byte across thread counts",
          rc1 == 0 and rc2 == 0 and same_report and same_rate)
