"""Heterogeneity-signal evaluation: unit-level effect scores, TOC curves,
rank-weighted averages (identity and quantile weighting), bootstrap standard
errors, cross-fitted ratio reports, truth correlation, and the OLS
meta-regression harness.

Summations along the quantile axis are sequential (cumsum), so the values
match a brute-force double-sum evaluation bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .cate import (
    CausalForestSpec,
    RLearnerSpec,
    fit_causal_forest,
    fit_rlearner,
    predict_forest,
    predict_rlearner,
)
from .errors import (
    DegenerateDesignError,
    DomainError,
    FoldError,
    SampleSizeError,
    SingularDesignError,
)

WEIGHTINGS = ("autoc", "qini")
SIGNIFICANCE_CUTOFF = 1.96
SE_FLOOR = 1e-12


def dr_scores(W, Y, propensity, m1=None, m0=None):
    """Unit-level unbiased effect scores.

    Inverse-propensity by default; supplying cross-fitted arm means m1/m0
    switches to the augmented form.
    """
    W = np.asarray(W, dtype=float)
    Y = np.asarray(Y, dtype=float)
    p = np.asarray(propensity, dtype=float)
    if p.ndim == 0:
        p = np.full(W.shape[0], float(p))
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("propensity must lie strictly inside (0, 1)")
    if W.min() == W.max():
        raise DegenerateDesignError("both treatment arms must be present")
    if m1 is None and m0 is None:
        return W * Y / p - (1.0 - W) * Y / (1.0 - p)
    if m1 is None or m0 is None:
        raise DomainError("augmented scores need both m1 and m0")
    m1 = np.asarray(m1, dtype=float)
    m0 = np.asarray(m0, dtype=float)
    return m1 - m0 + W * (Y - m1) / p - (1.0 - W) * (Y - m0) / (1.0 - p)


@dataclass(frozen=True)
class TocCurve:
    q_grid: np.ndarray  # k/n for k = 1..n
    toc: np.ndarray
    degenerate: bool  # all scores equal


def _priority_order(scores):
    # descending by score, ties keep original index order
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def toc_curve(scores, gamma) -> TocCurve:
    """Lift of the top-q group mean over the overall mean, for every q = k/n."""
    scores = np.asarray(scores, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = scores.shape[0]
    if n < 2:
        raise SampleSizeError("TOC needs at least 2 units")
    if gamma.shape[0] != n:
        raise DomainError("scores and gamma must have equal length")
    order = _priority_order(scores)
    sorted_gamma = gamma[order]
    prefix = np.cumsum(sorted_gamma)
    k = np.arange(1, n + 1, dtype=float)
    overall = prefix[-1] / n
    toc = prefix / k - overall
    degenerate = bool(scores.min() == scores.max())
    return TocCurve(q_grid=k / n, toc=toc, degenerate=degenerate)


def rate_point(curve: TocCurve, weighting="autoc") -> float:
    """(1/n) * sum_k alpha(k/n) * TOC(k/n); 0 when all scores were tied."""
    if weighting not in WEIGHTINGS:
        raise DomainError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    if curve.degenerate:
        return 0.0
    n = curve.toc.shape[0]
    alpha = np.ones(n) if weighting == "autoc" else curve.q_grid
    terms = alpha * curve.toc / n
    # sequential accumulation: bit-equal to a running-sum double loop
    return float(np.cumsum(terms)[-1])


def rate_point_scores(scores, gamma, weighting="autoc") -> float:
    return rate_point(toc_curve(scores, gamma), weighting)


def rate_se(scores, gamma, weighting="autoc", B=200, seed=0) -> float:
    """Half-sample bootstrap SE: resample floor(N/2) units without
    replacement B times and inflate the replicate spread by sqrt(2)."""
    scores = np.asarray(scores, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = scores.shape[0]
    if n < 10:
        raise SampleSizeError(f"bootstrap SE needs N >= 10, got {n}")
    half = n // 2
    replicates = np.empty(B)
    for b in range(B):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        idx = rng.permutation(n)[:half]
        replicates[b] = rate_point_scores(scores[idx], gamma[idx], weighting)
    return float(np.sqrt(2.0) * replicates.std(ddof=1))


class TruthCorrelation(NamedTuple):
    value: float
    degenerate: bool


def truth_correlation(tau_hat, tau_true) -> TruthCorrelation:
    """Pearson correlation; flagged 0 when either side has no variance."""
    a = np.asarray(tau_hat, dtype=float)
    b = np.asarray(tau_true, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError("tau vectors must be 1-d and equal length")
    if a.shape[0] < 3:
        raise SampleSizeError("correlation needs at least 3 units")
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va <= 0.0 or vb <= 0.0:
        return TruthCorrelation(0.0, True)
    return TruthCorrelation(float(da @ db) / np.sqrt(va * vb), False)


# ---------------------------------------------------------------------------
# Cross-fitted RATE


@dataclass(frozen=True)
class RateReport:
    weighting: str
    point: float
    se: float
    ratio: float
    folds: int
    per_fold: tuple  # of (point, se)
    significant: bool
    degenerate: bool
    fold_sizes: tuple = ()

    def to_json_dict(self):
        return {
            "weighting": self.weighting,
            "point": self.point,
            "se": self.se,
            "ratio": self.ratio,
            "folds": self.folds,
            "per_fold": [[p, s] for p, s in self.per_fold],
            "significant": self.significant,
            "degenerate": self.degenerate,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def _partition_folds(n, folds, seed, clusters=None):
    """Shuffled round-robin fold assignment; whole clusters stay together."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    fold_of = np.empty(n, dtype=np.int64)
    if clusters is not None:
        keys = sorted(set(clusters))
        if len(keys) < 2 * folds:
            raise FoldError(
                f"{len(keys)} clusters cannot fill {folds} folds with >= 2 each; "
                "use fewer folds"
            )
        order = rng.permutation(len(keys))
        cluster_fold = {keys[j]: int(f) for f, j in
                        ((i % folds, order[i]) for i in range(len(keys)))}
        for i, c in enumerate(clusters):
            fold_of[i] = cluster_fold[c]
    else:
        order = rng.permutation(n)
        fold_of[order] = np.arange(n) % folds
    return fold_of


def _fit_and_score(estimator, X_train, W_train, Y_train, X_eval, fold_seed):
    """Train the priority model out-of-fold, return scores for the fold."""
    if estimator == "oracle":
        # priority = first covariate column, no fitting (reference scorer)
        return X_eval[:, 0]
    if isinstance(estimator, (CausalForestSpec, RLearnerSpec)):
        # fold stream mixes the estimator's own seed with the fold index
        seed = int(np.random.SeedSequence([estimator.seed, fold_seed]).generate_state(1)[0])
        spec_dict = {**estimator.to_dict(), "seed": seed}
        if isinstance(estimator, CausalForestSpec):
            model = fit_causal_forest(X_train, W_train, Y_train,
                                      CausalForestSpec(**spec_dict))
            return predict_forest(model, X_eval, oob=False)
        model = fit_rlearner(X_train, W_train, Y_train, spec=RLearnerSpec(**spec_dict))
        return predict_rlearner(model, X_eval)
    raise DomainError(f"unknown estimator spec {estimator!r}")


def cross_fit_rate(W, Y, propensity, X, estimator, weighting="autoc",
                   folds=5, bootstrap_reps=200, seed=0, clusters=None) -> RateReport:
    """Cross-fitted rank-weighted report: per fold, train on the complement,
    score the fold, and form point/SE there; the headline ratio is the mean
    of the per-fold ratios. The top-level point is the implied product
    ratio * se so that point/se reproduces the headline exactly.
    """
    W = np.asarray(W, dtype=np.int64)
    Y = np.asarray(Y, dtype=np.float64)
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = W.shape[0]
    if weighting not in WEIGHTINGS:
        raise DomainError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    if n < 5 * folds:
        raise SampleSizeError(f"cross-fitting needs N >= {5 * folds}, got {n}")
    p = np.asarray(propensity, dtype=float)
    if p.ndim == 0:
        p = np.full(n, float(p))

    fold_of = _partition_folds(n, folds, seed, clusters)
    per_fold = []
    fold_sizes = []
    ratios = []
    any_degenerate = False
    for f in range(folds):
        mask = fold_of == f
        train_idx = np.where(~mask)[0]
        eval_idx = np.where(mask)[0]
        assert not np.intersect1d(train_idx, eval_idx).size  # cross-fit bookkeeping
        fold_seed = int(np.random.SeedSequence([seed, 7, f]).generate_state(1)[0])
        scores = _fit_and_score(
            estimator, X[train_idx], W[train_idx], Y[train_idx], X[eval_idx], fold_seed
        )
        gamma = dr_scores(W[eval_idx], Y[eval_idx], p[eval_idx])
        curve = toc_curve(scores, gamma)
        point = rate_point(curve, weighting)
        se = rate_se(scores, gamma, weighting, B=bootstrap_reps,
                     seed=int(np.random.SeedSequence([seed, 11, f]).generate_state(1)[0]))
        degenerate = curve.degenerate or se < SE_FLOOR
        ratios.append(0.0 if degenerate else point / se)
        any_degenerate = any_degenerate or degenerate
        per_fold.append((point, se))
        fold_sizes.append(int(mask.sum()))

    mean_ratio = float(np.mean(ratios))
    mean_se = float(np.mean([s for _, s in per_fold]))
    return RateReport(
        weighting=weighting,
        point=mean_ratio * mean_se,
        se=mean_se,
        ratio=mean_ratio,
        folds=folds,
        per_fold=tuple(per_fold),
        significant=bool(mean_ratio > SIGNIFICANCE_CUTOFF),
        degenerate=any_degenerate,
        fold_sizes=tuple(fold_sizes),
    )


def cross_fit_rate_dataset(dataset, embeddings, estimator, weighting="autoc",
                           folds=5, bootstrap_reps=200, seed=0) -> RateReport:
    """Dataset-level convenience wrapper around cross_fit_rate."""
    values = embeddings.values if hasattr(embeddings, "values") else embeddings
    return cross_fit_rate(
        dataset.treatment(), dataset.outcome(), dataset.propensity_per_unit(),
        values, estimator, weighting=weighting, folds=folds,
        bootstrap_reps=bootstrap_reps, seed=seed, clusters=dataset.cluster_ids(),
    )


# ---------------------------------------------------------------------------
# Meta-regression harness


@dataclass(frozen=True)
class MetaRegressionResult:
    coefficients: dict
    residual_variance: float
    adjusted_r2: float
    n: int

    def summary_table(self):
        rows = [(name, value) for name, value in self.coefficients.items()]
        rows.append(("Adjusted R-squared", self.adjusted_r2))
        rows.append(("Observations", self.n))
        return rows

    def render(self):
        lines = []
        for name, value in self.summary_table():
            if isinstance(value, float):
                lines.append(f"{name:<28s} {value: .4f}")
            else:
                lines.append(f"{name:<28s} {value}")
        return "\n".join(lines)


def _design_matrix(runs, factors):
    n = len(runs)
    columns = [np.ones(n)]
    names = ["intercept"]
    for key in factors:
        values = [run[key] for run in runs]
        if all(isinstance(val, (bool, np.bool_)) for val in values):
            columns.append(np.asarray(values, dtype=float))
            names.append(key)
        elif all(isinstance(val, str) for val in values):
            levels = sorted(set(values))
            for level in levels[1:]:  # first level is the baseline
                columns.append(np.asarray([v == level for v in values], dtype=float))
                names.append(f"{key}={level}")
        else:
            columns.append(np.asarray(values, dtype=float))
            names.append(key)
    return np.column_stack(columns), names


def meta_regression(runs, outcome="rate_ratio", factors=None) -> MetaRegressionResult:
    """OLS of the run-level ratio on design factors, solved by QR.

    runs is a sequence of dicts; boolean factors enter as 0/1, string
    factors as baseline-dropped indicators, numeric factors directly.
    """
    runs = list(runs)
    if not runs:
        raise DomainError("no runs supplied")
    if factors is None:
        factors = [k for k in runs[0].keys() if k != outcome]
    y = np.asarray([run[outcome] for run in runs], dtype=float)
    X, names = _design_matrix(runs, factors)
    n, p = X.shape
    if n <= p:
        raise SingularDesignError(
            f"need more runs ({n}) than regressors ({p})", collinear_columns=names
        )
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(float).eps * diag.max()
    bad = [names[j] for j in range(p) if diag[j] <= tol]
    if bad:
        raise SingularDesignError(
            f"design matrix is rank deficient in columns {bad}", collinear_columns=bad
        )
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - X @ coef
    rss = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    residual_variance = rss / (n - p)
    adjusted_r2 = 1.0 - (rss / (n - p)) / (tss / (n - 1)) if tss > 0 else 0.0
    return MetaRegressionResult(
        coefficients=dict(zip(names, coef.tolist())),
        residual_variance=residual_variance,
        adjusted_r2=adjusted_r2,
        n=n,
    )
