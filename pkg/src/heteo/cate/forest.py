"""Honest causal forest: subsampled trees, split/estimate sample split.

Each tree draws a stratified subsample (arm proportions preserved), splits
it into a structure half that chooses splits and an estimation half that
fills leaf effects. Splits maximize the child-count-weighted squared
deviation of child effects from the parent effect, with arm-count minimums
enforced on both halves of both children. Ties break to the lowest feature
index, then the lowest threshold.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .._backend import thread_count
from .._kernels import NO_SPLIT, split_scan, traverse
from ..errors import ContractError, DegenerateDesignError, DomainError

_MAX_DRAW_ATTEMPTS = 100


@dataclass(frozen=True)
class CausalForestSpec:
    n_trees: int = 500
    honesty_fraction: float = 0.5
    min_leaf_treated: int = 5
    min_leaf_control: int = 5
    mtry: int = 0  # 0 -> ceil(sqrt(d))
    max_depth: int = 0  # 0 -> unbounded
    subsample_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.honesty_fraction < 1.0:
            raise DomainError("honesty_fraction must lie strictly inside (0, 1)")
        if self.min_leaf_treated < 1 or self.min_leaf_control < 1:
            raise DomainError("min leaf arm counts must be >= 1")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise DomainError("subsample_fraction must lie in (0, 1]")
        if self.n_trees < 1:
            raise DomainError("n_trees must be >= 1")

    def to_dict(self):
        return {
            "n_trees": self.n_trees,
            "honesty_fraction": self.honesty_fraction,
            "min_leaf_treated": self.min_leaf_treated,
            "min_leaf_control": self.min_leaf_control,
            "mtry": self.mtry,
            "max_depth": self.max_depth,
            "subsample_fraction": self.subsample_fraction,
            "seed": self.seed,
        }


@dataclass
class Tree:
    """Flat node arrays; feature < 0 marks a leaf whose effect sits in tau."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    tau: np.ndarray
    n_treated: np.ndarray
    n_control: np.ndarray
    structure_idx: np.ndarray
    estimation_idx: np.ndarray

    @property
    def n_nodes(self):
        return self.feature.shape[0]

    def leaves(self):
        return np.where(self.feature < 0)[0]

    def to_nested(self, node=0):
        if self.feature[node] < 0:
            return {
                "tau": float(self.tau[node]),
                "n_treated": int(self.n_treated[node]),
                "n_control": int(self.n_control[node]),
            }
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "left": self.to_nested(int(self.left[node])),
            "right": self.to_nested(int(self.right[node])),
        }


class _TreeBuilder:
    def __init__(self):
        self.feature = []
        self.threshold = []
        self.left = []
        self.right = []
        self.tau = []
        self.n_treated = []
        self.n_control = []

    def add(self):
        self.feature.append(NO_SPLIT)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.tau.append(0.0)
        self.n_treated.append(0)
        self.n_control.append(0)
        return len(self.feature) - 1

    def finish(self, structure_idx, estimation_idx):
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            tau=np.asarray(self.tau, dtype=np.float64),
            n_treated=np.asarray(self.n_treated, dtype=np.int64),
            n_control=np.asarray(self.n_control, dtype=np.int64),
            structure_idx=structure_idx,
            estimation_idx=estimation_idx,
        )


@dataclass
class CausalForestModel:
    spec: CausalForestSpec
    trees: list
    n_train: int
    d: int
    inbag: np.ndarray  # (n_train, n_trees) bool
    fingerprint: str = ""
    kind: str = field(default="forest", init=False)

    def to_json_dict(self):
        return {
            "kind": "forest",
            "spec": self.spec.to_dict(),
            "n_train": self.n_train,
            "d": self.d,
            "fingerprint": self.fingerprint,
            "trees": [
                {
                    "nodes": t.to_nested(),
                    "structure": t.structure_idx.tolist(),
                    "estimation": t.estimation_idx.tolist(),
                }
                for t in self.trees
            ],
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, doc):
        spec = CausalForestSpec(**doc["spec"])
        n_train = int(doc["n_train"])
        trees = []
        inbag = np.zeros((n_train, len(doc["trees"])), dtype=bool)
        for t_idx, tree_doc in enumerate(doc["trees"]):
            builder = _TreeBuilder()

            def build(node_doc):
                idx = builder.add()
                if "tau" in node_doc:
                    builder.tau[idx] = node_doc["tau"]
                    builder.n_treated[idx] = node_doc["n_treated"]
                    builder.n_control[idx] = node_doc["n_control"]
                else:
                    builder.feature[idx] = node_doc["feature"]
                    builder.threshold[idx] = node_doc["threshold"]
                    builder.left[idx] = build(node_doc["left"])
                    builder.right[idx] = build(node_doc["right"])
                return idx

            build(tree_doc["nodes"])
            struct = np.asarray(tree_doc["structure"], dtype=np.int64)
            est = np.asarray(tree_doc["estimation"], dtype=np.int64)
            trees.append(builder.finish(struct, est))
            inbag[struct, t_idx] = True
            inbag[est, t_idx] = True
        return cls(
            spec=spec,
            trees=trees,
            n_train=n_train,
            d=int(doc["d"]),
            inbag=inbag,
            fingerprint=doc.get("fingerprint", ""),
        )

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def _tau_diff(w, y):
    treated = w == 1
    return y[treated].mean() - y[~treated].mean()


def _draw_tree_sample(rng, idx_treated, idx_control, spec):
    """Stratified subsample split into structure/estimation index arrays."""
    n_sub_t = int(math.floor(spec.subsample_fraction * idx_treated.size))
    n_sub_c = int(math.floor(spec.subsample_fraction * idx_control.size))
    if n_sub_t < 2 or n_sub_c < 2:
        raise DegenerateDesignError(
            "subsample too small to hold both halves of both arms "
            f"(treated {n_sub_t}, control {n_sub_c})"
        )
    n_struct_t = int(math.floor(spec.honesty_fraction * n_sub_t))
    n_struct_c = int(math.floor(spec.honesty_fraction * n_sub_c))
    n_struct_t = min(max(n_struct_t, 1), n_sub_t - 1)
    n_struct_c = min(max(n_struct_c, 1), n_sub_c - 1)
    sub_t = rng.permutation(idx_treated)[:n_sub_t]
    sub_c = rng.permutation(idx_control)[:n_sub_c]
    struct = np.sort(np.concatenate([sub_t[:n_struct_t], sub_c[:n_struct_c]]))
    est = np.sort(np.concatenate([sub_t[n_struct_t:], sub_c[n_struct_c:]]))
    return struct, est


def grow_tree(X, W, Y, struct_idx, est_idx, spec, rng):
    """Grow one honest tree on explicit structure/estimation index sets."""
    if np.intersect1d(struct_idx, est_idx).size:
        raise DegenerateDesignError("structure and estimation halves overlap")
    d = X.shape[1]
    mtry = spec.mtry if spec.mtry else int(math.ceil(math.sqrt(d)))
    mtry = min(mtry, d)
    builder = _TreeBuilder()
    min_tr = spec.min_leaf_treated
    min_ct = spec.min_leaf_control

    def make_leaf(node, est):
        builder.tau[node] = _tau_diff(W[est], Y[est])
        builder.n_treated[node] = int((W[est] == 1).sum())
        builder.n_control[node] = int((W[est] == 0).sum())

    def recurse(struct, est, depth):
        node = builder.add()
        if spec.max_depth and depth >= spec.max_depth:
            make_leaf(node, est)
            return node
        if struct.size < 2:
            make_leaf(node, est)
            return node
        feats = np.sort(rng.choice(d, size=mtry, replace=False))
        tau_parent = _tau_diff(W[struct], Y[struct])
        xs = np.ascontiguousarray(X[struct][:, feats])
        xe = np.ascontiguousarray(X[est][:, feats])
        local_feat, thr, _score = split_scan(
            xs, W[struct], Y[struct], xe, W[est], min_tr, min_ct, tau_parent
        )
        if local_feat == NO_SPLIT:
            make_leaf(node, est)
            return node
        feat = int(feats[local_feat])
        left_s = struct[X[struct, feat] <= thr]
        right_s = struct[X[struct, feat] > thr]
        left_e = est[X[est, feat] <= thr]
        right_e = est[X[est, feat] > thr]
        builder.feature[node] = feat
        builder.threshold[node] = thr
        builder.left[node] = recurse(left_s, left_e, depth + 1)
        builder.right[node] = recurse(right_s, right_e, depth + 1)
        return node

    recurse(struct_idx, est_idx, 0)
    return builder.finish(struct_idx, est_idx)


def fit_causal_forest(X, W, Y, spec=None, fingerprint="") -> CausalForestModel:
    """Fit an honest causal forest; deterministic in spec.seed."""
    spec = spec or CausalForestSpec()
    X = np.ascontiguousarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.int64)
    Y = np.asarray(Y, dtype=np.float64)
    n, d = X.shape
    if not set(np.unique(W)) <= {0, 1}:
        raise DomainError("treatment must be binary 0/1")
    idx_treated = np.where(W == 1)[0]
    idx_control = np.where(W == 0)[0]
    if idx_treated.size == 0 or idx_control.size == 0:
        raise DegenerateDesignError("both treatment arms must be present")
    if n < 2 * (spec.min_leaf_treated + spec.min_leaf_control):
        raise DomainError(
            f"need N >= {2 * (spec.min_leaf_treated + spec.min_leaf_control)}, got {n}"
        )

    # Draw subsamples first (cheap); redraw the whole set until every unit
    # is out-of-bag somewhere, then grow.
    for attempt in range(_MAX_DRAW_ATTEMPTS):
        rngs = [
            np.random.default_rng(np.random.SeedSequence([spec.seed, attempt, t]))
            for t in range(spec.n_trees)
        ]
        draws = [_draw_tree_sample(rng, idx_treated, idx_control, spec) for rng in rngs]
        inbag = np.zeros((n, spec.n_trees), dtype=bool)
        for t, (struct, est) in enumerate(draws):
            inbag[struct, t] = True
            inbag[est, t] = True
        if (inbag.sum(axis=1) < spec.n_trees).all():
            break
    else:
        raise DegenerateDesignError(
            "could not give every unit an out-of-bag tree; "
            "increase n_trees or lower subsample_fraction"
        )

    def build(t):
        struct, est = draws[t]
        return grow_tree(X, W, Y, struct, est, spec, rngs[t])

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(build, range(spec.n_trees)))
    else:
        trees = [build(t) for t in range(spec.n_trees)]

    return CausalForestModel(
        spec=spec, trees=trees, n_train=n, d=d, inbag=inbag, fingerprint=fingerprint
    )


def predict_forest(model: CausalForestModel, X, oob=False):
    """Average leaf effects across trees; oob=True restricts each training
    unit to the trees that never saw it (X must then be the training matrix)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ContractError(f"expected (n, {model.d}) covariates, got {X.shape}")
    if oob and X.shape[0] != model.n_train:
        raise ContractError(
            "oob predictions are only defined for the training matrix "
            f"(expected {model.n_train} rows, got {X.shape[0]})"
        )
    n = X.shape[0]
    sums = np.zeros(n)
    counts = np.zeros(n)
    for t, tree in enumerate(model.trees):
        preds = traverse(tree.feature, tree.threshold, tree.left, tree.right, tree.tau, X)
        if oob:
            mask = ~model.inbag[:, t]
            sums[mask] += preds[mask]
            counts[mask] += 1.0
        else:
            sums += preds
            counts += 1.0
    return sums / counts
