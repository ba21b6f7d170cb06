"""Representation pipeline: image sequence -> fixed-length vector.

Two untrained spatial encoders (single-layer CNN with global max pooling,
and a small ViT), composed with a random temporal transformer, turn a
(T, H, W, B) stack into an R^D embedding. No training happens anywhere;
weights are generated deterministically from seeds. A PCA reduction
fitted by SVD is available downstream.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._backend import thread_count
from .data_model import EmbeddingMatrix, ExperimentDataset
from .errors import DomainError, ShapeError

LN_EPS = 1e-6


@dataclass(frozen=True)
class SpatialEmbedderSpec:
    kind: str  # "rand-cnn" or "rand-vit"
    seed: int = 0
    out_dim: int = 0  # 0 -> kind default (cnn 384, vit 128)
    kernel: int = 5
    patch: int = 8
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.kind not in ("rand-cnn", "rand-vit"):
            raise DomainError(f"unknown spatial embedder kind {self.kind!r}")
        if self.out_dim == 0:
            object.__setattr__(self, "out_dim", 384 if self.kind == "rand-cnn" else 128)
        if self.out_dim < 1:
            raise DomainError("out_dim must be >= 1")
        if self.kind == "rand-vit":
            if self.out_dim % (2 * self.heads) != 0:
                raise DomainError(
                    "rand-vit out_dim must be divisible by 2*heads for "
                    "sinusoidal encoding and head splitting"
                )

    def to_dict(self):
        return {
            "kind": self.kind, "seed": self.seed, "out_dim": self.out_dim,
            "kernel": self.kernel, "patch": self.patch,
            "depth": self.depth, "heads": self.heads,
        }


@dataclass(frozen=True)
class TemporalAggregatorSpec:
    seed: int = 0
    dim: int = 0  # 0 -> match spatial out_dim
    depth: int = 1
    heads: int = 4

    def __post_init__(self):
        if self.dim < 0:
            raise DomainError("dim must be >= 0")

    def resolved(self, spatial_out_dim):
        dim = self.dim if self.dim else spatial_out_dim
        if dim % (2 * self.heads) != 0:
            raise DomainError(
                "temporal dim must be divisible by 2*heads for "
                "sinusoidal encoding and head splitting"
            )
        return TemporalAggregatorSpec(self.seed, dim, self.depth, self.heads)

    def to_dict(self):
        return {"seed": self.seed, "dim": self.dim, "depth": self.depth, "heads": self.heads}


def default_specs(kind, seed):
    """Spatial + temporal spec pair with the standard dims (vit 128, cnn 384)."""
    spatial = SpatialEmbedderSpec(kind=kind, seed=seed)
    temporal = TemporalAggregatorSpec(seed=seed + 1).resolved(spatial.out_dim)
    return spatial, temporal


@dataclass(frozen=True)
class WeightBundle:
    """Named random tensors; regenerating from the same seed is bit-identical."""

    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def param_count(self):
        return int(sum(t.size for t in self.tensors.values()))


def _he(rng, shape, fan_in):
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    w.flags.writeable = False
    return w


def _transformer_weights(rng, tensors, prefix, dim, depth):
    hidden = 4 * dim
    for b in range(depth):
        p = f"{prefix}.block{b}"
        for name in ("wq", "wk", "wv", "wo"):
            tensors[f"{p}.{name}"] = _he(rng, (dim, dim), dim)
        tensors[f"{p}.mlp1"] = _he(rng, (dim, hidden), dim)
        tensors[f"{p}.mlp2"] = _he(rng, (hidden, dim), hidden)


def init_weights(spec, bands, seed=None):
    """Generate He-scaled Gaussian weights for a spatial spec (seed overrides spec.seed)."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    tensors = {}
    if spec.kind == "rand-cnn":
        fan_in = spec.kernel * spec.kernel * bands
        tensors["conv.kernel"] = _he(rng, (spec.kernel, spec.kernel, bands, spec.out_dim), fan_in)
        tensors["conv.bias"] = np.zeros(spec.out_dim)
        tensors["conv.bias"].flags.writeable = False
    else:
        patch_dim = spec.patch * spec.patch * bands
        tensors["patch.embed"] = _he(rng, (patch_dim, spec.out_dim), patch_dim)
        _transformer_weights(rng, tensors, "vit", spec.out_dim, spec.depth)
    return WeightBundle(tensors)


def init_temporal_weights(spec, spatial_out_dim, seed=None):
    spec = spec.resolved(spatial_out_dim)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    tensors = {"time.proj": _he(rng, (spatial_out_dim, spec.dim), spatial_out_dim)}
    _transformer_weights(rng, tensors, "time", spec.dim, spec.depth)
    return WeightBundle(tensors)


# ---------------------------------------------------------------------------
# Forward passes


def _sinusoid(n_positions, dim):
    # classic sin/cos interleave; dim must be even
    pos = np.arange(n_positions)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    enc = np.zeros((n_positions, dim))
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle)
    return enc


def _layernorm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(tokens, wq, wk, wv, wo, heads):
    n, d = tokens.shape
    hd = d // heads
    q = (tokens @ wq).reshape(n, heads, hd).transpose(1, 0, 2)
    k = (tokens @ wk).reshape(n, heads, hd).transpose(1, 0, 2)
    v = (tokens @ wv).reshape(n, heads, hd).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(hd)
    out = _softmax(scores) @ v
    return out.transpose(1, 0, 2).reshape(n, d) @ wo


def _block_forward(tokens, weights, prefix, heads):
    h = tokens + _attention(
        _layernorm(tokens),
        weights[f"{prefix}.wq"], weights[f"{prefix}.wk"],
        weights[f"{prefix}.wv"], weights[f"{prefix}.wo"],
        heads,
    )
    mid = _layernorm(h)
    return h + np.maximum(mid @ weights[f"{prefix}.mlp1"], 0.0) @ weights[f"{prefix}.mlp2"]


def _transformer_forward(tokens, weights, prefix, depth, heads):
    for b in range(depth):
        tokens = _block_forward(tokens, weights, f"{prefix}.block{b}", heads)
    return tokens


def _pad_to_patch(image, patch):
    h, w, _ = image.shape
    ph = (-h) % patch
    pw = (-w) % patch
    if ph == 0 and pw == 0:
        return image
    # symmetric zero padding, extra pixel goes to the bottom/right
    return np.pad(
        image,
        ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)),
        mode="constant",
    )


def _patchify(image, patch):
    h, w, b = image.shape
    gh, gw = h // patch, w // patch
    tiles = image.reshape(gh, patch, gw, patch, b).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gh * gw, patch * patch * b)


def _im2col(image, kernel):
    h, w, b = image.shape
    oh, ow = h - kernel + 1, w - kernel + 1
    s0, s1, s2 = image.strides
    windows = np.lib.stride_tricks.as_strided(
        image, shape=(oh, ow, kernel, kernel, b), strides=(s0, s1, s0, s1, s2)
    )
    return windows.reshape(oh * ow, kernel * kernel * b)


def spatial_forward(image, spec, weights):
    """Map one (H, W, B) slice to an out_dim vector."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3:
        raise ShapeError(f"expected (H, W, B) image, got shape {image.shape}")
    if spec.kind == "rand-cnn":
        h, w, _ = image.shape
        if h < spec.kernel or w < spec.kernel:
            raise ShapeError(
                f"image {h}x{w} smaller than valid-convolution kernel {spec.kernel}"
            )
        cols = _im2col(image, spec.kernel)
        kernel = weights["conv.kernel"]
        acts = cols @ kernel.reshape(-1, kernel.shape[-1]) + weights["conv.bias"]
        return np.maximum(acts, 0.0).max(axis=0)
    padded = _pad_to_patch(image, spec.patch)
    if padded.shape[0] % spec.patch or padded.shape[1] % spec.patch:
        raise ShapeError("patch does not divide padded image dims")
    tokens = _patchify(padded, spec.patch) @ weights["patch.embed"]
    tokens = tokens + _sinusoid(tokens.shape[0], spec.out_dim)
    tokens = _transformer_forward(tokens, weights, "vit", spec.depth, spec.heads)
    return tokens.mean(axis=0)


def embed_sequence(
    sequence,
    spatial_spec,
    temporal_spec,
    spatial_weights,
    temporal_weights,
    time_encoding=True,
):
    """Embed one (T, H, W, B) stack: spatial per slice, then temporal transformer.

    time_encoding=False drops the sinusoidal time offsets (test hook: with
    identical slices this makes the output equal the single-slice path).
    """
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim != 4:
        raise ShapeError(f"expected (T, H, W, B), got {seq.shape}")
    temporal_spec = temporal_spec.resolved(spatial_spec.out_dim)
    slices = np.stack([spatial_forward(seq[t], spatial_spec, spatial_weights)
                       for t in range(seq.shape[0])])
    tokens = slices @ temporal_weights["time.proj"]
    if time_encoding:
        tokens = tokens + _sinusoid(tokens.shape[0], temporal_spec.dim)
    tokens = _transformer_forward(tokens, temporal_weights, "time",
                                  temporal_spec.depth, temporal_spec.heads)
    return tokens.mean(axis=0)


def pipeline_fingerprint(spatial_spec, temporal_spec, bands, with_tabular,
                         tabular_width, pca_model=None):
    """Stable digest of everything that defines the embedding space."""
    payload = {
        "spatial": spatial_spec.to_dict(),
        "temporal": temporal_spec.to_dict(),
        "bands": int(bands),
        "with_tabular": bool(with_tabular),
        "tabular_width": int(tabular_width),
        "pca": pca_digest(pca_model) if pca_model is not None else None,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def embed_dataset(dataset: ExperimentDataset, spatial_spec, temporal_spec,
                  with_tabular=False) -> EmbeddingMatrix:
    """Embed every unit; rows follow unit order regardless of thread scheduling."""
    bands = dataset.sequence_shape[-1]
    temporal_spec = temporal_spec.resolved(spatial_spec.out_dim)
    sw = init_weights(spatial_spec, bands)
    tw = init_temporal_weights(temporal_spec, spatial_spec.out_dim)

    n = dataset.n
    out = np.empty((n, temporal_spec.dim))

    def fill(i):
        out[i] = embed_sequence(dataset.sequences[i], spatial_spec, temporal_spec, sw, tw)

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(n)))
    else:
        for i in range(n):
            fill(i)

    tab_width = 0
    names = tuple(f"e{j}" for j in range(temporal_spec.dim))
    if with_tabular:
        tab = dataset.tabular_matrix()
        if tab.shape[1] == 0:
            warnings.warn("with_tabular requested but the dataset has no tabular columns")
        else:
            out = np.hstack([out, tab])
            tab_width = tab.shape[1]
            names = names + tuple(dataset.tabular_names or
                                  (f"x{j}" for j in range(tab_width)))

    fp = pipeline_fingerprint(spatial_spec, temporal_spec, bands,
                              with_tabular and tab_width > 0, tab_width)
    return EmbeddingMatrix(values=out, source=spatial_spec.kind,
                           fingerprint=fp, column_names=names)


def embed_sequences(sequences, spatial_spec, temporal_spec):
    """Embed a raw (N, T, H, W, B) stack (no tabular, no dataset wrapper)."""
    seq = np.asarray(sequences, dtype=np.float32)
    temporal_spec = temporal_spec.resolved(spatial_spec.out_dim)
    sw = init_weights(spatial_spec, seq.shape[-1])
    tw = init_temporal_weights(temporal_spec, spatial_spec.out_dim)
    out = np.empty((seq.shape[0], temporal_spec.dim))

    def fill(i):
        out[i] = embed_sequence(seq[i], spatial_spec, temporal_spec, sw, tw)

    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(seq.shape[0])))
    else:
        for i in range(seq.shape[0]):
            fill(i)
    fp = pipeline_fingerprint(spatial_spec, temporal_spec, seq.shape[-1], False, 0)
    return EmbeddingMatrix(values=out, source=spatial_spec.kind, fingerprint=fp)


def pipeline_param_count(spatial_spec, temporal_spec, bands):
    sw = init_weights(spatial_spec, bands)
    tw = init_temporal_weights(temporal_spec.resolved(spatial_spec.out_dim),
                               spatial_spec.out_dim)
    return sw.param_count() + tw.param_count()


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, D), orthonormal rows
    explained_variance: np.ndarray  # descending


def fit_pca(embeddings, k=10) -> PcaModel:
    """Mean-centered SVD; top-k right singular vectors become the components."""
    x = embeddings.values if isinstance(embeddings, EmbeddingMatrix) else np.asarray(embeddings, dtype=float)
    n, d = x.shape
    k = min(k, d)
    if n < k:
        raise ShapeError(f"PCA needs N >= k, got N={n}, k={k}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k]
    explained = (s[:k] ** 2) / (n - 1)
    return PcaModel(mean=mean, components=components, explained_variance=explained)


def apply_pca(model: PcaModel, embeddings):
    x = embeddings.values if isinstance(embeddings, EmbeddingMatrix) else np.asarray(embeddings, dtype=float)
    return (x - model.mean) @ model.components.T


def pca_digest(model: PcaModel) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(model.mean).tobytes())
    h.update(np.ascontiguousarray(model.components).tobytes())
    h.update(np.ascontiguousarray(model.explained_variance).tobytes())
    return h.hexdigest()


def reduce_with_pca(matrix: EmbeddingMatrix, k=10):
    """Fit + apply PCA, refreshing the fingerprint with the PCA state digest."""
    model = fit_pca(matrix, k=k)
    reduced = apply_pca(model, matrix)
    fp = hashlib.sha256(
        (matrix.fingerprint + ":" + pca_digest(model)).encode()
    ).hexdigest()
    return (
        EmbeddingMatrix(values=reduced, source=matrix.source + "+pca",
                        fingerprint=fp,
                        column_names=tuple(f"pc{j}" for j in range(reduced.shape[1]))),
        model,
    )
