"""Heterogeneous treatment effect estimation and evaluation for RCTs with
satellite image-sequence covariates."""

from ._backend import NUMBA_ENABLED, backend_name
from .data_model import (
    EmbeddingMatrix,
    ExperimentDataset,
    ImageSequence,
    UnitRecord,
    load_manifest,
    read_external_embeddings,
    read_tensor,
    write_tensor,
)
from .embedders import (
    PcaModel,
    SpatialEmbedderSpec,
    TemporalAggregatorSpec,
    apply_pca,
    default_specs,
    embed_dataset,
    embed_sequence,
    fit_pca,
    init_weights,
    spatial_forward,
)
from .cate import (
    CausalForestModel,
    CausalForestSpec,
    RLearnerModel,
    RLearnerSpec,
    fit_causal_forest,
    fit_rlearner,
    predict_forest,
    predict_rlearner,
)
from .rate import (
    RateReport,
    cross_fit_rate,
    dr_scores,
    meta_regression,
    rate_point,
    rate_se,
    toc_curve,
    truth_correlation,
)
from .simulation import SimConfig, generate, make_image_pool, rotate90, run_grid

__version__ = "0.1.0"

__all__ = [
    "NUMBA_ENABLED",
    "backend_name",
    "EmbeddingMatrix",
    "ExperimentDataset",
    "ImageSequence",
    "UnitRecord",
    "load_manifest",
    "read_external_embeddings",
    "read_tensor",
    "write_tensor",
    "PcaModel",
    "SpatialEmbedderSpec",
    "TemporalAggregatorSpec",
    "apply_pca",
    "default_specs",
    "embed_dataset",
    "embed_sequence",
    "fit_pca",
    "init_weights",
    "spatial_forward",
    "CausalForestModel",
    "CausalForestSpec",
    "RLearnerModel",
    "RLearnerSpec",
    "fit_causal_forest",
    "fit_rlearner",
    "predict_forest",
    "predict_rlearner",
    "RateReport",
    "cross_fit_rate",
    "dr_scores",
    "meta_regression",
    "rate_point",
    "rate_se",
    "toc_curve",
    "truth_correlation",
    "SimConfig",
    "generate",
    "make_image_pool",
    "rotate90",
    "run_grid",
]
