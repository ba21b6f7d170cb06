from .forest import (
    CausalForestModel,
    CausalForestSpec,
    Tree,
    fit_causal_forest,
    grow_tree,
    predict_forest,
)
from .rlearner import (
    RLearnerModel,
    RLearnerSpec,
    fit_rlearner,
    kkt_residual,
    lambda_max_value,
    predict_rlearner,
)

__all__ = [
    "CausalForestModel",
    "CausalForestSpec",
    "Tree",
    "fit_causal_forest",
    "grow_tree",
    "predict_forest",
    "RLearnerModel",
    "RLearnerSpec",
    "fit_rlearner",
    "kkt_residual",
    "lambda_max_value",
    "predict_rlearner",
]
