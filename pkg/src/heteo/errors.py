"""Exception types shared across the package."""


class HeteoError(Exception):
    """Base class for all package errors."""


class SchemaError(HeteoError):
    """A file or config is missing required structure (columns, keys, version)."""


class AlignmentError(HeteoError):
    """Row counts or id order disagree between two inputs that must be parallel."""


class DomainError(HeteoError):
    """A value is outside its permitted domain."""


class FormatError(HeteoError):
    """A binary container is malformed (bad magic, bad header)."""


class TruncationError(FormatError):
    """A binary container payload is shorter or longer than its header promises."""


class ShapeError(HeteoError):
    """An array has dimensions incompatible with the requested operation."""


class DegenerateDesignError(HeteoError):
    """The experimental design cannot support the requested fit (e.g. an arm is absent)."""


class ConvergenceError(HeteoError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message, kkt_residual=None):
        super().__init__(message)
        self.kkt_residual = kkt_residual


class ContractError(HeteoError):
    """A caller violated an API contract (e.g. OOB prediction for unseen rows)."""


class FoldError(HeteoError):
    """Cross-fitting folds cannot be formed from the given units/clusters."""


class SampleSizeError(HeteoError):
    """Too few units for the requested statistical procedure."""


class SingularDesignError(HeteoError):
    """A regression design matrix is rank deficient."""

    def __init__(self, message, collinear_columns=()):
        super().__init__(message)
        self.collinear_columns = list(collinear_columns)


class ComparisonError(HeteoError):
    """Two reports cannot be compared (different weighting or dataset)."""


class WeightError(HeteoError):
    """A weight raster has no mass to sample from."""


class BoundsError(HeteoError):
    """A point falls outside the raster or bounding box."""


class PipelineDriftError(HeteoError):
    """Embeddings were produced under a different pipeline state than the model."""
