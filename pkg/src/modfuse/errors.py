"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: configuration/input
problems exit 2, numerical divergence exits 3.
"""


class ModfuseError(Exception):
    """Base class for all package errors."""


class DimensionError(ModfuseError):
    """Operand shapes are incompatible; message names both shapes."""


class ContractError(ModfuseError):
    """An operation was called outside its contract (non-scalar backward,
    missing gradient on a registered parameter, ...)."""


class ConfigurationError(ModfuseError):
    """Invalid configuration or input data (bad field, empty pool,
    unsupported kernel size, missing file, never-observed feature)."""


class EmptySequenceError(ModfuseError):
    """An episode with zero timesteps/rows was passed where >=1 is required."""


class DegenerateBatchError(ModfuseError):
    """Every entry of a loss batch was masked out."""


class DivergenceError(ModfuseError):
    """A training loss became non-finite."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class UnsupportedInputError(ModfuseError):
    """Inference was requested without the base modality."""


class SingleClassError(ModfuseError):
    """AUROC is undefined: the label column holds a single class.

    Carries the class counts so callers can report a skip reason.
    """

    def __init__(self, n_pos, n_neg):
        self.n_pos = n_pos
        self.n_neg = n_neg
        super().__init__(f"single-class label: {n_pos} positives, {n_neg} negatives")


class DegenerateEvaluationError(ModfuseError):
    """Every label of an evaluation was skipped."""
