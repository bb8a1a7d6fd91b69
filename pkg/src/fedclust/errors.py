"""Exception hierarchy shared by every fedclust module."""


class FedClustError(Exception):
    """Base class; carries a short machine-readable ``code``."""

    code = "error"


class NonFiniteInput(FedClustError, ValueError):
    code = "non_finite_input"


class InvalidConfig(FedClustError, ValueError):
    code = "invalid_config"


class InvalidParams(FedClustError, ValueError):
    code = "invalid_params"


class OutOfRange(FedClustError, ValueError):
    code = "out_of_range"


class MalformedPayload(FedClustError, ValueError):
    code = "malformed_payload"


class MissingResidual(FedClustError, ValueError):
    code = "missing_residual"


class DimensionMismatch(FedClustError, ValueError):
    code = "dimension_mismatch"


class EmptyShard(FedClustError, ValueError):
    code = "empty_shard"


class InvalidWeights(FedClustError, ValueError):
    code = "invalid_weights"


class InfeasibleSpec(FedClustError, ValueError):
    code = "infeasible_spec"


class EmptyLedger(FedClustError, ValueError):
    code = "empty_ledger"
