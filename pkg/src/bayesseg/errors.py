"""Exception hierarchy shared by every module."""


class BayesSegError(Exception):
    """Base class for all package errors."""


class DimensionError(BayesSegError, ValueError):
    pass


class DomainError(BayesSegError, ValueError):
    pass


class NumericError(BayesSegError, ArithmeticError):
    pass


class LifecycleError(BayesSegError, RuntimeError):
    pass


class ConfigError(BayesSegError, ValueError):
    pass


class SchemaError(BayesSegError, ValueError):
    pass


class UndefinedMetricError(BayesSegError, ValueError):
    """Raised when a surface metric is requested for an empty contour."""


class TrainingDiverged(NumericError):
    def __init__(self, epoch: int, batch: int, terms: dict):
        self.epoch = epoch
        self.batch = batch
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
