"""Exception hierarchy and process exit codes.

Each error family maps to a distinct nonzero exit code so shell pipelines
can distinguish configuration mistakes from numerical failures.
"""


class ItogenError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ItogenError):
    """Invalid configuration value; message names the offending field."""

    exit_code = 2


class DataError(ItogenError):
    """Missing, malformed, or inconsistent dataset / checkpoint input."""

    exit_code = 3


class TrainingDivergenceError(ItogenError):
    """Loss or gradients became non-finite during training."""

    exit_code = 4


class EstimationDomainError(ItogenError):
    """A downstream estimator left its valid domain (e.g. OU regression
    slope outside (0, 1), so the mean-reversion rate is undefined)."""

    exit_code = 5


class SimulationDivergenceError(ItogenError):
    """A simulated or generated path produced a non-finite value."""

    exit_code = 4
