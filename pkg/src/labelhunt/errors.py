"""Exception types shared across the package."""

from typing import Iterable, List


class LabelHuntError(Exception):
    """Base class for package errors."""


class SchemaError(LabelHuntError):
    """Malformed schema or registry conflict."""


class DuplicateSensorError(SchemaError):
    pass


class UnknownSensorError(LabelHuntError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown sensor"


class RuleLoadError(LabelHuntError):
    """One or more rules failed to load; ``problems`` lists every offender."""

    def __init__(self, problems: Iterable[str]):
        self.problems: List[str] = list(problems)
        super().__init__("; ".join(self.problems))


class ScenarioError(LabelHuntError):
    pass


class FrozenModelError(LabelHuntError):
    """Attempted to update parameters of a frozen model."""


class TrainingError(LabelHuntError):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, message: str, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(f"{message}: {diagnostics}")


class OutOfOrderError(LabelHuntError):
    pass


class IntegrityError(LabelHuntError):
    """A provenance key does not resolve to a stored row."""


class ConfigError(LabelHuntError):
    pass
