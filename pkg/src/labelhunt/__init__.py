"""Multi-sensor log labeling, gated-expert row classification, explanations and cluster hunting."""

from .errors import (ConfigError, FrozenModelError, IntegrityError, LabelHuntError, OutOfOrderError,
                     RuleLoadError, ScenarioError, SchemaError, TrainingError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FrozenModelError", "IntegrityError", "LabelHuntError", "OutOfOrderError",
    "RuleLoadError", "ScenarioError", "SchemaError", "TrainingError", "__version__",
]
