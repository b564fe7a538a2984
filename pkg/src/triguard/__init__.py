"""Safety evaluation of image classifiers: adversarial error, certified robustness,
attribution stability and faithfulness, on a small numpy autodiff engine."""

from .errors import (CapabilityError, ConfigError, ContractError, DimensionError, DomainError,
                     FormatError, NonFiniteError, ReportError, TrainingError, TriGuardError,
                     UndefinedCorrelationError)

__version__ = "0.1.0"
