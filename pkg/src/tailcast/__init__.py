"""tailcast: distribution-informed graph attention forecasting of
station heatwaves, with an EVT toolchain and imbalance-aware metrics."""

from .errors import ConfigError, DataError, NumericError, TailcastError

__version__ = "0.1.0"

__all__ = [
    "TailcastError", "ConfigError", "DataError", "NumericError",
    "__version__",
]
