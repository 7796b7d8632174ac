"""Open-set single-image test-time adaptation over embedding streams."""

__version__ = "0.1.0"

UNDESIRED = -1
UNKNOWN = -1
