"""Online backend allocation for foundation-model programs."""

__version__ = "0.1.0"
