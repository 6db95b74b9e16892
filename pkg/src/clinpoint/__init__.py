"""Clinical point-cloud modeling of incomplete multimodal event streams."""

__version__ = "0.1.0"
