"""Views knowledge distillation for re-identification."""

__version__ = "0.1.0"
