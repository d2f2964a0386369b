"""Staged teacher-forced training of rolling forecasters on synthetic chaotic systems."""
from ._accel import backend_name

__version__ = "0.1.0"

__all__ = ["__version__", "backend_name"]
