"""User-adaptive FiLM conditioning for sEMG hand-pose estimation."""

__version__ = "0.1.0"
