"""Test-side alias for the gradcheck harness."""

from dscl.gradcheck import FeatureLevelObjective, run_gradcheck, usable_objective

__all__ = ["FeatureLevelObjective", "run_gradcheck", "usable_objective"]
