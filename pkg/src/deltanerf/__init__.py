"""Incremental refinement of small radiance fields on synthetic terrain.

A frozen base field is corrected by a zero-initialized residual controller
trained only on new views; a per-ray gate picks between the two at
evaluation time.  Everything runs on numpy with a small reverse-mode
autodiff engine.
"""
from .errors import ConfigError, ContractError, DeltaNerfError, InvariantError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DeltaNerfError", "InvariantError", "NumericError", "ShapeError"]
