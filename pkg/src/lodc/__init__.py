"""Operator compression with PG-LOD and a learned local coefficient-to-matrix map."""
from .coeff import Coefficient
from .errors import ConfigurationError, FormatError, SingularMatrix, SolverFailure
from .lod import EffectiveMatrix, assemble_effective, pg_lod_solve
from .mesh import SENTINEL, build_mesh, build_patch

__all__ = [
    "Coefficient", "ConfigurationError", "EffectiveMatrix", "FormatError", "SENTINEL", "SingularMatrix",
    "SolverFailure", "assemble_effective", "build_mesh", "build_patch", "pg_lod_solve",
]
__version__ = "0.1.0"
