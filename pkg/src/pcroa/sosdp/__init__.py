"""SOS programs compiled to block SDPs, plus a posteriori certificate checks."""

from .sdp import (INFEASIBLE, MAX_ITER, NUMERICAL, OPTIMAL, UNBOUNDED, SdpOptions,
                  SdpProblem, SdpSolution, solve_conic)
from .sos import LinPoly, SosProgram, SosSolution, compile_sos, verify_gram

__all__ = [
    "INFEASIBLE", "MAX_ITER", "NUMERICAL", "OPTIMAL", "UNBOUNDED", "SdpOptions", "SdpProblem",
    "SdpSolution", "solve_conic", "LinPoly", "SosProgram", "SosSolution", "compile_sos",
    "verify_gram",
]
