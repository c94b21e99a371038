"""Stiff kinetic transport with uncertain collisions: operators, residual
networks, deterministic solvers, and hypocoercivity diagnostics."""

__version__ = "0.1.0"

from . import apnn, collision, gpc, micromacro, phase_space, reference

__all__ = [
    "__version__",
    "apnn",
    "collision",
    "gpc",
    "micromacro",
    "phase_space",
    "reference",
]
