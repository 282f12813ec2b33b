"""Semi-global (iteratively time-ordered) propagation and Krotov optimal control.

Submodules
----------
quantum       states, operators, Hilbert and Liouville generators
interp        Chebyshev-Gauss-Lobatto grids and Newton interpolation
propagators   piecewise-constant and semi-global propagators
krotov        Krotov's method with PWC or self-consistent ITO updates
models        driven oscillators and the anharmonic qudit
gates         two-qubit gates on four qudit levels, local invariants
bench         experiment sweeps and the ``itoqoc-bench`` command
"""
__version__ = "0.1.0"

from . import gates, interp, krotov, models, propagators, quantum  # noqa: E402
from .propagators import Guess, ItoConfig, PwcConfig, propagate  # noqa: E402

__all__ = [
    "__version__",
    "gates",
    "interp",
    "krotov",
    "models",
    "propagators",
    "quantum",
    "Guess",
    "ItoConfig",
    "PwcConfig",
    "propagate",
]
