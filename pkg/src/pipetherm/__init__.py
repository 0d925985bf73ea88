"""pipetherm: thermal-hydraulic simulation of water pipe networks.

Spatially resolved pipe temperature models (full order and reduced order)
coupled through a Global Gradient Algorithm network flow solver.
"""

__version__ = "0.1.0"

from .fom import (
    BilinearFom,
    PipeGeometry,
    SensorLayout,
    ThermalInputs,
    ThermalParameters,
    assemble_fom,
    bilinear_rhs,
    build_grid,
    measure,
    step_fom,
)

__all__ = [
    "BilinearFom",
    "PipeGeometry",
    "SensorLayout",
    "ThermalInputs",
    "ThermalParameters",
    "assemble_fom",
    "bilinear_rhs",
    "build_grid",
    "measure",
    "step_fom",
    "__version__",
]
