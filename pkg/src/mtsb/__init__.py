"""Three-time-scale pancreatic beta-cell model: simulation, slow-fast geometry,
pseudo-singular points, normal form and blow-up, Poincare analysis and
network synchronization."""

from .model import CellParams, CellState, NetworkParams, DomainError
from .integrate import IntegratorConfig, Trajectory, integrate, detect_crossings

__version__ = "0.1.0"

__all__ = [
    "CellParams", "CellState", "NetworkParams", "DomainError",
    "IntegratorConfig", "Trajectory", "integrate", "detect_crossings",
]
