from typing import Optional


class CoalflowError(Exception):
    """Base class for every error raised by coalflow"""


class GeometryError(CoalflowError, ValueError):
    """Invalid tube, box, path or point-set input"""


class LatticeError(CoalflowError, ValueError):
    """Start points, step laws or sample grids incompatible with a lattice model"""


class ConfigError(CoalflowError, ValueError):
    """Experiment configuration rejected before any compute"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ResourceGuardError(CoalflowError, RuntimeError):
    """A configured cap on particles x steps or gasket size was exceeded"""


class SimulationError(CoalflowError, RuntimeError):
    """An internal invariant of a simulation or study was violated"""
