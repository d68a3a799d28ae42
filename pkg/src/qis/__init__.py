"""Interactive image segmentation by quasi-conformal deformation of a template
mask, steered by positive/negative clicks with theorem-calibrated intensity
shifts."""

__version__ = "0.1.0"

from .clickmap import Click, ClickMap
from .fidelity import RegionStats, RRange
from .grid import BinaryMask, DeformationField, ScalarField
from .session import SessionState, StepRecord, apply_step, init_session, undo_step
from .solver import EnergyParams

__all__ = [
    "BinaryMask", "Click", "ClickMap", "DeformationField", "EnergyParams",
    "RegionStats", "RRange", "ScalarField", "SessionState", "StepRecord",
    "apply_step", "init_session", "undo_step", "__version__",
]
