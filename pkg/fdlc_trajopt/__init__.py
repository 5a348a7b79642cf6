# Expose the main entry points of the fdlc_trajopt package

from .config import settings
from .exceptions import SolverFailure, TrajOptError, ValidationFailure
from .model import ContactKind, ContactModel, Control, State, SystemParams

__all__ = [
    "settings",
    "TrajOptError",
    "SolverFailure",
    "ValidationFailure",
    "ContactKind",
    "ContactModel",
    "Control",
    "State",
    "SystemParams",
]
