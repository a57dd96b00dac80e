"""
Exception hierarchy for the Neuro-DSE toolkit.

Configuration problems and numerical failures are kept apart so the CLI can
map them to distinct exit codes in one place.
"""
from typing import Optional

import numpy as np


class NeuroDSEError(Exception):
    """Root of all toolkit errors"""


class ConfigurationError(NeuroDSEError, ValueError):
    """Invalid or inconsistent configuration, layout or dimensions"""


class NumericalError(NeuroDSEError, ArithmeticError):
    """A computation left its valid numerical domain"""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class NumericalDomainError(NumericalError):
    """Argument outside the domain of a physical model (e.g. omega <= 0)"""


class SingularNetworkError(NumericalError):
    """Admittance matrix cannot be inverted"""

    def __init__(self, message: str, bus: Optional[int] = None):
        self.bus = bus
        super().__init__(message)


class SimulationBlowUpError(NumericalError):
    """Ground-truth simulation diverged"""


class EquilibriumError(NumericalError):
    """Equilibrium search did not converge"""


class RolloutDivergenceError(NumericalError):
    """ODE-Net rollout produced a non-finite state"""


class FilterDivergenceError(NumericalError):
    """State estimate became non-finite or unbounded"""

    def __init__(self, message: str, step: Optional[int] = None,
                 last_good: Optional[np.ndarray] = None):
        self.last_good = last_good
        super().__init__(message, step=step)


class TrainingDivergenceError(NumericalError):
    """Training loss grew instead of shrinking"""

    def __init__(self, message: str, epoch: Optional[int] = None, phase: Optional[str] = None):
        self.epoch = epoch
        self.phase = phase
        if phase:
            message = f"[{phase}] {message}"
        super().__init__(message, step=epoch)
