"""Central record of numerical tolerances and default parameters."""

from __future__ import annotations

from dataclasses import dataclass, replace

__all__ = ["Tolerances", "DEFAULT", "DomainError", "ConvergenceError"]


class DomainError(ValueError):
    """Raised when an input violates an operation's precondition."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative routine fails to reach its tolerance.

    ``achieved`` carries the best error estimate that was reached.
    """

    def __init__(self, message: str, achieved: float = float("nan")):
        super().__init__(message)
        self.achieved = achieved


@dataclass(frozen=True)
class Tolerances:
    # phase space
    cosphere: float = 1e-10
    energy: float = 1e-8
    symplectic: float = 1e-6
    # integrator: local error per unit time
    ode_tol: float = 1e-11
    # conjugacy: singular value counts as zero below conj_rel * block norm
    conj_rel: float = 1e-5
    conj_flag_factor: float = 10.0
    # expansion-rate floor
    lambda_floor: float = 0.05
    # power iteration
    power_rtol: float = 1e-6
    power_maxiter: int = 500
    # cutoff widths for second-microlocal cutoffs
    micro_eps: float = 0.1
    micro_delta: float = 0.25
    # R(h) window exponents
    delta1: float = 0.2
    delta2: float = 0.4

    def with_(self, **kw) -> "Tolerances":
        return replace(self, **kw)


DEFAULT = Tolerances()
