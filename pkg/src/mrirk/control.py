"""Time-step selection: error-based control and constant-step throttling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class StepControlConfig:
    """Controller and solver tolerances.

    ``eta_newt = kappa * eta_rk`` and ``eta_ls = kappa * eta_newt`` unless
    given explicitly.  ``dt`` is the target step of constant mode.
    """

    eta_rk: float = 1e-3
    kappa: float = 0.1
    nu: float = 0.9
    alpha: float = 1.5
    dt0: float = 1e-4
    mode: str = "adaptive"
    dt: float | None = None
    k_newt_max: int = 30
    k_ls_j: int = 30
    p_hat: int = 3
    eta_newt: float | None = None
    eta_ls: float | None = None

    def __post_init__(self):
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")
        if self.alpha <= 1:
            raise ValueError("alpha must exceed 1")
        if self.dt0 <= 0:
            raise ValueError("dt0 must be positive")
        if self.mode not in ("adaptive", "constant"):
            raise ValueError("mode is 'adaptive' or 'constant'")
        if self.mode == "constant" and self.dt is None:
            self.dt = self.dt0

    @property
    def newton_tol(self) -> float:
        return self.eta_newt if self.eta_newt is not None else self.kappa * self.eta_rk

    @property
    def linear_tol(self) -> float:
        return self.eta_ls if self.eta_ls is not None else self.kappa * self.newton_tol


def safety_factor(k: float, k_ls: float, config: StepControlConfig) -> float:
    """``nu (2 k_max + 1) / (2 k_max + max(k, k_ls / 2))``."""
    km = config.k_newt_max
    return config.nu * (2 * km + 1) / (2 * km + max(k, 0.5 * k_ls))


def error_ratio_dt(err: float, dt: float, config: StepControlConfig) -> float:
    """``dt (eta_rk / err)^{1/(p_hat+1)}``; infinite when ``err = 0``."""
    if err <= 0:
        return np.inf
    return dt * (config.eta_rk / err) ** (1.0 / (config.p_hat + 1))


def propose_next_dt(err: float, dt: float, nu_k: float, config: StepControlConfig) -> tuple[bool, float]:
    """Accept/reject decision and the next step size.

    An accepted step gives ``min(nu_k dt_new, alpha dt)``; a rejected step is
    retried with ``nu_k dt_new``.
    """
    accepted = bool(err <= config.eta_rk)
    dt_new = error_ratio_dt(err, dt, config)
    if accepted:
        return True, float(min(nu_k * dt_new, config.alpha * dt))
    return False, float(nu_k * dt_new)


def constant_mode_dt(dt: float, nu_k: float, config: StepControlConfig) -> float:
    """``min(alpha nu_k dt_n, dt_target)``: recovers the target after halvings."""
    return float(min(config.alpha * nu_k * dt, config.dt))
