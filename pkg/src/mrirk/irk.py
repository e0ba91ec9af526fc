"""Implicit Runge-Kutta steps solved by simplified Newton iterations.

The stage unknowns are the increments ``z_i = g_i - U_0``.  Fully implicit
schemes solve all ``s`` stages at once with the block matrix
``dt^{-1} I - A (x) J0``; SDIRK schemes solve stage by stage with
``(dt gamma)^{-1} I - J0``.  The Jacobian ``J0`` is frozen at ``(t_0, U_0)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import (
    DirectSolver,
    GmresIlutSolver,
    LinearSolverError,
    StageSolver,
    ZeroPivotError,
    assemble_stage_matrix,
    rescale_stage_matrix,
)
from .tableaux import ButcherTableau, NoEmbeddedEstimateError

THETA_SCALE_FLOOR = 1e-10


class Outcome(enum.Enum):
    CONVERGED = "converged"
    HALVE = "halve_timestep"
    DIVERGED = "diverged"


class NewtonDivergence(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class NewtonOptions:
    eta_newt: float = 1e-4
    eta_ls: float = 1e-5
    k_max: int = 30
    k_ls_j: int = 30
    max_halvings: int = 8
    max_refreshes: int = 1


@dataclass
class NewtonReport:
    """Telemetry of one Newton solve (or of a whole step, when merged).

    ``iterations`` is the number of corrections needed; the final, small
    increment that certifies convergence is not counted unless it is the
    only one.
    """

    iterations: int = 0
    stage_iterations: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    rates: list = field(default_factory=list)
    outcome: Outcome = Outcome.CONVERGED
    ls_iterations: list = field(default_factory=list)
    jac_refreshes: int = 0
    reason: str = ""

    @property
    def max_ls(self) -> int:
        return max(self.ls_iterations, default=0)

    @property
    def max_stage_iterations(self) -> int:
        return max(self.stage_iterations, default=self.iterations)

    def merge(self, other: "NewtonReport") -> None:
        """Fold a stage report into a step report: iterations add up."""
        self.iterations += other.iterations
        self.stage_iterations.append(other.iterations)
        self.increments += other.increments
        self.rates += other.rates
        self.ls_iterations += other.ls_iterations
        self.jac_refreshes += other.jac_refreshes
        if other.outcome is not Outcome.CONVERGED:
            self.outcome = other.outcome
            self.reason = other.reason


def halving_rule(theta: float, increment: float, k: int, opts: NewtonOptions) -> bool:
    """True if the rate or the extrapolated final increment calls for a smaller step.

    At ``k = 0`` the rate is only the a-priori guess ``||dZ^0|| / (2 max|U_0|)``
    and only the ``theta >= 1`` test is applied.
    """
    if theta >= 1.0:
        return True
    if k == 0:
        return False
    return theta ** (opts.k_max - k - 1) * increment >= opts.eta_newt


def newton_drive(system, opts: NewtonOptions) -> tuple[np.ndarray, NewtonReport]:
    """Simplified Newton loop shared by both step procedures.

    ``system`` provides ``z0``, ``scale`` (max ``|U_0|``), ``residual(z)``,
    ``solve(r, tol) -> (dz, iters)``, ``norm(v)`` and optionally
    ``refresh(z)`` which rebuilds the iteration matrix.
    """
    z = np.array(system.z0, dtype=float, copy=True)
    rep = NewtonReport()
    scale = max(float(system.scale), THETA_SCALE_FLOOR)
    prev = None
    refreshes = 0
    for k in range(opts.k_max):
        r = system.residual(z)
        if not np.all(np.isfinite(r)):
            rep.outcome, rep.reason = Outcome.HALVE, "non-finite residual"
            return z, rep
        try:
            dz, kls = system.solve(r, opts.eta_ls)
        except (LinearSolverError, ZeroPivotError) as exc:
            rep.outcome, rep.reason = Outcome.HALVE, str(exc)
            return z, rep
        rep.ls_iterations.append(int(kls))
        z += dz
        nrm = system.norm(dz)
        rep.increments.append(nrm)
        theta = nrm / prev if k > 0 else nrm / (2.0 * scale)
        rep.rates.append(theta)
        if nrm <= opts.eta_newt:
            rep.iterations = max(k, 1)
            rep.outcome = Outcome.CONVERGED
            return z, rep
        if not np.isfinite(nrm) or halving_rule(theta, nrm, k, opts):
            rep.iterations = k + 1
            rep.outcome = Outcome.HALVE
            rep.reason = f"rate {theta:.3g} at iteration {k}"
            return z, rep
        prev = nrm
        if kls > opts.k_ls_j and refreshes < opts.max_refreshes and hasattr(system, "refresh"):
            system.refresh(z)
            refreshes += 1
            rep.jac_refreshes += 1
    rep.iterations = opts.k_max
    rep.outcome = Outcome.HALVE
    rep.reason = "iteration limit reached"
    return z, rep


@dataclass
class StepResult:
    U1: np.ndarray
    z: np.ndarray
    dt: float
    report: NewtonReport
    halvings: int = 0
    F0: np.ndarray | None = None


class IrkStepper:
    """One-step integrator with a frozen Jacobian and reusable stage matrix.

    Parameters
    ----------
    tab : ButcherTableau
    rhs : callable ``(t, U) -> F`` on flat arrays
    jacobian : callable ``U -> csr_matrix``
    solver : StageSolver
    weights : per-unknown weights of the norm (defaults to uniform ``1/n``)
    """

    def __init__(self, tab: ButcherTableau, rhs: Callable, jacobian: Callable, solver: StageSolver | None = None,
                 opts: NewtonOptions | None = None, weights=None):
        self.tab = tab
        self.rhs = rhs
        self.jacobian = jacobian
        self.solver = solver if solver is not None else GmresIlutSolver()
        self.opts = opts if opts is not None else NewtonOptions()
        self.weights = weights
        self.sdirk = tab.diagonally_implicit
        self._matrix = None
        self._matrix_dt = None
        self.J0 = None
        self.U0 = None
        self.t0 = None
        self.n_jac = 0

    # -- state ----------------------------------------------------------------

    def norm(self, v) -> float:
        v = np.asarray(v)
        if self.weights is None:
            return float(np.sqrt(np.mean(v.reshape(-1, self.U0.size) ** 2, axis=1).sum()))
        v2 = v.reshape(-1, self.U0.size) ** 2
        return float(np.sqrt((v2 @ self.weights).sum()))

    def prepare(self, U0, t0: float, J0=None) -> None:
        """Freeze the Jacobian at ``(t0, U0)``."""
        self.U0 = np.asarray(U0, dtype=float).ravel().copy()
        self.t0 = float(t0)
        self.J0 = J0 if J0 is not None else self.jacobian(self.U0)
        self.n_jac += J0 is None
        self._matrix = None

    def _set_matrix(self, dt: float) -> None:
        g = self.tab.A[0, 0] if self.sdirk else 1.0
        if self._matrix is None:
            self._matrix = assemble_stage_matrix(self.J0, self.tab.A, dt, "diagonal" if self.sdirk else "full")
        elif dt != self._matrix_dt:
            rescale_stage_matrix(self._matrix, self._matrix_dt, dt, g)
        else:
            return
        self._matrix_dt = dt
        self.solver.factor(self._matrix)

    def _refresh(self, U, dt: float) -> None:
        self.J0 = self.jacobian(U)
        self.n_jac += 1
        self._matrix = None
        self._set_matrix(dt)

    # -- steps ----------------------------------------------------------------

    def try_step(self, dt: float) -> StepResult:
        """One attempt at ``dt``; the report outcome tells whether to halve."""
        try:
            self._set_matrix(dt)
        except (LinearSolverError, ZeroPivotError) as exc:
            # a singular iteration matrix is handled like a failed Newton solve
            self._matrix = None
            rep = NewtonReport(outcome=Outcome.HALVE, reason=str(exc))
            return StepResult(self.U0.copy(), np.zeros((self.tab.s, self.U0.size)), dt, rep)
        if self.sdirk:
            return self._sdirk(dt)
        return self._fully_implicit(dt)

    def step(self, dt: float) -> StepResult:
        """Step with Newton-forced halvings, at most ``opts.max_halvings`` in a row."""
        halvings = 0
        while True:
            res = self.try_step(dt)
            if res.report.outcome is Outcome.CONVERGED:
                res.halvings = halvings
                return res
            if halvings >= self.opts.max_halvings:
                res.report.outcome = Outcome.DIVERGED
                raise NewtonDivergence(
                    f"Newton failed after {halvings} halvings at t={self.t0:.6g}, dt={dt:.3e}: {res.report.reason}",
                    res.report)
            halvings += 1
            dt *= 0.5

    def _fully_implicit(self, dt: float) -> StepResult:
        tab, n = self.tab, self.U0.size
        s = tab.s
        U0, t0 = self.U0, self.t0
        stepper = self

        class System:
            z0 = np.zeros(s * n)
            scale = np.max(np.abs(U0)) if n else 0.0

            def residual(self, z):
                Z = z.reshape(s, n)
                F = np.stack([stepper.rhs(t0 + tab.c[i] * dt, U0 + Z[i]) for i in range(s)])
                return (-Z / dt + tab.A @ F).ravel()

            def solve(self, r, tol):
                return stepper.solver.solve(r, tol)

            def norm(self, v):
                return stepper.norm(v)

            def refresh(self, z):
                stepper._refresh(U0 + z.reshape(s, n)[-1], dt)

        z, rep = newton_drive(System(), self.opts)
        Z = z.reshape(s, n)
        U1 = U0 + tab.d @ Z
        return StepResult(U1, Z, dt, rep)

    def _sdirk(self, dt: float) -> StepResult:
        tab, n = self.tab, self.U0.size
        s, g = tab.s, tab.A[0, 0]
        U0, t0 = self.U0, self.t0
        stepper = self
        Z = np.zeros((s, n))
        Fs = np.zeros((s, n))
        rep = NewtonReport()
        for i in range(s):
            explicit = (tab.A[i, :i] / g) @ Fs[:i] if i else np.zeros(n)
            ci = tab.c[i]

            class Stage:
                z0 = Z[i - 1] if i else np.zeros(n)
                scale = np.max(np.abs(U0)) if n else 0.0

                def residual(self, z):
                    return -z / (dt * g) + stepper.rhs(t0 + ci * dt, U0 + z) + explicit

                def solve(self, r, tol):
                    return stepper.solver.solve(r, tol)

                def norm(self, v):
                    return stepper.norm(v)

                def refresh(self, z):
                    stepper._refresh(U0 + z, dt)

            z, srep = newton_drive(Stage(), self.opts)
            rep.merge(srep)
            if srep.outcome is not Outcome.CONVERGED:
                return StepResult(U0.copy(), Z, dt, rep)
            Z[i] = z
            # stage derivative from the stage relation, not a fresh evaluation
            Fs[i] = (z / dt - tab.A[i, :i] @ Fs[:i]) / g
        U1 = U0 + tab.d @ Z
        return StepResult(U1, Z, dt, rep)

    # -- error --------------------------------------------------------------

    def estimate_error(self, res: StepResult, F0=None) -> float:
        if not self.tab.has_estimator:
            raise NoEmbeddedEstimateError(f"{self.tab.name} has no embedded estimator")
        if self.tab.e0 and F0 is None:
            F0 = self.rhs(self.t0, self.U0)
        return estimate_error(self.tab, res.dt, F0, res.z, self.norm)


def estimate_error(tab: ButcherTableau, dt: float, F0, z, norm=None) -> float:
    """Embedded error ``|| e0 dt F0 + sum_i e_i z_i ||``."""
    if not tab.has_estimator:
        raise NoEmbeddedEstimateError(f"{tab.name} has no embedded estimator")
    z = np.asarray(z, dtype=float)
    diff = tab.e @ z
    if tab.e0:
        diff = diff + tab.e0 * dt * np.asarray(F0, dtype=float).ravel()
    if norm is None:
        return float(np.sqrt(np.mean(diff**2)))
    return norm(diff)


def _one_step(U0, t0, dt, tab, rhs, jacobian, lin_solver, opts, weights):
    st = IrkStepper(tab, rhs, jacobian, lin_solver or DirectSolver(), opts, weights)
    st.prepare(U0, t0)
    res = st.try_step(dt)
    if res.report.outcome is not Outcome.CONVERGED:
        return None, res.report
    return res.U1, res.report


def step_fully_implicit(U0, t0, dt, tab, rhs, jacobian, lin_solver=None, opts=None, weights=None):
    """One fully implicit step; returns ``(U1, report)`` or ``(None, report)`` if halving is needed."""
    if tab.diagonally_implicit and tab.s > 1:
        raise ValueError("use step_sdirk for diagonally implicit tableaux")
    return _one_step(U0, t0, dt, tab, rhs, jacobian, lin_solver, opts, weights)


def step_sdirk(U0, t0, dt, tab, rhs, jacobian, lin_solver=None, opts=None, weights=None):
    """One stage-wise SDIRK step; same return convention as :func:`step_fully_implicit`."""
    if not tab.diagonally_implicit:
        raise ValueError("tableau is not diagonally implicit")
    return _one_step(U0, t0, dt, tab, rhs, jacobian, lin_solver, opts, weights)
