"""Butcher tableaux of the implicit Runge-Kutta schemes.

Stages are written in the increment form ``z_i = g_i - U_0`` so the update is
``U_1 = U_0 + sum_i d_i z_i`` with ``d^T = b^T A^{-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction as Fr

import numpy as np

SQ2 = np.sqrt(2.0)
SQ3 = np.sqrt(3.0)
SQ6 = np.sqrt(6.0)

SDIRK2_GAMMA = (2.0 - SQ2) / 2.0
SDIRK2_GAMMA_ALT = (2.0 + SQ2) / 2.0
SDIRK3_GAMMA = (3.0 + SQ3) / 6.0


class UnknownSchemeError(ValueError):
    pass


class NoEmbeddedEstimateError(ValueError):
    """The scheme carries no embedded error estimator."""


@dataclass(frozen=True)
class ButcherTableau:
    name: str
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    p: int
    q: int
    gamma: float | None = None
    e: np.ndarray | None = None
    e0: float = 0.0
    p_hat: int | None = None
    stiffly_accurate: bool = False
    l_stable: bool = False

    @property
    def s(self) -> int:
        return len(self.b)

    @property
    def d(self) -> np.ndarray:
        """Update weights ``b^T A^{-1}``; exactly ``(0, ..., 0, 1)`` when stiffly accurate."""
        if self.stiffly_accurate:
            out = np.zeros(self.s)
            out[-1] = 1.0
            return out
        return np.linalg.solve(self.A.T, self.b)

    @property
    def diagonally_implicit(self) -> bool:
        return bool(np.all(np.triu(self.A, 1) == 0))

    @property
    def has_estimator(self) -> bool:
        return self.e is not None

    def stability(self, z):
        """Stability function ``R(z) = 1 + z b^T (I - z A)^{-1} 1``."""
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        one = np.ones(self.s)
        out = np.empty(z.shape, dtype=complex)
        for i, zi in np.ndenumerate(z):
            out[i] = 1.0 + zi * self.b @ np.linalg.solve(np.eye(self.s) - zi * self.A, one)
        return out.real if np.all(out.imag == 0) else out


def _f(rows):
    return np.array([[float(x) for x in r] for r in rows])


def _euler():
    return ButcherTableau("euler", np.array([[1.0]]), np.array([1.0]), np.array([1.0]), p=1, q=1,
                         gamma=1.0, stiffly_accurate=True, l_stable=True)


def _sdirk2(gamma: float, name: str, p: int, l_stable: bool):
    A = np.array([[gamma, 0.0], [1.0 - 2.0 * gamma, gamma]])
    return ButcherTableau(name, A, np.array([0.5, 0.5]), np.array([gamma, 1.0 - gamma]), p=p, q=1,
                          gamma=gamma, l_stable=l_stable)


def _sdirk4():
    A = _f([
        [Fr(1, 4), 0, 0, 0, 0],
        [Fr(1, 2), Fr(1, 4), 0, 0, 0],
        [Fr(17, 50), Fr(-1, 25), Fr(1, 4), 0, 0],
        [Fr(371, 1360), Fr(-137, 2720), Fr(15, 544), Fr(1, 4), 0],
        [Fr(25, 24), Fr(-49, 48), Fr(125, 16), Fr(-85, 12), Fr(1, 4)],
    ])
    c = np.array([0.25, 0.75, 0.55, 0.5, 1.0])
    e = np.array([23 / 6, 17 / 12, -125 / 4, 85 / 3, 1.0])
    return ButcherTableau("sdirk4", A, A[-1].copy(), c, p=4, q=1, gamma=0.25, e=e, p_hat=3,
                          stiffly_accurate=True, l_stable=True)


def _radau3():
    A = np.array([[5 / 12, -1 / 12], [3 / 4, 1 / 4]])
    return ButcherTableau("radau3", A, A[-1].copy(), np.array([1 / 3, 1.0]), p=3, q=2,
                          stiffly_accurate=True, l_stable=True)


RADAU5_K = 0.1


def _radau5():
    A = np.array([
        [(88 - 7 * SQ6) / 360, (296 - 169 * SQ6) / 1800, (-2 + 3 * SQ6) / 225],
        [(296 + 169 * SQ6) / 1800, (88 + 7 * SQ6) / 360, (-2 - 3 * SQ6) / 225],
        [(16 - SQ6) / 36, (16 + SQ6) / 36, 1 / 9],
    ])
    c = np.array([(4 - SQ6) / 10, (4 + SQ6) / 10, 1.0])
    # the 1/3 makes the estimate vanish on u' = const
    e = RADAU5_K * np.array([-13 - 7 * SQ6, -13 + 7 * SQ6, -1.0]) / 3.0
    return ButcherTableau("radau5", A, A[-1].copy(), c, p=5, q=3, e=e, e0=RADAU5_K, p_hat=3,
                          stiffly_accurate=True, l_stable=True)


SCHEMES = ("euler", "sdirk2", "sdirk3", "sdirk4", "radau3", "radau5")


def tableau(name: str, gamma: float | None = None) -> ButcherTableau:
    """Return the tableau for ``name``; ``gamma`` selects the sdirk2 branch."""
    key = name.lower()
    if key == "euler":
        return _euler()
    if key == "sdirk2":
        g = SDIRK2_GAMMA if gamma is None else float(gamma)
        if not (np.isclose(g, SDIRK2_GAMMA) or np.isclose(g, SDIRK2_GAMMA_ALT)):
            raise ValueError("sdirk2 needs gamma = (2 +- sqrt(2))/2")
        return _sdirk2(g, "sdirk2", p=2, l_stable=True)
    if key == "sdirk3":
        return _sdirk2(SDIRK3_GAMMA, "sdirk3", p=3, l_stable=False)
    if key == "sdirk4":
        return _sdirk4()
    if key == "radau3":
        return _radau3()
    if key == "radau5":
        return _radau5()
    raise UnknownSchemeError(f"unknown scheme {name!r}; choose from {', '.join(SCHEMES)}")
