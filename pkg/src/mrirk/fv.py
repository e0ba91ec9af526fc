"""Second-order finite volumes on the adapted grid and numerical Jacobians.

Fluxes are evaluated once per face on a locally uniform stencil: at a level
interface the coarse side is replaced by a predicted ghost cell and the flux
is computed at the finer level.  Its contribution to the coarse leaf is
weighted by the fine-face area over the coarse-cell volume, which keeps the
scheme exactly conservative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .grid import CellId, GradedTreeGrid
from .models import ModelSpec

DELTA_FLOOR = 1e-5
DELTA_ROUNDOFF = 1e-16


class NonFiniteModelError(FloatingPointError):
    pass


def weighted_norm(u: np.ndarray, weights: np.ndarray) -> float:
    """Normalised l2 norm: ``sqrt(sum_lambda w_lambda sum_c u_c,lambda^2)``.

    ``u`` is ``(N_L, m)`` or flat with leaf-major ordering; ``weights`` are the
    relative leaf volumes.
    """
    u = np.asarray(u)
    n = weights.shape[0]
    u2 = (u.reshape(n, -1) ** 2).sum(axis=1)
    return float(np.sqrt(np.dot(weights, u2)))


def diffusive_flux(u_left, u_right, D, h):
    """Two-point diffusive flux ``D (u_right - u_left) / h`` into the left cell."""
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0):
        raise ValueError("cell spacing must be positive")
    return D * (np.asarray(u_right) - np.asarray(u_left)) / h


def upwind_flux(u_left, u_right, v_normal):
    """First-order upwind convective flux into the left cell, ``-v u_upwind``."""
    v_normal = np.asarray(v_normal, dtype=float)
    upwind = np.where(v_normal > 0, u_left, u_right)
    return -v_normal * upwind


def perturbation(u) -> np.ndarray:
    """Finite-difference increment ``sqrt(1e-16 max(1e-5, |u|))``."""
    return np.sqrt(DELTA_ROUNDOFF * np.maximum(DELTA_FLOOR, np.abs(u)))


@dataclass
class FluxStencil:
    """One face flux seen from a leaf: who owns it and which cells it reads."""

    owner: int
    axis: int
    orientation: int
    cells: tuple[CellId, ...]
    area: float


class FvOperator:
    """Semi-discrete right-hand side ``F(U)`` of a model on a frozen grid.

    The velocity field, if any, is sampled at face midpoints at
    ``velocity_time`` and kept fixed until :meth:`freeze_velocity` is called
    again.  States are ``(N_L, m)`` arrays or their flat leaf-major view.
    """

    def __init__(self, grid: GradedTreeGrid, model: ModelSpec, velocity_time: float | None = None):
        if grid.n_components != model.m:
            raise ValueError("grid and model disagree on the number of components")
        self.grid = grid
        self.model = model
        self.m = model.m
        self.n_leaves = grid.n_leaves
        self.faces = grid.faces
        self.ga, self.gb = grid.face_operators
        vol = grid.leaf_volumes
        f = self.faces
        nf = len(f)
        self.weight_a = f.area / vol[f.owner_a] if nf else np.zeros(0)
        self.weight_b = f.area / vol[f.owner_b] if nf else np.zeros(0)
        nl = self.n_leaves
        self.scatter = sp.csr_matrix(
            (
                np.concatenate([self.weight_a, -self.weight_b]),
                (np.concatenate([f.owner_a, f.owner_b]), np.concatenate([np.arange(nf), np.arange(nf)])),
            ),
            shape=(nl, nf),
        )
        self.diffusion = np.asarray(model.diffusion, dtype=float)
        self.v_face = None
        self.boundary_coef = np.zeros(nl)
        if model.velocity is not None and velocity_time is not None:
            self.freeze_velocity(velocity_time)

    @property
    def size(self) -> int:
        return self.n_leaves * self.m

    @property
    def weights(self) -> np.ndarray:
        """Per-unknown weights of the normalised l2 norm (leaf-major)."""
        return np.repeat(self.grid.leaf_weights, self.m)

    def freeze_velocity(self, t: float) -> None:
        if self.model.velocity is None:
            return
        f = self.faces
        if len(f):
            v = self.model.velocity(f.midpoint, t)
            self.v_face = v[np.arange(len(f)), f.axis]
        else:
            self.v_face = np.zeros(0)
        bf = self.grid.boundary_faces
        vb = self.model.velocity(bf.midpoint, t)[np.arange(bf.leaf.size), bf.axis] * bf.normal
        coef = -bf.area * vb / self.grid.leaf_volumes[bf.leaf]
        self.boundary_coef = np.bincount(bf.leaf, weights=coef, minlength=self.n_leaves)

    # -- fluxes ---------------------------------------------------------------

    def face_values(self, u: np.ndarray):
        u = np.asarray(u).reshape(self.n_leaves, self.m)
        return self.ga @ u, self.gb @ u

    def face_fluxes(self, ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
        """Flux into side ``a`` of every face, shape ``(n_faces, m)``."""
        h = self.faces.spacing[:, None]
        phi = diffusive_flux(ua, ub, self.diffusion[None, :], h)
        if self.v_face is not None:
            phi = phi + upwind_flux(ua, ub, self.v_face[:, None])
        return phi

    def flux_divergence(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u).reshape(self.n_leaves, self.m)
        ua, ub = self.face_values(u)
        out = self.scatter @ self.face_fluxes(ua, ub)
        if self.v_face is not None:
            out = out + self.boundary_coef[:, None] * u
        return out

    def source(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.model.source(np.asarray(u).reshape(self.n_leaves, self.m)), dtype=float)

    def rhs(self, t: float, u: np.ndarray) -> np.ndarray:
        """Flat ``F(t, U)``; ``t`` is unused because the velocity is frozen."""
        u = np.asarray(u).reshape(self.n_leaves, self.m)
        return (self.flux_divergence(u) + self.source(u)).ravel()

    __call__ = rhs

    # -- Jacobian -----------------------------------------------------------

    def jacobian(self, u: np.ndarray, t: float | None = None) -> sp.csr_matrix:
        """Forward-difference Jacobian on the flux and source stencils.

        Each leaf component is perturbed by ``sqrt(1e-16 max(1e-5, |u|))``.
        A perturbed face flux is used for the owner on one side and, with the
        opposite sign, for the owner on the other side; ghost cells follow
        the perturbation of the leaves they are predicted from.
        """
        u = np.asarray(u, dtype=float).reshape(self.n_leaves, self.m)
        m = self.m
        nl = self.n_leaves
        delta = perturbation(u)
        rows, cols, vals = [], [], []

        f = self.faces
        if len(f):
            pattern = (abs(self.ga) + abs(self.gb)).tocoo()
            face, mu = pattern.row, pattern.col
            wa = np.asarray(self.ga[face, mu]).ravel()
            wb = np.asarray(self.gb[face, mu]).ravel()
            ua, ub = self.face_values(u)
            phi0 = self.face_fluxes(ua, ub)
            h = f.spacing[face]
            for c in range(m):
                dmu = delta[mu, c]
                pa = ua[face, c] + wa * dmu
                pb = ub[face, c] + wb * dmu
                phi = diffusive_flux(pa, pb, self.diffusion[c], h)
                if self.v_face is not None:
                    phi = phi + upwind_flux(pa, pb, self.v_face[face])
                dphi = (phi - phi0[face, c]) / dmu
                rows.append(f.owner_a[face] * m + c)
                cols.append(mu * m + c)
                vals.append(self.weight_a[face] * dphi)
                rows.append(f.owner_b[face] * m + c)
                cols.append(mu * m + c)
                vals.append(-self.weight_b[face] * dphi)
        if self.v_face is not None:
            leaf = np.arange(nl)
            for c in range(m):
                d = delta[:, c]
                dF = (self.boundary_coef * (u[:, c] + d) - self.boundary_coef * u[:, c]) / d
                rows.append(leaf * m + c)
                cols.append(leaf * m + c)
                vals.append(dF)

        w0 = self.source(u)
        leaf = np.arange(nl)
        for c2 in range(m):
            up = u.copy()
            up[:, c2] += delta[:, c2]
            dw = (self.source(up) - w0) / delta[:, c2][:, None]
            for c1 in range(m):
                rows.append(leaf * m + c1)
                cols.append(leaf * m + c2)
                vals.append(dw[:, c1])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        bad = ~np.isfinite(vals)
        if bad.any():
            r = int(rows[np.flatnonzero(bad)[0]])
            raise NonFiniteModelError(f"non-finite Jacobian entry at leaf {r // m}, component {r % m}")
        # ghost predictions couple one way only; store explicit zeros so the pattern is symmetric
        rows, cols = np.concatenate([rows, cols]), np.concatenate([cols, rows])
        vals = np.concatenate([vals, np.zeros_like(vals)])
        jac = sp.csr_matrix((vals, (rows, cols)), shape=(nl * m, nl * m))
        jac.sum_duplicates()
        jac.sort_indices()
        return jac

    # -- inspection -----------------------------------------------------------

    def stencils(self, leaf: int) -> list[FluxStencil]:
        f = self.faces
        out = []
        for i in np.flatnonzero((f.owner_a == leaf) | (f.owner_b == leaf)):
            j = int(f.level[i])
            cells = set()
            for g in (self.ga, self.gb):
                row = g[i]
                for mu in row.indices:
                    cells.add(self.grid.cell_id(self.grid.leaf_level[mu], self.grid.leaf_flat[mu]))
            cells.add(self.grid.cell_id(j, f.side_a[i]))
            cells.add(self.grid.cell_id(j, f.side_b[i]))
            orientation = 1 if f.owner_a[i] == leaf else -1
            out.append(FluxStencil(leaf, int(f.axis[i]), orientation, tuple(sorted(cells)), float(f.area[i])))
        return out


def eval_rhs(grid: GradedTreeGrid, u: np.ndarray, model: ModelSpec, t: float) -> np.ndarray:
    """One-shot ``F(U)`` as an ``(N_L, m)`` array, velocity sampled at ``t``."""
    op = FvOperator(grid, model, t if model.velocity is not None else None)
    return op.rhs(t, u).reshape(grid.n_leaves, model.m)


def assemble_jacobian(grid: GradedTreeGrid, u: np.ndarray, model: ModelSpec, t: float) -> sp.csr_matrix:
    op = FvOperator(grid, model, t if model.velocity is not None else None)
    return op.jacobian(u, t)


def write_matrix_market(path, matrix, comment: str = "") -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)


def read_matrix_market(path) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(str(path)))
