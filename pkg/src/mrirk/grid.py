"""Nested dyadic grids, the multiscale transform and graded-tree adaptation.

The forest of ``N_R`` graded trees is stored level by level: level ``j`` is a
dense Cartesian array of ``N_R,x 2^j x N_R,y 2^j ...`` cells and the tree is
described by a boolean ``refined`` flag per cell (a refined cell owns its
``2^d`` children).  Every cell of every level carries a value; cells that are
not present in the tree hold the value predicted from the coarser level, i.e.
the reconstruction with vanishing details.  This gives the ghost values used
by the flux stencils for free.
"""

from __future__ import annotations

import csv
import gzip
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class GridStructureError(ValueError):
    """Raised when a tree violates the graded-tree or stencil requirements."""


# --------------------------------------------------------------------------
# cell addressing


@dataclass(frozen=True, order=True)
class CellId:
    """Address of a dyadic cell: root tree, level and position inside the root."""

    root: int
    level: int
    pos: tuple[int, ...]

    def parent(self) -> "CellId":
        if self.level == 0:
            raise GridStructureError("a root cell has no parent")
        return CellId(self.root, self.level - 1, tuple(k // 2 for k in self.pos))

    def children(self) -> list["CellId"]:
        return [
            CellId(self.root, self.level + 1, tuple(2 * k + s for k, s in zip(self.pos, shift)))
            for shift in itertools.product((0, 1), repeat=len(self.pos))
        ]


@dataclass
class MrConfig:
    """Multiresolution parameters: finest level, roots per direction, threshold."""

    max_level: int
    roots_per_dir: tuple[int, ...] = (1,)
    eta_mr: float = 1e-3
    prediction_order: int = 3
    margin: bool = True

    def __post_init__(self):
        self.roots_per_dir = tuple(int(r) for r in self.roots_per_dir)
        if self.max_level < 1:
            raise ValueError("max_level must be >= 1")
        if self.eta_mr < 0:
            raise ValueError("eta_mr must be non-negative")
        if self.prediction_order != 3:
            raise ValueError("only the third-order (r = 1) prediction is available")


# --------------------------------------------------------------------------
# point operators


def project(children: Sequence[float] | np.ndarray, volumes: Sequence[float] | np.ndarray | None = None):
    """Volume-weighted mean of the ``2^d`` children of a cell."""
    children = np.asarray(children, dtype=float)
    n = children.shape[0]
    if n & (n - 1) or n < 2:
        raise GridStructureError(f"projection needs 2^d children, got {n}")
    if volumes is None:
        return children.mean(axis=0)
    volumes = np.asarray(volumes, dtype=float)
    if volumes.shape[0] != n:
        raise GridStructureError("one volume per child is required")
    return np.tensordot(volumes, children, axes=(0, 0)) / volumes.sum()


def predict_1d(left, centre, right):
    """Children of a 1D cell from its three-cell stencil (exact for quadratics)."""
    slope = (np.asarray(left, dtype=float) - np.asarray(right, dtype=float)) / 8.0
    centre = np.asarray(centre, dtype=float)
    return centre + slope, centre - slope


def predict(stencil) -> np.ndarray:
    """Predict the ``2^d`` children from the ``3^d`` parent-level stencil.

    ``stencil`` has shape ``(3,)*d`` (optionally followed by component axes);
    the result has shape ``(2,)*d`` with the same trailing axes.  The operator
    is the tensor product of the 1D formula.
    """
    u = np.asarray(stencil, dtype=float)
    d = 0
    while d < u.ndim and u.shape[d] == 3:
        d += 1
    if d == 0:
        raise GridStructureError("prediction needs a complete 3^d stencil")
    for axis in range(d):
        left = np.take(u, 0, axis=axis)
        centre = np.take(u, 1, axis=axis)
        right = np.take(u, 2, axis=axis)
        lo, hi = predict_1d(left, centre, right)
        u = np.stack([lo, hi], axis=axis)
    return u


def compute_detail(actual, predicted):
    """Prediction error ``u - u_hat`` of a cell."""
    return np.asarray(actual, dtype=float) - np.asarray(predicted, dtype=float)


def level_threshold(level: int, config: MrConfig, dim: int | None = None) -> float:
    """Level-dependent threshold ``2^{d(j-J)/2} eta_MR``."""
    d = len(config.roots_per_dir) if dim is None else dim
    if not 0 <= level <= config.max_level:
        raise ValueError(f"level {level} outside [0, {config.max_level}]")
    return 2.0 ** (d * (level - config.max_level) / 2.0) * config.eta_mr


# --------------------------------------------------------------------------
# level-array kernels


def _extrapolated_neighbours(u: np.ndarray, axis: int):
    """Left/right neighbour arrays along ``axis`` with polynomial extension at the ends."""
    n = u.shape[axis]
    first = np.take(u, [0], axis=axis)
    last = np.take(u, [n - 1], axis=axis)
    if n >= 3:
        lo = 3 * first - 3 * np.take(u, [1], axis=axis) + np.take(u, [2], axis=axis)
        hi = 3 * last - 3 * np.take(u, [n - 2], axis=axis) + np.take(u, [n - 3], axis=axis)
    elif n == 2:
        lo = 2 * first - last
        hi = 2 * last - first
    else:
        lo, hi = first, last
    left = np.concatenate([lo, np.take(u, range(n - 1), axis=axis)], axis=axis)
    right = np.concatenate([np.take(u, range(1, n), axis=axis), hi], axis=axis)
    return left, right


def predict_level(u: np.ndarray, spatial_axes: Sequence[int]) -> np.ndarray:
    """Predict a whole finer level from a level array (tensor-product operator)."""
    for axis in spatial_axes:
        left, right = _extrapolated_neighbours(u, axis)
        slope = (left - right) / 8.0
        out_shape = list(u.shape)
        out_shape[axis] *= 2
        out = np.empty(out_shape)
        even = [slice(None)] * u.ndim
        odd = [slice(None)] * u.ndim
        even[axis] = slice(0, None, 2)
        odd[axis] = slice(1, None, 2)
        out[tuple(even)] = u + slope
        out[tuple(odd)] = u - slope
        u = out
    return u


def project_level(u: np.ndarray, spatial_axes: Sequence[int]) -> np.ndarray:
    """Average every group of ``2^d`` siblings of a level array."""
    for axis in spatial_axes:
        even = [slice(None)] * u.ndim
        odd = [slice(None)] * u.ndim
        even[axis] = slice(0, None, 2)
        odd[axis] = slice(1, None, 2)
        u = 0.5 * (u[tuple(even)] + u[tuple(odd)])
    return u


def _prediction_matrix_1d(n: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for k in range(n):
        if n >= 3:
            if k == 0:
                stencil = {0: 1 + 3 / 8, 1: -4 / 8, 2: 1 / 8}
            elif k == n - 1:
                stencil = {n - 1: 1 - 3 / 8, n - 2: 4 / 8, n - 3: -1 / 8}
            else:
                stencil = {k: 1.0, k - 1: 1 / 8, k + 1: -1 / 8}
        elif n == 2:
            stencil = {0: 1 + 1 / 4, 1: -1 / 4} if k == 0 else {1: 1 - 1 / 4, 0: 1 / 4}
        else:
            stencil = {0: 1.0}
        for col, w in stencil.items():
            # even child: centre + slope; odd child: centre - slope
            rows.append(2 * k)
            cols.append(col)
            vals.append(w)
            rows.append(2 * k + 1)
            cols.append(col)
            vals.append(2.0 - w if col == k else -w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * n, n))


def _kron_all(mats: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return sp.csr_matrix(out)


def _dilate(mask: np.ndarray) -> np.ndarray:
    """Union of the three-cell prediction windows of every flagged cell."""
    out = mask.copy()
    for axis in range(mask.ndim):
        n = mask.shape[axis]
        cur = out.copy()
        if n < 3:
            if cur.any():
                any_along = cur.any(axis=axis, keepdims=True)
                out = np.broadcast_to(any_along, cur.shape).copy()
            continue
        sl = lambda a, b: tuple(slice(a, b) if ax == axis else slice(None) for ax in range(mask.ndim))
        idx = lambda k: tuple(k if ax == axis else slice(None) for ax in range(mask.ndim))
        res = cur.copy()
        res[sl(1, None)] |= cur[sl(None, -1)]
        res[sl(None, -1)] |= cur[sl(1, None)]
        res[idx(2)] |= cur[idx(0)]
        res[idx(n - 3)] |= cur[idx(n - 1)]
        out = res
    return out


def _coarsen_any(mask: np.ndarray) -> np.ndarray:
    shape = []
    for n in mask.shape:
        shape.extend([n // 2, 2])
    return mask.reshape(shape).any(axis=tuple(range(1, 2 * mask.ndim, 2)))


def _upsample(mask: np.ndarray) -> np.ndarray:
    for axis in range(mask.ndim):
        mask = np.repeat(mask, 2, axis=axis)
    return mask


# --------------------------------------------------------------------------
# the forest of graded trees


@dataclass(frozen=True)
class GhostCell:
    """A cell synthesised by prediction so that a flux stencil is locally uniform."""

    cell: CellId
    values: np.ndarray


@dataclass
class FaceSet:
    """Interior faces on which fluxes are evaluated, one entry per face.

    ``side_a`` is the cell with the lower coordinate along ``axis``; both sides
    live on ``level`` (the finer level of the two neighbouring leaves).
    ``owner_*`` are the leaf indices receiving the flux; for a ghost side this
    is the parent leaf.
    """

    level: np.ndarray
    axis: np.ndarray
    side_a: np.ndarray
    side_b: np.ndarray
    owner_a: np.ndarray
    owner_b: np.ndarray
    area: np.ndarray
    spacing: np.ndarray
    midpoint: np.ndarray

    def __len__(self):
        return len(self.level)


@dataclass
class BoundaryFaceSet:
    """Leaf faces on the domain boundary (``normal`` is +1 or -1 along ``axis``)."""

    leaf: np.ndarray
    axis: np.ndarray
    normal: np.ndarray
    area: np.ndarray
    midpoint: np.ndarray


class GradedTreeGrid:
    """Forest of graded dyadic trees over a box-shaped domain.

    Parameters
    ----------
    max_level : int
        Finest level ``J``.
    roots_per_dir : tuple of int
        Number of root cells per direction; its length fixes the dimension.
    n_components : int
        Number of scalar fields ``m`` stored per cell.
    lower, upper : sequence of float
        Domain corners.
    refined : list of bool arrays, optional
        Refinement flags per level (``refined[J]`` must be all False).
        Defaults to the uniform finest grid.
    """

    def __init__(self, max_level, roots_per_dir, n_components=1, lower=None, upper=None, refined=None):
        self.max_level = int(max_level)
        self.roots_per_dir = tuple(int(r) for r in roots_per_dir)
        self.dim = len(self.roots_per_dir)
        self.n_components = int(n_components)
        self.lower = np.zeros(self.dim) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.ones(self.dim) if upper is None else np.asarray(upper, dtype=float)
        self.shapes = [tuple(r * 2**j for r in self.roots_per_dir) for j in range(self.max_level + 1)]
        if refined is None:
            refined = [np.ones(s, dtype=bool) for s in self.shapes[:-1]] + [np.zeros(self.shapes[-1], dtype=bool)]
        self.refined = [np.asarray(r, dtype=bool).copy() for r in refined]
        if len(self.refined) != self.max_level + 1 or self.refined[-1].any():
            raise GridStructureError("refined flags must cover levels 0..J with none at J")
        m = self.n_components
        self.values = [np.zeros((m,) + s) for s in self.shapes]
        self.details = [np.zeros((m,) + s) for s in self.shapes]

    # -- constructors -------------------------------------------------------

    @classmethod
    def uniform(cls, config: MrConfig, n_components=1, lower=None, upper=None, level=None):
        """Tree refined uniformly down to ``level`` (the finest level by default)."""
        level = config.max_level if level is None else level
        shapes = [tuple(r * 2**j for r in config.roots_per_dir) for j in range(config.max_level + 1)]
        refined = [np.full(s, j < level) for j, s in enumerate(shapes)]
        return cls(config.max_level, config.roots_per_dir, n_components, lower, upper, refined)

    def copy_structure(self, refined) -> "GradedTreeGrid":
        return GradedTreeGrid(self.max_level, self.roots_per_dir, self.n_components, self.lower, self.upper, refined)

    def copy(self) -> "GradedTreeGrid":
        g = self.copy_structure(self.refined)
        g.values = [v.copy() for v in self.values]
        g.details = [d.copy() for d in self.details]
        return g

    # -- structure ----------------------------------------------------------

    @property
    def spatial_axes(self):
        return tuple(range(1, self.dim + 1))

    def present(self, level: int) -> np.ndarray:
        if level == 0:
            return np.ones(self.shapes[0], dtype=bool)
        return _upsample(self.refined[level - 1])

    def leaf_mask(self, level: int) -> np.ndarray:
        return self.present(level) & ~self.refined[level]

    @cached_property
    def _leaf_arrays(self):
        levels, flats = [], []
        for j in range(self.max_level + 1):
            idx = np.flatnonzero(self.leaf_mask(j))
            levels.append(np.full(idx.size, j, dtype=np.int64))
            flats.append(idx)
        return np.concatenate(levels), np.concatenate(flats)

    @property
    def leaf_level(self) -> np.ndarray:
        return self._leaf_arrays[0]

    @property
    def leaf_flat(self) -> np.ndarray:
        return self._leaf_arrays[1]

    @property
    def n_leaves(self) -> int:
        return int(self.leaf_level.size)

    @cached_property
    def leaf_index(self) -> list[np.ndarray]:
        """Per-level arrays mapping a cell to its leaf number ``h_n`` (-1 if not a leaf)."""
        maps = [np.full(s, -1, dtype=np.int64) for s in self.shapes]
        for j in range(self.max_level + 1):
            sel = self.leaf_level == j
            maps[j].flat[self.leaf_flat[sel]] = np.flatnonzero(sel)
        return maps

    @cached_property
    def owner(self) -> list[np.ndarray]:
        """Leaf number covering each cell of each level (-1 under a refined cell)."""
        own = [self.leaf_index[0].copy()]
        for j in range(1, self.max_level + 1):
            inherited = _upsample(own[j - 1])
            cur = self.leaf_index[j].copy()
            mask = ~self.present(j)
            cur[mask] = inherited[mask]
            own.append(cur)
        return own

    def leaf_cells(self) -> list[CellId]:
        return [self.cell_id(j, f) for j, f in zip(self.leaf_level, self.leaf_flat)]

    def cell_id(self, level: int, flat: int) -> CellId:
        g = np.unravel_index(int(flat), self.shapes[level])
        scale = 2**level
        root_multi = tuple(int(k) // scale for k in g)
        root = int(np.ravel_multi_index(root_multi, self.roots_per_dir))
        return CellId(root, int(level), tuple(int(k) % scale for k in g))

    def flat_index(self, cell: CellId) -> int:
        root_multi = np.unravel_index(cell.root, self.roots_per_dir)
        g = tuple(int(r) * 2**cell.level + k for r, k in zip(root_multi, cell.pos))
        return int(np.ravel_multi_index(g, self.shapes[cell.level]))

    def is_present(self, cell: CellId) -> bool:
        return bool(self.present(cell.level).flat[self.flat_index(cell)])

    def is_leaf(self, cell: CellId) -> bool:
        return bool(self.leaf_mask(cell.level).flat[self.flat_index(cell)])

    def cell_value(self, cell: CellId) -> np.ndarray:
        return self.values[cell.level].reshape(self.n_components, -1)[:, self.flat_index(cell)].copy()

    def cell_detail(self, cell: CellId) -> np.ndarray:
        return self.details[cell.level].reshape(self.n_components, -1)[:, self.flat_index(cell)].copy()

    # -- geometry -----------------------------------------------------------

    def cell_width(self, level: int) -> np.ndarray:
        return (self.upper - self.lower) / np.asarray(self.shapes[level], dtype=float)

    def cell_volume(self, level: int) -> float:
        return float(np.prod(self.cell_width(level)))

    @property
    def domain_volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def centres(self, level: int) -> list[np.ndarray]:
        h = self.cell_width(level)
        axes = [self.lower[a] + (np.arange(n) + 0.5) * h[a] for a, n in enumerate(self.shapes[level])]
        return np.meshgrid(*axes, indexing="ij")

    @cached_property
    def leaf_centres(self) -> np.ndarray:
        out = np.empty((self.n_leaves, self.dim))
        for j in range(self.max_level + 1):
            sel = self.leaf_level == j
            if not sel.any():
                continue
            g = np.unravel_index(self.leaf_flat[sel], self.shapes[j])
            h = self.cell_width(j)
            for a in range(self.dim):
                out[sel, a] = self.lower[a] + (g[a] + 0.5) * h[a]
        return out

    @cached_property
    def leaf_widths(self) -> np.ndarray:
        return np.stack([self.cell_width(j) for j in self.leaf_level]) if self.n_leaves else np.empty((0, self.dim))

    @cached_property
    def leaf_volumes(self) -> np.ndarray:
        vol = np.array([self.cell_volume(j) for j in range(self.max_level + 1)])
        return vol[self.leaf_level]

    @property
    def leaf_weights(self) -> np.ndarray:
        """``|Omega_lambda| / |Omega|`` for the normalised l2 norm."""
        return self.leaf_volumes / self.domain_volume

    # -- leaf data ----------------------------------------------------------

    def leaf_values(self) -> np.ndarray:
        """State on the leaves, shape ``(N_L, m)``."""
        out = np.empty((self.n_leaves, self.n_components))
        for j in range(self.max_level + 1):
            sel = self.leaf_level == j
            if sel.any():
                out[sel] = self.values[j].reshape(self.n_components, -1)[:, self.leaf_flat[sel]].T
        return out

    def set_leaf_values(self, u: np.ndarray) -> None:
        u = np.asarray(u, dtype=float).reshape(self.n_leaves, self.n_components)
        for j in range(self.max_level + 1):
            sel = self.leaf_level == j
            if sel.any():
                self.values[j].reshape(self.n_components, -1)[:, self.leaf_flat[sel]] = u[sel].T

    # -- multiscale transform ----------------------------------------------

    def project_up(self) -> None:
        """Replace internal averages by the projection of their children."""
        for j in range(self.max_level - 1, -1, -1):
            proj = project_level(self.values[j + 1], self.spatial_axes)
            mask = np.broadcast_to(self.refined[j], self.values[j].shape)
            self.values[j] = np.where(mask, proj, self.values[j])

    def encode(self) -> None:
        """Multiscale transform: root averages plus details of every present cell."""
        self.project_up()
        self.details[0] = np.zeros_like(self.values[0])
        for j in range(1, self.max_level + 1):
            pred = predict_level(self.values[j - 1], self.spatial_axes)
            present = np.broadcast_to(self.present(j), pred.shape)
            self.details[j] = np.where(present, self.values[j] - pred, 0.0)

    def decode(self) -> None:
        """Inverse transform; absent cells receive their predicted values."""
        for j in range(1, self.max_level + 1):
            pred = predict_level(self.values[j - 1], self.spatial_axes)
            present = np.broadcast_to(self.present(j), pred.shape)
            self.values[j] = pred + np.where(present, self.details[j], 0.0)

    def reconstruct(self) -> None:
        """Fill internal cells by projection and absent cells by prediction."""
        self.project_up()
        for j in range(1, self.max_level + 1):
            pred = predict_level(self.values[j - 1], self.spatial_axes)
            present = np.broadcast_to(self.present(j), pred.shape)
            self.values[j] = np.where(present, self.values[j], pred)

    def finest_values(self) -> np.ndarray:
        """Reconstruction on the uniform finest grid, shape ``(m, *shape_J)``."""
        g = self.copy()
        g.reconstruct()
        return g.values[-1]

    # -- checks ---------------------------------------------------------------

    def check_graded(self) -> None:
        for j in range(1, self.max_level):
            need = _coarsen_any(_dilate(self.refined[j]))
            if (need & ~self.refined[j - 1]).any():
                raise GridStructureError(f"prediction stencil missing for refined cells at level {j}")

    def is_graded(self) -> bool:
        try:
            self.check_graded()
        except GridStructureError:
            return False
        return True

    # -- sparse reconstruction operators -----------------------------------

    @cached_property
    def _prediction_matrices(self) -> list[sp.csr_matrix | None]:
        mats = [None]
        for j in range(1, self.max_level + 1):
            mats.append(_kron_all([_prediction_matrix_1d(n) for n in self.shapes[j - 1]]))
        return mats

    @cached_property
    def _upward_operators(self) -> list[sp.csr_matrix]:
        """Map leaf values to the values of every present cell, level by level."""
        nl = self.n_leaves
        ops = [None] * (self.max_level + 1)
        for j in range(self.max_level, -1, -1):
            n = int(np.prod(self.shapes[j]))
            sel = self.leaf_level == j
            inj = sp.csr_matrix(
                (np.ones(sel.sum()), (self.leaf_flat[sel], np.flatnonzero(sel))), shape=(n, nl)
            )
            if j < self.max_level and self.refined[j].any():
                avg = _kron_all(
                    [sp.kron(sp.eye(s), sp.csr_matrix([[0.5, 0.5]]), format="csr") for s in self.shapes[j]]
                )
                keep = sp.diags(self.refined[j].ravel().astype(float))
                inj = inj + keep @ avg @ ops[j + 1]
            ops[j] = sp.csr_matrix(inj)
        return ops

    def reconstruction_rows(self, level: int, flat: np.ndarray) -> sp.csr_matrix:
        """Sparse rows expressing the values of ``flat`` cells at ``level`` in leaf values."""
        flat = np.asarray(flat, dtype=np.int64)
        nl = self.n_leaves
        if flat.size == 0:
            return sp.csr_matrix((0, nl))
        present = self.present(level).ravel()[flat]
        blocks = []
        order = []
        if present.any():
            blocks.append(self._upward_operators[level][flat[present]])
            order.append(np.flatnonzero(present))
        if (~present).any():
            if level == 0:
                raise GridStructureError("root cells are always present")
            pmat = self._prediction_matrices[level][flat[~present]]
            cols = np.unique(pmat.indices)
            coarse = self.reconstruction_rows(level - 1, cols)
            blocks.append(sp.csr_matrix(pmat[:, cols] @ coarse))
            order.append(np.flatnonzero(~present))
        stacked = sp.vstack(blocks, format="csr")
        perm = np.empty(flat.size, dtype=np.int64)
        perm[np.concatenate(order)] = np.arange(flat.size)
        return sp.csr_matrix(stacked[perm])

    # -- faces ----------------------------------------------------------------

    @cached_property
    def faces(self) -> FaceSet:
        """All interior faces, each evaluated once at the finer adjacent level."""
        parts = {k: [] for k in ("level", "axis", "a", "b", "oa", "ob", "area", "h", "mid")}
        for j in range(self.max_level + 1):
            ref = self.refined[j]
            leaf = self.leaf_mask(j)
            own = self.owner[j]
            h = self.cell_width(j)
            flat_ids = np.arange(int(np.prod(self.shapes[j]))).reshape(self.shapes[j])
            centres = self.centres(j)
            for a in range(self.dim):
                if self.shapes[j][a] < 2:
                    continue
                lo = tuple(slice(None, -1) if ax == a else slice(None) for ax in range(self.dim))
                hi = tuple(slice(1, None) if ax == a else slice(None) for ax in range(self.dim))
                active = ~ref[lo] & ~ref[hi] & (leaf[lo] | leaf[hi])
                if not active.any():
                    continue
                fa = flat_ids[lo][active]
                fb = flat_ids[hi][active]
                oa = own[lo][active]
                ob = own[hi][active]
                if (oa < 0).any() or (ob < 0).any():
                    raise GridStructureError(f"unfillable ghost at level {j}; tree is not graded")
                mid = np.stack([c[lo][active] for c in centres], axis=1)
                mid[:, a] += 0.5 * h[a]
                nf = fa.size
                parts["level"].append(np.full(nf, j))
                parts["axis"].append(np.full(nf, a))
                parts["a"].append(fa)
                parts["b"].append(fb)
                parts["oa"].append(oa)
                parts["ob"].append(ob)
                parts["area"].append(np.full(nf, np.prod(np.delete(h, a))))
                parts["h"].append(np.full(nf, h[a]))
                parts["mid"].append(mid)
        if not parts["level"]:
            empty_i = np.zeros(0, dtype=np.int64)
            return FaceSet(empty_i, empty_i, empty_i, empty_i, empty_i, empty_i, np.zeros(0), np.zeros(0), np.zeros((0, self.dim)))
        cat = {k: np.concatenate(v) for k, v in parts.items()}
        return FaceSet(cat["level"], cat["axis"], cat["a"], cat["b"], cat["oa"], cat["ob"], cat["area"], cat["h"], cat["mid"])

    @cached_property
    def boundary_faces(self) -> BoundaryFaceSet:
        leaves, axes, normals, areas, mids = [], [], [], [], []
        centres = self.leaf_centres
        widths = self.leaf_widths
        for j in range(self.max_level + 1):
            sel = np.flatnonzero(self.leaf_level == j)
            if sel.size == 0:
                continue
            g = np.unravel_index(self.leaf_flat[sel], self.shapes[j])
            for a in range(self.dim):
                for normal, edge in ((-1, 0), (1, self.shapes[j][a] - 1)):
                    on = sel[g[a] == edge]
                    if on.size == 0:
                        continue
                    mid = centres[on].copy()
                    mid[:, a] += 0.5 * normal * widths[on, a]
                    leaves.append(on)
                    axes.append(np.full(on.size, a))
                    normals.append(np.full(on.size, normal))
                    areas.append(np.prod(np.delete(widths[on], a, axis=1), axis=1))
                    mids.append(mid)
        return BoundaryFaceSet(
            np.concatenate(leaves), np.concatenate(axes), np.concatenate(normals), np.concatenate(areas), np.concatenate(mids)
        )

    @cached_property
    def face_operators(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Sparse maps from leaf values to the two sides of every face."""
        f = self.faces
        ga = sp.vstack(
            [self._rows_for(f.level, f.side_a, j) for j in range(self.max_level + 1)], format="csr"
        ) if len(f) else sp.csr_matrix((0, self.n_leaves))
        gb = sp.vstack(
            [self._rows_for(f.level, f.side_b, j) for j in range(self.max_level + 1)], format="csr"
        ) if len(f) else sp.csr_matrix((0, self.n_leaves))
        return ga, gb

    def _rows_for(self, levels, flats, j):
        sel = levels == j
        return self.reconstruction_rows(j, flats[sel])


def compression_ratio(grid: GradedTreeGrid) -> float:
    """Active leaves as a percentage of the finest uniform grid."""
    n_finest = int(np.prod(grid.shapes[-1]))
    return 100.0 * grid.n_leaves / n_finest


def fill_ghosts(grid: GradedTreeGrid, leaf: int) -> list[GhostCell]:
    """Ghost cells appearing in the flux stencils of ``leaf``.

    Values are the inter-grid predictions; the grid must hold a valid
    reconstruction (call :meth:`GradedTreeGrid.reconstruct` after changing
    leaf values).  Domain-boundary ghosts are mirror copies of the leaf and
    are not listed.
    """
    f = grid.faces
    touching = np.flatnonzero((f.owner_a == leaf) | (f.owner_b == leaf))
    ghosts = {}
    m = grid.n_components
    for i in touching:
        j = int(f.level[i])
        leafmap = grid.leaf_index[j].ravel()
        for side in (f.side_a[i], f.side_b[i]):
            if leafmap[side] < 0:
                cell = grid.cell_id(j, side)
                ghosts[cell] = GhostCell(cell, grid.values[j].reshape(m, -1)[:, side].copy())
    return [ghosts[k] for k in sorted(ghosts)]


# --------------------------------------------------------------------------
# adaptation


def grade(refined: list[np.ndarray]) -> list[np.ndarray]:
    """Close refinement flags under the tree and stencil-availability rules."""
    refined = [r.copy() for r in refined]
    for j in range(len(refined) - 2, 0, -1):
        refined[j - 1] |= _coarsen_any(_dilate(refined[j]))
    return refined


def _face_neighbours(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for axis in range(mask.ndim):
        lo = tuple(slice(None, -1) if ax == axis else slice(None) for ax in range(mask.ndim))
        hi = tuple(slice(1, None) if ax == axis else slice(None) for ax in range(mask.ndim))
        out[hi] |= mask[lo]
        out[lo] |= mask[hi]
    return out


def adapt(grid: GradedTreeGrid, config: MrConfig, scale: np.ndarray | None = None) -> GradedTreeGrid:
    """Threshold the details of ``grid`` and return the new graded grid.

    ``grid`` must hold leaf values; it is encoded in place.  Values of the new
    leaves come from the reconstruction with discarded details set to zero:
    merged cells get projected averages, new cells predicted ones.
    """
    grid.encode()
    d = grid.dim
    J = grid.max_level
    m = grid.n_components
    if scale is None:
        scale = np.abs(grid.leaf_values()).max(axis=0) if grid.n_leaves else np.ones(m)
    scale = np.where(np.asarray(scale, dtype=float) > 0, scale, 1.0).reshape((m,) + (1,) * d)

    if config.eta_mr == 0:
        new_refined = grade(grid.refined)
    else:
        new_refined = [np.zeros(s, dtype=bool) for s in grid.shapes]
        grow = 2.0 ** ((config.prediction_order + d) / 2.0)
        for j in range(1, J + 1):
            eps = level_threshold(j, config, d)
            mag = np.abs(grid.details[j] / scale).max(axis=0)
            mag = np.where(grid.present(j), mag, 0.0)
            keep = mag >= eps
            if not keep.any():
                continue
            if config.margin:
                keep = _face_neighbours(keep)
                if j < J:
                    new_refined[j] |= (mag > grow * eps) & grid.present(j)
            new_refined[j - 1] |= _coarsen_any(keep)
        new_refined[J][:] = False
        new_refined = grade(new_refined)

    new = grid.copy_structure(new_refined)
    # zero details outside the new tree, then rebuild every level
    for j in range(J + 1):
        present = np.broadcast_to(new.present(j), grid.details[j].shape)
        new.details[j] = np.where(present, grid.details[j], 0.0)
    new.values[0] = grid.values[0].copy()
    new.decode()
    new.project_up()
    return new


def threshold_approximation(grid: GradedTreeGrid, config: MrConfig) -> np.ndarray:
    """Finest-level reconstruction after adaptation (the operator ``M^-1 T M``)."""
    return adapt(grid.copy(), config).finest_values()


# --------------------------------------------------------------------------
# initialisation and I/O


def cell_averages(func: Callable[[np.ndarray], np.ndarray], lower, upper, shape, n_components, points=3):
    """Cell averages of ``func`` on a uniform grid by tensor Gauss-Legendre quadrature."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = len(shape)
    h = (upper - lower) / np.asarray(shape)
    xg, wg = np.polynomial.legendre.leggauss(points)
    acc = np.zeros((n_components,) + tuple(shape))
    for combo in itertools.product(range(points), repeat=d):
        coords = []
        for a in range(d):
            coords.append(lower[a] + (np.arange(shape[a]) + 0.5 + 0.5 * xg[combo[a]]) * h[a])
        mesh = np.meshgrid(*coords, indexing="ij")
        x = np.stack([c.ravel() for c in mesh], axis=1)
        val = np.asarray(func(x), dtype=float).reshape(-1, n_components).T.reshape((n_components,) + tuple(shape))
        acc += np.prod([wg[c] / 2.0 for c in combo]) * val
    return acc


def from_finest(config: MrConfig, finest: np.ndarray, lower=None, upper=None) -> GradedTreeGrid:
    """Uniform finest tree holding ``finest`` (shape ``(m, *shape_J)``)."""
    finest = np.asarray(finest, dtype=float)
    grid = GradedTreeGrid.uniform(config, finest.shape[0], lower, upper)
    grid.values[-1] = finest.copy()
    grid.project_up()
    return grid


def initialise(config: MrConfig, func, n_components, lower=None, upper=None, sweeps=None) -> GradedTreeGrid:
    """Sample ``func`` on the finest grid and adapt until the tree stops changing."""
    grid = GradedTreeGrid.uniform(config, n_components, lower, upper)
    grid.values[-1] = cell_averages(func, grid.lower, grid.upper, grid.shapes[-1], n_components)
    grid.project_up()
    if config.eta_mr == 0:
        return grid
    new = adapt(grid, config)
    # the first pass sees every detail, so one adaptation from the full grid suffices
    return new


def dump_csv(grid: GradedTreeGrid, path, values: np.ndarray | None = None, names: Sequence[str] | None = None) -> Path:
    """Write one record per leaf: root, level, pos, centre, width, state values."""
    path = Path(path)
    values = grid.leaf_values() if values is None else np.asarray(values).reshape(grid.n_leaves, -1)
    d = grid.dim
    names = list(names) if names else [f"u{c}" for c in range(values.shape[1])]
    header = (
        ["root", "level"]
        + [f"pos{a}" for a in range(d)]
        + [f"x{a}" for a in range(d)]
        + [f"h{a}" for a in range(d)]
        + names
    )
    opener = gzip.open if path.suffix == ".gz" else open
    path.parent.mkdir(parents=True, exist_ok=True)
    with opener(path, "wt", newline="") as fh:
        fh.write(
            f"# max_level={grid.max_level} roots={'x'.join(map(str, grid.roots_per_dir))} "
            f"lower={','.join(repr(float(v)) for v in grid.lower)} "
            f"upper={','.join(repr(float(v)) for v in grid.upper)}\n"
        )
        w = csv.writer(fh)
        w.writerow(header)
        centres = grid.leaf_centres
        widths = grid.leaf_widths
        for i, cell in enumerate(grid.leaf_cells()):
            w.writerow(
                [cell.root, cell.level, *cell.pos]
                + [repr(float(v)) for v in centres[i]]
                + [repr(float(v)) for v in widths[i]]
                + [repr(float(v)) for v in values[i]]
            )
    return path


def load_csv(path) -> tuple[GradedTreeGrid, list[str]]:
    """Rebuild a grid and its leaf state from :func:`dump_csv` output."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", newline="") as fh:
        meta = dict(item.split("=", 1) for item in fh.readline().lstrip("# ").split())
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    J = int(meta["max_level"])
    roots = tuple(int(r) for r in meta["roots"].split("x"))
    lower = [float(v) for v in meta["lower"].split(",")]
    upper = [float(v) for v in meta["upper"].split(",")]
    d = len(roots)
    names = header[2 + 3 * d :]
    shapes = [tuple(r * 2**j for r in roots) for j in range(J + 1)]
    refined = [np.zeros(s, dtype=bool) for s in shapes]
    cells = []
    for row in rows:
        cell = CellId(int(row[0]), int(row[1]), tuple(int(v) for v in row[2 : 2 + d]))
        cells.append(cell)
        c = cell
        while c.level > 0:
            c = c.parent()
            root_multi = np.unravel_index(c.root, roots)
            g = tuple(int(r) * 2**c.level + k for r, k in zip(root_multi, c.pos))
            if refined[c.level][g]:
                break
            refined[c.level][g] = True
    grid = GradedTreeGrid(J, roots, len(names), lower, upper, refined)
    vals = np.array([[float(v) for v in row[2 + 3 * d :]] for row in rows])
    order = {grid.flat_index(c) + (c.level << 40): i for i, c in enumerate(cells)}
    perm = np.array([order[f + (j << 40)] for j, f in zip(grid.leaf_level, grid.leaf_flat)])
    grid.set_leaf_values(vals[perm])
    grid.project_up()
    return grid, names


def resample(grid: GradedTreeGrid, level: int | None = None) -> tuple[list[np.ndarray], np.ndarray]:
    """Uniform reconstruction at ``level`` (finest by default) with cell centres."""
    level = grid.max_level if level is None else level
    g = grid.copy()
    g.reconstruct()
    return g.centres(level), g.values[level]
