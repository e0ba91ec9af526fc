"""Sparse linear algebra for the Newton systems.

Matrices are :class:`scipy.sparse.csr_matrix`.  This module adds the stage
matrix assembly, a threshold incomplete LU factorisation (ILUT) and a
restarted, right-preconditioned GMRES.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

CsrMatrix = sp.csr_matrix


class LinearSolverError(RuntimeError):
    """GMRES did not reach the tolerance; carries the best iterate."""

    def __init__(self, msg, x=None, residual=np.nan, iterations=0):
        super().__init__(msg)
        self.x = x
        self.residual = residual
        self.iterations = iterations


class ZeroPivotError(ArithmeticError):
    def __init__(self, row):
        super().__init__(f"zero pivot in ILUT at row {row}")
        self.row = row


def as_csr(a) -> sp.csr_matrix:
    m = sp.csr_matrix(a, dtype=float)
    m.sum_duplicates()
    m.sort_indices()
    return m


# ---------------------------------------------------------------------------
# stage matrices


def assemble_stage_matrix(J0, A, dt: float, mode: str = "full") -> sp.csr_matrix:
    """Newton matrix of one implicit Runge-Kutta step.

    ``mode="full"`` gives the stage-major block matrix
    ``dt^{-1} I - A (x) J0``; ``mode="diagonal"`` gives the single SDIRK block
    ``(dt gamma)^{-1} I - J0`` with ``gamma = A[0, 0]``.
    """
    J0 = as_csr(J0)
    if J0.shape[0] != J0.shape[1]:
        raise ValueError("Jacobian must be square")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("Butcher matrix must be square")
    n = J0.shape[0]
    if mode == "full":
        M = sp.kron(sp.csr_matrix(-A), J0, format="csr") + sp.identity(A.shape[0] * n, format="csr") / dt
    elif mode == "diagonal":
        M = sp.identity(n, format="csr") / (dt * A[0, 0]) - J0
    else:
        raise ValueError(f"unknown stage matrix mode {mode!r}")
    return as_csr(M)


def shift_diagonal(M: sp.csr_matrix, delta: float) -> sp.csr_matrix:
    """Add ``delta`` to the stored diagonal of ``M`` in place (pattern unchanged)."""
    n = M.shape[0]
    rows = np.repeat(np.arange(n), np.diff(M.indptr))
    on_diag = np.flatnonzero(M.indices == rows)
    if on_diag.size != n:
        missing = np.setdiff1d(np.arange(n), rows[on_diag])
        raise ValueError(f"row {missing[0]} has no stored diagonal entry")
    M.data[on_diag] += delta
    return M


def rescale_stage_matrix(M: sp.csr_matrix, dt_old: float, dt_new: float, gamma: float = 1.0):
    """Change the time step of an assembled stage matrix by touching its diagonal only."""
    return shift_diagonal(M, 1.0 / (dt_new * gamma) - 1.0 / (dt_old * gamma))


# ---------------------------------------------------------------------------
# ILUT


@njit(cache=True)
def _ilut_kernel(n, indptr, indices, data, fill, tau_rel):
    cap = max(16, 2 * data.size + 2 * n * fill)
    lp = np.zeros(n + 1, np.int64)
    li = np.empty(cap, np.int64)
    lv = np.empty(cap)
    up = np.zeros(n + 1, np.int64)
    ui = np.empty(cap, np.int64)
    uv = np.empty(cap)
    udiag = np.zeros(n)
    w = np.zeros(n)
    pos = -np.ones(n, np.int64)
    lc = np.empty(n, np.int64)
    uc = np.empty(n, np.int64)
    nl_tot = 0
    nu_tot = 0
    for i in range(n):
        nl = 0
        nu = 1
        uc[0] = i
        pos[i] = 0
        w[i] = 0.0
        norm = 0.0
        cnt = 0
        for q in range(indptr[i], indptr[i + 1]):
            j = indices[q]
            norm += abs(data[q])
            cnt += 1
            if j == i:
                w[i] += data[q]
            elif pos[j] == -1:
                pos[j] = 0
                w[j] = data[q]
                if j < i:
                    lc[nl] = j
                    nl += 1
                else:
                    uc[nu] = j
                    nu += 1
            else:
                w[j] += data[q]
        nl0 = nl
        nu0 = nu - 1
        tau = tau_rel * norm / max(cnt, 1)
        # eliminate lower entries in increasing column order
        t = 0
        while t < nl:
            best = t
            for r in range(t + 1, nl):
                if lc[r] < lc[best]:
                    best = r
            tmp = lc[t]
            lc[t] = lc[best]
            lc[best] = tmp
            k = lc[t]
            t += 1
            wk = w[k] / udiag[k]
            if abs(wk) < tau or wk == 0.0:
                w[k] = 0.0
                continue
            w[k] = wk
            for q in range(up[k], up[k + 1]):
                j = ui[q]
                if j == k:
                    continue
                if pos[j] == -1:
                    pos[j] = 0
                    w[j] = -wk * uv[q]
                    if j < i:
                        lc[nl] = j
                        nl += 1
                    else:
                        uc[nu] = j
                        nu += 1
                else:
                    w[j] -= wk * uv[q]
        # lower part: keep the nl0 + fill largest entries above tau
        keep = np.empty(nl, np.int64)
        mags = np.empty(nl)
        nk = 0
        for r in range(nl):
            j = lc[r]
            if w[j] != 0.0 and abs(w[j]) >= tau:
                keep[nk] = j
                mags[nk] = -abs(w[j])
                nk += 1
        order = np.argsort(mags[:nk])
        lim = min(nk, nl0 + fill)
        if nl_tot + lim > li.size:
            grow = max(li.size, lim)
            li = np.concatenate((li, np.empty(grow, np.int64)))
            lv = np.concatenate((lv, np.empty(grow)))
        for r in range(lim):
            j = keep[order[r]]
            li[nl_tot] = j
            lv[nl_tot] = w[j]
            nl_tot += 1
        lp[i + 1] = nl_tot
        # upper part: diagonal first, then the nu0 + fill largest
        d = w[i]
        if d == 0.0 or not np.isfinite(d):
            return lp, li, lv, up, ui, uv, udiag, i
        keep = np.empty(nu, np.int64)
        mags = np.empty(nu)
        nk = 0
        for r in range(1, nu):
            j = uc[r]
            if w[j] != 0.0 and abs(w[j]) >= tau:
                keep[nk] = j
                mags[nk] = -abs(w[j])
                nk += 1
        order = np.argsort(mags[:nk])
        lim = min(nk, nu0 + fill)
        if nu_tot + lim + 1 > ui.size:
            grow = max(ui.size, lim + 1)
            ui = np.concatenate((ui, np.empty(grow, np.int64)))
            uv = np.concatenate((uv, np.empty(grow)))
        ui[nu_tot] = i
        uv[nu_tot] = d
        nu_tot += 1
        udiag[i] = d
        for r in range(lim):
            j = keep[order[r]]
            ui[nu_tot] = j
            uv[nu_tot] = w[j]
            nu_tot += 1
        up[i + 1] = nu_tot
        # reset work row
        for r in range(nl):
            w[lc[r]] = 0.0
            pos[lc[r]] = -1
        for r in range(nu):
            w[uc[r]] = 0.0
            pos[uc[r]] = -1
    return lp, li[:nl_tot], lv[:nl_tot], up, ui[:nu_tot], uv[:nu_tot], udiag, -1


@njit(cache=True)
def _ilu_solve(lp, li, lv, up, ui, uv, v):
    n = v.size
    y = v.copy()
    for i in range(n):
        s = y[i]
        for q in range(lp[i], lp[i + 1]):
            s -= lv[q] * y[li[q]]
        y[i] = s
    for i in range(n - 1, -1, -1):
        s = y[i]
        lo = up[i]
        for q in range(lo + 1, up[i + 1]):
            s -= uv[q] * y[ui[q]]
        y[i] = s / uv[lo]
    return y


class IlutPrecond:
    """ILUT factors: unit lower ``L`` (diagonal implicit) and upper ``U``.

    Rows of ``U`` store the diagonal first.
    """

    def __init__(self, lp, li, lv, up, ui, uv, fill, drop):
        self.lp, self.li, self.lv = lp, li, lv
        self.up, self.ui, self.uv = up, ui, uv
        self.fill = fill
        self.drop = drop
        self.n = lp.size - 1

    @property
    def L(self) -> sp.csr_matrix:
        n = self.n
        return sp.csr_matrix((self.lv, self.li, self.lp), shape=(n, n)) + sp.identity(n, format="csr")

    @property
    def U(self) -> sp.csr_matrix:
        n = self.n
        m = sp.csr_matrix((self.uv, self.ui, self.up), shape=(n, n))
        m.sort_indices()
        return m

    @property
    def nnz(self) -> int:
        return int(self.lv.size + self.uv.size)

    def apply(self, v) -> np.ndarray:
        v = np.ascontiguousarray(v, dtype=float)
        return _ilu_solve(self.lp, self.li, self.lv, self.up, self.ui, self.uv, v)

    __call__ = apply


def ilut_factor(A, fill: int = 10, drop: float = 1e-3) -> IlutPrecond:
    """Threshold incomplete LU without pivoting.

    ``fill`` is the number of entries kept per row in each factor beyond the
    row's original count; ``drop`` is relative to the mean absolute value of
    the row.  ``drop = inf`` keeps the diagonal only (Jacobi).
    """
    A = as_csr(A)
    n = A.shape[0]
    out = _ilut_kernel(n, A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data, int(fill), float(drop))
    lp, li, lv, up, ui, uv, _, bad = out
    if bad >= 0:
        raise ZeroPivotError(int(bad))
    return IlutPrecond(lp, li, lv, up, ui, uv, fill, drop)


def ilut_with_fallback(A, fill: int = 10, drop: float = 1e-3, retries: int = 2) -> IlutPrecond:
    """ILUT, retrying with the drop tolerance divided by 10 on a zero pivot."""
    for attempt in range(retries + 1):
        try:
            return ilut_factor(A, fill, drop)
        except ZeroPivotError:
            if attempt == retries:
                raise
            drop = drop / 10.0 if np.isfinite(drop) else 1e-1


def apply(prec: IlutPrecond, v) -> np.ndarray:
    return prec.apply(v)


# ---------------------------------------------------------------------------
# GMRES


def gmres(A, b, precond=None, tol: float = 1e-8, max_iter: int = 1000, restart: int = 30, x0=None):
    """Restarted GMRES with right preconditioning and modified Gram-Schmidt.

    Stops when ``||b - A x|| <= tol ||b||``.

    Returns
    -------
    x : ndarray
    iterations : int
        Total number of Arnoldi steps.

    Raises
    ------
    LinearSolverError
        If ``max_iter`` steps do not reach the tolerance.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    matvec = A.matvec if hasattr(A, "matvec") else (lambda v: A @ v)
    M = precond if precond is not None else (lambda v: v)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if not np.isfinite(bnorm):
        raise ValueError("right-hand side is not finite")
    if bnorm == 0.0:
        return np.zeros(n), 0
    target = tol * bnorm
    total = 0
    r = b - matvec(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    while True:
        if beta <= target:
            return x, total
        if total >= max_iter:
            raise LinearSolverError(
                f"GMRES stalled at relative residual {beta / bnorm:.3e} after {total} iterations",
                x=x, residual=beta / bnorm, iterations=total)
        m = min(restart, max_iter - total)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_used = 0
        for k in range(m):
            Z[k] = M(V[k])
            w = matvec(Z[k])
            for i in range(k + 1):
                H[i, k] = np.dot(w, V[i])
                w = w - H[i, k] * V[i]
            H[k + 1, k] = np.linalg.norm(w)
            if H[k + 1, k] > 0:
                V[k + 1] = w / H[k + 1, k]
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            if denom == 0.0:
                cs[k], sn[k] = 1.0, 0.0
            else:
                cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_used = k + 1
            total += 1
            if abs(g[k + 1]) <= target or H[k, k] == 0.0:
                break
        y = np.linalg.solve(np.triu(H[:k_used, :k_used]), g[:k_used]) if k_used else np.zeros(0)
        x = x + y @ Z[:k_used]
        r = b - matvec(x)
        new_beta = np.linalg.norm(r)
        if new_beta > target and k_used and new_beta >= beta * (1 - 1e-12) and abs(g[k_used]) >= beta * (1 - 1e-12):
            raise LinearSolverError(
                f"GMRES stagnated at relative residual {new_beta / bnorm:.3e}",
                x=x, residual=new_beta / bnorm, iterations=total)
        beta = new_beta


# ---------------------------------------------------------------------------
# solver objects used by the Newton driver


class StageSolver:
    """Factor once, solve many times; subclasses fix the method."""

    matrix: sp.csr_matrix | None = None

    def factor(self, M: sp.csr_matrix) -> None:
        raise NotImplementedError

    def solve(self, rhs, tol: float):
        raise NotImplementedError


class GmresIlutSolver(StageSolver):
    def __init__(self, fill: int = 10, drop: float = 1e-3, restart: int = 30, max_iter: int = 500):
        self.fill = fill
        self.drop = drop
        self.restart = restart
        self.max_iter = max_iter
        self.precond = None
        self.n_factorizations = 0

    def factor(self, M):
        self.matrix = M
        self.precond = ilut_with_fallback(M, self.fill, self.drop)
        self.n_factorizations += 1

    def solve(self, rhs, tol):
        return gmres(self.matrix, rhs, self.precond, tol=tol, max_iter=self.max_iter, restart=self.restart)


class DirectSolver(StageSolver):
    """Sparse LU; reports zero linear iterations."""

    def __init__(self):
        self.lu = None
        self.n_factorizations = 0

    def factor(self, M):
        self.matrix = M
        try:
            self.lu = spla.splu(sp.csc_matrix(M))
        except RuntimeError as exc:
            raise LinearSolverError(f"sparse LU failed: {exc}") from exc
        self.n_factorizations += 1

    def solve(self, rhs, tol=None):
        return self.lu.solve(np.asarray(rhs, dtype=float)), 0


def make_solver(kind: str = "gmres", **kw) -> StageSolver:
    if kind == "gmres":
        return GmresIlutSolver(**kw)
    if kind == "direct":
        return DirectSolver()
    raise ValueError(f"unknown linear solver {kind!r}")
