"""Reference Darcy solver: -div(k grad T) = q on the unit square, T = 0 on
the boundary.

Five-point finite-volume discretization on the node grid with harmonic-mean
face permeabilities (standard for rough coefficients), solved with conjugate
gradients -- the system is symmetric positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg


class SolverError(Exception):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class SolveReport:
    iterations: int
    final_residual_norm: float
    converged: bool
    nx: int = 0
    ny: int = 0
    tol: float = 0.0


def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


def assemble_darcy(k: np.ndarray) -> sparse.csr_matrix:
    """SPD system over interior nodes; Dirichlet-zero boundary eliminated."""
    nx, ny = k.shape
    hx, hy = 1.0 / (nx - 1), 1.0 / (ny - 1)
    mi, mj = nx - 2, ny - 2

    # Face permeabilities between interior node (i, j) (1-based in the full
    # grid) and its four neighbours.
    inner = k[1:-1, 1:-1]
    ke = _harmonic(inner, k[2:, 1:-1]) / hx ** 2
    kw = _harmonic(inner, k[:-2, 1:-1]) / hx ** 2
    kn = _harmonic(inner, k[1:-1, 2:]) / hy ** 2
    ks = _harmonic(inner, k[1:-1, :-2]) / hy ** 2

    idx = np.arange(mi * mj).reshape(mi, mj)
    diag = (ke + kw + kn + ks).reshape(-1)
    rows = [idx.reshape(-1)]
    cols = [idx.reshape(-1)]
    vals = [diag]
    # east/west couplings (interior-to-interior only; boundary terms vanish)
    rows.append(idx[:-1, :].reshape(-1))
    cols.append(idx[1:, :].reshape(-1))
    vals.append(-ke[:-1, :].reshape(-1))
    rows.append(idx[1:, :].reshape(-1))
    cols.append(idx[:-1, :].reshape(-1))
    vals.append(-kw[1:, :].reshape(-1))
    # north/south couplings
    rows.append(idx[:, :-1].reshape(-1))
    cols.append(idx[:, 1:].reshape(-1))
    vals.append(-kn[:, :-1].reshape(-1))
    rows.append(idx[:, 1:].reshape(-1))
    cols.append(idx[:, :-1].reshape(-1))
    vals.append(-ks[:, 1:].reshape(-1))

    a = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mi * mj, mi * mj))
    return a.tocsr()


def solve_darcy(k: np.ndarray, q: np.ndarray | None = None,
                tol: float = 1e-10) -> tuple[np.ndarray, SolveReport]:
    """Solve for T on the full node grid (zeros on the boundary)."""
    k = np.asarray(k, dtype=np.float64)
    nx, ny = k.shape
    if nx < 3 or ny < 3:
        raise ValueError("grid must be at least 3x3")
    if not np.all(k > 0.0):
        raise ValueError("permeability must be strictly positive")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if q is None:
        q = np.ones_like(k)
    else:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != k.shape:
            raise ValueError("q shape differs from k shape")

    a = assemble_darcy(k)
    b = q[1:-1, 1:-1].reshape(-1)
    maxiter = 10 * nx * ny
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    x, info = cg(a, b, rtol=tol, atol=0.0, maxiter=maxiter, callback=count)
    b_norm = float(np.linalg.norm(b))
    res_norm = float(np.linalg.norm(b - a @ x))
    rel_res = res_norm / b_norm if b_norm > 0 else res_norm
    report = SolveReport(iterations=iterations, final_residual_norm=rel_res,
                         converged=(info == 0), nx=nx, ny=ny, tol=tol)
    if info != 0:
        raise SolverError(
            f"conjugate gradients failed to reach rtol={tol} in {maxiter} "
            f"iterations (relative residual {rel_res:.3e})", report=report)
    t = np.zeros((nx, ny), dtype=np.float64)
    t[1:-1, 1:-1] = x.reshape(nx - 2, ny - 2)
    return t, report


def solve_labels(samples, q: np.ndarray | None = None, tol: float = 1e-10) -> None:
    """Fill each sample's label in place with the reference solution."""
    for s in samples:
        s.label, _ = solve_darcy(s.k, q, tol=tol)
