"""Dirichlet and Neumann solves of -D-(a D+ u) = 0 on sub-boxes of the torus.

Both solvers derive from one discrete energy form on the box cells C,

    B(u, v) = sum_{j,l} sum_{x : x+e_j, x+e_l in C} a_jl(x) (D+ v)_j(x) (D+ u)_l(x),

assembled sparsely with the dimensionless stencil weights a_jl(x) (the cell
value weights all forward edges leaving the cell, matching the torus
operator).  At cells whose full stencil lies inside the box the rows of the
assembled matrix coincide exactly with the periodic operator, so

* the Dirichlet problem keeps the interior rows and eliminates the frame
  (outermost ring) to the right-hand side;
* the Neumann problem uses all rows; its natural data is the boundary
  functional b with (A u)(x) = b(x), supported within two cells of the
  boundary for discretely a-harmonic u.  `neumann_flux_data` extracts that
  functional from a known solution (the discrete co-normal flux in the
  summation-by-parts sense), which makes Dirichlet -> Neumann round trips
  exact up to solver tolerance.

Solves run the conjugate-residual iteration of `discrete` on the assembled
matrix with a sparse-LU preconditioner; with an exact factorization the
first sweep already meets tolerance and later sweeps act as iterative
refinement, so the "PCG on the interior unknowns" contract holds with
contrast-independent iteration counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discrete import conjugate_residual
from .fields import CoefficientField
from .grid import Box, TorusGrid

__all__ = [
    "assemble_energy_matrix",
    "box_dirichlet_solve",
    "box_neumann_solve",
    "neumann_flux_data",
    "affine_values",
    "BoxSolveError",
]


class BoxSolveError(RuntimeError):
    pass


def _coefficients_on_box(field_or_matrix, box: Box, d: int) -> np.ndarray:
    """Per-cell (*box.shape, d, d) coefficients from a field or a constant matrix."""
    if isinstance(field_or_matrix, CoefficientField):
        return field_or_matrix.a[box.slices()]
    a = np.asarray(getattr(field_or_matrix, "ahat", field_or_matrix), dtype=np.float64)
    if a.shape != (d, d):
        raise ValueError(f"expected a {d}x{d} constant matrix, got shape {a.shape}")
    return np.broadcast_to(a, box.shape + (d, d))


def assemble_energy_matrix(a_box: np.ndarray, box: Box) -> sp.csr_matrix:
    """Sparse matrix of the box energy form (rows/columns over all box cells)."""
    shape = box.shape
    d = box.d
    n_cells = box.num_cells
    idx = np.arange(n_cells).reshape(shape)
    rows, cols, vals = [], [], []
    for j in range(d):
        for l in range(d):
            region = [slice(None)] * d
            region[j] = slice(0, -1)
            region[l] = slice(0, -1)
            region = tuple(region)

            def shifted(axis):
                s = list(region)
                s[axis] = slice(1, None)
                return tuple(s)

            c = np.ascontiguousarray(a_box[region + (j, l)]).ravel()
            x = idx[region].ravel()
            xj = idx[shifted(j)].ravel()
            xl = idx[shifted(l)].ravel()
            rows.extend([xj, xj, x, x])
            cols.extend([xl, x, xl, x])
            vals.extend([c, -c, -c, c])
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_cells, n_cells),
    )
    return A.tocsr()


@dataclass
class _LuPrecond:
    lu: object

    def __call__(self, r):
        return self.lu.solve(r)


def _solve_with_refinement(A: sp.csr_matrix, b: np.ndarray, tol: float, label: str):
    """LU-preconditioned conjugate-residual solve with refinement sweeps."""
    lu = spla.splu(A.tocsc())
    result = conjugate_residual(
        lambda v: A @ v, b, _LuPrecond(lu), tol=tol, max_iter=8
    )
    if not result.converged:
        raise BoxSolveError(
            f"{label} solve did not reach tolerance {tol:g} "
            f"(relative residual {result.true_relres:.3e})"
        )
    return result


def box_dirichlet_solve(
    field_or_matrix,
    box: Box,
    boundary,
    grid: TorusGrid,
    tol: float = 1e-11,
) -> np.ndarray:
    """Solve the discrete Dirichlet problem on a box strictly inside the torus.

    `boundary` is an array over the whole box; only its frame (outermost
    ring) values are used.  Returns the full box array with the interior
    replaced by the solution of -D-(a D+ u) = 0 at every interior cell.
    """
    box.validate_inside(grid)
    boundary = np.asarray(boundary, dtype=np.float64)
    if boundary.shape != box.shape:
        raise ValueError("boundary array must cover the whole box")
    if not np.all(np.isfinite(boundary)):
        raise ValueError("boundary data must be finite")
    a_box = _coefficients_on_box(field_or_matrix, box, grid.d)
    A = assemble_energy_matrix(a_box, box)
    frame = box.frame_mask().ravel()
    interior = ~frame
    u = boundary.ravel().copy()
    A_ii = A[interior][:, interior].tocsr()
    A_if = A[interior][:, frame].tocsr()
    b = -(A_if @ u[frame])
    if float(np.linalg.norm(b)) == 0.0 and float(np.linalg.norm(u[frame])) == 0.0:
        u[interior] = 0.0
        return u.reshape(box.shape)
    # shift by the frame mean so the Krylov rhs is well scaled for constants
    shift = float(u[frame].mean())
    b_shifted = -(A_if @ (u[frame] - shift))
    result = _solve_with_refinement(A_ii, b_shifted, tol, "Dirichlet")
    u[interior] = result.x + shift
    return u.reshape(box.shape)


def neumann_flux_data(u, field_or_matrix, box: Box, grid: TorusGrid) -> np.ndarray:
    """Discrete co-normal flux functional of u on the box.

    Applies the full energy-form matrix to u; for a discretely harmonic u
    the result is supported within two cells of the box boundary and is the
    exact compatible data for `box_neumann_solve`.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != box.shape:
        raise ValueError("u must cover the whole box")
    a_box = _coefficients_on_box(field_or_matrix, box, grid.d)
    A = assemble_energy_matrix(a_box, box)
    return (A @ u.ravel()).reshape(box.shape)


def box_neumann_solve(
    ahat,
    box: Box,
    flux_data,
    grid: TorusGrid,
    tol: float = 1e-11,
    compat_tol: float = 1e-10,
):
    """Solve the constant-coefficient Neumann problem on a box.

    `flux_data` is the discrete boundary-flux functional (see
    `neumann_flux_data`).  Its entries must sum to zero within `compat_tol`
    relative; any excess is projected out uniformly and the projection
    magnitude returned.  The solution is normalized to zero mean.

    Returns (u, projection_magnitude).
    """
    box.validate_inside(grid)
    b = np.asarray(flux_data, dtype=np.float64).copy()
    if b.shape != box.shape:
        raise ValueError("flux_data must cover the whole box")
    scale = float(np.linalg.norm(b))
    total = float(b.sum())
    if scale > 0 and abs(total) > compat_tol * scale + 1e-300:
        raise BoxSolveError(
            f"incompatible Neumann data: sum {total:.3e} exceeds {compat_tol:g} relative"
        )
    projection = abs(total)
    b -= total / b.size
    if scale == 0.0:
        return np.zeros(box.shape), projection
    a_box = _coefficients_on_box(ahat, box, grid.d)
    A = assemble_energy_matrix(a_box, box).tolil()
    rhs = b.ravel().copy()
    # pin one cell to fix the additive constant; compatibility makes the
    # dropped equation hold automatically
    A[0, :] = 0.0
    A[0, 0] = 1.0
    rhs[0] = 0.0
    result = _solve_with_refinement(A.tocsr(), rhs, tol, "Neumann")
    u = result.x.reshape(box.shape)
    return u - u.mean(), projection


def affine_values(xi, box: Box, grid: TorusGrid, offset: float = 0.0) -> np.ndarray:
    """Values of the affine function xi . x (physical units) at box cell centers."""
    xi = np.asarray(xi, dtype=np.float64)
    centers = box.cell_centers() * grid.h
    return centers @ xi + offset
