"""Discrete vector calculus on the torus and the two workhorse linear solvers.

One fixed difference convention is shared by every module:

* forward gradient   (D+ u)_j(x) = (u(x + h e_j) - u(x)) / h
* backward divergence (D- F)(x)  = sum_j (F_j(x) - F_j(x - h e_j)) / h

D- is the negative adjoint of D+ under the plain lattice inner product, so
summation by parts holds to machine precision, and the composed Laplacian
L_h = D- D+ is the standard (2d+1)-point stencil.  Its exact Fourier symbol

    symbol(k) = -(4/h^2) * sum_j sin^2(pi k_j / n)

is used by the spectral solver; spectral solves therefore invert L_h itself,
not a continuum approximation of it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .grid import LatticeField, TorusGrid

__all__ = [
    "grad",
    "div",
    "laplacian",
    "laplace_symbol",
    "spectral_solve",
    "conjugate_residual",
    "pcg_solve",
    "KrylovResult",
    "divform_apply",
    "divform_rhs",
    "flux",
]


def _values(u):
    return u.values if isinstance(u, LatticeField) else np.asarray(u)


def grad(u, grid: TorusGrid):
    """Forward-difference gradient of a periodic scalar field."""
    v = _values(u)
    out = np.stack(
        [(np.roll(v, -1, axis=j) - v) for j in range(grid.d)], axis=-1
    )
    out /= grid.h
    if isinstance(u, LatticeField):
        return LatticeField(grid, 1, out)
    return out


def div(F, grid: TorusGrid):
    """Backward-difference divergence of a periodic vector field."""
    v = _values(F)
    out = np.zeros(v.shape[:-1])
    for j in range(grid.d):
        out += v[..., j] - np.roll(v[..., j], 1, axis=j)
    out /= grid.h
    if isinstance(F, LatticeField):
        return LatticeField(grid, 0, out)
    return out


def laplacian(u, grid: TorusGrid):
    return div(grad(u, grid), grid)


def laplace_symbol(grid: TorusGrid, rfft_last: bool = True) -> np.ndarray:
    """Exact Fourier symbol of D- D+ (non-positive array over the dual grid).

    With `rfft_last` the last axis is the half-spectrum layout of rfftn.
    """
    n, h = grid.n, grid.h
    sin2 = []
    full = np.sin(np.pi * np.arange(n) / n) ** 2
    for j in range(grid.d):
        axis = full[: n // 2 + 1] if (rfft_last and j == grid.d - 1) else full
        shape = [1] * grid.d
        shape[j] = axis.size
        sin2.append(axis.reshape(shape))
    total = sin2[0]
    for s in sin2[1:]:
        total = total + s
    return -(4.0 / h**2) * total


class SpectralMeanError(ValueError):
    """Raised when a mass-free spectral solve receives rhs with nonzero mean."""


def spectral_solve(rhs, grid: TorusGrid, mass: float = 0.0):
    """Solve (mass - L_h) u = rhs on the torus in frequency space.

    For mass = 0 the rhs must have zero torus mean (componentwise); a mean
    below 1e-12 relative to the rhs RMS is attributed to roundoff and
    subtracted, anything larger is rejected.  The mass-free solution is
    returned with exact zero mean.  Component axes beyond the spatial ones
    are solved independently.
    """
    if mass < 0:
        raise ValueError("mass must be >= 0")
    v = _values(rhs)
    d = grid.d
    spatial_axes = tuple(range(d))
    if mass == 0.0:
        means = v.mean(axis=spatial_axes, keepdims=True)
        scale = max(float(np.sqrt(np.mean(v**2))), 1e-300)
        if float(np.max(np.abs(means))) > 1e-12 * max(scale, 1.0):
            raise SpectralMeanError(
                "mass-free spectral solve requires mean-zero rhs "
                f"(relative mean {float(np.max(np.abs(means))) / scale:.3e})"
            )
        v = v - means
    sym = laplace_symbol(grid)
    denom = mass - sym  # strictly positive except the k=0 entry when mass=0
    vhat = scipy.fft.rfftn(v, axes=spatial_axes)
    if mass == 0.0:
        zero = (0,) * d
        denom = denom.copy()
        denom[zero] = 1.0
        vhat = vhat / denom.reshape(denom.shape + (1,) * (v.ndim - d))
        vhat[zero] = 0.0
    else:
        vhat = vhat / denom.reshape(denom.shape + (1,) * (v.ndim - d))
    out = scipy.fft.irfftn(vhat, s=grid.shape, axes=spatial_axes)
    if isinstance(rhs, LatticeField):
        return LatticeField(grid, rhs.rank, out)
    return out


@dataclass
class KrylovResult:
    x: np.ndarray
    residual_norms: np.ndarray  # preconditioned norms sqrt(r . M r), one per iteration
    true_relres: float
    iterations: int
    converged: bool


def conjugate_residual(apply_op, rhs, precond, tol: float, max_iter: int) -> KrylovResult:
    """Preconditioned conjugate-residual iteration for SPD operators.

    Minimizes the preconditioned residual norm ||r||_M over the growing
    Krylov space, so the recorded history is monotone non-increasing by
    construction.  Termination uses the plain relative residual
    ||rhs - A x||_2 / ||rhs||_2 <= tol.
    """
    b = np.asarray(rhs, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return KrylovResult(np.zeros_like(b), np.zeros(0), 0.0, 0, True)
    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    Az = apply_op(z)
    Ap = Az.copy()
    rho = float(np.vdot(z, Az).real)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        MAp = precond(Ap)
        denom = float(np.vdot(Ap, MAp).real)
        if denom <= 0.0 or rho <= 0.0:
            break  # operator lost definiteness numerically; return best iterate
        alpha = rho / denom
        x += alpha * p
        r -= alpha * Ap
        z -= alpha * MAp
        history.append(np.sqrt(max(float(np.vdot(r, z).real), 0.0)))
        if float(np.linalg.norm(r)) <= tol * bnorm:
            converged = True
            break
        Az = apply_op(z)
        rho_new = float(np.vdot(z, Az).real)
        beta = rho_new / rho
        p = z + beta * p
        Ap = Az + beta * Ap
        rho = rho_new
    true_relres = float(np.linalg.norm(b - apply_op(x))) / bnorm
    if true_relres <= tol:
        converged = True
    return KrylovResult(x, np.asarray(history), true_relres, it, converged)


def pcg_solve(
    apply_op,
    rhs,
    grid: TorusGrid,
    preconditioner="spectral",
    tol: float = 1e-10,
    max_iter: int = 10_000,
    jacobi_diag: np.ndarray | None = None,
) -> KrylovResult:
    """Krylov solve of a symmetric positive semidefinite torus operator.

    The operator must be SPD on mean-zero scalar fields and the rhs mean
    zero.  `preconditioner` is "spectral" (constant-coefficient inverse
    Laplacian, the default), "jacobi" (requires `jacobi_diag`), or a
    callable.  Returns the solution (mean zero), the monotone history of
    preconditioned residual norms, and a convergence flag; on max_iter the
    best iterate is returned flagged non-converged.
    """
    b = _values(rhs).astype(np.float64, copy=True)
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    if scale > 0 and abs(float(b.mean())) > 1e-10 * scale:
        raise ValueError("pcg_solve requires a mean-zero right-hand side")
    if scale > 0:
        b -= b.mean()

    if preconditioner == "spectral":
        def precond(r):
            return spectral_solve(r, grid, mass=0.0)
    elif preconditioner == "jacobi":
        if jacobi_diag is None:
            raise ValueError("jacobi preconditioner requires jacobi_diag")
        inv = 1.0 / jacobi_diag

        def precond(r):
            out = inv * r
            return out - out.mean()
    elif callable(preconditioner):
        precond = preconditioner
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")

    result = conjugate_residual(apply_op, b, precond, tol, max_iter)
    result.x -= result.x.mean()
    return result


def flux(a_values: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Pointwise matrix-vector product a(x) g(x) over the last axes."""
    return np.einsum("...jl,...l->...j", a_values, gradient)


def divform_apply(a_values: np.ndarray, u: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Apply the divergence-form operator u -> -D-( a D+ u ) on the torus."""
    return -div(flux(a_values, grad(u, grid)), grid)


def divform_rhs(a_values: np.ndarray, i: int, grid: TorusGrid) -> np.ndarray:
    """Right-hand side D-(a e_i) of the cell problem in direction i."""
    return div(a_values[..., :, i], grid)


def jacobi_diagonal(a_values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Diagonal of -D-(a D+ .): (1/h^2) sum_j (a_jj(x) + a_jj(x - h e_j))."""
    diag = np.zeros(grid.shape)
    for j in range(grid.d):
        ajj = a_values[..., j, j]
        diag += ajj + np.roll(ajj, 1, axis=j)
    return diag / grid.h**2
