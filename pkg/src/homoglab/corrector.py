"""Correctors, fluxes, effective coefficients and flux correctors.

For each coordinate direction i the corrector phi_i solves the cell problem

    -D-( a (e_i + D+ phi_i) ) = 0          (torus, mean-zero phi_i)

and carries the flux q_i = a(e_i + D+ phi_i), whose torus mean defines the
(possibly non-symmetric) effective matrix ahat e_i = <q_i>.  The flux
corrector sigma_i is the skew (in its last two indices) rank-3 potential
with D- . sigma_i = q_i - <q_i>; it is built either by the spectral gauge
route

    -L_h sigma_ijk = D+_j q_ik - D+_k q_ij

or, for cross-validation, by a screened (massive) solve of the same
right-hand side localized by a radial cutoff.  With the forward-difference
curl above, the identity D- . sigma_i = q_i - <q_i> holds exactly in
Fourier space modulo the corrector residual, because the backward
divergence applied to the forward curl reproduces the exact symbol of L_h.

Everything here works at fixed lattice size; ensemble statements are
produced by scanning seeds and resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .discrete import (
    KrylovResult,
    div,
    divform_apply,
    divform_rhs,
    flux,
    grad,
    pcg_solve,
    spectral_solve,
)
from .fields import CoefficientField, MomentReport, moment_report, unit_directions
from .grid import TorusGrid, torus_ball_mask

__all__ = [
    "CorrectorSet",
    "HomogenizedMatrix",
    "FluxCorrector",
    "solve_corrector",
    "build_corrector_set",
    "homogenize",
    "build_sigma_gauge",
    "build_sigma_screened",
    "sigma_gradient_distance",
    "cz_ratio_scan",
    "CorrectorError",
]


class CorrectorError(RuntimeError):
    pass


def _nonsymmetric_solve(field: CoefficientField, b: np.ndarray, tol: float, max_iter: int):
    """BiCGStab on the full non-symmetric operator, spectrally preconditioned."""
    import scipy.sparse.linalg as spla

    grid = field.grid
    shape = grid.shape

    def matvec(u_flat):
        return divform_apply(field.a, u_flat.reshape(shape), grid).ravel()

    def precvec(r_flat):
        return spectral_solve(r_flat.reshape(shape) - r_flat.reshape(shape).mean(), grid, 0.0).ravel()

    A = spla.LinearOperator((grid.num_cells, grid.num_cells), matvec=matvec)
    M = spla.LinearOperator((grid.num_cells, grid.num_cells), matvec=precvec)
    x, info = spla.bicgstab(A, b.ravel(), rtol=tol, atol=0.0, M=M, maxiter=max_iter)
    x = x.reshape(shape)
    x -= x.mean()
    relres = float(np.linalg.norm(b.ravel() - matvec(x.ravel())) / np.linalg.norm(b))
    return x, relres, info == 0 and relres <= tol


def solve_corrector(
    field: CoefficientField, i: int, tol: float = 1e-10, max_iter: int = 20_000
):
    """Solve the cell problem in direction i.

    Returns (phi_i, grad_phi_i, q_i, info) where info is the Krylov result
    (or a reduced record for the non-symmetric path).  phi_i has exact zero
    mean by construction of the solver; the residual contract is
    ||D-(a(e_i + D+ phi_i))||_2 <= tol * ||D-(a e_i)||_2.
    """
    if not (0 < tol <= 1e-4):
        raise ValueError("tol must lie in (0, 1e-4]")
    if not 0 <= i < field.grid.d:
        raise ValueError(f"direction {i} out of range")
    if not field.admissible:
        raise CorrectorError("field has degenerate cells (lam = 0)")
    grid = field.grid
    b = -divform_rhs(field.a, i, grid)
    if float(np.max(np.abs(b))) == 0.0:
        phi = np.zeros(grid.shape)
        info = KrylovResult(phi, np.zeros(0), 0.0, 0, True)
    elif field.is_symmetric:
        info = pcg_solve(
            lambda u: divform_apply(field.a, u, grid), b, grid, "spectral", tol, max_iter
        )
        phi = info.x
        if not info.converged:
            raise CorrectorError(
                f"corrector solve (direction {i}) stalled at relative residual "
                f"{info.true_relres:.3e} > tol {tol:.1e}"
            )
    else:
        phi, relres, ok = _nonsymmetric_solve(field, b, tol, max_iter)
        info = KrylovResult(phi, np.zeros(0), relres, -1, ok)
        if not ok:
            raise CorrectorError(
                f"non-symmetric corrector solve (direction {i}) stalled at "
                f"relative residual {relres:.3e} > tol {tol:.1e}"
            )
    gphi = grad(phi, grid)
    e = np.zeros(grid.d)
    e[i] = 1.0
    q = flux(field.a, gphi + e)
    return phi, gphi, q, info


@dataclass
class CorrectorSet:
    """Correctors, gradients and fluxes for all coordinate directions."""

    field: CoefficientField
    phi: np.ndarray  # (d, *spatial)
    grad_phi: np.ndarray  # (d, *spatial, d)
    q: np.ndarray  # (d, *spatial, d)
    solver_tol: float
    residuals: tuple[float, ...]

    @property
    def grid(self) -> TorusGrid:
        return self.field.grid

    def q_mean(self) -> np.ndarray:
        """Column i is the torus mean of q_i, i.e. ahat e_i."""
        d = self.grid.d
        spatial = tuple(range(1, 1 + d))
        return self.q.mean(axis=spatial).T  # (component j, direction i)

    def flux_divergence_norms(self) -> np.ndarray:
        """||D- q_i||_2 / ||q_i||_2 per direction (the CorrectorSet invariant)."""
        out = []
        for i in range(self.grid.d):
            dq = div(self.q[i], self.grid)
            out.append(float(np.linalg.norm(dq) / max(np.linalg.norm(self.q[i]), 1e-300)))
        return np.asarray(out)

    def corrector_for(self, xi: np.ndarray) -> np.ndarray:
        """phi_xi = sum_i xi_i phi_i (linearity in the slope)."""
        return np.tensordot(np.asarray(xi, dtype=float), self.phi, axes=(0, 0))


def build_corrector_set(
    field: CoefficientField, tol: float = 1e-10, max_iter: int = 20_000
) -> CorrectorSet:
    d = field.grid.d
    phis, gphis, qs, res = [], [], [], []
    for i in range(d):
        phi, gphi, q, info = solve_corrector(field, i, tol, max_iter)
        phis.append(phi)
        gphis.append(gphi)
        qs.append(q)
        res.append(info.true_relres)
    return CorrectorSet(
        field, np.stack(phis), np.stack(gphis), np.stack(qs), tol, tuple(res)
    )


@dataclass
class HomogenizedMatrix:
    """Effective matrix with the empirical moment constant and ellipticity certificates.

    cert_lower = (avg lam^-1)^-1 bounds xi . ahat xi from below (per unit
    |xi|^2), and cert_upper = (avg mu)^(1/2) bounds |ahat xi| by
    cert_upper * (xi . ahat xi)^(1/2); both are the spatial-mean versions of
    the ensemble inequalities and are checked on construction.
    """

    ahat: np.ndarray
    K: float
    cert_lower: float
    cert_upper: float
    moment: MomentReport
    worst_lower_slack: float = dc_field(default=np.nan)
    worst_upper_slack: float = dc_field(default=np.nan)

    @property
    def d(self) -> int:
        return self.ahat.shape[0]

    def certificate_slacks(self, directions: np.ndarray) -> tuple[float, float]:
        """Signed slacks of the two certificate inequalities (>= 0 means satisfied).

        lower: min over xi of xi . ahat xi - cert_lower |xi|^2
        upper: min over xi of cert_upper (xi . ahat xi)^(1/2) - |ahat xi|
        """
        low = np.inf
        up = np.inf
        for xi in directions:
            xi = xi / np.linalg.norm(xi)
            quad = float(xi @ self.ahat @ xi)
            low = min(low, quad - self.cert_lower)
            up = min(up, self.cert_upper * np.sqrt(max(quad, 0.0)) - float(np.linalg.norm(self.ahat @ xi)))
        return low, up


def homogenize(
    field: CoefficientField,
    tol: float = 1e-10,
    p: float = 4.0,
    q: float = 4.0,
    corr: CorrectorSet | None = None,
    rng_seed: int = 2024,
) -> HomogenizedMatrix:
    """Effective matrix ahat e_i = <q_i> with moment constant and certificates.

    The certificate inequalities are verified on the canonical basis plus 8
    random directions; the worst signed slacks are stored on the result.
    """
    if corr is None:
        corr = build_corrector_set(field, tol)
    ahat = corr.q_mean()
    report = moment_report(field, p, q)
    lam_inv_mean = float(np.mean(1.0 / field.lam))
    cert_lower = 1.0 / lam_inv_mean
    cert_upper = float(np.sqrt(np.mean(field.mu)))
    hm = HomogenizedMatrix(ahat, report.K, cert_lower, cert_upper, report)
    rng = np.random.default_rng(rng_seed)
    dirs = np.concatenate([np.eye(field.grid.d), rng.standard_normal((8, field.grid.d))])
    hm.worst_lower_slack, hm.worst_upper_slack = hm.certificate_slacks(dirs)
    return hm


def energy_identity_defect(corr: CorrectorSet, xi: np.ndarray, ahat: np.ndarray) -> float:
    """Relative defect of xi . ahat xi = avg (xi + D+ phi_xi) . a (xi + D+ phi_xi)."""
    xi = np.asarray(xi, dtype=float)
    gxi = np.tensordot(xi, corr.grad_phi, axes=(0, 0)) + xi
    energy = float(np.mean(np.einsum("...j,...j->...", gxi, flux(corr.field.a, gxi))))
    quad = float(xi @ ahat @ xi)
    return abs(energy - quad) / max(abs(quad), 1e-300)


_PAIRS = {2: [(0, 1)], 3: [(0, 1), (0, 2), (1, 2)]}


@dataclass
class FluxCorrector:
    """Skew rank-3 potential of the flux fluctuations.

    Only the independent components sigma_ijk with j < k are stored; the
    mirror sigma_ikj = -sigma_ijk (and zero diagonal) is materialized on
    read, so the skew symmetry is exact by the storage layout.
    """

    grid: TorusGrid
    components: dict  # {(i, j, k) with j < k: ndarray over the torus}
    construction_tag: str

    def component(self, i: int, j: int, k: int) -> np.ndarray:
        if j == k:
            return np.zeros(self.grid.shape)
        if j < k:
            return self.components[(i, j, k)]
        return -self.components[(i, k, j)]

    def tensor(self) -> np.ndarray:
        """Full sigma_ijk array of shape (*spatial, d, d, d)."""
        d = self.grid.d
        out = np.zeros(self.grid.shape + (d, d, d))
        for i in range(d):
            for j, k in _PAIRS[d]:
                out[..., i, j, k] = self.components[(i, j, k)]
                out[..., i, k, j] = -self.components[(i, j, k)]
        return out

    def matrix_for(self, i: int) -> np.ndarray:
        """sigma_i as a matrix field, shape (*spatial, d, d)."""
        d = self.grid.d
        out = np.zeros(self.grid.shape + (d, d))
        for j, k in _PAIRS[d]:
            out[..., j, k] = self.components[(i, j, k)]
            out[..., k, j] = -self.components[(i, j, k)]
        return out

    def divergence(self, i: int) -> np.ndarray:
        """(D- . sigma_i)_j = sum_k D-_k sigma_ijk, shape (*spatial, d)."""
        d, h = self.grid.d, self.grid.h
        out = np.zeros(self.grid.shape + (d,))
        for j in range(d):
            for k in range(d):
                if j == k:
                    continue
                s = self.component(i, j, k)
                out[..., j] += (s - np.roll(s, 1, axis=k)) / h
        return out

    def gradient(self) -> np.ndarray:
        """D+ of every independent component, shape (ncomp, *spatial, d)."""
        return np.stack([grad(s, self.grid) for s in self.components.values()])

    def gauge_residuals(self, corr: CorrectorSet) -> np.ndarray:
        """||D- . sigma_i - (q_i - <q_i>)||_2 / ||q_i||_2 per direction."""
        d = self.grid.d
        spatial = tuple(range(d))
        out = []
        for i in range(d):
            fluct = corr.q[i] - corr.q[i].mean(axis=spatial)
            defect = self.divergence(i) - fluct
            out.append(
                float(np.linalg.norm(defect) / max(np.linalg.norm(corr.q[i]), 1e-300))
            )
        return np.asarray(out)


def _curl_rhs(qi: np.ndarray, j: int, k: int, grid: TorusGrid, weight: np.ndarray | None = None):
    """Forward-difference curl D+_j f_k - D+_k f_j of the (cutoff) flux."""
    f = qi if weight is None else weight[..., None] * qi
    djk = (np.roll(f[..., k], -1, axis=j) - f[..., k]) / grid.h
    dkj = (np.roll(f[..., j], -1, axis=k) - f[..., j]) / grid.h
    return djk - dkj


def build_sigma_gauge(corr: CorrectorSet) -> FluxCorrector:
    """Flux corrector by the spectral gauge route (mean-zero on the torus).

    Each independent component solves -L_h sigma_ijk = D+_j q_ik - D+_k q_ij
    with the mass-free spectral solver; the choice of the forward-difference
    curl against the backward flux divergence makes
    D- . sigma_i = q_i - <q_i> exact up to the corrector residual.
    """
    grid = corr.grid
    comps = {}
    for i in range(grid.d):
        for j, k in _PAIRS[grid.d]:
            rhs = _curl_rhs(corr.q[i], j, k, grid)
            comps[(i, j, k)] = spectral_solve(rhs, grid, mass=0.0)
    return FluxCorrector(grid, comps, "gauge")


def radial_cutoff(grid: TorusGrid, inner: float, outer: float, center=None) -> np.ndarray:
    """Smoothstep cutoff: 1 on B_inner, 0 outside B_outer (torus metric, cell units)."""
    if center is None:
        center = grid.center()
    offsets = grid.cell_center_offsets(center)
    r = np.sqrt(np.einsum("...j,...j->...", offsets, offsets))
    t = np.clip((outer - r) / max(outer - inner, 1e-300), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def build_sigma_screened(
    corr: CorrectorSet, T: float | None = None, R: float | None = None
) -> FluxCorrector:
    """Flux corrector via the screened (massive) approximation.

    Solves (1/T - L_h) sigma_ijk = curl of the flux fluctuation localized by
    a radial cutoff (1 on B_R, 0 outside B_2R, gradient O(1/R)), then
    recenters each component to zero mean on B_{R/2}.  T is the screening
    time in cell^2 units (length sqrt(T) cells), so the defaults
    T = (n/8)^2, R = n/4 keep the screening length well inside the cutoff.
    """
    grid = corr.grid
    if T is None:
        T = (grid.n / 8.0) ** 2
    if R is None:
        R = grid.n / 4.0
    if T <= 0:
        raise ValueError("screening time T must be positive")
    if R > grid.n / 4.0:
        raise ValueError("cutoff radius must satisfy R <= n/4")
    mass = 1.0 / (T * grid.h**2)
    eta = radial_cutoff(grid, R, 2.0 * R)
    inner_mask = torus_ball_mask(grid, grid.center(), R / 2.0)
    spatial = tuple(range(grid.d))
    comps = {}
    for i in range(grid.d):
        fluct = corr.q[i] - corr.q[i].mean(axis=spatial)
        for j, k in _PAIRS[grid.d]:
            rhs = _curl_rhs(fluct, j, k, grid, weight=eta)
            s = spectral_solve(rhs, grid, mass=mass)
            comps[(i, j, k)] = s - s[inner_mask].mean()
    return FluxCorrector(grid, comps, f"screened(T={T:g}, R={R:g})")


def sigma_gradient_distance(
    fc_a: FluxCorrector, fc_b: FluxCorrector, mask: np.ndarray
) -> float:
    """Relative L^2 distance of the component gradients on a cell mask."""
    if fc_a.components.keys() != fc_b.components.keys():
        raise ValueError("flux correctors have different component sets")
    num = 0.0
    den = 0.0
    for key in fc_a.components:
        ga = grad(fc_a.components[key], fc_a.grid)[mask]
        gb = grad(fc_b.components[key], fc_b.grid)[mask]
        num += float(np.sum((ga - gb) ** 2))
        den += float(np.sum(gb**2))
    return np.sqrt(num / max(den, 1e-300))


def _lr_norm(values: np.ndarray, r: float) -> float:
    """(mean |values|^r)^(1/r) with |.| the Euclidean norm over trailing axes."""
    flat = values.reshape(-1, values.shape[-1]) if values.ndim > 1 else values.reshape(-1, 1)
    mags = np.sqrt(np.sum(flat**2, axis=1))
    return float(np.mean(mags**r) ** (1.0 / r))


def _cz_window(d: int) -> tuple[float, float]:
    # admissible exponents (2*)' < r < 2 for the primal range; callers may
    # also use the dual 2 < r < 2*
    if d == 2:
        return 1.0, 2.0
    return 6.0 / 5.0, 2.0


@dataclass
class CzScanRow:
    seed: int
    grad_sigma_norm: float
    flux_fluct_norm: float

    @property
    def ratio(self) -> float:
        if self.flux_fluct_norm == 0.0:
            return float("nan")  # 0/0 on constant fields: undefined
        return self.grad_sigma_norm / self.flux_fluct_norm


@dataclass
class CzScanTable:
    r_exponent: float
    rows: list

    @property
    def max_ratio(self) -> float:
        vals = [row.ratio for row in self.rows if not np.isnan(row.ratio)]
        return max(vals) if vals else float("nan")


def cz_ratio_scan(
    fields,
    r_exponent: float,
    tol: float = 1e-9,
    seeds=None,
) -> CzScanTable:
    """Ratio of L^r norms (mean |D+ sigma|^r)^(1/r) / (mean |q - <q>|^r)^(1/r).

    `fields` is an iterable of CoefficientField instances (one per seed).
    The exponent must lie in the admissible window (2*)' < r < 2 or its
    dual 2 < r < 2*.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("cz_ratio_scan needs at least one field")
    d = fields[0].grid.d
    lo, hi = _cz_window(d)
    two_star = np.inf if d == 2 else 6.0
    primal = lo < r_exponent < hi
    dual = 2.0 < r_exponent < two_star
    if not (primal or dual):
        raise ValueError(
            f"exponent {r_exponent} outside the admissible window ({lo}, {hi}) or its dual"
        )
    if seeds is None:
        seeds = [f.seed for f in fields]
    rows = []
    for seed, field in zip(seeds, fields):
        corr = build_corrector_set(field, tol)
        sigma = build_sigma_gauge(corr)
        gsig = sigma.gradient()  # (ncomp, *spatial, d)
        gsig = np.moveaxis(gsig, 0, -2).reshape(field.grid.shape + (-1,))
        spatial = tuple(range(d))
        fluct = np.concatenate(
            [corr.q[i] - corr.q[i].mean(axis=spatial) for i in range(d)], axis=-1
        )
        rows.append(CzScanRow(seed, _lr_norm(gsig, r_exponent), _lr_norm(fluct, r_exponent)))
    return CzScanTable(r_exponent, rows)


def lemma_chain_value(corr: CorrectorSet, sigma: FluxCorrector, p: float, q: float) -> float:
    """Discrete moment chain: corrector energy + gradient moments of phi and sigma.

    sum_i avg(D+ phi_i . a D+ phi_i) + sum_i (avg |D+ phi_i|^(2q/(q+1)))^((q+1)/(2q))
        + sum_ijk (avg |D+ sigma_ijk|^(2p/(p+1)))^((p+1)/(2p))
    """
    d = corr.grid.d
    total = 0.0
    for i in range(d):
        gphi = corr.grad_phi[i]
        total += float(np.mean(np.einsum("...j,...j->...", gphi, flux(corr.field.a, gphi))))
    s_phi = 2.0 * q / (q + 1.0)
    for i in range(d):
        mags = np.sqrt(np.einsum("...j,...j->...", corr.grad_phi[i], corr.grad_phi[i]))
        total += float(np.mean(mags**s_phi) ** (1.0 / s_phi))
    s_sig = 2.0 * p / (p + 1.0)
    for i in range(d):
        for j in range(d):
            for k in range(d):
                if j == k:
                    continue
                gs = grad(sigma.component(i, j, k), corr.grid)
                mags = np.sqrt(np.einsum("...j,...j->...", gs, gs))
                total += float(np.mean(mags**s_sig) ** (1.0 / s_sig))
    return total
