"""Stationary random coefficient fields on the discrete torus.

A coefficient field assigns a (possibly non-symmetric) d x d matrix a(x) to
every cell.  Two scalar summaries are cached per cell:

* lam(x): the smallest eigenvalue of sym(a(x)) -- the coercivity of the
  quadratic form xi . a xi;
* mu(x): the largest generalized eigenvalue of (a^T a, sym(a)) -- the exact
  value of sup_xi |a xi|^2 / (xi . a xi).

Their p- and q-moments over the torus give the empirical constant
K = (avg mu^p)^(1/p) + (avg lam^-q)^(1/q); the exponents are admissible in
the strict sense when 1/p + 1/q < 2/d.

Three ensembles are provided: a log-normal field synthesized spectrally
from a Matern-type covariance (all moments finite), an axis-aligned
laminate with closed-form effective coefficients, and a two-phase
checkerboard whose effective matrix is known by duality.  A heavy-tailed
variant post-composes the Gaussian layer with a monotone map to a
two-sided Pareto tail of user-set index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import ndtr

from .grid import TorusGrid

__all__ = [
    "CoefficientField",
    "MomentReport",
    "gaussian_field",
    "sample_lognormal",
    "sample_laminate",
    "sample_checkerboard",
    "sample_pareto",
    "moment_report",
    "unit_directions",
]


def _skew_generator(d: int) -> np.ndarray:
    """Canonical skew matrix: rotation generator in the (1,2)-plane, zeros elsewhere."""
    J = np.zeros((d, d))
    J[0, 1] = 1.0
    J[1, 0] = -1.0
    return J


def _lambda_field(a: np.ndarray) -> np.ndarray:
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    d = a.shape[-1]
    if d == 2:
        s11, s22, s12 = sym[..., 0, 0], sym[..., 1, 1], sym[..., 0, 1]
        half_tr = 0.5 * (s11 + s22)
        rad = np.sqrt((0.5 * (s11 - s22)) ** 2 + s12**2)
        return half_tr - rad
    return np.linalg.eigvalsh(sym)[..., 0]


def _mu_field(a: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Largest generalized eigenvalue of (a^T a, sym(a)), +inf on degenerate cells."""
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    M = np.einsum("...ji,...jl->...il", a, a)  # a^T a
    d = a.shape[-1]
    degenerate = lam <= 0.0
    if d == 2:
        s11, s22, s12 = sym[..., 0, 0], sym[..., 1, 1], sym[..., 0, 1]
        m11, m22, m12 = M[..., 0, 0], M[..., 1, 1], M[..., 0, 1]
        aa = s11 * s22 - s12**2
        bb = m11 * s22 + m22 * s11 - 2.0 * m12 * s12
        cc = m11 * m22 - m12**2
        with np.errstate(invalid="ignore", divide="ignore"):
            disc = np.sqrt(np.maximum(bb**2 - 4.0 * aa * cc, 0.0))
            mu = (bb + disc) / (2.0 * aa)
    else:
        w, U = np.linalg.eigh(sym)
        w_safe = np.where(w > 0, w, 1.0)
        inv_half = np.einsum(
            "...ij,...j,...kj->...ik", U, 1.0 / np.sqrt(w_safe), U
        )
        B = np.einsum("...ij,...jk,...kl->...il", inv_half, M, inv_half)
        mu = np.linalg.eigvalsh(B)[..., -1]
    return np.where(degenerate, np.inf, mu)


@dataclass
class CoefficientField:
    """Matrix coefficient field on the torus with cached ellipticity scalars."""

    grid: TorusGrid
    a: np.ndarray  # shape (*grid.shape, d, d)
    model_tag: str
    seed: int
    params: dict = dc_field(default_factory=dict)
    lam: np.ndarray = dc_field(init=False)
    mu: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        expected = self.grid.shape + (self.grid.d, self.grid.d)
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        if self.a.shape != expected:
            raise ValueError(f"coefficient array must have shape {expected}")
        if not np.all(np.isfinite(self.a)):
            raise ValueError("coefficient field contains non-finite entries")
        self.lam = _lambda_field(self.a)
        self.mu = _mu_field(self.a, self.lam)

    @property
    def admissible(self) -> bool:
        return bool(np.all(self.lam > 0.0))

    @property
    def is_symmetric(self) -> bool:
        return bool(np.allclose(self.a, np.swapaxes(self.a, -1, -2), atol=0.0, rtol=1e-14))

    def sym(self) -> np.ndarray:
        return 0.5 * (self.a + np.swapaxes(self.a, -1, -2))

    def transpose(self) -> "CoefficientField":
        """Pointwise-transposed field (duality companion)."""
        return CoefficientField(
            self.grid,
            np.ascontiguousarray(np.swapaxes(self.a, -1, -2)),
            self.model_tag + "-transposed",
            self.seed,
            dict(self.params),
        )

    def shifted(self, shifts) -> "CoefficientField":
        """Cyclic lattice translation (stationarity probe)."""
        a = np.roll(self.a, shifts, axis=tuple(range(self.grid.d)))
        return CoefficientField(self.grid, a, self.model_tag, self.seed, dict(self.params))

    def check_ellipticity(self, num_directions: int = 360, rtol: float = 1e-9) -> float:
        """Max relative defect of the lam/mu inequalities over a direction mesh.

        Checks lam(x)|xi|^2 <= xi . a xi and |a xi|^2 <= mu(x) (xi . a xi) at
        every cell against `num_directions` unit vectors; returns the worst
        relative violation (<= rtol means the invariant holds).
        """
        dirs = unit_directions(self.grid.d, num_directions)
        worst = 0.0
        for xi in dirs:
            axi = self.a @ xi
            quad = np.einsum("j,...j->...", xi, axi)
            low = self.lam - quad  # lam |xi|^2 <= quad, |xi| = 1
            finite = np.isfinite(self.mu)
            up = np.einsum("...j,...j->...", axi, axi) - self.mu * quad
            scale = np.maximum(np.abs(quad), 1e-300)
            worst = max(worst, float(np.max(low / scale)))
            if np.any(finite):
                worst = max(worst, float(np.max((up / scale)[finite])))
        return worst


def unit_directions(d: int, count: int) -> np.ndarray:
    """Deterministic mesh of `count` unit vectors (circle for d=2, Fibonacci sphere for d=3)."""
    if d == 2:
        theta = 2.0 * np.pi * np.arange(count) / count
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    k = np.arange(count)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - (2.0 * k + 1.0) / count
    r = np.sqrt(np.maximum(1.0 - z**2, 0.0))
    phi = 2.0 * np.pi * k / golden
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def gaussian_field(
    grid: TorusGrid, variance: float, correlation_length: float, seed: int, smoothness: float = 1.0
) -> np.ndarray:
    """Mean-zero Gaussian field with isotropic Matern-type covariance.

    Synthesized spectrally: white noise is transformed to frequency space
    (where its spectrum is Hermitian by construction, so the output is
    exactly real), shaped by the spectral density
    (1 + (2 pi L |k|)^2)^-(smoothness + d/2), and normalized so that the
    pointwise variance equals `variance` exactly in expectation.  The k=0
    mode is zeroed, making the spatial mean vanish identically.
    """
    if variance < 0:
        raise ValueError("variance must be >= 0")
    if not (0.0 < correlation_length <= 0.5):
        raise ValueError("correlation_length must lie in (0, 1/2]")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(grid.shape)
    if variance == 0.0:
        return np.zeros(grid.shape)
    n, d = grid.n, grid.d
    freq = np.fft.fftfreq(n) * n  # integer wavenumbers
    k2 = np.zeros(grid.shape)
    for j in range(d):
        shape = [1] * d
        shape[j] = n
        k2 = k2 + (freq.reshape(shape)) ** 2
    density = (1.0 + (2.0 * np.pi * correlation_length) ** 2 * k2) ** (-(smoothness + d / 2.0))
    density[(0,) * d] = 0.0
    density *= variance * grid.num_cells / density.sum()
    import scipy.fft as sfft

    half = tuple(slice(None) for _ in range(d - 1)) + (slice(0, n // 2 + 1),)
    ghat = sfft.rfftn(noise) * np.sqrt(density[half])
    return sfft.irfftn(ghat, s=grid.shape)


def _base_matrix(d: int, anisotropy, skew: float) -> np.ndarray:
    if anisotropy is None:
        anisotropy = np.eye(d)
    anisotropy = np.asarray(anisotropy, dtype=np.float64)
    if anisotropy.shape != (d, d) or not np.allclose(anisotropy, anisotropy.T):
        raise ValueError("anisotropy must be a symmetric d x d matrix")
    if np.min(np.linalg.eigvalsh(anisotropy)) <= 0.0:
        raise ValueError("anisotropy must be positive definite")
    return anisotropy + skew * _skew_generator(d)


def sample_lognormal(
    grid: TorusGrid,
    variance: float,
    correlation_length: float = 0.1,
    anisotropy=None,
    skew: float = 0.0,
    seed: int = 0,
) -> CoefficientField:
    """Log-normal ensemble a(x) = exp(g(x)) * (anisotropy + skew * J).

    All moments of mu^p and lam^-q are finite, so the moment condition
    holds for every pair of exponents.  Deterministic in (grid, params, seed).
    """
    base = _base_matrix(grid.d, anisotropy, skew)
    g = gaussian_field(grid, variance, correlation_length, seed)
    a = np.exp(g)[..., None, None] * base
    return CoefficientField(
        grid,
        a,
        "lognormal",
        seed,
        {
            "variance": float(variance),
            "correlation_length": float(correlation_length),
            "anisotropy": np.asarray(base - skew * _skew_generator(grid.d)).tolist(),
            "skew": float(skew),
        },
    )


def sample_laminate(
    grid: TorusGrid, alpha: float, beta: float, axis: int = 0, stripes: int = 2
) -> CoefficientField:
    """Axis-aligned laminate: a(x) = c(x_axis) I with c alternating alpha/beta.

    The period consists of two stripes (one of each value); `stripes` is the
    total stripe count across the torus and must be even and divide n so the
    interfaces land on cell boundaries, which keeps the closed-form
    harmonic/arithmetic effective values exact at every resolution.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("laminate values must be positive")
    if not 0 <= axis < grid.d:
        raise ValueError(f"axis {axis} out of range for d={grid.d}")
    if stripes < 2 or stripes % 2 != 0 or grid.n % stripes != 0:
        raise ValueError("stripes must be even and divide n")
    width = grid.n // stripes
    pattern = np.where((np.arange(grid.n) // width) % 2 == 0, alpha, beta)
    shape = [1] * grid.d
    shape[axis] = grid.n
    c = np.broadcast_to(pattern.reshape(shape), grid.shape)
    a = c[..., None, None] * np.eye(grid.d)
    return CoefficientField(
        grid,
        np.ascontiguousarray(a),
        "laminate",
        0,
        {"alpha": float(alpha), "beta": float(beta), "axis": int(axis), "stripes": int(stripes)},
    )


def sample_checkerboard(
    grid: TorusGrid,
    alpha: float,
    beta: float,
    tile: int,
    seed: int = 0,
    random: bool = False,
) -> CoefficientField:
    """Two-phase scalar field a = c(x) I, c in {alpha, beta} on square tiles.

    Deterministic parity checkerboard by default; with random=True each tile
    draws an i.i.d. fair coin from `seed`.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("checkerboard values must be positive")
    if tile < 1 or grid.n % tile != 0:
        raise ValueError(f"tile {tile} does not divide n={grid.n}")
    blocks = grid.n // tile
    if random:
        rng = np.random.default_rng(seed)
        coin = rng.integers(0, 2, size=(blocks,) * grid.d)
    else:
        idx = np.indices((blocks,) * grid.d).sum(axis=0)
        coin = idx % 2
    c_blocks = np.where(coin == 0, alpha, beta)
    c = c_blocks
    for axis in range(grid.d):
        c = np.repeat(c, tile, axis=axis)
    a = c[..., None, None] * np.eye(grid.d)
    return CoefficientField(
        grid,
        np.ascontiguousarray(a),
        "checkerboard",
        seed,
        {
            "alpha": float(alpha),
            "beta": float(beta),
            "tile": int(tile),
            "random": bool(random),
        },
    )


def sample_pareto(
    grid: TorusGrid,
    index: float,
    correlation_length: float = 0.1,
    seed: int = 0,
    anisotropy=None,
    skew: float = 0.0,
) -> CoefficientField:
    """Heavy-tailed ensemble with two-sided Pareto marginals of the given index.

    The unit-variance Gaussian layer is pushed through the monotone map
    u = Phi(g),  c = (2u)^(1/index) for u <= 1/2,  (2(1-u))^(-1/index) else,
    so that P(c > t) ~ t^-index / 2 and P(c < 1/t) ~ t^-index / 2.  The
    moments (avg mu^p) and (avg lam^-q) are then finite precisely for
    p, q < index, which lets experiments probe K large near the constraint
    1/p + 1/q = 2/d.
    """
    if index <= 1.0:
        raise ValueError("tail index must exceed 1")
    base = _base_matrix(grid.d, anisotropy, skew)
    g = gaussian_field(grid, 1.0, correlation_length, seed)
    u = np.clip(ndtr(g), 1e-300, 1.0 - 1e-16)
    c = np.where(u <= 0.5, (2.0 * u) ** (1.0 / index), (2.0 * (1.0 - u)) ** (-1.0 / index))
    a = c[..., None, None] * base
    return CoefficientField(
        grid,
        a,
        "pareto",
        seed,
        {
            "index": float(index),
            "correlation_length": float(correlation_length),
            "skew": float(skew),
        },
    )


@dataclass(frozen=True)
class MomentReport:
    """Empirical moment constant of a coefficient field."""

    p: float
    q: float
    mu_moment: float  # (avg mu^p)^(1/p)
    lambda_moment: float  # (avg lam^-q)^(1/q)
    strict: bool  # 1/p + 1/q < 2/d

    @property
    def K(self) -> float:
        return self.mu_moment + self.lambda_moment


def _fsum_mean(values: np.ndarray) -> float:
    # order-independent (correctly rounded) mean, so cyclic shifts of the
    # field reproduce the report bit for bit
    return math.fsum(values.ravel().tolist()) / values.size


def moment_report(field: CoefficientField, p: float, q: float) -> MomentReport:
    """Exact cell averages (avg mu^p)^(1/p) and (avg lam^-q)^(1/q).

    Degenerate cells (lam = 0) yield an infinite lambda moment, reported as
    such.  Exponents may be any p, q >= 1; the `strict` flag records whether
    1/p + 1/q < 2/d holds.
    """
    if p < 1 or q < 1:
        raise ValueError("moment exponents must satisfy p, q >= 1")
    if np.any(~np.isfinite(field.mu)) or np.any(field.lam <= 0.0):
        mu_m = float(np.inf) if np.any(~np.isfinite(field.mu)) else _fsum_mean(field.mu**p) ** (1.0 / p)
        lam_m = float(np.inf)
        if np.all(field.lam > 0.0):
            lam_m = _fsum_mean(field.lam ** (-q)) ** (1.0 / q)
        return MomentReport(p, q, mu_m, lam_m, (1.0 / p + 1.0 / q) < (2.0 / field.grid.d))
    mu_m = _fsum_mean(field.mu**p) ** (1.0 / p)
    lam_m = _fsum_mean(field.lam ** (-q)) ** (1.0 / q)
    return MomentReport(p, q, mu_m, lam_m, (1.0 / p + 1.0 / q) < (2.0 / field.grid.d))
