"""Lattice geometry: the periodic torus grid, sub-boxes, and lattice balls.

Conventions used by every module:

* the computational domain is the unit torus [0,1)^d discretized into n
  cells per side, spacing h = 1/n;
* cell (i_1,...,i_d) has center ((i_1+1/2)h, ..., (i_d+1/2)h);
* radii, box extents and centers are expressed in CELL units; analysis
  quantities convert to physical length via h where it matters;
* a sub-box never wraps around the torus, so absolute cell coordinates are
  well defined on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["TorusGrid", "Box", "LatticeField", "torus_ball_mask"]


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid with n cells per side on the unit torus."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if self.n < 4 or self.n % 2 != 0:
            # even n required by the Nyquist handling of the spectral solver
            raise ValueError(f"n must be even and >= 4, got {self.n}")
        if self.n ** self.d >= 2**62:
            raise ValueError("total cell count does not fit the address space")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def num_cells(self) -> int:
        return self.n**self.d

    def center(self) -> np.ndarray:
        """Torus midpoint in cell units."""
        return np.full(self.d, self.n / 2.0)

    def cell_center_offsets(self, center) -> np.ndarray:
        """Per-cell displacement (in cells) from `center`, minimal-image wrapped.

        Returns an array of shape (*grid.shape, d).
        """
        center = np.asarray(center, dtype=float)
        axes = []
        for j in range(self.d):
            delta = np.arange(self.n) + 0.5 - center[j]
            delta = (delta + self.n / 2.0) % self.n - self.n / 2.0
            axes.append(delta)
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack(grids, axis=-1)


def torus_ball_mask(grid: TorusGrid, center, radius: float) -> np.ndarray:
    """Boolean mask of the lattice ball B_radius(center), periodic metric.

    A cell belongs to the ball when its center lies within Euclidean
    distance `radius` (cell units) of `center`, using minimal-image
    displacements.
    """
    offsets = grid.cell_center_offsets(center)
    return np.einsum("...j,...j->...", offsets, offsets) <= radius**2


@dataclass(frozen=True)
class Box:
    """Axis-aligned sub-box of the torus, given by half-open index ranges.

    The box must not wrap: 0 <= lo < hi <= n per axis.  `hi` is exclusive.
    """

    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have equal length")
        for a, b in zip(self.lo, self.hi):
            if not (0 <= a < b):
                raise ValueError(f"invalid box range [{a}, {b})")
        if min(self.shape) < 3:
            raise ValueError("box must be at least 3 cells wide per axis")

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.shape))

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def validate_inside(self, grid: TorusGrid) -> None:
        if len(self.lo) != grid.d:
            raise ValueError("box dimension does not match grid")
        for a, b in zip(self.lo, self.hi):
            if b > grid.n:
                raise ValueError("box extends beyond the torus")
        if max(self.shape) > grid.n - 1:
            raise ValueError("box must be strictly inside the torus")

    @classmethod
    def centered(cls, grid: TorusGrid, half_width: int, center=None) -> "Box":
        """Box of side 2*half_width centered at `center` (default: torus middle)."""
        if center is None:
            center = [grid.n // 2] * grid.d
        lo, hi = [], []
        for c in center:
            a, b = int(c) - half_width, int(c) + half_width
            if a < 0 or b > grid.n:
                raise ValueError("centered box does not fit inside the torus")
            lo.append(a)
            hi.append(b)
        return cls(tuple(lo), tuple(hi))

    def frame_mask(self) -> np.ndarray:
        """True on the outermost 1-cell ring of the box."""
        mask = np.zeros(self.shape, dtype=bool)
        for axis in range(self.d):
            sl = [slice(None)] * self.d
            sl[axis] = 0
            mask[tuple(sl)] = True
            sl[axis] = -1
            mask[tuple(sl)] = True
        return mask

    def interior_mask(self) -> np.ndarray:
        return ~self.frame_mask()

    def cell_centers(self) -> np.ndarray:
        """Absolute cell-center coordinates in cell units, shape (*shape, d)."""
        axes = [np.arange(a, b) + 0.5 for a, b in zip(self.lo, self.hi)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack(grids, axis=-1)

    def ball_mask(self, center, radius: float) -> np.ndarray:
        """Lattice ball in absolute coordinates, restricted to this box."""
        delta = self.cell_centers() - np.asarray(center, dtype=float)
        return np.einsum("...j,...j->...", delta, delta) <= radius**2

    def contains_ball(self, center, radius: float, margin: int = 0) -> bool:
        center = np.asarray(center, dtype=float)
        for j in range(self.d):
            if center[j] - radius < self.lo[j] + margin:
                return False
            if center[j] + radius > self.hi[j] - margin:
                return False
        return True


_RANK_SHAPES = {0: (), 1: ("d",), 3: ("d", "d", "d")}


@dataclass
class LatticeField:
    """Scalar, vector or rank-3 tensor valued function on the torus or a box.

    `values` has the spatial axes first and the component axes last:
    rank 0 -> (*spatial,), rank 1 -> (*spatial, d), rank 3 -> (*spatial, d, d, d).
    """

    grid: TorusGrid
    rank: int
    values: np.ndarray
    box: Box | None = field(default=None)

    def __post_init__(self):
        if self.rank not in _RANK_SHAPES:
            raise ValueError(f"rank must be 0, 1 or 3, got {self.rank}")
        spatial = self.box.shape if self.box is not None else self.grid.shape
        expected = spatial + (self.grid.d,) * (0 if self.rank == 0 else self.rank)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != expected:
            raise ValueError(
                f"values shape {self.values.shape} does not match expected {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("lattice field contains non-finite entries")

    @classmethod
    def zeros(cls, grid: TorusGrid, rank: int, box: Box | None = None) -> "LatticeField":
        spatial = box.shape if box is not None else grid.shape
        shape = spatial + (grid.d,) * (0 if rank == 0 else rank)
        return cls(grid, rank, np.zeros(shape), box)
