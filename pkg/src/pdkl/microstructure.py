"""Periodic two-phase media: geometry, phase lookup and homogenized moduli."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from pdkl.errors import ConfigError, OutOfDomainError, UnsupportedError

# relative slack used for interface classification and domain bounds
_TOL = 1e-12


class Layout(str, enum.Enum):
    BAR_1D = "Bar1D_QuarterHalfQuarter"
    SQUARE_INCLUSION = "Plate2D_CenterSquareInclusion"
    CROSS_INCLUSION = "Plate2D_CrossInclusion"

    @property
    def dimension(self) -> int:
        return 1 if self is Layout.BAR_1D else 2


@dataclass(frozen=True)
class MaterialPhase:
    elastic_modulus: float
    density: float
    poisson_ratio: float | None = None

    def __post_init__(self):
        problems = []
        if not self.elastic_modulus > 0:
            problems.append(f"elastic_modulus must be > 0, got {self.elastic_modulus}")
        if not self.density > 0:
            problems.append(f"density must be > 0, got {self.density}")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class MicroStructureSpec:
    """A square (2D) or straight (1D) domain tiled by identical unit cells.

    ``domain_length`` must be an integer multiple of ``cell_length``.
    """

    dimension: int
    domain_length: float
    cell_length: float
    stiff: MaterialPhase
    compliant: MaterialPhase
    layout: Layout

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        problems = []
        if self.dimension not in (1, 2):
            problems.append(f"dimension must be 1 or 2, got {self.dimension}")
        elif self.layout.dimension != self.dimension:
            problems.append(f"layout {self.layout.value} requires dimension {self.layout.dimension}")
        if not (self.domain_length > 0 and self.cell_length > 0):
            problems.append("domain_length and cell_length must be positive")
        else:
            ratio = self.domain_length / self.cell_length
            if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
                problems.append(
                    f"domain_length {self.domain_length} is not an integer multiple of "
                    f"cell_length {self.cell_length}"
                )
        if self.dimension == 2:
            for name, phase in (("stiff", self.stiff), ("compliant", self.compliant)):
                if phase.poisson_ratio is None or abs(phase.poisson_ratio - 1.0 / 3.0) > 1e-12:
                    problems.append(f"{name} phase Poisson ratio must be 1/3 in 2D")
        if problems:
            raise ConfigError(problems)
        if self.n_cells_per_side < 10:
            warnings.warn(
                f"only {self.n_cells_per_side} cells per side; scale separation is weak",
                stacklevel=2,
            )

    @property
    def n_cells_per_side(self) -> int:
        return int(round(self.domain_length / self.cell_length))

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return (self.n_cells_per_side,) * self.dimension

    @property
    def density(self) -> float:
        # volume-averaged density; both phases share it in every bundled case
        frac = compliant_fraction(self.layout)
        return (1 - frac) * self.stiff.density + frac * self.compliant.density

    def unit_cell(self) -> MicroStructureSpec:
        """The same medium restricted to a single cell."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return MicroStructureSpec(
                self.dimension, self.cell_length, self.cell_length,
                self.stiff, self.compliant, self.layout,
            )


def compliant_fraction(layout: Layout) -> float:
    return {Layout.BAR_1D: 0.5, Layout.SQUARE_INCLUSION: 1 / 9, Layout.CROSS_INCLUSION: 4 / 9}[
        Layout(layout)
    ]


def _open_band(frac, lo, hi):
    return (frac > lo + _TOL) & (frac < hi - _TOL)


def compliant_mask(spec: MicroStructureSpec, coords) -> np.ndarray:
    """Vectorized phase lookup: True where ``coords`` fall in the compliant phase.

    ``coords`` has shape ``(n,)`` in 1D or ``(n, 2)`` in 2D. Interface points
    belong to the stiff phase, which keeps every cell mirror-symmetric.
    """
    coords = np.asarray(coords, dtype=float)
    if spec.dimension == 2:
        coords = coords.reshape(-1, 2)
    else:
        coords = coords.reshape(-1)
    L = spec.domain_length
    if np.any(coords < -_TOL * L) or np.any(coords > L * (1 + _TOL)):
        raise OutOfDomainError(f"point outside [0, {L}]^{spec.dimension}")
    scaled = coords / spec.cell_length
    frac = scaled - np.floor(scaled + _TOL)
    frac = np.clip(frac, 0.0, 1.0)
    if spec.layout is Layout.BAR_1D:
        return _open_band(frac, 0.25, 0.75)
    bx = _open_band(frac[:, 0], 1 / 3, 2 / 3)
    by = _open_band(frac[:, 1], 1 / 3, 2 / 3)
    if spec.layout is Layout.SQUARE_INCLUSION:
        return bx & by
    return bx ^ by


def phase_at(spec: MicroStructureSpec, point) -> MaterialPhase:
    """Material phase occupying ``point`` (a float in 1D, an (x, y) pair in 2D)."""
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if point.size != spec.dimension:
        raise OutOfDomainError(f"expected a {spec.dimension}D point, got {point.tolist()}")
    return spec.compliant if compliant_mask(spec, point)[0] else spec.stiff


def homogenized_modulus_1d(spec: MicroStructureSpec) -> float:
    """Effective modulus of the quarter/half/quarter bar cell (series springs)."""
    if spec.dimension != 1 or spec.layout is not Layout.BAR_1D:
        raise UnsupportedError("homogenized_modulus_1d needs the 1D bar layout")
    return 2.0 / (1.0 / spec.stiff.elastic_modulus + 1.0 / spec.compliant.elastic_modulus)


def make_spec(dimension, layout, domain_length, n_cells, E_s, E_c, rho, poisson_ratio=None):
    """Convenience constructor used by configs and tests."""
    nu = poisson_ratio if poisson_ratio is not None else (1 / 3 if dimension == 2 else None)
    return MicroStructureSpec(
        dimension=dimension,
        domain_length=domain_length,
        cell_length=domain_length / n_cells,
        stiff=MaterialPhase(E_s, rho, nu),
        compliant=MaterialPhase(E_c, rho, nu),
        layout=Layout(layout),
    )


def sample_compliant_fraction(spec: MicroStructureSpec, n: int = 300) -> float:
    """Midpoint-rule estimate of the compliant volume fraction of one cell."""
    pts = (np.arange(n) + 0.5) / n * spec.cell_length
    if spec.dimension == 1:
        return float(compliant_mask(spec, pts).mean())
    X, Y = np.meshgrid(pts, pts, indexing="ij")
    return float(compliant_mask(spec, np.column_stack([X.ravel(), Y.ravel()])).mean())


__all__ = [
    "Layout",
    "MaterialPhase",
    "MicroStructureSpec",
    "compliant_fraction",
    "compliant_mask",
    "phase_at",
    "homogenized_modulus_1d",
    "make_spec",
    "sample_compliant_fraction",
]
