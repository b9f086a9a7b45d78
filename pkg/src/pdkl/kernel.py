"""Regression of discrete micro-moduli from macro-scale training data.

A kernel is stored by canonical offset classes: ``k = 1..m`` in 1D, and
pairs ``(i, j)`` with ``0 <= j <= i <= m, i >= 1`` in 2D (ordered by ``i``
then ``j``). Each class stands for its orbit under the lattice symmetries,
so the regression columns accumulate every member offset.

Bonds act along their own direction: the force on a cell from offset ``o``
is ``omega(o) * n n^T (u[cell + o] - u[cell])`` with ``n = o / |o|``. In 1D
the projector is the scalar 1. The ``componentwise`` coupling replaces the
projector by the identity, so each component sees the same scalar kernel.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from pdkl.coarse import MacroSeries, interior_slices
from pdkl.errors import RankDeficiencyError, UnderdeterminedError
from pdkl.microstructure import MicroStructureSpec, homogenized_modulus_1d

KERNEL_UNITS = "kg m^-3 s^-2"
RANK_RTOL = 1e-10


class Coupling(str, enum.Enum):
    BOND = "bond"
    COMPONENTWISE = "componentwise"


def canonical_offsets(dimension: int, horizon_cells: int) -> list[tuple[int, ...]]:
    m = horizon_cells
    if dimension == 1:
        return [(k,) for k in range(1, m + 1)]
    return [(i, j) for i in range(1, m + 1) for j in range(0, i + 1)]


def orbit(offset: tuple[int, ...]) -> list[tuple[int, ...]]:
    """All lattice offsets sharing a kernel value with ``offset``."""
    if len(offset) == 1:
        return [(offset[0],), (-offset[0],)]
    i, j = offset
    pts = {(a * i, b * j) for a in (1, -1) for b in (1, -1)}
    pts |= {(b, a) for a, b in pts}
    return sorted(pts)


def bond_projector(offset, coupling=Coupling.BOND) -> np.ndarray:
    """Outer product of the unit bond direction with itself (identity when componentwise)."""
    n = np.asarray(offset, dtype=float)
    if Coupling(coupling) is Coupling.COMPONENTWISE:
        return np.eye(len(n))
    return np.outer(n, n) / (n @ n)


@dataclass(eq=False)
class MicroModulus:
    dimension: int
    horizon_cells: int
    cell_length: float
    values: np.ndarray
    coupling: Coupling = Coupling.BOND

    def __post_init__(self):
        self.coupling = Coupling(self.coupling)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.offsets),):
            raise ValueError(
                f"expected {len(self.offsets)} canonical values, got {self.values.shape}"
            )

    @property
    def offsets(self) -> list[tuple[int, ...]]:
        return canonical_offsets(self.dimension, self.horizon_cells)

    def expand(self) -> np.ndarray:
        """Dense kernel indexed by ``offset + m`` per axis; the centre is 0."""
        m = self.horizon_cells
        dense = np.zeros((2 * m + 1,) * self.dimension)
        for value, off in zip(self.values, self.offsets):
            for o in orbit(off):
                dense[tuple(np.add(o, m))] = value
        return dense

    def expand_tensor(self) -> np.ndarray:
        """Dense bond stiffness ``omega(o) n n^T`` with shape ``(2m+1,)*dim + (dim, dim)``."""
        m = self.horizon_cells
        d = self.dimension
        out = np.zeros((2 * m + 1,) * d + (d, d))
        for value, off in zip(self.values, self.offsets):
            for o in orbit(off):
                out[tuple(np.add(o, m))] = value * bond_projector(o, self.coupling)
        return out

    @classmethod
    def from_dense(cls, dense, cell_length: float, coupling=Coupling.BOND) -> MicroModulus:
        dense = np.asarray(dense, dtype=float)
        m = (dense.shape[0] - 1) // 2
        dim = dense.ndim
        offsets = canonical_offsets(dim, m)
        vals = []
        for off in offsets:
            members = [dense[tuple(np.add(o, m))] for o in orbit(off)]
            if not np.allclose(members, members[0], rtol=1e-13, atol=0):
                raise ValueError(f"dense kernel is not symmetric in class {off}")
            vals.append(members[0])
        return cls(dim, m, cell_length, np.array(vals), coupling)

    def save_csv(self, path, *, comment: str = "") -> None:
        lines = [f"# micro_modulus, {KERNEL_UNITS}, dimension={self.dimension}, "
                 f"horizon_cells={self.horizon_cells}, cell_length={self.cell_length!r}, "
                 f"coupling={self.coupling.value}"
                 + (f", {comment}" if comment else "")]
        cols = ["i", "value"] if self.dimension == 1 else ["i", "j", "value"]
        lines.append(",".join(cols))
        for off, v in zip(self.offsets, self.values):
            lines.append(",".join([str(o) for o in off] + [repr(float(v))]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_csv(cls, path) -> MicroModulus:
        text = Path(path).read_text().splitlines()
        meta = dict(tok.split("=", 1) for tok in text[0].lstrip("# ").split(", ") if "=" in tok)
        dim = int(meta["dimension"])
        vals = [float(line.split(",")[-1]) for line in text[2:] if line]
        return cls(dim, int(meta["horizon_cells"]), float(meta["cell_length"]), np.array(vals),
                   meta.get("coupling", Coupling.BOND))


@dataclass(eq=False)
class RegressionSystem:
    """Rows ``A @ omega ~ b`` with per-row weights and an optional ``c @ omega = d``."""

    A: np.ndarray
    b: np.ndarray
    weights: np.ndarray
    dimension: int
    horizon_cells: int
    cell_length: float
    constraint: tuple[np.ndarray, float] | None = None
    coupling: Coupling = Coupling.BOND

    def with_constraint(self, c, d) -> RegressionSystem:
        return replace(self, constraint=(np.asarray(c, dtype=float), float(d)))


@dataclass
class FitReport:
    solver: str
    n_rows: int
    n_cols: int
    rank: int
    residual_norm: float
    relative_residual: float
    condition_estimate: float
    constraint_violation: float | None = None
    positive_definite: bool | None = None
    min_eigenvalue: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> FitReport:
        return cls(**json.loads(Path(path).read_text()))


class SolverMode(str, enum.Enum):
    UNCONSTRAINED = "unconstrained"
    EQUALITY = "equality"
    PENALTY = "penalty"


def _difference_stack(u: np.ndarray, horizon_cells: int, coupling=Coupling.BOND):
    """Per canonical class, sum over its orbit of ``n n^T (u[cell + o] - u[cell])``.

    ``u`` has shape ``(n_times, *grid, n_comp)``. Returns an array of shape
    ``(n_classes, n_times, *interior, n_comp)``.
    """
    grid = u.shape[1:-1]
    dim = len(grid)
    inner = interior_slices(grid, horizon_cells)
    centre = u[(slice(None),) + inner]
    out = []
    for off in canonical_offsets(dim, horizon_cells):
        acc = np.zeros_like(centre)
        for o in orbit(off):
            shifted = tuple(slice(s.start + d, s.stop + d) for s, d in zip(inner, o))
            acc += (u[(slice(None),) + shifted] - centre) @ bond_projector(o, coupling)
        out.append(acc)
    return np.stack(out), inner


def build_system_1d(train: MacroSeries, horizon_cells: int) -> RegressionSystem:
    """Row per (snapshot, interior cell); column k holds u[i+k] + u[i-k] - 2 u[i]."""
    if train.dimension != 1:
        raise ValueError("build_system_1d needs a 1D series")
    stack, inner = _difference_stack(train.displacement, horizon_cells)
    A = stack.reshape(stack.shape[0], -1).T
    b = train.density * train.acceleration[(slice(None),) + inner].reshape(-1)
    _check_shape(A)
    return RegressionSystem(A, b, np.ones(len(b)), 1, horizon_cells, train.cell_length)


def component_weights(train: MacroSeries, horizon_cells: int) -> np.ndarray:
    """Inverse RMS of the density-scaled acceleration per component."""
    inner = interior_slices(train.grid_shape, horizon_cells)
    acc = train.density * train.acceleration[(slice(None),) + inner]
    rms = np.sqrt(np.mean(acc.reshape(-1, acc.shape[-1]) ** 2, axis=0))
    return np.where(rms > 0, 1 / np.where(rms > 0, rms, 1), 1.0)


def build_system_2d(train: MacroSeries, horizon_cells: int, weights=None,
                    coupling=Coupling.BOND) -> RegressionSystem:
    """Two rows (x then y) per (snapshot, interior cell) over the square horizon.

    Rows are scaled per component by ``weights`` (inverse RMS of the training
    right-hand side unless given).
    """
    if train.dimension != 2:
        raise ValueError("build_system_2d needs a 2D series")
    coupling = Coupling(coupling)
    stack, inner = _difference_stack(train.displacement, horizon_cells, coupling)
    A = stack.reshape(stack.shape[0], -1).T
    b = train.density * train.acceleration[(slice(None),) + inner].reshape(-1)
    w = component_weights(train, horizon_cells) if weights is None else np.asarray(weights, float)
    row_w = np.tile(w, len(b) // 2)
    _check_shape(A)
    return RegressionSystem(A, b, row_w, 2, horizon_cells, train.cell_length, coupling=coupling)


def _check_shape(A):
    if A.shape[0] < A.shape[1]:
        raise UnderdeterminedError(f"{A.shape[0]} rows for {A.shape[1]} unknowns")


def energy_constraint_1d(spec: MicroStructureSpec, horizon_cells: int) -> tuple[np.ndarray, float]:
    """Second moment of the kernel equals the homogenized modulus."""
    k = np.arange(1, horizon_cells + 1)
    return (k * spec.cell_length) ** 2, homogenized_modulus_1d(spec)


def energy_constraint_2d(W_uc_per_s2: float, horizon_cells: int, cell_length: float):
    """PD strain energy of ``u = s x`` equals the unit-cell energy (both per s**2)."""
    c = []
    for off in canonical_offsets(2, horizon_cells):
        c.append(0.25 * sum((o[0] * cell_length) ** 2 + (o[1] * cell_length) ** 2 for o in orbit(off)))
    return np.array(c), float(W_uc_per_s2)


def _lstsq_qr(A, b):
    """Least squares through reduced QR; returns solution, rank, singular values."""
    Q, R = np.linalg.qr(A, mode="reduced")
    sv = np.linalg.svd(R, compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv.size and sv[0] > 0 else 0
    if rank < A.shape[1]:
        raise RankDeficiencyError(
            f"numerical rank {rank} < {A.shape[1]} columns "
            f"({A.shape[1] - rank} deficient)", A.shape[1] - rank
        )
    x = sla.solve_triangular(R, Q.T @ b)
    return x, rank, sv


def solve(system: RegressionSystem, mode=SolverMode.EQUALITY, alpha: float | None = None):
    """Fit the kernel; returns ``(MicroModulus, FitReport)``.

    ``penalty`` minimizes ``|W(A w - b)|^2 + alpha (c w - d)^2`` with ``alpha``
    in the units of the unscaled problem.
    """
    mode = SolverMode(mode)
    A = system.A * system.weights[:, None]
    b = system.b * system.weights
    n_rows, n_cols = A.shape
    scale = np.max(np.abs(A), axis=0)
    if np.any(scale == 0):
        dead = int(np.sum(scale == 0))
        raise RankDeficiencyError(f"{dead} all-zero columns; data does not excite them", dead)
    As = A / scale

    if mode is not SolverMode.UNCONSTRAINED and system.constraint is None:
        raise ValueError(f"mode {mode.value} needs a constraint row")

    if mode is SolverMode.UNCONSTRAINED:
        x, rank, sv = _lstsq_qr(As, b)
    elif mode is SolverMode.EQUALITY:
        c, d = system.constraint
        cs = c / scale
        # null-space method: x = x_p + Z y with cs @ Z = 0
        Qc, _ = np.linalg.qr(cs[:, None], mode="complete")
        Z = Qc[:, 1:]
        x_p = cs * d / (cs @ cs)
        if n_rows < n_cols - 1:
            raise UnderdeterminedError(f"{n_rows} rows for {n_cols - 1} free unknowns")
        y, rank, sv = _lstsq_qr(As @ Z, b - As @ x_p)
        x = x_p + Z @ y
        # one refinement step on the constraint
        x += cs * (d - cs @ x) / (cs @ cs)
        rank += 1
    else:
        if alpha is None or alpha < 0:
            raise ValueError("penalty mode needs alpha >= 0")
        c, d = system.constraint
        cs = c / scale
        Aa = np.vstack([As, np.sqrt(alpha) * cs[None, :]])
        ba = np.concatenate([b, [np.sqrt(alpha) * d]])
        x, rank, sv = _lstsq_qr(Aa, ba)

    omega = x / scale
    resid = A @ omega - b
    bnorm = np.linalg.norm(b)
    violation = None
    if system.constraint is not None:
        c, d = system.constraint
        violation = float(abs(c @ omega - d) / abs(d)) if d else float(abs(c @ omega))
    report = FitReport(
        solver=mode.value,
        n_rows=n_rows,
        n_cols=n_cols,
        rank=rank,
        residual_norm=float(np.linalg.norm(resid)),
        relative_residual=float(np.linalg.norm(resid) / bnorm) if bnorm else float("nan"),
        condition_estimate=float(sv[0] / sv[-1]),
        constraint_violation=violation,
        extra={"alpha": alpha} if mode is SolverMode.PENALTY else {},
    )
    kernel = MicroModulus(system.dimension, system.horizon_cells, system.cell_length, omega,
                          system.coupling)
    return kernel, report


def interior_operator_matrix(kernel: MicroModulus, n_cells) -> np.ndarray:
    """Dense operator on ``n_cells`` interior cells with a zero collar.

    Unknowns are ordered cell-major with components innermost. The diagonal
    block is minus the bond stiffness summed over the full horizon; blocks for
    interior neighbours hold the bond stiffness at their offset.
    """
    shape = (n_cells,) * kernel.dimension if np.isscalar(n_cells) else tuple(n_cells)
    tensor = kernel.expand_tensor()
    d = kernel.dimension
    m = kernel.horizon_cells
    n_c = int(np.prod(shape))
    idx = np.arange(n_c).reshape(shape)
    L = np.zeros((n_c, d, n_c, d))
    diag = -tensor.reshape(-1, d, d).sum(axis=0)
    L[np.arange(n_c), :, np.arange(n_c), :] = diag
    for off in np.ndindex(tensor.shape[:d]):
        o = np.subtract(off, m)
        block = tensor[off]
        if not np.any(block) or not np.any(o):
            continue
        src = tuple(slice(max(0, -k), n - max(0, k)) for k, n in zip(o, shape))
        dst = tuple(slice(max(0, k), n - max(0, -k)) for k, n in zip(o, shape))
        L[idx[src].ravel(), :, idx[dst].ravel(), :] += block
    return L.reshape(n_c * d, n_c * d)


@dataclass
class Certificate:
    positive_definite: bool
    min_eigenvalue: float
    failed_pivot: int | None = None


def certify_positive_definite(kernel: MicroModulus, n_cells) -> Certificate:
    """Cholesky test of ``-L`` plus its smallest eigenvalue."""
    negL = -interior_operator_matrix(kernel, n_cells)
    _, info = lapack.dpotrf(negL, lower=1, clean=1)
    lam = float(sla.eigh(negL, eigvals_only=True, subset_by_index=[0, 0])[0])
    return Certificate(info == 0, lam, None if info == 0 else int(info) - 1)


__all__ = [
    "KERNEL_UNITS",
    "MicroModulus",
    "RegressionSystem",
    "FitReport",
    "SolverMode",
    "Coupling",
    "Certificate",
    "canonical_offsets",
    "orbit",
    "bond_projector",
    "build_system_1d",
    "build_system_2d",
    "component_weights",
    "energy_constraint_1d",
    "energy_constraint_2d",
    "solve",
    "interior_operator_matrix",
    "certify_positive_definite",
]
