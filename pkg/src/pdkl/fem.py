"""Micro-scale finite elements: structured meshes, assembly, explicit dynamics.

1D bars use two-node linear elements with unit cross-section. 2D plates use
four-node bilinear squares in plane stress (unit thickness). Masses are
row-sum lumped so the explicit update needs only a diagonal inverse.

DOF numbering: 1D node ``i`` is DOF ``i``. In 2D node ``(ix, iy)`` has id
``iy * (n + 1) + ix`` and owns DOFs ``2 * id`` (x) and ``2 * id + 1`` (y).
"""

from __future__ import annotations

import enum
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from pdkl._linalg import power_iteration
from pdkl.errors import ConfigError, DivergenceError, NumericalError, PdklError
from pdkl.microstructure import MicroStructureSpec, compliant_mask

POISSON_2D = 1.0 / 3.0


@dataclass(frozen=True, eq=False)
class FemMesh:
    spec: MicroStructureSpec
    elements_per_cell: int
    nodes: np.ndarray
    elements: np.ndarray
    compliant: np.ndarray

    @property
    def dimension(self) -> int:
        return self.spec.dimension

    @property
    def elements_per_side(self) -> int:
        return self.elements_per_cell * self.spec.n_cells_per_side

    @property
    def h(self) -> float:
        return self.spec.domain_length / self.elements_per_side

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_dofs(self) -> int:
        return self.n_nodes * self.dimension

    @property
    def youngs(self) -> np.ndarray:
        return np.where(
            self.compliant, self.spec.compliant.elastic_modulus, self.spec.stiff.elastic_modulus
        )

    @property
    def densities(self) -> np.ndarray:
        return np.where(self.compliant, self.spec.compliant.density, self.spec.stiff.density)

    def edge_nodes(self, edge: str) -> np.ndarray:
        n = self.elements_per_side
        if self.dimension == 1:
            return {"left": np.array([0]), "right": np.array([n])}[edge]
        ids = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)  # [iy, ix]
        return {
            "left": ids[:, 0],
            "right": ids[:, n],
            "bottom": ids[0, :],
            "top": ids[n, :],
        }[edge].copy()

    def boundary_nodes(self) -> np.ndarray:
        if self.dimension == 1:
            return np.array([0, self.elements_per_side])
        return np.unique(np.concatenate([self.edge_nodes(e) for e in ("left", "right", "bottom", "top")]))


def build_mesh(spec: MicroStructureSpec, elements_per_cell: int) -> FemMesh:
    """Structured mesh whose element edges coincide with every phase interface."""
    divisor = 4 if spec.dimension == 1 else 3
    if elements_per_cell < 1 or elements_per_cell % divisor:
        raise ConfigError(
            f"elements_per_cell={elements_per_cell} must be a positive multiple of {divisor} "
            f"in {spec.dimension}D so element edges align with phase interfaces"
        )
    n = elements_per_cell * spec.n_cells_per_side
    h = spec.domain_length / n
    coords = np.arange(n + 1) * h
    if spec.dimension == 1:
        nodes = coords[:, None]
        elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        centroids = (np.arange(n) + 0.5) * h
    else:
        X, Y = np.meshgrid(coords, coords)  # [iy, ix]
        nodes = np.column_stack([X.ravel(), Y.ravel()])
        iy, ix = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        base = (iy * (n + 1) + ix).ravel()
        elements = np.column_stack([base, base + 1, base + n + 2, base + n + 1])
        centroids = np.column_stack([(ix.ravel() + 0.5) * h, (iy.ravel() + 0.5) * h])
    return FemMesh(spec, elements_per_cell, nodes, elements, compliant_mask(spec, centroids))


def plane_stress_matrix(E: float = 1.0, nu: float = POISSON_2D) -> np.ndarray:
    return E / (1 - nu**2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])


def _q4_B(xi: float, eta: float, h: float) -> np.ndarray:
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    dN_dxi = 0.25 * corners[:, 0] * (1 + eta * corners[:, 1])
    dN_deta = 0.25 * corners[:, 1] * (1 + xi * corners[:, 0])
    dN_dx, dN_dy = dN_dxi * 2 / h, dN_deta * 2 / h
    B = np.zeros((3, 8))
    B[0, 0::2] = dN_dx
    B[1, 1::2] = dN_dy
    B[2, 0::2] = dN_dy
    B[2, 1::2] = dN_dx
    return B


def q4_stiffness(E: float = 1.0, h: float = 1.0, nu: float = POISSON_2D) -> np.ndarray:
    """8x8 stiffness of a square bilinear element, 2x2 Gauss quadrature."""
    D = plane_stress_matrix(E, nu)
    g = 1 / math.sqrt(3)
    Ke = np.zeros((8, 8))
    for xi in (-g, g):
        for eta in (-g, g):
            B = _q4_B(xi, eta, h)
            Ke += B.T @ D @ B * (h * h / 4)
    return Ke


def element_dofs(mesh: FemMesh) -> np.ndarray:
    if mesh.dimension == 1:
        return mesh.elements
    el = mesh.elements
    return np.stack([2 * el, 2 * el + 1], axis=-1).reshape(len(el), 8)


def assemble(mesh: FemMesh) -> tuple[sp.csr_matrix, np.ndarray]:
    """Global stiffness (CSR) and lumped mass vector, one entry per DOF."""
    E = mesh.youngs
    rho = mesh.densities
    h = mesh.h
    if mesh.dimension == 1:
        ke = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
        me = rho * h / 2
    else:
        ke = q4_stiffness(1.0, h)
        me = rho * h * h / 4
    dofs = element_dofs(mesh)
    nloc = dofs.shape[1]
    vals = (E[:, None, None] * ke[None]).reshape(-1)
    rows = np.repeat(dofs, nloc, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, nloc)).reshape(-1)
    K = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()
    K.sum_duplicates()
    M = np.zeros(mesh.n_dofs)
    np.add.at(M, dofs.reshape(-1), np.repeat(me, nloc))
    return K, M


class DriveKind(str, enum.Enum):
    POLYNOMIAL_PULSE = "PolynomialPulse"
    SINUSOIDAL_BURST = "SinusoidalBurst"
    SHEAR_2D = "Shear2D"
    EXTENSION_2D = "Extension2D"


@dataclass(frozen=True)
class BoundaryDrive:
    """Prescribed displacement history on one edge.

    The polynomial pulse is ``u0 * a0 * t**6 * (t - T_s)**6`` for ``t < T_s``
    and zero afterwards; when ``a0`` is omitted it is chosen so the peak equals
    ``u0``. The sinusoidal burst is ``u0 * a0 * sin(2 pi t / T_s)`` (default
    ``a0 = 1``). ``Shear2D`` drives the y component, every other kind the x
    component (or the only component in 1D).
    """

    kind: DriveKind
    u0: float
    T_s: float
    a0: float | None = None
    applied_edge: str = "right"

    def __post_init__(self):
        object.__setattr__(self, "kind", DriveKind(self.kind))
        if self.a0 is None:
            a0 = 1.0 if self.kind is DriveKind.SINUSOIDAL_BURST else (self.T_s / 2) ** -12
            object.__setattr__(self, "a0", a0)
        if not self.T_s > 0:
            raise ConfigError(f"drive T_s must be positive, got {self.T_s}")

    @property
    def component(self) -> int:
        return 1 if self.kind is DriveKind.SHEAR_2D else 0

    def displacement(self, t):
        return self._eval(t, 0)

    def velocity(self, t):
        return self._eval(t, 1)

    def acceleration(self, t):
        return self._eval(t, 2)

    def _scalar(self, t: float, order: int) -> float:
        if t >= self.T_s:
            return 0.0
        if self.kind is DriveKind.SINUSOIDAL_BURST:
            w = 2 * math.pi / self.T_s
            base = (math.sin(w * t), math.cos(w * t), -math.sin(w * t))[order] * w**order
        else:
            # t**6 (t - T_s)**6 = g**6 with g = t (t - T_s)
            g, dg = t * (t - self.T_s), 2 * t - self.T_s
            if order == 0:
                base = g**6
            elif order == 1:
                base = 6 * g**5 * dg
            else:
                base = 30 * g**4 * dg * dg + 12 * g**5
        return self.u0 * self.a0 * base

    def _eval(self, t, order):
        if np.ndim(t) == 0:
            return self._scalar(float(t), order)
        return np.array([self._scalar(float(x), order) for x in np.ravel(t)]).reshape(np.shape(t))


@dataclass(eq=False)
class MicroState:
    """Recorded micro-scale history, one row per recorded time.

    ``basis`` is ``"nodal"`` when columns are mesh DOFs, or ``"cell_average"``
    when the recorder already applied the (linear) unit-cell averaging; in that
    case columns are cells in row-major order with components innermost.
    """

    times: np.ndarray
    displacement: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    basis: str = "nodal"
    dt: float = float("nan")
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        """Write an ``.npz`` archive with fixed entry timestamps (byte-reproducible)."""
        arrays = {
            "times": self.times,
            "displacement": self.displacement,
            "velocity": self.velocity,
            "acceleration": self.acceleration,
            "basis": np.array(self.basis),
            "dt": np.array(self.dt),
            "meta": np.array(json.dumps(self.meta, sort_keys=True)),
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
                with zf.open(info, "w", force_zip64=True) as fh:
                    np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)

    @classmethod
    def load(cls, path) -> MicroState:
        with np.load(Path(path)) as data:
            return cls(
                times=data["times"],
                displacement=data["displacement"],
                velocity=data["velocity"],
                acceleration=data["acceleration"],
                basis=str(data["basis"]),
                dt=float(data["dt"]),
                meta=json.loads(str(data["meta"])) if "meta" in data.files else {},
            )


def cfl_timestep(K, M, *, free=None, rtol: float = 1e-6, max_iter: int = 10_000, seed: int = 0) -> float:
    """Critical central-difference step 2/sqrt(lambda_max) of the pencil (K, M).

    Only DOFs flagged in ``free`` take part; prescribed DOFs do not limit
    the step.
    """
    K = sp.csr_matrix(K)
    M = np.asarray(M, dtype=float)
    if free is not None:
        idx = np.flatnonzero(free)
        K = K[idx][:, idx]
        M = M[idx]
    s = 1 / np.sqrt(M)
    lam = power_iteration(lambda x: s * (K @ (s * x)), len(M), rtol=rtol, max_iter=max_iter, seed=seed)
    if lam <= 0:
        raise NumericalError("stiffness has no positive eigenvalue; no stability limit")
    return 2 / math.sqrt(lam)


def boundary_dofs(mesh: FemMesh, drive: BoundaryDrive) -> tuple[np.ndarray, np.ndarray]:
    """Fixed DOFs on the edge opposite the drive and the driven DOFs."""
    opposite = {"right": "left", "left": "right", "top": "bottom", "bottom": "top"}[drive.applied_edge]
    fixed_nodes = mesh.edge_nodes(opposite)
    driven_nodes = mesh.edge_nodes(drive.applied_edge)
    if mesh.dimension == 1:
        return fixed_nodes, driven_nodes
    fixed = np.sort(np.concatenate([2 * fixed_nodes, 2 * fixed_nodes + 1]))
    return fixed, 2 * driven_nodes + drive.component


def explicit_dynamics(
    K,
    M,
    drive: BoundaryDrive,
    T: float,
    dt_out: float,
    *,
    fixed_dofs=(),
    driven_dofs=(),
    safety_factor: float = 0.5,
    dt: float | None = None,
    u_init=None,
    v_init=None,
    observe=None,
    seed: int = 0,
    divergence_factor: float = 1e6,
) -> MicroState:
    """Central-difference integration of ``M a = -K u`` with Dirichlet data.

    The step is ``safety_factor * cfl_timestep`` rounded down so that it
    divides ``dt_out``. Recorded accelerations are the residual ``-K u / M``
    on free DOFs and the prescribed kinematics elsewhere. ``observe`` is an
    optional linear map (sparse matrix) applied to every recorded vector.
    """
    K = sp.csr_matrix(K)
    M = np.asarray(M, dtype=float)
    n = K.shape[0]
    fixed = np.asarray(fixed_dofs, dtype=int)
    driven = np.asarray(driven_dofs, dtype=int)
    free = np.ones(n, dtype=bool)
    free[fixed] = False
    free[driven] = False

    n_rec = int(round(T / dt_out)) + 1
    if n_rec < 2 or abs((n_rec - 1) * dt_out - T) > 1e-9 * T:
        raise ConfigError(f"T={T} is not a whole multiple of dt_out={dt_out}")
    if dt is None:
        dt_max = safety_factor * cfl_timestep(K, M, free=free, seed=seed)
        n_sub = max(1, math.ceil(dt_out / dt_max * (1 - 1e-12)))
    else:
        n_sub = max(1, int(round(dt_out / dt)))
        if abs(n_sub * dt - dt_out) > 1e-9 * dt_out:
            raise ConfigError(f"dt={dt} must divide dt_out={dt_out}")
    dt = dt_out / n_sub

    minv = 1 / M
    u = np.zeros(n) if u_init is None else np.array(u_init, dtype=float)
    v = np.zeros(n) if v_init is None else np.array(v_init, dtype=float)
    scale = max(_peak_drive(drive), float(np.max(np.abs(u), initial=0.0)))
    limit = divergence_factor * scale if scale > 0 else math.inf

    def accel(x, t):
        a = -minv * (K @ x)
        a[fixed] = 0.0
        a[driven] = drive.acceleration(t)
        return a

    u[fixed] = 0.0
    u[driven] = drive.displacement(0.0)
    a = accel(u, 0.0)
    u_prev = u - dt * v + 0.5 * dt * dt * a

    project = (lambda x: x) if observe is None else (lambda x: observe @ x)
    m = n if observe is None else observe.shape[0]
    U = np.empty((n_rec, m))
    V = np.empty((n_rec, m))
    A = np.empty((n_rec, m))

    total = (n_rec - 1) * n_sub
    for k in range(total + 1):
        t = k * dt
        if k:
            a = accel(u, t)
        u_next = 2 * u - u_prev + dt * dt * a
        u_next[fixed] = 0.0
        u_next[driven] = drive.displacement(t + dt)
        if k % n_sub == 0:
            r = k // n_sub
            if not np.all(np.abs(u) <= limit):
                raise DivergenceError(
                    f"explicit dynamics diverged at t={t:.6g} s with dt={dt:.6g} s"
                )
            U[r] = project(u)
            V[r] = project((u_next - u_prev) / (2 * dt))
            A[r] = project(a)
        u_prev, u = u, u_next

    times = np.arange(n_rec) * dt_out
    return MicroState(times, U, V, A, basis="nodal" if observe is None else "cell_average", dt=dt)


def _peak_drive(drive: BoundaryDrive) -> float:
    return float(np.max(np.abs(drive.displacement(np.linspace(0, drive.T_s, 2001)))))


def unit_cell_energy_density(spec: MicroStructureSpec, s: float, elements_per_cell: int = 12) -> float:
    """Average strain energy density of one cell under ``u = s * x`` on its boundary.

    Units are J/m^3 per unit thickness.
    """
    if spec.dimension != 2:
        raise PdklError("unit_cell_energy_density is defined for 2D media only")
    cell = spec.unit_cell()
    mesh = build_mesh(cell, elements_per_cell)
    K, _ = assemble(mesh)
    bnodes = mesh.boundary_nodes()
    centre = cell.cell_length / 2
    u = np.zeros(mesh.n_dofs)
    bdofs = np.concatenate([2 * bnodes, 2 * bnodes + 1])
    u[2 * bnodes] = s * (mesh.nodes[bnodes, 0] - centre)
    u[2 * bnodes + 1] = s * (mesh.nodes[bnodes, 1] - centre)
    interior = np.setdiff1d(np.arange(mesh.n_dofs), bdofs)
    Kii = K[interior][:, interior].tocsc()
    rhs = -(K[interior][:, bdofs] @ u[bdofs])
    if np.any(rhs):
        u[interior] = spla.spsolve(Kii, rhs)
    energy = 0.5 * u @ (K @ u)
    return float(energy / cell.cell_length**2)


__all__ = [
    "FemMesh",
    "BoundaryDrive",
    "DriveKind",
    "MicroState",
    "build_mesh",
    "assemble",
    "q4_stiffness",
    "plane_stress_matrix",
    "cfl_timestep",
    "boundary_dofs",
    "explicit_dynamics",
    "unit_cell_energy_density",
]
