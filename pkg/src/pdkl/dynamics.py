"""Discrete bond-based peridynamic forward model on the unit-cell lattice.

Fields live on the full cell grid with shape ``(*grid_shape, n_components)``.
Cells within ``horizon_cells`` of the boundary form the collar: their values
are prescribed data, and the operator is only evaluated on interior cells.
Each bond pulls along its own direction, so in 2D the two displacement
components are coupled through ``n n^T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import CubicSpline

from pdkl.coarse import MacroSeries, TrainTestSplit, interior_slices
from pdkl.errors import CoverageError, DivergenceError
from pdkl.kernel import MicroModulus


@dataclass(eq=False)
class PDModel:
    kernel: MicroModulus
    density: float
    grid_shape: tuple[int, ...]
    collar_drive: MacroSeries | None = None

    def __post_init__(self):
        self.grid_shape = tuple(self.grid_shape)
        if len(self.grid_shape) != self.kernel.dimension:
            raise ValueError("grid and kernel dimensions differ")
        # raises ConfigError when the horizon leaves no interior
        self.interior = interior_slices(self.grid_shape, self.kernel.horizon_cells)
        self._tensor = self.kernel.expand_tensor()

    @property
    def horizon_cells(self) -> int:
        return self.kernel.horizon_cells

    @property
    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.grid_shape, dtype=bool)
        mask[self.interior] = True
        return mask


def _as_field(model: PDModel, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape == model.grid_shape:
        u = u[..., None]
    if u.shape[:-1] != model.grid_shape:
        raise CoverageError(f"field of shape {u.shape} does not cover grid {model.grid_shape}")
    if not np.all(np.isfinite(u)):
        raise CoverageError("field has missing (non-finite) values")
    return u


def apply_operator(model: PDModel, u) -> np.ndarray:
    """Sum of ``omega(o) n n^T (u[cell + o] - u[cell])`` over the horizon, on interior cells.

    Returns shape ``(*interior_shape, n_components)``.
    """
    u = _as_field(model, u)
    m = model.horizon_cells
    inner = model.interior
    tensor = model._tensor
    d = model.kernel.dimension
    if u.shape[-1] != d:
        raise CoverageError(f"expected {d} displacement components, got {u.shape[-1]}")
    centre = u[inner]
    out = np.zeros_like(centre)
    for off in np.ndindex(tensor.shape[:d]):
        block = tensor[off]
        if not np.any(block):
            continue
        o = np.subtract(off, m)
        shifted = tuple(slice(s.start + k, s.stop + k) for s, k in zip(inner, o))
        out += (u[shifted] - centre) @ block
    return out


@dataclass(eq=False)
class OperatorMatrix:
    """``apply_operator(u).ravel() == interior @ u_flat[interior_index] + collar @ u_flat[collar_index]``
    with ``u_flat = u.ravel()`` (cells row-major, components innermost)."""

    interior: sp.csr_matrix
    collar: sp.csr_matrix
    interior_index: np.ndarray
    collar_index: np.ndarray

    def apply(self, u_flat: np.ndarray) -> np.ndarray:
        return self.interior @ u_flat[self.interior_index] + self.collar @ u_flat[self.collar_index]


def assemble_matrix(model: PDModel) -> OperatorMatrix:
    """Sparse operator over flattened grid DOFs."""
    shape = model.grid_shape
    d = model.kernel.dimension
    cells = np.arange(int(np.prod(shape))).reshape(shape)
    mask = model.interior_mask
    dof = cells[..., None] * d + np.arange(d)
    int_idx = dof[mask].ravel()
    col_idx = dof[~mask].ravel()
    pos = np.full(dof.size, -1)
    pos[int_idx] = np.arange(len(int_idx))
    cpos = np.full(dof.size, -1)
    cpos[col_idx] = np.arange(len(col_idx))

    m = model.horizon_cells
    tensor = model._tensor
    centre = cells[model.interior].ravel()
    rows, cols, vals, crow, ccol, cval = [], [], [], [], [], []
    diag = -tensor.reshape(-1, d, d).sum(axis=0)
    for a in range(d):
        for b in range(d):
            rows.append(pos[centre * d + a]); cols.append(pos[centre * d + b])
            vals.append(np.full(len(centre), diag[a, b]))
    for off in np.ndindex(tensor.shape[:d]):
        block = tensor[off]
        if not np.any(block):
            continue
        o = np.subtract(off, m)
        shifted = tuple(slice(s.start + k, s.stop + k) for s, k in zip(model.interior, o))
        nb = cells[shifted].ravel()
        inside = mask.ravel()[nb]
        for a in range(d):
            for b in range(d):
                if block[a, b] == 0:
                    continue
                r = pos[centre * d + a]
                rows.append(r[inside]); cols.append(pos[nb[inside] * d + b])
                vals.append(np.full(inside.sum(), block[a, b]))
                crow.append(r[~inside]); ccol.append(cpos[nb[~inside] * d + b])
                cval.append(np.full((~inside).sum(), block[a, b]))
    n_i, n_c = len(int_idx), len(col_idx)
    Li = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_i, n_i))
    if crow:
        Lc = sp.csr_matrix((np.concatenate(cval), (np.concatenate(crow), np.concatenate(ccol))), shape=(n_i, n_c))
    else:
        Lc = sp.csr_matrix((n_i, n_c))
    Li.sum_duplicates()
    Lc.sum_duplicates()
    return OperatorMatrix(Li, Lc, int_idx, col_idx)


def pd_timestep(model: PDModel, *, seed: int = 0) -> float:
    """Critical central-difference step ``2 / sqrt(lambda_max(-L / rho))``."""
    L = -assemble_matrix(model).interior / model.density
    n = L.shape[0]
    if n <= 64:
        lam = float(np.linalg.eigvalsh(L.toarray())[-1])
    else:
        v0 = np.random.default_rng(seed).standard_normal(n)
        lam = float(spla.eigsh(L, k=1, which="LA", v0=v0, tol=1e-10, return_eigenvectors=False)[0])
    lam = max(lam, 0.0)
    return math.inf if lam == 0 else 2 / math.sqrt(lam)


class _Collar:
    """Collar values of the drive series at arbitrary times; without a drive
    the collar keeps its initial values."""

    def __init__(self, model: PDModel, t_start: float, t_end: float, initial: np.ndarray):
        drive = model.collar_drive
        self.mask = ~model.interior_mask
        if drive is None:
            self.times = None
            self.values = initial[self.mask].copy()
            return
        if drive.grid_shape != model.grid_shape:
            raise CoverageError("collar drive grid does not match the model grid")
        t = drive.times
        slack = 1e-9 * max(abs(t[-1]), 1e-300)
        if t_start < t[0] - slack or t_end > t[-1] + slack:
            raise CoverageError(
                f"collar data covers [{t[0]}, {t[-1]}] but integration needs [{t_start}, {t_end}]"
            )
        self.times = t
        self.values = drive.displacement[:, self.mask]
        self._spline = None

    def __call__(self, t: float):
        if self.times is None:
            return self.values
        k = int(np.searchsorted(self.times, t))
        for j in (k - 1, k):
            if 0 <= j < len(self.times) and abs(self.times[j] - t) <= 1e-9 * (self.times[1] - self.times[0]):
                return self.values[j]
        if self._spline is None:
            self._spline = CubicSpline(self.times, self.values, axis=0)
        return self._spline(t)


def integrate(model: PDModel, u0, v0, t_start: float, t_end: float, dt: float | None = None,
              record_dt: float | None = None, *, safety: float = 0.25, seed: int = 0,
              divergence_factor: float = 1e6) -> MacroSeries:
    """Central-difference solution of ``rho a = L[u]`` with the collar prescribed.

    ``dt`` defaults to ``safety * pd_timestep`` rounded down to divide
    ``record_dt`` (which defaults to the collar-drive cadence). Recorded
    accelerations are ``L[u] / rho`` on interior cells and zero in the collar.
    """
    u = _as_field(model, u0).copy()
    v = np.zeros_like(u) if v0 is None else _as_field(model, v0).copy()
    collar = _Collar(model, t_start, t_end, u)
    if record_dt is None:
        if model.collar_drive is not None and len(model.collar_drive.times) > 1:
            record_dt = float(model.collar_drive.times[1] - model.collar_drive.times[0])
        else:
            record_dt = (t_end - t_start) / 100
    if dt is None:
        dt_max = safety * pd_timestep(model, seed=seed)
        n_sub = max(1, math.ceil(record_dt / dt_max * (1 - 1e-12)))
    else:
        n_sub = max(1, int(round(record_dt / dt)))
        if abs(n_sub * dt - record_dt) > 1e-9 * record_dt:
            raise ValueError(f"dt={dt} must divide record_dt={record_dt}")
    dt = record_dt / n_sub
    n_rec = int(round((t_end - t_start) / record_dt)) + 1

    rho = model.density
    mask = collar.mask
    inner = model.interior
    scale = max(float(np.max(np.abs(u))), float(np.max(np.abs(collar.values), initial=0.0)))
    limit = divergence_factor * scale if scale > 0 else math.inf

    def accel(x):
        a = np.zeros_like(x)
        a[inner] = apply_operator(model, x) / rho
        return a

    u[mask] = collar(t_start)
    a = accel(u)
    U = np.empty((n_rec,) + u.shape)
    A = np.empty((n_rec,) + u.shape)
    u_prev = None
    for k in range((n_rec - 1) * n_sub + 1):
        t = t_start + k * dt
        if k:
            a = accel(u)
        if k % n_sub == 0:
            r = k // n_sub
            if not np.all(np.abs(u) <= limit):
                raise DivergenceError(f"PD integration diverged at t={t:.6g} s with dt={dt:.6g} s")
            U[r], A[r] = u, a
            if r == n_rec - 1:
                break
        if u_prev is None:
            u_next = u + dt * v + 0.5 * dt * dt * a
        else:
            u_next = 2 * u - u_prev + dt * dt * a
        u_next[mask] = collar(t + dt)
        u_prev, u = u, u_next

    times = t_start + np.arange(n_rec) * record_dt
    return MacroSeries(times, U, A, model.kernel.cell_length, rho)


def centered_velocity(series: MacroSeries, index: int) -> np.ndarray:
    """Three-point centred difference in time, one-sided at the ends."""
    t, u = series.times, series.displacement
    if 0 < index < len(t) - 1:
        return (u[index + 1] - u[index - 1]) / (t[index + 1] - t[index - 1])
    if index == 0:
        return (u[1] - u[0]) / (t[1] - t[0])
    return (u[-1] - u[-2]) / (t[-1] - t[-2])


def predict_accelerations(model: PDModel, series: MacroSeries) -> MacroSeries:
    """Operator applied to measured displacements at every snapshot (no time stepping)."""
    A = np.zeros_like(series.displacement)
    for k in range(len(series.times)):
        A[k][model.interior] = apply_operator(model, series.displacement[k]) / model.density
    return MacroSeries(series.times.copy(), series.displacement.copy(), A, series.cell_length, model.density)


def predict_from_split(model: PDModel, split: TrainTestSplit, *, dt: float | None = None):
    """Test-window predictions from a trained model.

    Returns ``(displacement_series, acceleration_series)``: the first is the
    time-integrated solution from ``T_t`` (started from the measured state and
    its centred-difference velocity) over ``[T_t, T]``; the second holds
    ``L[u_data] / rho`` on the test snapshots.
    """
    full = split.full
    k0 = len(split.train.times) - 1
    if model.collar_drive is None:
        model = PDModel(model.kernel, model.density, model.grid_shape, full)
    u0 = full.displacement[k0]
    v0 = centered_velocity(full, k0)
    disp = integrate(model, u0, v0, float(full.times[k0]), float(full.times[-1]), dt)
    acc = predict_accelerations(model, split.test)
    return disp, acc


__all__ = [
    "PDModel",
    "OperatorMatrix",
    "apply_operator",
    "assemble_matrix",
    "pd_timestep",
    "integrate",
    "centered_velocity",
    "predict_accelerations",
    "predict_from_split",
]
