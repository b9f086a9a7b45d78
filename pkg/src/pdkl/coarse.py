"""Unit-cell averaging of micro-scale histories and train/test bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from pdkl.errors import AlignmentError, ConfigError
from pdkl.fem import FemMesh, MicroState
from pdkl.microstructure import MicroStructureSpec


@dataclass(eq=False)
class MacroSeries:
    """Per-cell averaged fields on a full rectangular cell grid.

    ``displacement`` and ``acceleration`` have shape
    ``(n_times, *grid_shape, n_components)``; 1D series carry one component.
    """

    times: np.ndarray
    displacement: np.ndarray
    acceleration: np.ndarray
    cell_length: float
    density: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.displacement.shape[0] != len(self.times) or self.acceleration.shape != self.displacement.shape:
            raise ValueError("displacement/acceleration must share the time grid and cell grid")

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.displacement.shape[1:-1]

    @property
    def dimension(self) -> int:
        return len(self.grid_shape)

    @property
    def n_components(self) -> int:
        return self.displacement.shape[-1]

    def select_times(self, mask) -> MacroSeries:
        mask = np.asarray(mask)
        return replace(
            self,
            times=self.times[mask],
            displacement=self.displacement[mask],
            acceleration=self.acceleration[mask],
        )


@dataclass(eq=False)
class TrainTestSplit:
    train: MacroSeries
    test: MacroSeries
    T_t: float

    @property
    def full(self) -> MacroSeries:
        return replace(
            self.train,
            times=np.concatenate([self.train.times, self.test.times]),
            displacement=np.concatenate([self.train.displacement, self.test.displacement]),
            acceleration=np.concatenate([self.train.acceleration, self.test.acceleration]),
        )


def cell_average_operator(mesh: FemMesh, spec: MicroStructureSpec | None = None) -> sp.csr_matrix:
    """Sparse map from nodal DOFs to flattened per-cell averages.

    Output rows follow row-major cell order with components innermost, i.e.
    the flattening of ``(*grid_shape, n_components)``. The weights integrate
    the FEM interpolant exactly: trapezoid over 1D elements, and in 2D each
    bilinear element contributes the mean of its four nodal values.
    """
    spec = mesh.spec if spec is None else spec
    if not np.isclose(spec.cell_length, mesh.spec.cell_length, rtol=1e-12) or (
        spec.n_cells_per_side != mesh.spec.n_cells_per_side
    ):
        raise AlignmentError("mesh cells do not coincide with the unit cells of the spec")
    n_cells = spec.n_cells_per_side
    epc = mesh.elements_per_cell
    if mesh.elements_per_side != epc * n_cells:
        raise AlignmentError("mesh element count is not a whole number per cell")

    if mesh.dimension == 1:
        el = np.arange(mesh.elements_per_side)
        cell = el // epc
        rows = np.repeat(cell, 2)
        cols = mesh.elements.reshape(-1)
        vals = np.full(cols.shape, 0.5 / epc)
        return sp.csr_matrix((vals, (rows, cols)), shape=(n_cells, mesh.n_nodes))

    n = mesh.elements_per_side
    iy, ix = np.divmod(np.arange(n * n), n)
    cell_flat = (ix // epc) * n_cells + (iy // epc)  # row-major over (p, q) = (x, y)
    rows = np.repeat(cell_flat, 4)
    nodes = mesh.elements.reshape(-1)
    vals = np.full(nodes.shape, 0.25 / epc**2)
    rows2 = np.concatenate([2 * rows, 2 * rows + 1])
    cols2 = np.concatenate([2 * nodes, 2 * nodes + 1])
    vals2 = np.concatenate([vals, vals])
    return sp.csr_matrix((vals2, (rows2, cols2)), shape=(2 * n_cells**2, mesh.n_dofs))


def cell_average(state: MicroState, mesh: FemMesh, spec: MicroStructureSpec) -> MacroSeries:
    """Average displacement and acceleration over every unit cell."""
    shape = spec.grid_shape + (spec.dimension,)
    if state.basis == "cell_average":
        U, A = state.displacement, state.acceleration
        if U.shape[1] != int(np.prod(shape)):
            raise AlignmentError("pre-averaged state does not match the cell grid")
    else:
        P = cell_average_operator(mesh, spec)
        if P.shape[1] != state.displacement.shape[1]:
            raise AlignmentError("state does not match the mesh DOF count")
        U = (P @ state.displacement.T).T
        A = (P @ state.acceleration.T).T
    nt = len(state.times)
    return MacroSeries(
        times=state.times.copy(),
        displacement=np.ascontiguousarray(U).reshape((nt,) + shape),
        acceleration=np.ascontiguousarray(A).reshape((nt,) + shape),
        cell_length=spec.cell_length,
        density=spec.density,
    )


def split(series: MacroSeries, T_t: float) -> TrainTestSplit:
    """Snapshots with ``t <= T_t`` train, the rest test."""
    t = series.times
    if not (t[0] < T_t < t[-1]):
        raise ConfigError(f"T_t={T_t} must lie strictly inside ({t[0]}, {t[-1]})")
    # tolerate round-off in recorded times so a snapshot at T_t goes to train
    train = t <= T_t * (1 + 1e-12) + 1e-300
    return TrainTestSplit(series.select_times(train), series.select_times(~train), T_t)


def interior_cells(series_or_shape, horizon_cells: int) -> tuple[range, ...]:
    """Cells whose full square horizon lies inside the grid, one range per axis."""
    shape = series_or_shape.grid_shape if isinstance(series_or_shape, MacroSeries) else tuple(series_or_shape)
    if horizon_cells < 1:
        raise ConfigError(f"horizon_cells must be >= 1, got {horizon_cells}")
    out = []
    for n in shape:
        if n - 2 * horizon_cells < 1:
            raise ConfigError(
                f"no interior cells: {n} cells per side with horizon {horizon_cells}; "
                f"need at least {2 * horizon_cells + 1}"
            )
        out.append(range(horizon_cells, n - horizon_cells))
    return tuple(out)


def interior_slices(shape, horizon_cells: int) -> tuple[slice, ...]:
    return tuple(slice(r.start, r.stop) for r in interior_cells(shape, horizon_cells))


# ---------------------------------------------------------------------------
# CSV persistence: one file per quantity (and component in 2D); a comment
# line with metadata, a header "t,<cell>,<cell>,..." and one row per time.
# 1D cells are labelled "i", 2D cells "p:q" in row-major (p = x index) order.

_COMP = ("x", "y")


def _fmt(x: float) -> str:
    return repr(float(x))


def _cell_labels(grid_shape) -> list[str]:
    if len(grid_shape) == 1:
        return [str(i) for i in range(grid_shape[0])]
    return [f"{p}:{q}" for p in range(grid_shape[0]) for q in range(grid_shape[1])]


def write_field_csv(path, times, field, *, quantity: str, units: str, meta: dict) -> None:
    """``field`` has shape ``(n_times, *grid_shape)``."""
    grid = field.shape[1:]
    head = ", ".join([quantity, units] + [f"{k}={v}" for k, v in sorted(meta.items())])
    lines = [f"# {head}", ",".join(["t"] + _cell_labels(grid))]
    flat = field.reshape(len(times), -1)
    for t, row in zip(times, flat):
        lines.append(",".join([_fmt(t)] + [_fmt(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_field_csv(path) -> tuple[np.ndarray, np.ndarray, dict]:
    text = Path(path).read_text().splitlines()
    meta = {}
    for token in text[0].lstrip("# ").split(", ")[2:]:
        k, _, v = token.partition("=")
        meta[k] = v
    labels = text[1].split(",")[1:]
    data = np.array([[float(x) for x in line.split(",")] for line in text[2:] if line])
    data = data.reshape(-1, 1 + len(labels))
    if ":" in labels[0]:
        p_max = max(int(c.split(":")[0]) for c in labels) + 1
        shape = (p_max, len(labels) // p_max)
    else:
        shape = (len(labels),)
    return data[:, 0], data[:, 1:].reshape((len(data),) + shape), meta


def series_paths(directory, stem: str, dimension: int) -> dict[str, list[Path]]:
    d = Path(directory)
    if dimension == 1:
        return {"u": [d / f"{stem}_u.csv"], "a": [d / f"{stem}_a.csv"]}
    return {q: [d / f"{stem}_{q}_{c}.csv" for c in _COMP] for q in ("u", "a")}


def save_series(series: MacroSeries, directory, stem: str) -> list[Path]:
    Path(directory).mkdir(parents=True, exist_ok=True)
    meta = {
        "cell_length": _fmt(series.cell_length),
        "density": _fmt(series.density),
    }
    paths = series_paths(directory, stem, series.dimension)
    written = []
    for key, arr, quantity, units in (
        ("u", series.displacement, "displacement", "m"),
        ("a", series.acceleration, "acceleration", "m/s^2"),
    ):
        for c, path in enumerate(paths[key]):
            name = quantity if series.dimension == 1 else f"{quantity}_{_COMP[c]}"
            write_field_csv(path, series.times, arr[..., c], quantity=name, units=units, meta=meta)
            written.append(path)
    return written


def load_series(directory, stem: str, dimension: int) -> MacroSeries:
    paths = series_paths(directory, stem, dimension)
    fields = {}
    for key, plist in paths.items():
        comps = []
        for path in plist:
            times, arr, meta = read_field_csv(path)
            comps.append(arr)
        fields[key] = np.stack(comps, axis=-1)
    return MacroSeries(
        times=times,
        displacement=fields["u"],
        acceleration=fields["a"],
        cell_length=float(meta["cell_length"]),
        density=float(meta["density"]),
    )


__all__ = [
    "MacroSeries",
    "TrainTestSplit",
    "cell_average_operator",
    "cell_average",
    "split",
    "interior_cells",
    "interior_slices",
    "save_series",
    "load_series",
    "write_field_csv",
    "read_field_csv",
]
