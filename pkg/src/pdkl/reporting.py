"""Error metrics and CSV figure data for learned kernels and predictions.

Every emitted file starts with ``# quantity, units, T_t=..., solver_mode=...``
followed by a column header and one row per point. Floats are written with
``repr`` so files parse back exactly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from pdkl.coarse import MacroSeries, interior_slices
from pdkl.errors import ReportError, UndefinedErrorSignal
from pdkl.kernel import KERNEL_UNITS, MicroModulus

_COMP = ("x", "y")


class FigureKind(str, enum.Enum):
    KERNEL_PLOT = "KernelPlot"
    MID_CELL_TRACE = "MidCellTrace"
    ERROR_SWEEP = "ErrorSweep"


def relative_l2(predicted, reference) -> float:
    """``||pred - ref|| / ||ref||`` over every entry."""
    p = np.asarray(predicted, dtype=float)
    r = np.asarray(reference, dtype=float)
    if p.shape != r.shape:
        raise ReportError(f"shape mismatch: predicted {p.shape} vs reference {r.shape}")
    denom = np.linalg.norm(r)
    if denom == 0:
        raise UndefinedErrorSignal("reference has zero norm; relative error is undefined")
    return float(np.linalg.norm(p - r) / denom)


def align_times(predicted: MacroSeries, reference: MacroSeries) -> MacroSeries:
    """Snapshots of ``predicted`` at the times of ``reference``."""
    tp, tr = predicted.times, reference.times
    step = float(np.min(np.diff(tr))) if len(tr) > 1 else 1.0
    idx = np.searchsorted(tp, tr - 1e-6 * step)
    ok = (idx < len(tp)) & (np.abs(tp[np.minimum(idx, len(tp) - 1)] - tr) <= 1e-6 * step)
    if not np.all(ok):
        raise ReportError("predicted series does not cover the reference times")
    return predicted.select_times(idx)


def middle_cell(grid_shape) -> tuple[int, ...]:
    return tuple(n // 2 for n in grid_shape)


def series_error(predicted: MacroSeries, reference: MacroSeries, horizon_cells: int, quantity: str,
                 component: int | None = None) -> float:
    """Relative error of ``quantity`` over interior cells at the reference times."""
    pred = align_times(predicted, reference)
    inner = (slice(None),) + interior_slices(reference.grid_shape, horizon_cells)
    p = getattr(pred, quantity)[inner]
    r = getattr(reference, quantity)[inner]
    if component is not None:
        p, r = p[..., component], r[..., component]
    return relative_l2(p, r)


@dataclass
class ErrorSummary:
    T_t: float
    solver_mode: str
    errors: dict[str, float]
    traces: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ErrorSummary:
        return cls(**d)


def summarize(reference: MacroSeries, horizon_cells: int, T_t: float, solver_mode: str, *,
              acceleration: MacroSeries | None = None, displacement: MacroSeries | None = None) -> ErrorSummary:
    """Errors of the given predictions against ``reference`` (the test window).

    Keys are ``a`` and ``u`` in 1D and additionally ``a_x``, ``a_y``, ``u_x``,
    ``u_y`` in 2D. Traces hold the middle-cell history of every series.
    """
    if acceleration is None and displacement is None:
        raise ReportError("nothing to summarize: no predictions given")
    errors, traces = {}, {}
    mid = middle_cell(reference.grid_shape)
    traces["t"] = reference.times.tolist()
    for key, pred, quantity in (("a", acceleration, "acceleration"), ("u", displacement, "displacement")):
        if pred is None:
            continue
        errors[key] = series_error(pred, reference, horizon_cells, quantity)
        aligned = align_times(pred, reference)
        for c in range(reference.n_components):
            suffix = "" if reference.dimension == 1 else f"_{_COMP[c]}"
            if reference.dimension > 1:
                errors[key + suffix] = series_error(pred, reference, horizon_cells, quantity, c)
            traces[f"{key}{suffix}_data"] = getattr(reference, quantity)[(slice(None),) + mid + (c,)].tolist()
            traces[f"{key}{suffix}_pred"] = getattr(aligned, quantity)[(slice(None),) + mid + (c,)].tolist()
    return ErrorSummary(float(T_t), str(solver_mode), errors, traces)


# ---------------------------------------------------------------------------
# figure data


def _header(quantity: str, units: str, T_t, solver_mode: str) -> str:
    tt = T_t if isinstance(T_t, str) else repr(float(T_t))
    return f"# {quantity}, {units}, T_t={tt}, solver_mode={solver_mode}"


def _write(path: Path, header: str, columns: list[str], rows) -> Path:
    lines = [header, ",".join(columns)]
    for row in rows:
        lines.append(",".join(str(v) if isinstance(v, (int, np.integer))
                              else repr(float("nan") if v is None else float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_figure_csv(path) -> tuple[dict, list[str], np.ndarray]:
    """Returns ``(meta, columns, data)``; ``meta`` has quantity, units, T_t, solver_mode."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].lstrip("# ").split(", ")
    meta = {"quantity": head[0], "units": head[1]}
    for tok in head[2:]:
        k, _, v = tok.partition("=")
        meta[k] = v
    columns = lines[1].split(",")
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[2:] if ln]).reshape(-1, len(columns))
    return meta, columns, data


def _kernel_files(kernel: MicroModulus, directory: Path, stem: str, T_t, mode: str) -> list[Path]:
    m = kernel.horizon_cells
    dense = kernel.expand()
    header = _header("micro_modulus", KERNEL_UNITS, T_t, mode)
    if kernel.dimension == 1:
        rows = [(i, np.nan if i == 0 else dense[i + m]) for i in range(-m, m + 1)]
        return [_write(directory / f"{stem}.csv", header, ["i", "value"], rows)]
    slice_rows = [(i, np.nan if i == 0 else dense[i + m, m]) for i in range(-m, m + 1)]
    full_rows = [(i, j, np.nan if i == j == 0 else dense[i + m, j + m])
                 for i in range(-m, m + 1) for j in range(-m, m + 1)]
    return [
        _write(directory / f"{stem}_j0.csv", header, ["i", "value"], slice_rows),
        _write(directory / f"{stem}_full.csv", header, ["i", "j", "value"], full_rows),
    ]


def _trace_files(series: dict[str, MacroSeries], quantity: str, directory: Path, stem: str,
                 T_t, mode: str) -> list[Path]:
    units = {"displacement": "m", "acceleration": "m/s^2"}[quantity]
    out = []
    for name in sorted(series):
        s = series[name]
        mid = middle_cell(s.grid_shape)
        values = getattr(s, quantity)[(slice(None),) + mid]
        cols = ["t"] + (["value"] if s.dimension == 1 else list(_COMP[: s.n_components]))
        rows = np.column_stack([s.times, values])
        cell = ":".join(str(i) for i in mid)
        header = _header(f"{quantity}_cell_{cell}", units, T_t, mode)
        out.append(_write(directory / f"{stem}_{name}.csv", header, cols, rows))
    return out


def _sweep_files(sweeps: dict[str, list[ErrorSummary]], directory: Path, stem: str) -> list[Path]:
    out = []
    for mode in sorted(sweeps):
        summaries = sorted(sweeps[mode], key=lambda s: s.T_t)
        if not summaries:
            raise ReportError(f"empty error sweep for solver mode {mode!r}")
        keys = sorted(summaries[0].errors)
        rows = [[s.T_t] + [s.errors[k] for k in keys] for s in summaries]
        header = _header("relative_l2_error", "1", "sweep", mode)
        out.append(_write(directory / f"{stem}_{mode}.csv", header, ["T_t"] + keys, rows))
    return out


def emit_figure_data(kind, inputs, directory, *, stem: str | None = None, T_t="none",
                     solver_mode: str = "none", quantity: str = "displacement") -> list[Path]:
    """Write figure CSVs and return their paths.

    ``inputs`` by kind: ``KernelPlot`` takes a MicroModulus; ``MidCellTrace``
    a mapping of curve name to MacroSeries (one file per curve);
    ``ErrorSweep`` a mapping of solver mode to ErrorSummary list (one file
    per mode, one row per ``T_t``).
    """
    kind = FigureKind(kind)
    if inputs is None or (isinstance(inputs, dict) and not inputs):
        raise ReportError(f"{kind.value}: missing inputs")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or {FigureKind.KERNEL_PLOT: "kernel", FigureKind.MID_CELL_TRACE: "trace",
                    FigureKind.ERROR_SWEEP: "error_sweep"}[kind]
    if kind is FigureKind.KERNEL_PLOT:
        if not isinstance(inputs, MicroModulus):
            raise ReportError("KernelPlot needs a MicroModulus")
        return _kernel_files(inputs, directory, stem, T_t, solver_mode)
    if kind is FigureKind.MID_CELL_TRACE:
        return _trace_files(inputs, quantity, directory, stem, T_t, solver_mode)
    return _sweep_files(inputs, directory, stem)


__all__ = [
    "FigureKind",
    "ErrorSummary",
    "relative_l2",
    "align_times",
    "middle_cell",
    "series_error",
    "summarize",
    "emit_figure_data",
    "read_figure_csv",
]
