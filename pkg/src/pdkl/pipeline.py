"""Stage functions behind the command line.

Each stage reads its inputs from ``stage_input`` (a previous run directory)
and writes into ``out``::

    simulate/  training.npz, validation.npz       MicroState archives
    coarsen/   training_*.csv, validation_*.csv   per-cell series
    fit/       kernel_<mode>_Tt<T_t>.csv, report_<mode>_Tt<T_t>.json
    predict/   test_<mode>_Tt<T_t>_*.csv, validation_<mode>_*.csv, status.json
    report/    errors.json and figure CSVs

Two solver modes are always fitted: ``unconstrained`` and the configured one.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from pdkl import coarse, fem, kernel as kfit, reporting
from pdkl.coarse import MacroSeries
from pdkl.config import PipelineConfig
from pdkl.dynamics import PDModel, integrate, predict_accelerations, predict_from_split
from pdkl.errors import DivergenceError, MissingArtifactError, UndefinedErrorSignal

log = logging.getLogger(__name__)

STAGES = ("simulate", "coarsen", "fit", "predict", "report")
RUNS = ("training", "validation")


def tt_label(T_t: float) -> str:
    return f"Tt{T_t:.6g}"


def solver_modes(cfg: PipelineConfig) -> list[str]:
    modes = [kfit.SolverMode.UNCONSTRAINED.value]
    if cfg.mode is not kfit.SolverMode.UNCONSTRAINED:
        modes.append(cfg.mode.value)
    return modes


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run the {stage!r} stage first")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _runs(cfg: PipelineConfig) -> list[str]:
    return ["training"] + (["validation"] if cfg.validation_drive is not None else [])


# ---------------------------------------------------------------------------


def simulate(cfg: PipelineConfig, out: Path) -> list[Path]:
    """Micro-scale FEM for the training drive (and the validation drive)."""
    spec = cfg.spec()
    mesh = fem.build_mesh(spec, cfg.mesh_resolution)
    K, M = fem.assemble(mesh)
    # 2D histories are averaged on the fly; full nodal records would not fit in memory
    observe = coarse.cell_average_operator(mesh, spec) if spec.dimension == 2 else None
    target = out / "simulate"
    target.mkdir(parents=True, exist_ok=True)
    written = []
    for run in _runs(cfg):
        drive = (cfg.drive if run == "training" else cfg.validation_drive).build()
        fixed, driven = fem.boundary_dofs(mesh, drive)
        log.info("simulate %s: %d DOFs", run, mesh.n_dofs)
        state = fem.explicit_dynamics(K, M, drive, cfg.T_end_s, cfg.dt_out, fixed_dofs=fixed,
                                      driven_dofs=driven, safety_factor=cfg.safety_factor,
                                      observe=observe, seed=cfg.seed)
        state.meta.update({"run": run, "elements_per_cell": cfg.mesh_resolution})
        path = target / f"{run}.npz"
        state.save(path)
        written.append(path)
    return written


def coarsen(cfg: PipelineConfig, out: Path, stage_input: Path) -> list[Path]:
    spec = cfg.spec()
    mesh = fem.build_mesh(spec, cfg.mesh_resolution)
    written = []
    for run in _runs(cfg):
        state = fem.MicroState.load(_require(stage_input / "simulate" / f"{run}.npz", "simulate"))
        series = coarse.cell_average(state, mesh, spec)
        written += coarse.save_series(series, out / "coarsen", run)
    return written


def _load_run(cfg: PipelineConfig, stage_input: Path, run: str) -> MacroSeries:
    for paths in coarse.series_paths(stage_input / "coarsen", run, cfg.dimension).values():
        for p in paths:
            _require(p, "coarsen")
    return coarse.load_series(stage_input / "coarsen", run, cfg.dimension)


def _kernel_path(root: Path, mode: str, T_t: float) -> Path:
    return root / "fit" / f"kernel_{mode}_{tt_label(T_t)}.csv"


def fit(cfg: PipelineConfig, out: Path, stage_input: Path) -> list[Path]:
    spec = cfg.spec()
    series = _load_run(cfg, stage_input, "training")
    m = cfg.horizon_cells
    extra = {}
    if cfg.dimension == 1:
        c, d = kfit.energy_constraint_1d(spec, m)
    else:
        W = fem.unit_cell_energy_density(spec, 1.0, cfg.unit_cell_elements)
        c, d = kfit.energy_constraint_2d(W, m, spec.cell_length)
        extra["W_uc_per_s2"] = W
    interior = tuple(n - 2 * m for n in series.grid_shape)
    target = out / "fit"
    target.mkdir(parents=True, exist_ok=True)
    written = []
    for T_t in cfg.sweep:
        train = coarse.split(series, T_t).train
        if cfg.dimension == 1:
            system = kfit.build_system_1d(train, m)
        else:
            system = kfit.build_system_2d(train, m, coupling=cfg.coupling)
        system = system.with_constraint(c, d)
        for mode in solver_modes(cfg):
            alpha = cfg.alpha if mode == kfit.SolverMode.PENALTY.value else None
            kern, report = kfit.solve(system, mode, alpha)
            cert = kfit.certify_positive_definite(kern, interior)
            report.positive_definite = bool(cert.positive_definite)
            report.min_eigenvalue = float(cert.min_eigenvalue)
            report.extra.update(extra, T_t=T_t, failed_pivot=cert.failed_pivot)
            kpath = _kernel_path(out, mode, T_t)
            kern.save_csv(kpath, comment=f"T_t={T_t!r}, solver_mode={mode}")
            rpath = target / f"report_{mode}_{tt_label(T_t)}.json"
            report.save(rpath)
            written += [kpath, rpath]
    return written


def _nan_like_displacement(series: MacroSeries) -> MacroSeries:
    return MacroSeries(series.times, np.full_like(series.displacement, np.nan), series.acceleration,
                       series.cell_length, series.density)


def predict(cfg: PipelineConfig, out: Path, stage_input: Path) -> list[Path]:
    """Test-window predictions for every fitted kernel and load-generalization runs.

    A diverging displacement integration is recorded in ``status.json`` and
    its displacement columns are written as NaN.
    """
    series = _load_run(cfg, stage_input, "training")
    validation = _load_run(cfg, stage_input, "validation") if cfg.validation_drive else None
    target = out / "predict"
    target.mkdir(parents=True, exist_ok=True)
    status: dict[str, str] = {}
    written = []
    for T_t in cfg.sweep:
        sp = coarse.split(series, T_t)
        for mode in solver_modes(cfg):
            kern = kfit.MicroModulus.load_csv(_require(_kernel_path(stage_input, mode, T_t), "fit"))
            model = PDModel(kern, series.density, series.grid_shape, sp.full)
            key = f"test_{mode}_{tt_label(T_t)}"
            acc = predict_accelerations(model, sp.test)
            try:
                disp, _ = predict_from_split(model, sp)
                pred = MacroSeries(sp.test.times, reporting.align_times(disp, sp.test).displacement,
                                   acc.acceleration, series.cell_length, series.density)
                status[key] = "ok"
            except DivergenceError as exc:
                pred = _nan_like_displacement(acc)
                status[key] = f"diverged: {exc}"
            written += coarse.save_series(pred, target, key)
    if validation is not None:
        for mode in solver_modes(cfg):
            kern = kfit.MicroModulus.load_csv(_require(_kernel_path(stage_input, mode, cfg.T_t_s), "fit"))
            model = PDModel(kern, validation.density, validation.grid_shape, validation)
            key = f"validation_{mode}"
            zero = np.zeros_like(validation.displacement[0])
            try:
                pred = integrate(model, validation.displacement[0], zero, float(validation.times[0]),
                                 float(validation.times[-1]))
                status[key] = "ok"
            except DivergenceError as exc:
                pred = _nan_like_displacement(predict_accelerations(model, validation))
                status[key] = f"diverged: {exc}"
            written += coarse.save_series(pred, target, key)
    spath = target / "status.json"
    _write_json(spath, status)
    return written + [spath]


def _safe_summary(reference, horizon, T_t, mode, acc, disp) -> reporting.ErrorSummary:
    """Like ``reporting.summarize`` but NaN displacement (diverged) gives a null error."""
    diverged = disp is not None and not np.all(np.isfinite(disp.displacement))
    summary = reporting.summarize(reference, horizon, T_t, mode, acceleration=acc,
                                  displacement=None if diverged else disp)
    if diverged:
        for key in ["u"] + ([] if reference.dimension == 1 else ["u_x", "u_y"]):
            summary.errors[key] = None
    return summary


def report(cfg: PipelineConfig, out: Path, stage_input: Path) -> list[Path]:
    series = _load_run(cfg, stage_input, "training")
    m = cfg.horizon_cells
    target = out / "report"
    target.mkdir(parents=True, exist_ok=True)
    written = []
    sweeps: dict[str, list[reporting.ErrorSummary]] = {}
    fits: dict[str, dict] = {}
    primary_traces: dict[str, MacroSeries] = {}
    for T_t in cfg.sweep:
        sp = coarse.split(series, T_t)
        for mode in solver_modes(cfg):
            key = f"test_{mode}_{tt_label(T_t)}"
            for paths in coarse.series_paths(stage_input / "predict", key, cfg.dimension).values():
                for p in paths:
                    _require(p, "predict")
            pred = coarse.load_series(stage_input / "predict", key, cfg.dimension)
            summary = _safe_summary(sp.test, m, T_t, mode, pred, pred)
            sweeps.setdefault(mode, []).append(summary)
            freport = kfit.FitReport.load(_require(stage_input / "fit" / f"report_{mode}_{tt_label(T_t)}.json", "fit"))
            fits.setdefault(mode, {})[repr(T_t)] = json.loads(freport.to_json())
            if T_t == cfg.T_t_s:
                primary_traces[mode] = pred
                kern = kfit.MicroModulus.load_csv(_kernel_path(stage_input, mode, T_t))
                written += reporting.emit_figure_data("KernelPlot", kern, target, stem=f"kernel_{mode}",
                                                      T_t=T_t, solver_mode=mode)
        if T_t == cfg.T_t_s:
            primary_traces["fem"] = sp.test
    written += reporting.emit_figure_data("ErrorSweep", sweeps, target)
    for quantity, stem in (("displacement", "trace_u"), ("acceleration", "trace_a")):
        curves = {k: v for k, v in primary_traces.items()
                  if k == "fem" or quantity == "acceleration" or np.all(np.isfinite(v.displacement))}
        written += reporting.emit_figure_data("MidCellTrace", curves, target, stem=stem, T_t=cfg.T_t_s,
                                              solver_mode="all", quantity=quantity)
    result = {
        "name": cfg.name,
        "T_t": cfg.T_t_s,
        "sweep": {mode: [json.loads(s.to_json()) | {"traces": {}} for s in lst] for mode, lst in sweeps.items()},
        "fit": fits,
        "status": json.loads(_require(stage_input / "predict" / "status.json", "predict").read_text()),
    }
    if cfg.validation_drive is not None:
        validation = _load_run(cfg, stage_input, "validation")
        vcurves = {"fem": validation}
        result["validation"] = {}
        for mode in solver_modes(cfg):
            pred = coarse.load_series(stage_input / "predict", f"validation_{mode}", cfg.dimension)
            try:
                summary = _safe_summary(validation, m, cfg.T_t_s, mode, None, pred)
                result["validation"][mode] = summary.errors
            except UndefinedErrorSignal as exc:
                result["validation"][mode] = {"error": str(exc)}
            if np.all(np.isfinite(pred.displacement)):
                vcurves[mode] = pred
        written += reporting.emit_figure_data("MidCellTrace", vcurves, target, stem="validation_u",
                                              T_t=cfg.T_t_s, solver_mode="all")
    epath = target / "errors.json"
    _write_json(epath, result)
    return written + [epath]


def run_stage(stage: str, cfg: PipelineConfig, out: Path, stage_input: Path | None = None) -> list[Path]:
    out = Path(out)
    stage_input = out if stage_input is None else Path(stage_input)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "simulate":
        return simulate(cfg, out)
    return {"coarsen": coarsen, "fit": fit, "predict": predict, "report": report}[stage](cfg, out, stage_input)


def run_pipeline(cfg: PipelineConfig, out: Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    written = []
    for stage in STAGES:
        log.info("stage %s", stage)
        written += run_stage(stage, cfg, out)
    return written


__all__ = ["STAGES", "run_stage", "run_pipeline", "solver_modes", "tt_label"]
