"""Pipeline configuration read from JSON.

Keys carry their SI unit as a suffix (``E_s_pa``, ``T_end_s``, ``u0_m``...).
Parsing checks every stage precondition it can and reports all violations
together in one ConfigError.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

from pdkl.errors import ConfigError
from pdkl.fem import BoundaryDrive, DriveKind
from pdkl.kernel import Coupling, SolverMode
from pdkl.microstructure import Layout, MicroStructureSpec, make_spec

BUNDLED = ("bar1d", "plate2d_square", "plate2d_cross")

_DRIVES_BY_DIM = {
    1: {DriveKind.POLYNOMIAL_PULSE, DriveKind.SINUSOIDAL_BURST},
    2: {DriveKind.EXTENSION_2D, DriveKind.SHEAR_2D},
}


@dataclass(frozen=True)
class DriveConfig:
    kind: str
    u0_m: float
    T_s_s: float
    a0: float | None = None
    applied_edge: str = "right"

    def build(self) -> BoundaryDrive:
        return BoundaryDrive(DriveKind(self.kind), self.u0_m, self.T_s_s, self.a0, self.applied_edge)


@dataclass(frozen=True)
class PipelineConfig:
    name: str
    dimension: int
    layout: str
    domain_length_m: float
    n_cells: int
    E_s_pa: float
    E_c_pa: float
    density_kg_m3: float
    drive: DriveConfig
    T_end_s: float
    T_t_s: float
    horizon_cells: int
    poisson_ratio: float | None = None
    elements_per_cell: int | None = None
    safety_factor: float = 0.5
    dt_out_s: float | None = None
    T_t_sweep_s: tuple[float, ...] = ()
    solver_mode: str = "equality"
    alpha: float | None = None
    coupling: str = "bond"
    unit_cell_elements: int = 12
    validation_drive: DriveConfig | None = None
    seed: int = 0
    out_dir: str = "pdkl_out"

    @property
    def dt_out(self) -> float:
        return self.dt_out_s if self.dt_out_s is not None else self.T_end_s / 1000

    @property
    def mesh_resolution(self) -> int:
        if self.elements_per_cell is not None:
            return self.elements_per_cell
        return 40 if self.dimension == 1 else 12

    @property
    def mode(self) -> SolverMode:
        return SolverMode(self.solver_mode)

    @property
    def sweep(self) -> tuple[float, ...]:
        """Training horizons to fit, always including ``T_t_s``."""
        return tuple(sorted(set(self.T_t_sweep_s) | {self.T_t_s}))

    def spec(self) -> MicroStructureSpec:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return make_spec(self.dimension, self.layout, self.domain_length_m, self.n_cells,
                             self.E_s_pa, self.E_c_pa, self.density_kg_m3, self.poisson_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["T_t_sweep_s"] = list(self.T_t_sweep_s)
        return d

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> PipelineConfig:
        problems: list[str] = []
        known = set(cls.__dataclass_fields__)
        required = {"name", "dimension", "layout", "domain_length_m", "n_cells", "E_s_pa", "E_c_pa",
                    "density_kg_m3", "drive", "T_end_s", "T_t_s", "horizon_cells"}
        for key in sorted(required - set(raw)):
            problems.append(f"missing key {key!r}")
        unknown = sorted(set(raw) - known)
        if unknown:
            problems.append(f"unknown keys {unknown}")
        if problems:
            raise ConfigError(problems)

        kw = {k: raw[k] for k in known if k in raw}
        drives = {}
        for key in ("drive", "validation_drive"):
            if kw.get(key) is None:
                continue
            try:
                drives[key] = DriveConfig(**kw[key])
            except TypeError as exc:
                problems.append(f"{key}: {exc}")
        kw.update(drives)
        if "T_t_sweep_s" in kw:
            kw["T_t_sweep_s"] = tuple(float(x) for x in kw["T_t_sweep_s"])
        if problems:
            raise ConfigError(problems)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        problems: list[str] = []
        for key in ("domain_length_m", "E_s_pa", "E_c_pa", "density_kg_m3", "T_end_s", "T_t_s",
                    "safety_factor", "dt_out_s", "alpha", "poisson_ratio"):
            value = getattr(self, key)
            if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
                problems.append(f"{key} must be a number, got {value!r}")
        for key in ("dimension", "n_cells", "horizon_cells", "elements_per_cell", "unit_cell_elements", "seed"):
            value = getattr(self, key)
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                problems.append(f"{key} must be an integer, got {value!r}")
        if problems:
            raise ConfigError(problems)
        dim = self.dimension
        if dim not in (1, 2):
            problems.append(f"dimension must be 1 or 2, got {dim}")
        try:
            layout = Layout(self.layout)
            if layout.dimension != dim:
                problems.append(f"layout {self.layout} is {layout.dimension}D but dimension is {dim}")
        except ValueError:
            problems.append(f"unknown layout {self.layout!r}")
        for key in ("domain_length_m", "E_s_pa", "E_c_pa", "density_kg_m3", "T_end_s"):
            if not getattr(self, key) > 0:
                problems.append(f"{key} must be positive")
        if dim == 2 and (self.poisson_ratio is None or abs(self.poisson_ratio - 1 / 3) > 1e-12):
            problems.append("poisson_ratio must be 1/3 in 2D")
        if not (isinstance(self.n_cells, int) and self.n_cells >= 1):
            problems.append(f"n_cells must be a positive integer, got {self.n_cells}")
        elif self.n_cells < 2 * self.horizon_cells + 1:
            problems.append(f"n_cells={self.n_cells} leaves no interior for horizon_cells="
                            f"{self.horizon_cells}; need at least {2 * self.horizon_cells + 1}")
        if not (isinstance(self.horizon_cells, int) and self.horizon_cells >= 1):
            problems.append(f"horizon_cells must be a positive integer, got {self.horizon_cells}")
        epc = self.mesh_resolution
        div = 4 if dim == 1 else 3
        if dim in (1, 2) and (not isinstance(epc, int) or epc < div or epc % div):
            problems.append(f"elements_per_cell={epc} must be a positive multiple of {div} in {dim}D")
        if self.unit_cell_elements % 3 or self.unit_cell_elements < 3:
            problems.append(f"unit_cell_elements={self.unit_cell_elements} must be a multiple of 3")
        if not 0 < self.safety_factor <= 1:
            problems.append(f"safety_factor must lie in (0, 1], got {self.safety_factor}")
        if not self.dt_out > 0:
            problems.append("dt_out_s must be positive")
        elif self.T_end_s > 0:
            steps = self.T_end_s / self.dt_out
            if abs(steps - round(steps)) > 1e-6 * steps:
                problems.append(f"T_end_s={self.T_end_s} is not a whole number of dt_out_s={self.dt_out}")
        for tt in self.sweep:
            if not 0 < tt < self.T_end_s:
                problems.append(f"T_t={tt} must lie strictly inside (0, T_end_s={self.T_end_s})")
        try:
            mode = SolverMode(self.solver_mode)
            if mode is SolverMode.PENALTY and (self.alpha is None or self.alpha < 0):
                problems.append("penalty solver_mode needs alpha >= 0")
        except ValueError:
            problems.append(f"unknown solver_mode {self.solver_mode!r}")
        try:
            Coupling(self.coupling)
        except ValueError:
            problems.append(f"unknown coupling {self.coupling!r}")
        for key in ("drive", "validation_drive"):
            d = getattr(self, key)
            if d is None:
                continue
            try:
                kind = DriveKind(d.kind)
                if dim in _DRIVES_BY_DIM and kind not in _DRIVES_BY_DIM[dim]:
                    problems.append(f"{key}.kind {d.kind} is not available in {dim}D")
            except ValueError:
                problems.append(f"{key}.kind {d.kind!r} is unknown")
            if not d.T_s_s > 0:
                problems.append(f"{key}.T_s_s must be positive")
            if not math.isfinite(d.u0_m):
                problems.append(f"{key}.u0_m must be finite")
            edges = ("left", "right") if dim == 1 else ("left", "right", "top", "bottom")
            if d.applied_edge not in edges:
                problems.append(f"{key}.applied_edge {d.applied_edge!r} not in {edges}")
        if problems:
            raise ConfigError(problems)


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    return PipelineConfig.from_dict(raw)


def bundled_config_path(name: str) -> Path:
    """Path of a reference config shipped with the package."""
    if name not in BUNDLED:
        raise ConfigError(f"no bundled config {name!r}; choose from {list(BUNDLED)}")
    return Path(str(resources.files("pdkl") / "configs" / f"{name}.json"))


__all__ = ["PipelineConfig", "DriveConfig", "load_config", "bundled_config_path", "BUNDLED"]
