"""
Experiment manifest: JSON schema, validation, sweep expansion and builders for the
numerical objects a run needs.
"""
import itertools
import json
import math
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config.settings import (
    DEDUP_TOL,
    DEFAULT_S_N,
    DEFAULT_THETA_N,
    FORMAT_VERSION,
    LYAPUNOV_NU,
    MIN_NODES,
    MIN_QUADRATURE,
)
from core.errors import ManifestError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_subsonic(value):
    if not math.isfinite(value) or value < 0.0 or value >= 1.0:
        raise ValueError(
            f"U={value} rejected: U must satisfy 0 <= U < 1 (subsonic only); the delay horizon "
            "and the reduced flow model exist only for subsonic speeds")
    return value


class FieldSpec(_Strict):
    kind: Literal["zero", "mode", "bump", "uniform", "compression"] = "zero"
    amplitude: float = 1.0
    m: int = Field(1, ge=1)
    n: int = Field(1, ge=1)
    center: Optional[Tuple[float, float]] = None
    radius: float = Field(0.25, gt=0)
    direction: Literal["x", "y"] = "x"


class GridSpec(_Strict):
    nx: int = Field(32, ge=MIN_NODES)
    ny: int = Field(32, ge=MIN_NODES)
    Lx: float = Field(1.0, gt=0)
    Ly: float = Field(1.0, gt=0)
    x0: float = 0.0
    y0: float = 0.0


class NonlinearitySpec(_Strict):
    kind: Literal["von_karman", "berger"] = "von_karman"
    F0: FieldSpec = Field(default_factory=FieldSpec)
    upsilon: float = 0.0
    kappa: float = Field(1.0, ge=0)


class AeroSpec(_Strict):
    theta_n: int = Field(DEFAULT_THETA_N, ge=MIN_QUADRATURE)
    s_n: int = Field(DEFAULT_S_N, ge=MIN_QUADRATURE)
    s_rule: Literal["cubic", "trapezoid"] = "cubic"


class InitialSpec(_Strict):
    u0: FieldSpec = Field(default_factory=FieldSpec)
    u1: FieldSpec = Field(default_factory=FieldSpec)


class SimulationSpec(_Strict):
    U: float = 0.0
    k: float = Field(0.0, ge=0)
    beta: float = Field(0.0, ge=0)
    dt: Optional[float] = Field(None, gt=0)
    t_end: float = Field(0.0, ge=0)
    nonlinearity: NonlinearitySpec = Field(default_factory=NonlinearitySpec)
    load: FieldSpec = Field(default_factory=FieldSpec)
    initial: InitialSpec = Field(default_factory=InitialSpec)
    history_init: Literal["zero", "frozen", "ramp"] = "frozen"
    aero: AeroSpec = Field(default_factory=AeroSpec)
    couple_flow: bool = True

    @field_validator("U")
    @classmethod
    def _subsonic(cls, value):
        return _check_subsonic(value)


class ProbeSpec(_Strict):
    diagnostics_stride: int = Field(1, ge=1)
    trace_stride: int = Field(0, ge=0)
    flow_stride: int = Field(0, ge=0)
    rho: float = Field(1.0, gt=0)
    points: List[Tuple[float, float, float]] = Field(default_factory=list)
    track_equilibria: bool = False
    lf_burn_in: Optional[float] = Field(None, ge=0)


class StationarySpec(_Strict):
    seeds: List[FieldSpec] = Field(default_factory=lambda: [FieldSpec()])
    buckling_amplitudes: List[float] = Field(default_factory=list)
    gamma_dir: Literal["x", "y"] = "x"
    continuation_parameter: Literal["U", "load"] = "U"
    continuation_path: List[float] = Field(default_factory=list)
    dedup_tol: float = Field(DEDUP_TOL, gt=0)
    workers: int = Field(4, ge=1)


class DifferenceSpec(_Strict):
    enabled: bool = False
    perturbation: FieldSpec = Field(default_factory=lambda: FieldSpec(kind="mode", amplitude=1e-3))
    nu: float = Field(LYAPUNOV_NU, ge=0)
    mu: Optional[float] = Field(None, ge=0)
    burn_in: Optional[float] = Field(None, ge=0)


class SweepSpec(_Strict):
    U: List[float] = Field(default_factory=list)
    k: List[float] = Field(default_factory=list)
    beta: List[float] = Field(default_factory=list)
    load_amplitude: List[float] = Field(default_factory=list)
    window: float = Field(1.0, gt=0)
    tol: float = Field(1e-6, gt=0)
    dist_tol: float = Field(1e-4, gt=0)

    @field_validator("U")
    @classmethod
    def _subsonic_axis(cls, values):
        return [_check_subsonic(v) for v in values]


class OutputSpec(_Strict):
    directory: str = "results"


class ExperimentManifest(_Strict):
    name: str = Field(min_length=1)
    format_version: Literal["1.0"] = FORMAT_VERSION
    grid: GridSpec = Field(default_factory=GridSpec)
    simulation: SimulationSpec = Field(default_factory=SimulationSpec)
    probes: ProbeSpec = Field(default_factory=ProbeSpec)
    stationary: StationarySpec = Field(default_factory=StationarySpec)
    difference: DifferenceSpec = Field(default_factory=DifferenceSpec)
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    output: OutputSpec = Field(default_factory=OutputSpec)
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _probes_in_k_rho(self):
        xc = self.grid.x0 + 0.5 * self.grid.Lx
        yc = self.grid.y0 + 0.5 * self.grid.Ly
        for x, y, z in self.probes.points:
            if z < 0.0:
                raise ValueError(f"probe point {(x, y, z)} lies below the plate plane (z < 0)")
            if math.dist((x, y, z), (xc, yc, 0.0)) > self.probes.rho:
                raise ValueError(f"probe point {(x, y, z)} lies outside K_rho with rho={self.probes.rho}")
        return self


# --- Parsing ---

def parse_manifest(text):
    """Parse and validate JSON manifest text; every failure becomes a ManifestError."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    return manifest_from_dict(data)


def manifest_from_dict(data):
    try:
        return ExperimentManifest.model_validate(data)
    except ValidationError as exc:
        raise ManifestError(f"invalid manifest:\n{exc}") from exc


def load_manifest(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_manifest(fh.read())


def serialize_manifest(manifest):
    return manifest.model_dump_json(indent=2)


def single_run(manifest):
    """The manifest with its sweep axes cleared (window and tolerances kept)."""
    data = manifest.model_dump()
    data["sweep"].update(U=[], k=[], beta=[], load_amplitude=[])
    return manifest_from_dict(data)


def expand_sweep(manifest):
    """
    Cartesian product of the non-empty sweep axes as fully validated single-run
    manifests, each paired with a label. No axes gives the single-run manifest.
    """
    axes = [(name, values) for name, values in (
        ("U", manifest.sweep.U), ("k", manifest.sweep.k), ("beta", manifest.sweep.beta),
        ("load_amplitude", manifest.sweep.load_amplitude)) if values]
    if not axes:
        return [("base", single_run(manifest))]
    cells = []
    for combo in itertools.product(*(values for _, values in axes)):
        data = manifest.model_dump()
        data["sweep"].update(U=[], k=[], beta=[], load_amplitude=[])
        parts = []
        for (name, _), value in zip(axes, combo):
            if name == "load_amplitude":
                data["simulation"]["load"]["amplitude"] = value
            else:
                data["simulation"][name] = value
            parts.append(f"{name}={value:g}")
        cells.append(("_".join(parts), manifest_from_dict(data)))
    return cells


# --- Builders ---

def build_grid(manifest):
    from core.grid import PlateGrid

    g = manifest.grid
    return PlateGrid(g.nx, g.ny, g.Lx, g.Ly, g.x0, g.y0)


def build_sim_config(manifest, grid):
    from advanced.dynamics import SimConfig
    from core.aero import AeroParams
    from core.vonkarman import Berger, VonKarman
    from utils.field_utils import build_field

    sim = manifest.simulation
    nl = sim.nonlinearity
    if nl.kind == "berger":
        kind = Berger(nl.upsilon, nl.kappa)
    else:
        kind = VonKarman(None if nl.F0.kind == "zero" else build_field(grid, nl.F0))
    return SimConfig(
        U=sim.U, k=sim.k, beta=sim.beta, dt=sim.dt, t_end=sim.t_end, kind=kind,
        p0=build_field(grid, sim.load), history_init=sim.history_init,
        aero=AeroParams(sim.U, sim.aero.theta_n, sim.aero.s_n, sim.aero.s_rule),
        couple_flow=sim.couple_flow, diagnostics_stride=manifest.probes.diagnostics_stride,
        trace_stride=manifest.probes.trace_stride, probe_stride=manifest.probes.flow_stride,
        probe_points=tuple(manifest.probes.points), lf_burn_in=manifest.probes.lf_burn_in,
    )


def build_initial(manifest, grid):
    from utils.field_utils import build_field

    init = manifest.simulation.initial
    return build_field(grid, init.u0), build_field(grid, init.u1)
