"""
Time integration of the reduced delayed plate equation

    u_tt + Δ²u + (k + 1)u_t + βu + f(u) = p0 - U u_x - q^u(t)

Newmark average acceleration (γ = 1/2, β_N = 1/4) for the linear part: stiffness,
damping and the convection U u_x. The nonlinear force and the delayed potential are
extrapolated from the two previous steps (IMEX).
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Literal, Optional

from config.settings import DT_SAFETY, GROWTH_FACTOR, NEWMARK_BETA, NEWMARK_GAMMA
from core.aero import AeroParams, DelayHistory, probe_flow, q_potential, t_star
from core.errors import NonFiniteFieldError, SolverError
from core.grid import (
    ScalarField,
    biharmonic_clamped,
    derivatives,
    norm_l2,
    shifted_biharmonic_factor,
    solve_factored,
)
from core.vonkarman import Berger, VonKarman, restoring_force
from utils.validators import require_nonnegative, require_positive, require_same_grid, require_subsonic

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    U: float = 0.0
    k: float = 0.0
    beta: float = 0.0
    dt: Optional[float] = None
    t_end: float = 0.0
    kind: object = field(default_factory=VonKarman)
    p0: Optional[ScalarField] = None
    history_init: Literal["zero", "frozen", "ramp"] = "frozen"
    aero: Optional[AeroParams] = None
    couple_flow: bool = True
    diagnostics_stride: int = 1
    trace_stride: int = 0
    probe_stride: int = 0
    probe_points: tuple = ()
    lf_burn_in: Optional[float] = None

    def __post_init__(self):
        require_subsonic(self.U)
        require_nonnegative(self.k, "k")
        require_nonnegative(self.beta, "beta")
        require_nonnegative(self.t_end, "t_end")
        if self.dt is not None:
            require_positive(self.dt, "dt")
        if self.history_init not in ("zero", "frozen", "ramp"):
            raise ValueError(f"history_init must be zero, frozen or ramp, got {self.history_init!r}")
        if not isinstance(self.kind, (VonKarman, Berger)):
            raise TypeError(f"kind must be VonKarman or Berger, got {self.kind!r}")
        if self.aero is None:
            object.__setattr__(self, "aero", AeroParams(self.U))
        elif self.aero.U != self.U:
            raise ValueError(f"aero.U={self.aero.U} differs from U={self.U}")
        if self.lf_burn_in is not None:
            require_nonnegative(self.lf_burn_in, "lf_burn_in")
        if self.diagnostics_stride < 1:
            raise ValueError(f"diagnostics_stride must be >= 1, got {self.diagnostics_stride}")

    @property
    def flow_damping(self):
        """Damping donated by the flow (the '+1'), present only when the flow is coupled."""
        return 1.0 if self.couple_flow else 0.0

    @property
    def total_damping(self):
        return self.k + self.flow_damping

    def with_U(self, U):
        return replace(self, U=U, aero=replace(self.aero, U=U))

    def load(self, grid):
        return self.p0 if self.p0 is not None else ScalarField.zeros(grid)

    def snapshot(self):
        """Scalar parameters of the run, for catalogs and headers."""
        kind = self.kind
        out = {"U": self.U, "k": self.k, "beta": self.beta, "dt": self.dt, "t_end": self.t_end,
               "nonlinearity": kind.name, "couple_flow": self.couple_flow,
               "theta_n": self.aero.theta_n, "s_n": self.aero.s_n, "s_rule": self.aero.s_rule}
        if isinstance(kind, Berger):
            out.update(upsilon=kind.upsilon, kappa=kind.kappa)
        return out


def default_time_step(grid, U=0.0):
    h = min(grid.hx, grid.hy)
    return DT_SAFETY * min(h * h / 4.0, h / (1.0 + U))


def resolve_config(config, grid):
    """Fill the default time step and log the step-size and horizon warnings."""
    if config.dt is None:
        config = replace(config, dt=default_time_step(grid, config.U))
    h = min(grid.hx, grid.hy)
    cfl = DT_SAFETY * h / (1.0 + config.U)
    if config.dt > cfl:
        logger.warning(f"dt={config.dt:.3e} exceeds the explicit-term estimate {cfl:.3e}")
    horizon = t_star(grid, config.U)
    if 0.0 < config.t_end < horizon:
        logger.warning(f"t_end={config.t_end:.4g} is shorter than the delay horizon t*={horizon:.4g}")
    return config


@dataclass
class SimState:
    t: float
    u: ScalarField
    u_t: ScalarField
    hist: DelayHistory
    step_index: int
    accel: ScalarField
    force: ScalarField
    force_prev: ScalarField
    q: ScalarField
    diss_k: float = 0.0
    diss_total: float = 0.0

    @property
    def grid(self):
        return self.u.grid


@dataclass
class TrajectoryRecord:
    config: SimConfig
    records: List = field(default_factory=list)
    probe_rows: List = field(default_factory=list)
    final_state: Optional[SimState] = None
    aborted: bool = False
    error: Optional[str] = None
    lf_bound: float = math.nan
    lf_violations: int = 0


# --- Forces ---

def _convection_speed(config):
    return config.U if config.couple_flow else 0.0


def _delayed_potential(hist, config):
    if not config.couple_flow:
        return ScalarField.zeros(hist.grid)
    return q_potential(hist, config.aero, hist.grid)


def _explicit_force(u, q, config):
    return config.load(u.grid) - restoring_force(u, config.kind) - q


# --- Initialization ---

def _initial_history(config, grid, u0, u1):
    horizon = t_star(grid, config.U)
    hist = DelayHistory(grid, config.dt, horizon)
    zero = ScalarField.zeros(grid)
    n_past = hist.capacity - 1
    for j in range(n_past, 0, -1):
        tau = -j * config.dt
        if config.history_init == "zero":
            slot = (zero, zero)
        elif config.history_init == "frozen":
            slot = (u0, zero)
        else:
            ramp = max(0.0, 1.0 + tau / horizon)
            slot = (ramp * u0, u0 / horizon if ramp > 0.0 else zero)
        hist.append(tau, *slot)
    if config.history_init == "zero":
        hist.append(0.0, zero, zero)
    else:
        hist.append(0.0, u0, u1)
    logger.debug(f"history holds {len(hist)} slots over {hist.span:.4g} (t*={horizon:.4g})")
    return hist


def init(config, grid, u0, u1):
    """Initial state with the history window on [-t*, 0] filled per config.history_init."""
    require_same_grid(u0, u1)
    if u0.grid != grid:
        raise ValueError("initial data must live on the simulation grid")
    if config.dt is None:
        config = resolve_config(config, grid)
    hist = _initial_history(config, grid, u0, u1)
    q = _delayed_potential(hist, config)
    force = _explicit_force(u0, q, config)
    accel = force - config.total_damping * u1 - biharmonic_clamped(u0) - config.beta * u0
    U = _convection_speed(config)
    if U:
        accel = accel - U * derivatives(u0).fx
    return SimState(0.0, u0, u1, hist, 0, accel, force, force, q)


# --- Stepping ---

def step(state, config):
    """
    Advance one dt. The history is shared with the incoming state and advanced in place.

    Raises NonFiniteFieldError when the new fields are not finite and SolverError when
    the linear solve fails.
    """
    dt = config.dt
    c = config.total_damping
    a0 = 1.0 / (NEWMARK_BETA * dt * dt)
    a1 = NEWMARK_GAMMA / (NEWMARK_BETA * dt)
    a2 = 1.0 / (NEWMARK_BETA * dt)
    a3 = 1.0 / (2.0 * NEWMARK_BETA) - 1.0
    a4 = NEWMARK_GAMMA / NEWMARK_BETA - 1.0

    u, v, a = state.u, state.u_t, state.accel
    force_next = 2.0 * state.force.values - state.force_prev.values
    rhs = (force_next + a0 * u.values + a2 * v.values + a3 * a.values
           + c * (a1 * u.values + a4 * v.values))
    factor = shifted_biharmonic_factor(u.grid, config.beta + a0 + a1 * c, _convection_speed(config))
    try:
        solution = solve_factored(factor, rhs)
    except RuntimeError as exc:
        raise SolverError(f"Newmark solve failed at step {state.step_index + 1}: {exc}") from exc

    u_new = ScalarField(u.grid, solution)
    a_new = a0 * (u_new - u) - a2 * v - a3 * a
    v_new = v + (0.5 * dt) * (a + a_new)
    step_index = state.step_index + 1
    t_new = step_index * dt

    state.hist.append(t_new, u_new, v_new)
    q = _delayed_potential(state.hist, config)
    force = _explicit_force(u_new, q, config)

    vv_old = norm_l2(v) ** 2
    vv_new = norm_l2(v_new) ** 2
    diss_step = 0.5 * dt * (vv_old + vv_new)
    return SimState(t_new, u_new, v_new, state.hist, step_index, a_new, force, state.force, q,
                    state.diss_k + config.k * diss_step, state.diss_total + c * diss_step)


def n_steps(config):
    return int(math.ceil(config.t_end / config.dt - 1e-9)) if config.t_end > 0 else 0


def run(config, grid, u0, u1, equilibria=None):
    """
    Integrate to t_end, recording diagnostics every config.diagnostics_stride steps.

    Records after the lower-frequency burn-in (config.lf_burn_in, default t*) are checked
    against the M_ε fitted on the records before it. A non-finite field or a failed solve
    stops the run; the result keeps every record taken so far and is flagged aborted.
    """
    from advanced.diagnostics import LowerFrequencyMonitor, join_flags, record

    config = resolve_config(config, grid)
    total = n_steps(config)
    logger.info(f"Simulating {total} steps of dt={config.dt:.4g} on {grid.nx}x{grid.ny} "
                f"(U={config.U}, k={config.k}, beta={config.beta}, {config.kind.name})")
    result = TrajectoryRecord(config)
    burn_in = t_star(grid, config.U) if config.lf_burn_in is None else config.lf_burn_in
    monitor = LowerFrequencyMonitor(burn_in)

    def emit(st, last=False):
        with_trace = bool(config.trace_stride) and (st.step_index % config.trace_stride == 0)
        rec = record(st, config, equilibria, with_trace=with_trace)
        if result.records:
            e0 = result.records[0].E_red
            if rec.E_red > GROWTH_FACTOR * abs(e0) and rec.E_red > 0.0:
                rec = replace(rec, flags=join_flags(rec.flags, "growth"))
        result.records.append(monitor.check(rec))
        if config.probe_points and config.couple_flow and (
                last or (config.probe_stride and st.step_index % config.probe_stride == 0)):
            for row in probe_flow(st.hist, config.aero, config.probe_points):
                result.probe_rows.append((st.t,) + row)

    state = init(config, grid, u0, u1)
    emit(state, last=total == 0)
    try:
        for _ in range(total):
            state = step(state, config)
            last = state.step_index == total
            if last or state.step_index % config.diagnostics_stride == 0:
                emit(state, last=last)
    except (NonFiniteFieldError, SolverError) as exc:
        logger.error(f"Run aborted at step {state.step_index + 1}: {exc}")
        result.aborted = True
        result.error = str(exc)
    result.final_state = state
    result.lf_bound = monitor.bound
    result.lf_violations = monitor.violations
    if monitor.violations:
        logger.warning(f"{monitor.violations} record(s) exceed the fitted M_eps={monitor.bound:.4g}")
    logger.info(f"Run finished at t={state.t:.6g} after {state.step_index} steps")
    return result
