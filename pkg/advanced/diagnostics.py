"""
Energies, dissipation accounting, difference-trajectory Lyapunov analysis, decay-rate
fitting and convergence detection.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import linregress

from config.settings import BOOKKEEPING_RTOL, GROWTH_FACTOR, LOWER_FREQUENCY_RTOL, LYAPUNOV_NU
from core.aero import t_star, trace_residual
from core.errors import HistoryError
from core.grid import biharmonic_clamped, derivatives, inner, norm_h2, norm_l2
from core.vonkarman import lower_frequency_gap, potential_pi

logger = logging.getLogger(__name__)

RECORD_COLUMNS = (
    "t", "step", "E_pl", "E_red", "Pi", "diss_integral", "diss_total", "q_norm", "u_norm",
    "u_t_norm", "flux", "lf_gap", "dist_to_equilibria", "nearest_equilibrium",
    "trace_residual", "flags",
)


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    step: int
    E_pl: float
    E_red: float
    Pi: float
    diss_integral: float
    diss_total: float
    q_norm: float
    u_norm: float
    u_t_norm: float
    flux: float
    lf_gap: float
    dist_to_equilibria: float = math.nan
    nearest_equilibrium: int = -1
    trace_residual: float = math.nan
    flags: str = ""

    def as_row(self):
        return tuple(getattr(self, name) for name in RECORD_COLUMNS)


def record(state, config, eq_set=None, with_trace=False):
    """
    Diagnostics of one state.

    E_pl is built from norms (‖u_t‖, ‖Δu‖, ‖u‖) and E_red from the quadratic forms
    ⟨u_t,u_t⟩ and ⟨(Δ²+β)u, u⟩; both share Π. A disagreement beyond BOOKKEEPING_RTOL
    sets the "bookkeeping" flag.
    """
    u, v = state.u, state.u_t
    grid = u.grid
    pi = potential_pi(u, config.kind, config.load(grid))
    u_norm = norm_l2(u)
    v_norm = norm_l2(v)
    e_pl = 0.5 * (v_norm ** 2 + norm_h2(u) ** 2) + pi + 0.5 * config.beta * u_norm ** 2
    e_red = 0.5 * inner(v, v) + 0.5 * inner(biharmonic_clamped(u) + config.beta * u, u) + pi

    flux = 0.0
    if config.couple_flow:
        flux = inner(state.q, v)
        if config.U:
            flux += config.U * inner(derivatives(u).fx, v)

    flags = []
    scale = max(abs(e_pl), abs(e_red), 0.5 * v_norm ** 2 + 0.5 * norm_h2(u) ** 2, abs(pi), 1e-300)
    if abs(e_pl - e_red) > BOOKKEEPING_RTOL * scale:
        flags.append("bookkeeping")

    dist, nearest = math.nan, -1
    if eq_set is not None and len(eq_set):
        nearest, dist = eq_set.nearest(u, v)

    trace = math.nan
    if with_trace and config.couple_flow:
        trace = trace_residual(state.hist, config.aero, grid)

    return DiagnosticsRecord(
        t=state.t, step=state.step_index, E_pl=e_pl, E_red=e_red, Pi=pi,
        diss_integral=state.diss_k, diss_total=state.diss_total, q_norm=norm_l2(state.q),
        u_norm=u_norm, u_t_norm=v_norm, flux=flux, lf_gap=lower_frequency_gap(u, config.kind),
        dist_to_equilibria=dist, nearest_equilibrium=nearest, trace_residual=trace,
        flags=";".join(flags),
    )


# --- Lower-frequency control ---

def join_flags(flags, flag):
    return flag if not flags else f"{flags};{flag}"


class LowerFrequencyMonitor:
    """
    Checks ‖u‖² ≤ ε(‖Δu‖² + ‖Δv(u)‖²) + M_ε along a run through the recorded lf_gap.

    M_ε is fitted as the largest gap (and at least 0) among records with t ≤ burn_in;
    later records above it get the "lf_violation" flag.
    """

    def __init__(self, burn_in, rtol=LOWER_FREQUENCY_RTOL):
        self.burn_in = float(burn_in)
        self.rtol = rtol
        self.bound = 0.0
        self.violations = 0

    def check(self, rec):
        if rec.t <= self.burn_in:
            self.bound = max(self.bound, rec.lf_gap)
            return rec
        if rec.lf_gap > self.bound + self.rtol * max(1.0, self.bound):
            self.violations += 1
            return replace(rec, flags=join_flags(rec.flags, "lf_violation"))
        return rec


# --- Energy identity ---

def energy_rate_residual(records, config):
    """
    ∫|dE_red/dt + (k + c)‖u_t‖² + flux| dt over consecutive records, with dE/dt by
    centered differences. c is the flow-donated damping.
    """
    if len(records) < 4:
        return 0.0
    t = np.array([r.t for r in records])
    e = np.array([r.E_red for r in records])
    vv = np.array([r.u_t_norm for r in records]) ** 2
    flux = np.array([r.flux for r in records])
    rate = (e[2:] - e[:-2]) / (t[2:] - t[:-2])
    resid = np.abs(rate + config.total_damping * vv[1:-1] + flux[1:-1])
    return float(trapezoid(resid, t[1:-1]))


def dissipation_increments(records, window):
    """Growth of the dissipation integral over consecutive time windows of the given length."""
    if not records:
        return []
    t0 = records[0].t
    edges = {}
    for r in records:
        edges[int((r.t - t0) // window)] = r.diss_integral
    values = [records[0].diss_integral] + [edges[key] for key in sorted(edges)]
    return [b - a for a, b in zip(values[:-1], values[1:])]


# --- Difference trajectories ---

def _same_clock(s1, s2):
    if s1.u.grid != s2.u.grid:
        raise ValueError("difference trajectories must share a grid")
    if not math.isclose(s1.t, s2.t, rel_tol=1e-12, abs_tol=1e-12):
        raise ValueError(f"difference trajectories are at different times {s1.t} and {s2.t}")


def difference_energy(s1, s2, beta):
    """E_u = ½(‖Δ𝐮‖² + ‖𝐮_t‖² + β‖𝐮‖²) with 𝐮 = u₁ - u₂."""
    _same_clock(s1, s2)
    du = s1.u - s2.u
    dv = s1.u_t - s2.u_t
    return 0.5 * (norm_h2(du) ** 2 + norm_l2(dv) ** 2 + beta * norm_l2(du) ** 2)


@dataclass
class DifferenceProbe:
    """
    Lyapunov parameters and the recorded (t, E_u, V, window sup of ‖Δ𝐮‖²) series.

    mu defaults to nu/(2t*) once a horizon is known.
    """
    nu: float = LYAPUNOV_NU
    mu: Optional[float] = None
    samples: List[tuple] = field(default_factory=list)

    def resolved(self, horizon):
        if self.mu is None:
            self.mu = self.nu / (2.0 * horizon)
        return self

    def sandwich_constants(self):
        """(a0, a1) with a0·E_u ≤ V ≤ a1·(E_u + sup-window ‖Δ𝐮‖²) over the samples."""
        rows = [(e, v, w) for _, e, v, w in self.samples if e > 0.0]
        if not rows:
            return math.nan, math.nan
        a0 = min(v / e for e, v, _ in rows)
        a1 = max(v / (e + w) for e, v, w in rows)
        return float(a0), float(a1)


def _delay_integral(s1, s2, horizon):
    """∫₀^{t*}(t* - λ)‖Δ𝐮(t - λ)‖² dλ by the trapezoid rule on the history slots."""
    h1, h2 = s1.hist, s2.hist
    if h1.dt != h2.dt:
        raise HistoryError("difference histories use different slot spacings")
    h1.require_window(horizon)
    h2.require_window(horizon)
    dt = h1.dt
    n_full = int(math.floor(horizon / dt + 1e-9))
    lags = np.arange(n_full + 1) * dt
    sq = np.array([norm_h2(h1.displacement_at_lag(lag) - h2.displacement_at_lag(lag)) ** 2
                   for lag in lags])
    vals = (horizon - lags) * sq
    if lags[-1] < horizon:
        # the integrand vanishes at λ = t*
        lags = np.append(lags, horizon)
        vals = np.append(vals, 0.0)
    return float(trapezoid(vals, lags)), float(np.max(sq))


def lyapunov_V(s1, s2, probe, k, beta=0.0):
    """
    V = E_u + ν(⟨𝐮_t, 𝐮⟩ + k/2‖𝐮‖²) + μ∫₀^{t*}∫_{t-s}^{t}‖Δ𝐮(τ)‖²dτ ds.

    The double integral is evaluated as ∫₀^{t*}(t* - λ)‖Δ𝐮(t - λ)‖² dλ.
    """
    horizon = s1.hist.horizon
    probe.resolved(horizon)
    e_u = difference_energy(s1, s2, beta)
    du = s1.u - s2.u
    dv = s1.u_t - s2.u_t
    value = e_u + probe.nu * (inner(dv, du) + 0.5 * k * norm_l2(du) ** 2)
    if probe.mu:
        delay, _ = _delay_integral(s1, s2, horizon)
        value += probe.mu * delay
    return float(value)


class DecayFit(NamedTuple):
    rate: float
    r_squared: float
    samples: int


def fit_decay_rate(times, values, burn_in=0.0, min_samples=10):
    """Least-squares slope of log(value) against t after burn_in; rate = -slope."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    keep = t >= burn_in
    t, y = t[keep], y[keep]
    if len(t) < min_samples:
        raise ValueError(f"need at least {min_samples} samples past burn-in {burn_in}, got {len(t)}")
    if np.any(y <= 0.0):
        raise ValueError("decay fit needs strictly positive values")
    logy = np.log(y)
    if np.ptp(logy) == 0.0:
        return DecayFit(0.0, 1.0, len(t))
    fit = linregress(t, logy)
    return DecayFit(float(-fit.slope), float(fit.rvalue ** 2), len(t))


def v_monotone_fraction(times, values, burn_in=0.0):
    """Fraction of consecutive post-burn-in steps with V(t_{i+1}) ≤ V(t_i)."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    v = v[t >= burn_in]
    if len(v) < 2:
        return 1.0
    return float(np.mean(np.diff(v) <= 0.0))


@dataclass
class DifferenceResult:
    times: List[float]
    energies: List[float]
    lyapunov: List[float]
    fit: Optional[DecayFit]
    monotone_fraction: float
    probe: DifferenceProbe


def run_difference_experiment(config, grid, u0, u1, perturbation, probe=None, burn_in=None):
    """
    Two trajectories from (u0, u1) and (u0 + perturbation, u1) stepped in lockstep.

    Records E_u and V at every step and fits the exponential decay rate of E_u after
    burn_in (default 2t*).
    """
    from advanced.dynamics import init, n_steps, resolve_config, step

    config = resolve_config(config, grid)
    horizon = t_star(grid, config.U)
    probe = (probe or DifferenceProbe()).resolved(horizon)
    burn_in = 2.0 * horizon if burn_in is None else burn_in

    s1 = init(config, grid, u0, u1)
    s2 = init(config, grid, u0 + perturbation, u1)
    times, energies, lyap = [], [], []

    def sample():
        e_u = difference_energy(s1, s2, config.beta)
        v = lyapunov_V(s1, s2, probe, config.k, config.beta)
        _, window_sup = _delay_integral(s1, s2, horizon)
        times.append(s1.t)
        energies.append(e_u)
        lyap.append(v)
        probe.samples.append((s1.t, e_u, v, window_sup))

    sample()
    for _ in range(n_steps(config)):
        s1 = step(s1, config)
        s2 = step(s2, config)
        sample()

    fit = None
    try:
        fit = fit_decay_rate(times, energies, burn_in)
    except ValueError as exc:
        logger.warning(f"Decay fit skipped: {exc}")
    fraction = v_monotone_fraction(times, lyap, burn_in)
    if fit is not None:
        logger.info(f"Difference decay rate {fit.rate:.4g} (r²={fit.r_squared:.4f}), "
                    f"V non-increasing on {100 * fraction:.1f}% of steps")
    return DifferenceResult(times, energies, lyap, fit, fraction, probe)


# --- Convergence verdict ---

class Verdict(NamedTuple):
    kind: str
    index: int = -1

    @property
    def converged(self):
        return self.kind == "converged"


def convergence_detector(records, window, tol, dist_tol=None):
    """
    "growing" when E_red exceeds GROWTH_FACTOR times its initial magnitude, "converged"
    when the trailing window has ‖u_t‖ ≤ tol everywhere and the last distance to the
    catalog is ≤ dist_tol (default tol), else "wandering".
    """
    if not records:
        return Verdict("wandering")
    dist_tol = tol if dist_tol is None else dist_tol
    e0 = records[0].E_red
    if any(r.E_red > GROWTH_FACTOR * abs(e0) and r.E_red > 0.0 for r in records):
        return Verdict("growing")
    t_last = records[-1].t
    trailing = [r for r in records if r.t >= t_last - window]
    last = records[-1]
    if (max(r.u_t_norm for r in trailing) <= tol and not math.isnan(last.dist_to_equilibria)
            and last.dist_to_equilibria <= dist_tol):
        return Verdict("converged", last.nearest_equilibrium)
    return Verdict("wandering")
