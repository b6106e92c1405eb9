"""
Oracle checks behind the `verify` command.

Each check builds its own small problem, compares the production code against an
independent evaluation or a refinement study, and returns a CheckResult. Sizes follow the
desk-scale acceptance runs; quick=True shrinks them for smoke testing.
"""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import RectBivariateSpline
from scipy.optimize import brentq
from scipy.stats import linregress

from core.aero import (
    AeroParams,
    DelayHistory,
    q_frozen,
    sample_escape_time,
    singular_weight_nodes,
    t_star,
    trace_residual,
)
from core.errors import VerificationError
from core.grid import PlateGrid, ScalarField, derivatives, extend_past_edge, inner, norm_l2
from core.vonkarman import Berger, airy_bound_ratio, airy_with_residual, bracket
from utils.field_utils import clamped_mode, random_smooth_field

logger = logging.getLogger(__name__)

SEED = 20240917


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def to_dict(self):
        return asdict(self)


def _loglog_slope(x, y):
    return float(linregress(np.log(x), np.log(y)).slope)


# --- Operator algebra ---

def check_biharmonic_symmetry(quick=False):
    grid = PlateGrid(16 if quick else 32, 16 if quick else 32)
    rng = np.random.default_rng(SEED)
    A = grid.biharmonic_matrix
    worst, min_energy = 0.0, math.inf
    for _ in range(5):
        f = rng.standard_normal(grid.size)
        g = rng.standard_normal(grid.size)
        lhs, rhs = (A @ f) @ g, f @ (A @ g)
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(A @ f) * np.linalg.norm(g)))
        min_energy = min(min_energy, (A @ f) @ f)
    return CheckResult("biharmonic_symmetry", worst <= 1e-12 and min_energy > 0.0, worst, 1e-12,
                       f"min <Af,f> = {min_energy:.3e}")


def check_airy_residual(quick=False):
    grid = PlateGrid(16 if quick else 32, 16 if quick else 32)
    rng = np.random.default_rng(SEED)
    worst, ratio = 0.0, 0.0
    for _ in range(3):
        u = random_smooth_field(grid, rng)
        w = random_smooth_field(grid, rng)
        worst = max(worst, airy_with_residual(u, u)[1], airy_with_residual(u, w)[1])
        ratio = max(ratio, airy_bound_ratio(w, u, u))
    return CheckResult("airy_residual", worst <= 1e-10, worst, 1e-10,
                       f"empirical Airy constant on {grid.nx}x{grid.ny}: {ratio:.3e}")


def _enveloped(grid, fn):
    """fn·sin⁴ envelope: vanishes with three derivatives on the edge, so it is clamped-compatible."""
    def field(X, Y):
        sx = np.sin(np.pi * (X - grid.x0) / grid.Lx)
        sy = np.sin(np.pi * (Y - grid.y0) / grid.Ly)
        return sx ** 4 * sy ** 4 * fn(X, Y)
    return ScalarField.from_function(grid, field)


def _trilinear_asymmetry(n):
    """|⟨[u,w],v⟩ - ⟨[u,v],w⟩| and its scale |⟨[u,w],v⟩| for non-separable fields."""
    grid = PlateGrid(n, n)
    u = _enveloped(grid, lambda X, Y: 1.0 + X * Y + 0.5 * X ** 2)
    v = _enveloped(grid, lambda X, Y: np.cos(np.pi * X + 2.0 * np.pi * Y))
    w = _enveloped(grid, lambda X, Y: np.exp(X - Y ** 2))
    forward = inner(bracket(u, w), v)
    return abs(forward - inner(bracket(u, v), w)), abs(forward)


def check_bracket_symmetry(quick=False):
    sizes = (16, 32, 64) if quick else (32, 64, 128)
    hs = [1.0 / (n + 1) for n in sizes]
    errs, scales = zip(*(_trilinear_asymmetry(n) for n in sizes))
    # a rounding-level asymmetry would make the slope meaningless
    resolved = min(errs) > 1e-10 * max(scales)
    slope = _loglog_slope(hs, errs) if resolved else 0.0
    return CheckResult("bracket_symmetry_refinement", resolved and slope >= 1.9, slope, 1.9,
                       "errors " + ", ".join(f"{e:.3e}" for e in errs))


# --- Delay horizon ---

def check_t_star_sampling(quick=False):
    grid = PlateGrid(8, 8)
    rng = np.random.default_rng(SEED)
    n = 20_000 if quick else 100_000
    details, worst_slack, ok = [], 0.0, True
    for U in (0.0, 0.3, 0.7):
        horizon = t_star(grid, U)
        sample = sample_escape_time(grid, U, n, rng, horizon)
        slack = horizon - sample.longest_stay
        worst_slack = max(worst_slack, slack)
        ok &= sample.counterexamples == 0 and -1e-12 <= slack <= 1e-3
        details.append(f"U={U}: t*={horizon:.6f} sampled={sample.longest_stay:.6f} "
                       f"counterexamples={sample.counterexamples}")
    return CheckResult("t_star_sampling", ok, worst_slack, 1e-3, "; ".join(details))


# --- Kernel oracle ---

def _side_exit_times(grid, U, x, y, theta):
    """Times at which the characteristic from (x, y) crosses a vertical and a horizontal side."""
    dx = U + np.sin(theta)
    dy = np.cos(theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(dx > 0, x - grid.x0, x - grid.x0 - grid.Lx) / dx
        ty = np.where(dy > 0, y - grid.y0, y - grid.y0 - grid.Ly) / dy
    return np.where(dx == 0, np.inf, tx), np.where(dy == 0, np.inf, ty)


def _corner_crossings(grid, U, x, y, samples=720):
    """Directions where the exit switches between sides, located by bracketing and brentq."""
    def gap(theta):
        tx, ty = _side_exit_times(grid, U, x, y, theta)
        return np.arctan(tx - ty)

    theta = np.linspace(0.0, 2.0 * np.pi, samples + 1)
    values = gap(theta)
    roots = [brentq(lambda th: float(gap(th)), theta[i], theta[i + 1], xtol=1e-14)
             for i in range(samples) if values[i] * values[i + 1] < 0.0]
    if len(roots) != 4:
        raise VerificationError(f"expected 4 corner directions from ({x:.3f}, {y:.3f}), found {len(roots)}")
    return np.array(roots)


def dense_q_frozen(u, U, theta_n, s_n, nodes, layers=12):
    """
    Independent evaluation of the stationary kernel at selected node indices.

    FITPACK bicubic splines of the derivative fields continued past the edge, corner
    directions by root finding, a cosine-graded Simpson rule along every corner-to-corner
    arc and Simpson in s up to each characteristic's exit.
    """
    grid = u.grid
    d = derivatives(u)
    xs = grid.x0 + grid.hx * np.arange(1 - layers, grid.nx + 1 + layers)
    ys = grid.y0 + grid.hy * np.arange(1 - layers, grid.ny + 1 + layers)
    splines = [RectBivariateSpline(xs, ys, extend_past_edge(f.values, layers), kx=3, ky=3)
               for f in (d.fxx, d.fxy, d.fyy)]
    v = np.linspace(0.0, 1.0, (theta_n // 4) | 1)
    r = np.linspace(0.0, 1.0, s_n | 1)
    out = []
    for i, j in nodes:
        x, y = grid.x[i], grid.y[j]
        corners = _corner_crossings(grid, U, x, y)
        total = 0.0
        for start, end in zip(corners, np.append(corners[1:], corners[0] + 2.0 * np.pi)):
            theta = start + 0.5 * (end - start) * (1.0 - np.cos(np.pi * v))
            dtheta = 0.5 * np.pi * (end - start) * np.sin(np.pi * v)
            s_exit = np.minimum(*_side_exit_times(grid, U, x, y, theta))
            s = s_exit[:, None] * r
            sn, cs = np.sin(theta)[:, None], np.cos(theta)[:, None]
            px = x - (U + sn) * s
            py = y - cs * s
            vals = (sn ** 2 * splines[0].ev(px, py) + 2.0 * sn * cs * splines[1].ev(px, py)
                    + cs ** 2 * splines[2].ev(px, py))
            ray = s_exit * simpson(vals, x=r, axis=-1)
            total += simpson(ray * dtheta, x=v)
        out.append(total / (2.0 * np.pi))
    return np.array(out)


def check_q_oracle(quick=False):
    n = 16 if quick else 48
    quad = 16 if quick else 64
    histories = 2 if quick else 10
    grid = PlateGrid(n, n)
    params = AeroParams(0.5, quad, quad)
    rng = np.random.default_rng(SEED)
    picks = [(int(i), int(j)) for i, j in rng.integers(0, n, size=(24 if quick else 48, 2))]
    worst = 0.0
    for _ in range(histories):
        u = random_smooth_field(grid, rng)
        q = q_frozen(u, params).values
        prod = np.array([q[i, j] for i, j in picks])
        ref = dense_q_frozen(u, params.U, 4 * quad, 4 * quad, picks)
        worst = max(worst, float(np.linalg.norm(prod - ref) / np.linalg.norm(ref)))
    return CheckResult("q_kernel_oracle", worst <= 1e-4, worst, 1e-4,
                       f"{histories} frozen histories, {quad}x{quad} vs {4 * quad}x{4 * quad} nodes")


def check_singular_substitution(quick=False):
    horizon = 2.0
    worst = 0.0
    for z in (0.0, 0.3, 1.0, 1.9):
        _, w = singular_weight_nodes(z, horizon, 32)
        worst = max(worst, abs(w.sum() - math.sqrt(horizon ** 2 - z ** 2)))
    return CheckResult("singular_substitution", worst <= 1e-8, worst, 1e-8)


# --- Trace identity ---

def synthetic_history(grid, U, dt, a0=1.0, a1=0.2):
    """History u(τ) = (a0 + a1 τ)·sin⁴(πx)sin⁴(πy) with u_t = a1·mode, newest slot at τ = 0."""
    mode = ScalarField.from_function(
        grid, lambda X, Y: np.sin(np.pi * (X - grid.x0) / grid.Lx) ** 4 * np.sin(np.pi * (Y - grid.y0) / grid.Ly) ** 4)
    hist = DelayHistory(grid, dt, t_star(grid, U))
    for j in range(hist.capacity - 1, -1, -1):
        tau = -j * dt
        hist.append(tau, (a0 + a1 * tau) * mode, a1 * mode)
    return hist


def trace_refinement(levels, U=0.4):
    """Trace residuals for (grid, quadrature) pairs refined together."""
    out = []
    for n, quad in levels:
        grid = PlateGrid(n, n)
        hist = synthetic_history(grid, U, t_star(grid, U) / 64)
        out.append(trace_residual(hist, AeroParams(U, quad, quad), grid))
    return out


def check_trace_refinement(quick=False):
    levels = ((8, 16), (16, 32), (32, 64)) if quick else ((12, 32), (24, 64), (48, 128))
    res = trace_refinement(levels)
    slope = -_loglog_slope([q for _, q in levels], res)
    return CheckResult("trace_residual_refinement", slope >= 1.0, slope, 1.0,
                       "residuals " + ", ".join(f"{r:.3e}" for r in res))


# --- Time integration ---

def check_newmark_drift(quick=False):
    from advanced.dynamics import SimConfig, init, step

    grid = PlateGrid(12, 12)
    config = SimConfig(U=0.0, k=0.0, beta=0.0, dt=1e-3, kind=Berger(0.0, 0.0), couple_flow=False)
    u0 = clamped_mode(grid) * 0.1
    state = init(config, grid, u0, ScalarField.zeros(grid))

    def energy(st):
        return 0.5 * norm_l2(st.u_t) ** 2 + 0.5 * inner(ScalarField(grid, grid.biharmonic_matrix @ st.u.flat), st.u)

    e0 = energy(state)
    for _ in range(200 if quick else 1000):
        state = step(state, config)
    drift = abs(energy(state) - e0) / e0
    return CheckResult("newmark_drift", drift <= 1e-8, drift, 1e-8, f"{state.step_index} steps")


CHECKS = {
    "biharmonic_symmetry": check_biharmonic_symmetry,
    "airy_residual": check_airy_residual,
    "bracket_symmetry_refinement": check_bracket_symmetry,
    "t_star_sampling": check_t_star_sampling,
    "q_kernel_oracle": check_q_oracle,
    "singular_substitution": check_singular_substitution,
    "trace_residual_refinement": check_trace_refinement,
    "newmark_drift": check_newmark_drift,
}


def run_suite(names=None, quick=False):
    results = []
    for name in names or CHECKS:
        if name not in CHECKS:
            raise ValueError(f"unknown check {name!r}; choose from {', '.join(CHECKS)}")
        result = CHECKS[name](quick=quick)
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"{name}: {'PASS' if result.passed else 'FAIL'} "
                          f"(value {result.value:.4g}, threshold {result.threshold:g}) {result.detail}")
        results.append(result)
    return results


def require_all(results):
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError(f"failed checks: {', '.join(failed)}")
