"""
Reduced aerodynamics: delay horizon, delay history, the delayed potential q^u and the
local reconstruction of the flow potential φ** and its time derivative.

The delay kernel integrates every characteristic up to the time it leaves the plate:
θ is split at the four corner directions of each node and s is cut at the exit time,
so the integrand is smooth on every piece. Derivative fields are read through cubic
splines of their values continued past the edge. The flow reconstruction uses the
periodic trapezoid rule in θ, a trapezoid in σ and the bilinear zero extension
(core.grid.eval_extended_many).
"""
import logging
import math
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, NamedTuple

import numpy as np
import numpy.polynomial.polynomial as npoly
from scipy.ndimage import map_coordinates, spline_filter

from config.settings import DEFAULT_S_N, DEFAULT_THETA_N, MIN_QUADRATURE
from core.errors import GridMismatchError, HistoryError
from core.grid import ScalarField, derivatives, eval_extended_many, extend_past_edge, norm_l2
from utils.validators import require_subsonic

logger = logging.getLogger(__name__)

# relative slack when comparing slot times and lags against the slot spacing
_TIME_RTOL = 1e-9

# polynomial degree of the local panels of each radial rule
_RULE_DEGREE = {"cubic": 3, "trapezoid": 1}


@dataclass(frozen=True)
class AeroParams:
    """
    Flow speed and quadrature of the delay kernel.

    theta_n rays per node are spread over the four corner-to-corner arcs (theta_n // 4
    each). s_n nodes span [0, t*]; s_rule="cubic" integrates each characteristic with
    local cubic panels (fourth order), "trapezoid" with linear ones.
    """
    U: float = 0.0
    theta_n: int = DEFAULT_THETA_N
    s_n: int = DEFAULT_S_N
    s_rule: Literal["cubic", "trapezoid"] = "cubic"

    def __post_init__(self):
        require_subsonic(self.U)
        if self.theta_n < MIN_QUADRATURE or self.s_n < MIN_QUADRATURE:
            raise ValueError(
                f"quadrature counts must be >= {MIN_QUADRATURE}, got theta_n={self.theta_n}, s_n={self.s_n}")
        _rule_degree(self.s_rule)

    def refined(self, factor=2):
        return AeroParams(self.U, self.theta_n * factor, self.s_n * factor, self.s_rule)


def _rule_degree(rule):
    try:
        return _RULE_DEGREE[rule]
    except KeyError:
        raise ValueError(f"unknown s_rule {rule!r}; choose from {', '.join(_RULE_DEGREE)}") from None


# --- Delay horizon ---

def t_star(grid, U):
    """
    Time after which every characteristic footprint (x-(U+sinθ)s, y-s cosθ) has left
    the rectangle, for every starting point in it.

    For a direction d(θ) the longest stay is the box traversal min(Lx/|d_x|, Ly/|d_y|);
    its maximum over θ sits where both terms cross, Lx|cosθ| = Ly|U+sinθ|.
    """
    U = require_subsonic(U)
    Lx, Ly = grid.Lx, grid.Ly
    R = math.hypot(Lx, Ly)
    phi = math.atan2(Ly, Lx)
    a = math.acos(Ly * U / R)
    b = math.acos(-Ly * U / R)
    candidates = (-phi + a, -phi - a, phi + b, phi - b)
    return max(_box_traversal(grid, U, th) for th in candidates)


def _box_traversal(grid, U, theta):
    dx = abs(U + math.sin(theta))
    dy = abs(math.cos(theta))
    tx = grid.Lx / dx if dx > 0 else math.inf
    ty = grid.Ly / dy if dy > 0 else math.inf
    return min(tx, ty)


def t_star_bound(grid, U):
    """Conservative horizon diam/(1-U); equals t_star at U = 0."""
    U = require_subsonic(U)
    return grid.diameter / (1.0 - U)


class EscapeSample(NamedTuple):
    longest_stay: float
    counterexamples: int
    samples: int


def sample_escape_time(grid, U, n_samples, rng, horizon=None):
    """
    Brute-force check of the delay horizon.

    Draws (x, y, θ, s) uniformly. longest_stay is the largest exit time seen, taking for
    each θ the worst starting corner. counterexamples counts samples with s > horizon whose
    characteristic point is still inside the plate.
    """
    U = require_subsonic(U)
    if horizon is None:
        horizon = t_star(grid, U)
    x = grid.x0 + grid.Lx * rng.random(n_samples)
    y = grid.y0 + grid.Ly * rng.random(n_samples)
    theta = 2.0 * np.pi * rng.random(n_samples)
    s = t_star_bound(grid, U) * 1.5 * rng.random(n_samples)

    dx = U + np.sin(theta)
    dy = np.cos(theta)
    with np.errstate(divide="ignore"):
        stay = np.minimum(np.where(dx != 0, grid.Lx / np.abs(dx), np.inf),
                          np.where(dy != 0, grid.Ly / np.abs(dy), np.inf))

    inside = grid.contains(x - dx * s, y - dy * s)
    counterexamples = int(np.count_nonzero(inside & (s > horizon)))
    return EscapeSample(float(np.max(stay)), counterexamples, n_samples)


# --- Delay history ---

class HistorySlot(NamedTuple):
    t: float
    u: ScalarField
    u_t: ScalarField


class DelayHistory:
    """
    Ring buffer of (t, u, u_t) slots spaced uniformly by dt, newest last.

    Capacity ceil(horizon/dt) + 2 keeps one full delay window plus an interpolation margin.
    Lookups are by lag behind the newest slot, so the absolute clock never enters the kernel.
    """

    def __init__(self, grid, dt, horizon):
        if not dt > 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        self.grid = grid
        self.dt = float(dt)
        self.horizon = float(horizon)
        self.capacity = int(math.ceil(self.horizon / self.dt - _TIME_RTOL)) + 2
        self._slots = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._slots)

    @property
    def slots(self):
        return tuple(self._slots)

    @property
    def t_now(self):
        if not self._slots:
            raise HistoryError("history is empty")
        return self._slots[-1].t

    @property
    def span(self):
        return (len(self._slots) - 1) * self.dt if self._slots else 0.0

    def append(self, t, u, u_t):
        if u.grid != self.grid or u_t.grid != self.grid:
            raise GridMismatchError("history slot fields must live on the history grid")
        if self._slots:
            gap = t - self._slots[-1].t
            if abs(gap - self.dt) > _TIME_RTOL * max(1.0, abs(t)):
                raise HistoryError(f"slot spacing {gap!r} differs from dt={self.dt!r}")
        self._slots.append(HistorySlot(float(t), u, u_t))

    def covers(self, window):
        return self.span >= window - _TIME_RTOL * max(1.0, window)

    def require_window(self, window):
        if not self.covers(window):
            raise HistoryError(
                f"history spans {self.span:.6g} but the delay window needs {window:.6g}")

    def _bracket(self, lag):
        if len(self._slots) == 0:
            raise HistoryError("history is empty")
        k = lag / self.dt
        last = len(self._slots) - 1
        if k < -_TIME_RTOL or k > last * (1.0 + _TIME_RTOL) + _TIME_RTOL:
            raise HistoryError(f"lag {lag:.6g} outside the stored window [0, {self.span:.6g}]")
        k = min(max(k, 0.0), float(last))
        i0 = int(math.floor(k))
        frac = k - i0
        if i0 >= last:
            i0, frac = last, 0.0
        return i0, frac

    def _at_lag(self, lag, attr):
        i0, frac = self._bracket(lag)
        newer = getattr(self._slots[-1 - i0], attr)
        if frac == 0.0:
            return newer
        older = getattr(self._slots[-2 - i0], attr)
        return ScalarField(self.grid, (1.0 - frac) * newer.values + frac * older.values)

    def displacement_at_lag(self, lag):
        return self._at_lag(lag, "u")

    def velocity_at_lag(self, lag):
        return self._at_lag(lag, "u_t")

    def downwash_at_lag(self, lag, U):
        """g = u_t + U u_x at the given lag."""
        g = self.velocity_at_lag(lag)
        if U:
            g = g + U * derivatives(self.displacement_at_lag(lag)).fx
        return g

    def shifted(self, delta):
        """Copy with every slot time moved by delta."""
        out = DelayHistory(self.grid, self.dt, self.horizon)
        for slot in self._slots:
            out._slots.append(HistorySlot(slot.t + delta, slot.u, slot.u_t))
        return out


# --- Quadrature helpers ---

def _theta_nodes(n):
    theta = 2.0 * np.pi * np.arange(n) / n
    return np.sin(theta), np.cos(theta)


def _panel_base(j, K, degree):
    """First node of the local interpolant used on panel [j, j+1] of the nodes 0..K."""
    return np.clip(j - (degree - 1) // 2, 0, K - degree)


@lru_cache(maxsize=32)
def _panel_tables(K, degree):
    """
    Composite rule on the unit-spaced nodes 0..K built from local Lagrange panels.

    Returns (full, antiderivatives). full[m] holds the node weights of the panels
    0..m-1. antiderivatives[a][i] is the antiderivative, vanishing at 0, of the i-th
    Lagrange basis polynomial on the nodes a..a+degree measured from the panel start.
    """
    if K < degree:
        raise ValueError(f"panels of degree {degree} need at least {degree + 1} nodes, got {K + 1}")
    antiderivatives = {}
    for a in range(-degree, 1):
        nodes = np.arange(a, a + degree + 1, dtype=float)
        polys = []
        for i in range(degree + 1):
            others = np.delete(nodes, i)
            basis = npoly.polyfromroots(others) / np.prod(nodes[i] - others)
            polys.append(npoly.polyint(basis))
        antiderivatives[a] = tuple(polys)
    full = np.zeros((K + 1, K + 1))
    for j in range(K):
        base = int(_panel_base(j, K, degree))
        full[j + 1] = full[j]
        for i, poly in enumerate(antiderivatives[base - j]):
            full[j + 1, base + i] += npoly.polyval(1.0, poly)
    full.setflags(write=False)
    return full, antiderivatives


def s_weights(n, length, rule="trapezoid"):
    """Nodes 0..length (n of them) and weights of the closed composite rule on them."""
    full, _ = _panel_tables(n - 1, _rule_degree(rule))
    return np.linspace(0.0, length, n), full[n - 1] * (length / (n - 1))


def cut_weights(T, K, degree):
    """
    Weights of ∫₀^T on the unit-spaced nodes 0..K for every entry of T (0 <= T <= K).

    Full panels below floor(T) come from the composite table; the partial panel reuses the
    interpolant of its full panel. Returns (full, m, base, partial): node k gets full[m, k]
    plus partial[..., k - base] when 0 <= k - base <= degree.
    """
    full, antiderivatives = _panel_tables(K, degree)
    T = np.clip(np.asarray(T, dtype=float), 0.0, float(K))
    m = np.minimum(np.floor(T).astype(int), K)
    tau = T - m
    base = _panel_base(m, K, degree)
    offset = base - m
    partial = np.zeros(T.shape + (degree + 1,))
    for a, polys in antiderivatives.items():
        sel = offset == a
        if np.any(sel):
            for i, poly in enumerate(polys):
                partial[sel, i] = npoly.polyval(tau[sel], poly)
    return full, m, base, partial


def singular_weight_nodes(z, horizon, n):
    """
    Nodes and weights for ∫_z^horizon s/√(s²-z²) H(s) ds.

    With s = √(z²+σ²) the weight and ds combine into dσ, so a trapezoid rule in σ on
    [0, √(horizon²-z²)] integrates H without any singularity.
    """
    s, _, w = _sigma_nodes(z, horizon, n)
    return s, w


def _sigma_nodes(z, horizon, n):
    if z < 0:
        raise ValueError(f"z must be >= 0, got {z}")
    if z >= horizon:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    sigma, w = s_weights(n, math.sqrt(horizon * horizon - z * z))
    return np.sqrt(z * z + sigma * sigma), sigma, w


# --- Ray rule of the delay kernel ---

def exit_time(grid, X, Y, dx, dy):
    """Time at which the footprint (X - dx s, Y - dy s) leaves the plate rectangle."""
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(dx > 0, (X - grid.x0) / dx, (X - grid.x0 - grid.Lx) / dx)
        ty = np.where(dy > 0, (Y - grid.y0) / dy, (Y - grid.y0 - grid.Ly) / dy)
    tx = np.where(dx == 0, np.inf, tx)
    ty = np.where(dy == 0, np.inf, ty)
    return np.minimum(tx, ty)


def corner_directions(grid, U, X, Y):
    """
    Angles in [0, 2π), sorted, whose characteristic from (X, Y) runs through a plate corner.

    The footprint hits the corner c at s = 1/λ when (U + sinθ, cosθ) = λ(X - cx, Y - cy);
    λ is the positive root of the resulting quadratic.
    """
    out = []
    for cx in (grid.x0, grid.x0 + grid.Lx):
        for cy in (grid.y0, grid.y0 + grid.Ly):
            a = X - cx
            b = Y - cy
            r2 = a * a + b * b
            lam = (U * a + np.sqrt(U * U * a * a + r2 * (1.0 - U * U))) / r2
            out.append(np.arctan2(lam * a - U, lam * b))
    return np.sort(np.mod(np.stack(out, axis=-1), 2.0 * np.pi), axis=-1)


class RayRule(NamedTuple):
    sin: np.ndarray       # (nx, ny, rays)
    cos: np.ndarray
    weight: np.ndarray    # θ weight over 2π
    m: np.ndarray         # full s-panels before the exit
    base: np.ndarray      # first node of the partial panel
    partial: np.ndarray   # (nx, ny, rays, degree + 1)
    full: np.ndarray      # composite table of the s-panels
    ds: float
    layers: int           # padding that keeps every weighted point inside the spline data


@lru_cache(maxsize=8)
def ray_rule(grid, params):
    """
    Rays and weights of the delay kernel at every node, cached per (grid, params).

    On each corner-to-corner arc θ = a + L(v - sin(2πv)/2π) with midpoint nodes in v; the
    map flattens the arc ends, where the exit time varies fastest. In s the shared nodes
    kΔs (Δs = t*/(s_n - 1)) carry weights cut at each ray's exit time.
    """
    degree = _rule_degree(params.s_rule)
    per_arc = params.theta_n // 4
    X, Y = grid.mesh()
    corners = corner_directions(grid, params.U, X, Y)
    span = np.diff(np.concatenate([corners, corners[..., :1] + 2.0 * np.pi], axis=-1), axis=-1)

    v = (np.arange(per_arc) + 0.5) / per_arc
    shape = v - np.sin(2.0 * np.pi * v) / (2.0 * np.pi)
    slope = (1.0 - np.cos(2.0 * np.pi * v)) / per_arc
    theta = (corners[..., None] + span[..., None] * shape).reshape(grid.shape + (-1,))
    weight = (span[..., None] * slope).reshape(grid.shape + (-1,)) / (2.0 * np.pi)
    sin, cos = np.sin(theta), np.cos(theta)

    horizon = t_star(grid, params.U)
    K = params.s_n - 1
    ds = horizon / K
    s_exit = np.minimum(exit_time(grid, X[..., None], Y[..., None], params.U + sin, cos), horizon)
    full, m, base, partial = cut_weights(s_exit / ds, K, degree)
    # weighted points reach at most `degree - (degree - 1) // 2` nodes past the exit
    reach = (degree - (degree - 1) // 2) * ds * (1.0 + params.U)
    layers = int(math.ceil(reach / min(grid.hx, grid.hy))) + 4
    logger.debug(f"ray rule on {grid.nx}x{grid.ny}: {theta.shape[-1]} rays, {K + 1} s-nodes, "
                 f"{layers} padding layers")
    return RayRule(sin, cos, weight, m, base, partial, full, ds, layers)


def kernel_coefficients(u, layers):
    """Cubic spline coefficients of (u_xx, u_xy, u_yy) continued `layers` nodes past the edge."""
    d = derivatives(u)
    return tuple(spline_filter(extend_past_edge(f.values, layers), order=3, mode="mirror")
                 for f in (d.fxx, d.fxy, d.fyy))


# --- Delayed potential ---

def _cone_integral(coeffs_at_lag, grid, params, lag0=0.0):
    """
    (1/2π)∫₀^{2π}∫₀^{s_exit} [M_θ² û](x-(U+sinθ)s, y-s cosθ, lag0+s) ds dθ at every node.

    coeffs_at_lag(lag) returns kernel_coefficients of the displacement at that lag. Only
    points with a nonzero weight are evaluated.
    """
    rule = ray_rule(grid, params)
    degree = rule.partial.shape[-1] - 1
    X, Y = grid.mesh()
    ix = ((X - grid.x0) / grid.hx - 1.0 + rule.layers)[..., None]
    iy = ((Y - grid.y0) / grid.hy - 1.0 + rule.layers)[..., None]
    step_x = (params.U + rule.sin) * (rule.ds / grid.hx)
    step_y = rule.cos * (rule.ds / grid.hy)
    directions = (rule.sin * rule.sin, 2.0 * rule.sin * rule.cos, rule.cos * rule.cos)

    total = np.zeros(rule.sin.shape)
    for k in range(rule.full.shape[0]):
        weight = rule.full[rule.m, k]
        offset = k - rule.base
        inside = (offset >= 0) & (offset <= degree)
        if np.any(inside):
            picked = np.take_along_axis(rule.partial, np.clip(offset, 0, degree)[..., None], axis=-1)
            weight = weight + np.where(inside, picked[..., 0], 0.0)
        active = weight != 0.0
        if not np.any(active):
            continue
        coords = np.vstack([(ix - k * step_x)[active], (iy - k * step_y)[active]])
        coeffs = coeffs_at_lag(lag0 + k * rule.ds)
        values = sum(w[active] * map_coordinates(c, coords, order=3, prefilter=False, mode="mirror")
                     for w, c in zip(directions, coeffs))
        total[active] += weight[active] * values
    return ScalarField(grid, rule.ds * np.sum(total * rule.weight, axis=-1))


def _require_history_grid(hist, grid):
    if hist.grid != grid:
        raise GridMismatchError(f"history grid {hist.grid} differs from {grid}")


def delayed_potential_at_lag(hist, params, lag0):
    """q^u at the time lag0 behind the newest slot."""
    hist.require_window(lag0 + t_star(hist.grid, params.U))
    layers = ray_rule(hist.grid, params).layers
    return _cone_integral(lambda lag: kernel_coefficients(hist.displacement_at_lag(lag), layers),
                          hist.grid, params, lag0)


def q_potential(hist, params, grid):
    """Delayed potential q^u(t) at the newest history time."""
    _require_history_grid(hist, grid)
    return delayed_potential_at_lag(hist, params, 0.0)


def q_frozen(u, params):
    """Stationary kernel Q_stat[u]: the delayed potential of the history u(τ) ≡ u."""
    coeffs = kernel_coefficients(u, ray_rule(u.grid, params).layers)
    return _cone_integral(lambda lag: coeffs, u.grid, params)


# --- Flow reconstruction ---

def _flow_terms(hist, params, px, py, z, lag0, with_rate=True):
    """
    φ** and φ**_t at points (px, py, z) for the time lag0 behind the newest slot.

    Every term runs on σ-nodes with s = √(z²+σ²); the plain ds integrals pick up the
    Jacobian σ/s, the weighted one does not.
    """
    px = np.asarray(px, dtype=float).ravel()[:, None]
    py = np.asarray(py, dtype=float).ravel()[:, None]
    n_pts = px.shape[0]
    horizon = t_star(hist.grid, params.U)
    t = hist.t_now - lag0
    if z >= horizon or t - z < 0.0:
        zeros = np.zeros(n_pts)
        return zeros, zeros.copy()
    hist.require_window(lag0 + horizon)

    U = params.U
    sin, cos = _theta_nodes(params.theta_n)
    s_nodes, sigma, w_sigma = _sigma_nodes(z, horizon, params.s_n)
    ratio = np.divide(sigma, s_nodes, out=np.ones_like(sigma), where=s_nodes > 0)

    phi = np.zeros(n_pts)
    rate = np.zeros(n_pts)
    g_first = g_last = None
    for k, (s, sg, ws) in enumerate(zip(s_nodes, sigma, w_sigma)):
        g = hist.downwash_at_lag(lag0 + s, U)
        qx = px - U * s - sg * sin
        qy = py - sg * cos
        g_mean = eval_extended_many(g, qx, qy).mean(axis=-1)
        phi += ws * ratio[k] * g_mean
        if with_rate:
            dg = derivatives(g)
            gx = eval_extended_many(dg.fx, qx, qy)
            gy = eval_extended_many(dg.fy, qx, qy)
            rate += ws * ratio[k] * U * gx.mean(axis=-1) + ws * (sin * gx + cos * gy).mean(axis=-1)
            if k == 0:
                g_first = g_mean
            g_last = g_mean
    if with_rate:
        rate += g_last - g_first
    return -phi, rate


def reconstruct_phi(hist, params, p, t=None):
    """φ**(x, y, z, t); t defaults to the newest history time."""
    lag0 = 0.0 if t is None else hist.t_now - t
    x, y, z = p
    return float(_flow_terms(hist, params, [x], [y], z, lag0, with_rate=False)[0][0])


def reconstruct_phi_t(hist, params, p, t=None):
    """∂t φ**(x, y, z, t) by differentiating the representation along the characteristics."""
    lag0 = 0.0 if t is None else hist.t_now - t
    x, y, z = p
    return float(_flow_terms(hist, params, [x], [y], z, lag0)[1][0])


def probe_flow(hist, params, points, t=None):
    """Rows (x, y, z, φ**, φ**_t) at the given probe points."""
    lag0 = 0.0 if t is None else hist.t_now - t
    rows = []
    for x, y, z in points:
        phi, rate = _flow_terms(hist, params, [x], [y], z, lag0)
        rows.append((float(x), float(y), float(z), float(phi[0]), float(rate[0])))
    return rows


def trace_residual(hist, params, grid, t=None):
    """
    ‖φ**_t + U ∂xφ** + (u_t + U u_x) + q^u‖ on the plate (z = 0).

    ∂xφ** is the centered difference of reconstructed values at x ± hx.
    """
    _require_history_grid(hist, grid)
    lag0 = 0.0 if t is None else hist.t_now - t
    X, Y = grid.mesh()
    _, rate = _flow_terms(hist, params, X, Y, 0.0, lag0)
    residual = rate.reshape(grid.shape)
    if params.U:
        phi_plus, _ = _flow_terms(hist, params, X + grid.hx, Y, 0.0, lag0, with_rate=False)
        phi_minus, _ = _flow_terms(hist, params, X - grid.hx, Y, 0.0, lag0, with_rate=False)
        residual = residual + params.U * ((phi_plus - phi_minus) / (2.0 * grid.hx)).reshape(grid.shape)
    residual = residual + hist.downwash_at_lag(lag0, params.U).values
    residual = residual + delayed_potential_at_lag(hist, params, lag0).values
    return norm_l2(ScalarField(grid, residual))
