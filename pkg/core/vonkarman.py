"""
Von Karman bracket, Airy stress solve and the nonlinear restoring forces.

Two nonlinearities are supported: the von Karman force f_V(u) = -[u, v(u) + F0] with
the clamped Airy function v, and the Berger force f_B(u) = (Υ - κ‖∇u‖²)Δu.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from config.settings import AIRY_MAX_REFINEMENTS, AIRY_RTOL, LOWER_FREQUENCY_EPS
from core.errors import SolverError
from core.grid import (
    ScalarField,
    derivatives,
    dirichlet_form,
    inner,
    laplacian,
    norm_h2,
    norm_l2,
)
from utils.validators import require_nonnegative, require_same_grid

logger = logging.getLogger(__name__)

# rounding floor of a residual b - Av, in units of eps * ‖|A||v|‖
_RESIDUAL_FLOOR_FACTOR = 64.0


@dataclass(frozen=True)
class VonKarman:
    """von Karman nonlinearity with an optional in-plane load field F0 (None means zero)."""
    F0: Optional[ScalarField] = None

    @property
    def name(self):
        return "von_karman"


@dataclass(frozen=True)
class Berger:
    upsilon: float = 0.0
    kappa: float = 1.0

    def __post_init__(self):
        require_nonnegative(self.kappa, "kappa")

    @property
    def name(self):
        return "berger"


NonlinearityKind = Union[VonKarman, Berger]


def _bracket_values(da, db):
    return (da.fxx.values * db.fyy.values + da.fyy.values * db.fxx.values
            - 2.0 * da.fxy.values * db.fxy.values)


def bracket(u, w):
    """[u, w] = u_xx w_yy + u_yy w_xx - 2 u_xy w_xy at interior nodes."""
    grid = require_same_grid(u, w)
    return ScalarField(grid, _bracket_values(derivatives(u), derivatives(w)))


def _bracket_with_load(u, F0):
    """[u, F0] where F0 carries no boundary conditions."""
    grid = require_same_grid(u, F0)
    return ScalarField(grid, _bracket_values(derivatives(u), derivatives(F0, boundary="free")))


def _adjoint(da, v):
    """
    Transpose of the discrete map w -> [a, w] applied to v, given the derivatives of a.

    Dxx, Dyy and Dxy with the zero ring are symmetric matrices, so the transpose is
    Dyy(a_xx v) + Dxx(a_yy v) - 2 Dxy(a_xy v).
    """
    grid = v.grid
    return (derivatives(ScalarField(grid, da.fxx.values * v.values)).fyy
            + derivatives(ScalarField(grid, da.fyy.values * v.values)).fxx
            - 2.0 * derivatives(ScalarField(grid, da.fxy.values * v.values)).fxy)


def bracket_adjoint(u, v):
    """Discrete counterpart of [u, v] that is exactly the transpose of w -> [u, w]."""
    require_same_grid(u, v)
    return _adjoint(derivatives(u), v)


def _load_force(u, F0):
    """Gradient of ½⟨[u, F0], u⟩: the symmetric part of w -> [w, F0] applied to u."""
    require_same_grid(u, F0)
    return 0.5 * (_bracket_with_load(u, F0) + _adjoint(derivatives(F0, boundary="free"), u))


def airy_with_residual(u, w):
    """
    Solve Δ²v = -[u, w] with v = ∂νv = 0 and return (v, relative residual).

    Up to AIRY_MAX_REFINEMENTS steps of iterative refinement are applied when the first
    solve misses the tolerance. Raises SolverError when the residual stays above both
    AIRY_RTOL and the rounding floor of the residual evaluation.
    """
    grid = require_same_grid(u, w)
    rhs = -bracket(u, w).flat
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return ScalarField.zeros(grid), 0.0

    A = grid.biharmonic_matrix
    v = grid.solve_biharmonic(rhs)
    residual = rhs - A @ v
    refinements = 0
    while np.linalg.norm(residual) > AIRY_RTOL * rhs_norm and refinements < AIRY_MAX_REFINEMENTS:
        v = v + grid.solve_biharmonic(residual)
        residual = rhs - A @ v
        refinements += 1

    rel = float(np.linalg.norm(residual) / rhs_norm)
    if refinements:
        logger.warning(f"Airy solve needed {refinements} refinement step(s), residual {rel:.2e}")
    if rel > AIRY_RTOL:
        floor = _RESIDUAL_FLOOR_FACTOR * np.finfo(float).eps * np.linalg.norm(abs(A) @ np.abs(v))
        if np.linalg.norm(residual) > floor:
            raise SolverError(f"Airy solve residual {rel:.3e} above tolerance {AIRY_RTOL:.0e}",
                              residual=rel)
        logger.debug(f"Airy residual {rel:.2e} at the rounding floor of the grid")
    return ScalarField(grid, v), rel


def airy(u, w):
    return airy_with_residual(u, w)[0]


def restoring_force(u, kind):
    """
    Nonlinear force f(u) as it appears on the left of the plate equation.

    The von Karman force is assembled from bracket transposes, so it is the exact
    gradient of the discrete potential_pi; it agrees with -[u, v(u) + F0] to O(h²).
    """
    if isinstance(kind, VonKarman):
        force = -bracket_adjoint(u, airy(u, u))
        if kind.F0 is not None:
            force = force - _load_force(u, kind.F0)
        return force
    if isinstance(kind, Berger):
        return (kind.upsilon - kind.kappa * dirichlet_form(u, u)) * laplacian(u)
    raise TypeError(f"unknown nonlinearity {kind!r}")


def restoring_jacobian_apply(u, h, kind):
    """Directional derivative f'(u)h."""
    require_same_grid(u, h)
    if isinstance(kind, VonKarman):
        out = -bracket_adjoint(h, airy(u, u)) - 2.0 * bracket_adjoint(u, airy(u, h))
        if kind.F0 is not None:
            out = out - _load_force(h, kind.F0)
        return out
    if isinstance(kind, Berger):
        coeff = kind.upsilon - kind.kappa * dirichlet_form(u, u)
        return coeff * laplacian(h) - 2.0 * kind.kappa * dirichlet_form(u, h) * laplacian(u)
    raise TypeError(f"unknown nonlinearity {kind!r}")


def potential_pi(u, kind, p=None):
    """
    Potential Π(u) of the nonlinear and external forces; its gradient is f(u) - p.

    von Karman: ¼‖Δv(u)‖² - ½⟨[u,u], F0⟩ - ⟨p,u⟩
    Berger:     -Υ/2‖∇u‖² + κ/4‖∇u‖⁴ - ⟨p,u⟩
    """
    if isinstance(kind, VonKarman):
        value = 0.25 * norm_h2(airy(u, u)) ** 2
        if kind.F0 is not None:
            value -= 0.5 * inner(_bracket_with_load(u, kind.F0), u)
    elif isinstance(kind, Berger):
        g2 = dirichlet_form(u, u)
        value = -0.5 * kind.upsilon * g2 + 0.25 * kind.kappa * g2 * g2
    else:
        raise TypeError(f"unknown nonlinearity {kind!r}")
    if p is not None:
        value -= inner(p, u)
    return float(value)


def lower_frequency_gap(u, kind, eps=LOWER_FREQUENCY_EPS):
    """‖u‖² - ε(‖Δu‖² + ‖Δv(u)‖²); bounded above by M_ε along bounded trajectories."""
    stress = norm_h2(airy(u, u)) ** 2 if isinstance(kind, VonKarman) else 0.0
    return float(norm_l2(u) ** 2 - eps * (norm_h2(u) ** 2 + stress))


def airy_bound_ratio(w1, w2, w3):
    """‖[w1, v(w2, w3)]‖ / (‖Δw1‖‖Δw2‖‖Δw3‖): empirical Airy regularity constant."""
    denom = norm_h2(w1) * norm_h2(w2) * norm_h2(w3)
    if denom == 0.0:
        return 0.0
    return float(norm_l2(bracket(w1, airy(w2, w3))) / denom)
