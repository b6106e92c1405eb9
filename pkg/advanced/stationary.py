"""
Stationary problem of the reduced plate equation

    Δ²u + βu + f(u) + U u_x + Q_stat[u] = p0

solved by damped Newton-Krylov, natural-parameter continuation and concurrent seed
search, with the converged solutions kept in an EquilibriumSet catalog.
"""
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, gmres

from config.settings import (
    DEDUP_TOL,
    FORMAT_VERSION,
    GMRES_RTOL,
    LINESEARCH_MAX_HALVINGS,
    NEWTON_MAX_ITER,
    NEWTON_TOL,
)
from core.aero import q_frozen
from core.errors import SolverError
from core.grid import (
    ScalarField,
    biharmonic_clamped,
    derivatives,
    norm_h2,
    norm_l2,
    shifted_biharmonic_factor,
    solve_factored,
)
from core.vonkarman import restoring_force, restoring_jacobian_apply

logger = logging.getLogger(__name__)

_ARMIJO = 1e-4
_GMRES_RESTART = 60
_GMRES_MAXITER = 20


# --- Residual and Jacobian ---

def _flow_part(u, config):
    if not config.couple_flow:
        return None
    out = q_frozen(u, config.aero)
    if config.U:
        out = out + config.U * derivatives(u).fx
    return out


def static_residual(u, config):
    """Δ²u + βu + f(u) + U u_x + Q_stat[u] - p0 (flow terms only when coupled)."""
    r = biharmonic_clamped(u) + config.beta * u + restoring_force(u, config.kind) - config.load(u.grid)
    flow = _flow_part(u, config)
    return r if flow is None else r + flow


def static_jacobian_apply(u, h, config):
    out = biharmonic_clamped(h) + config.beta * h + restoring_jacobian_apply(u, h, config.kind)
    flow = _flow_part(h, config)
    return out if flow is None else out + flow


def certificate_tolerance(config, grid):
    return NEWTON_TOL * (1.0 + norm_l2(config.load(grid)))


def _krylov_solve(u, rhs, config):
    """Solve J(u)δ = rhs by GMRES preconditioned with (Δ² + β)⁻¹."""
    grid = u.grid
    n = grid.size
    J = LinearOperator((n, n), dtype=float,
                       matvec=lambda x: static_jacobian_apply(u, ScalarField(grid, x), config).flat)
    factor = shifted_biharmonic_factor(grid, config.beta)
    M = LinearOperator((n, n), dtype=float, matvec=lambda x: solve_factored(factor, x))
    delta, info = gmres(J, rhs.ravel(), M=M, rtol=GMRES_RTOL, atol=0.0,
                        restart=min(n, _GMRES_RESTART), maxiter=_GMRES_MAXITER)
    if info < 0:
        raise SolverError(f"GMRES breakdown (info={info})")
    if info > 0:
        achieved = float(np.linalg.norm(J.matvec(delta) - rhs.ravel()) / max(np.linalg.norm(rhs), 1e-300))
        logger.debug(f"GMRES stopped after {info} iterations at relative residual {achieved:.2e}")
    return ScalarField(grid, delta)


# --- Newton ---

@dataclass
class NewtonResult:
    solution: ScalarField
    residual_norm: float
    iterations: int
    converged: bool
    residual_history: List[float] = field(default_factory=list)
    message: str = ""


def newton_solve(u_guess, config, max_iter=NEWTON_MAX_ITER, tol=None):
    """
    Damped Newton on the static residual with backtracking on ½‖r‖².

    Returns the best iterate; converged is False when the iteration budget runs out or
    the line search stalls.
    """
    grid = u_guess.grid
    target = certificate_tolerance(config, grid) if tol is None else tol
    u = u_guess
    r = static_residual(u, config)
    norm = norm_l2(r)
    history = [norm]
    for it in range(max_iter + 1):
        if norm <= target:
            logger.debug(f"Newton converged in {it} iteration(s), residual {norm:.3e}")
            return NewtonResult(u, norm, it, True, history, "converged")
        if it == max_iter:
            break
        delta = _krylov_solve(u, -r.values, config)
        lam = 1.0
        for _ in range(LINESEARCH_MAX_HALVINGS + 1):
            trial = u + lam * delta
            r_trial = static_residual(trial, config)
            n_trial = norm_l2(r_trial)
            if n_trial ** 2 <= (1.0 - 2.0 * _ARMIJO * lam) * norm ** 2:
                break
            lam *= 0.5
            logger.debug(f"line search halves step to {lam:.3e}")
        else:
            logger.warning(f"Newton line search stalled at iteration {it + 1}, residual {norm:.3e}")
            return NewtonResult(u, norm, it + 1, False, history, "line-search stall")
        u, r, norm = trial, r_trial, n_trial
        history.append(norm)
        logger.debug(f"Newton iteration {it + 1}: residual {norm:.3e} (step {lam:g})")
    logger.warning(f"Newton hit {max_iter} iterations with residual {norm:.3e} > {target:.1e}")
    return NewtonResult(u, norm, max_iter, False, history, "max iterations")


def linear_response(config, grid):
    """One-shot solve of the problem linearized at u = 0."""
    zero = ScalarField.zeros(grid)
    rhs = -static_residual(zero, config).values
    return _krylov_solve(zero, rhs, config)


# --- Equilibrium catalog ---

@dataclass
class Equilibrium:
    u: ScalarField
    residual_norm: float
    params: dict
    label: str = ""


class EquilibriumSet:
    """Catalog of certified stationary solutions, deduplicated in the ‖Δ·‖ norm."""

    def __init__(self, dedup_tol=DEDUP_TOL):
        self.dedup_tol = float(dedup_tol)
        self._members = []
        self._lock = threading.Lock()
        self.branch = []
        self.branch_lost_at = None

    def __len__(self):
        return len(self._members)

    def __iter__(self):
        return iter(tuple(self._members))

    def __getitem__(self, index):
        return self._members[index]

    @property
    def members(self):
        return tuple(self._members)

    def add(self, result, config, label=""):
        """
        Insert a Newton result; returns the member index or None when the result carries
        no valid certificate. A near-duplicate keeps the better residual.
        """
        grid = result.solution.grid
        cert = certificate_tolerance(config, grid)
        if not result.converged or result.residual_norm > cert:
            logger.info(f"Rejected candidate with residual {result.residual_norm:.3e} (needs <= {cert:.1e})")
            return None
        with self._lock:
            for i, member in enumerate(self._members):
                if norm_h2(member.u - result.solution) <= self.dedup_tol:
                    if result.residual_norm < member.residual_norm:
                        self._members[i] = Equilibrium(result.solution, result.residual_norm,
                                                       member.params, member.label)
                    return i
            self._members.append(Equilibrium(result.solution, result.residual_norm,
                                             config.snapshot(), label))
            return len(self._members) - 1

    def nearest(self, u, u_t):
        """(index, distance) of the member closest to the state (u, u_t)."""
        if not self._members:
            raise ValueError("equilibrium set is empty")
        kinetic = norm_l2(u_t) ** 2
        dists = [float(np.sqrt(norm_h2(u - m.u) ** 2 + kinetic)) for m in self._members]
        best = int(np.argmin(dists))
        return best, dists[best]

    def to_dict(self):
        members = []
        for m in self._members:
            g = m.u.grid
            members.append({
                "label": m.label,
                "residual_norm": m.residual_norm,
                "norm_h2": norm_h2(m.u),
                "max_abs": m.u.max_abs(),
                "params": m.params,
                "grid": {"nx": g.nx, "ny": g.ny, "x0": g.x0, "y0": g.y0, "Lx": g.Lx, "Ly": g.Ly},
                "values": m.u.values.tolist(),
            })
        return {"format_version": FORMAT_VERSION, "dedup_tol": self.dedup_tol,
                "branch": self.branch, "branch_lost_at": self.branch_lost_at, "members": members}

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2)


def distance_to_set(u, u_t, eq_set):
    """min over members of (‖Δ(u - û)‖² + ‖u_t‖²)^½."""
    return eq_set.nearest(u, u_t)[1]


# --- Continuation and seed search ---

def _config_at(config, param, value, base_load):
    if param == "U":
        return config.with_U(value)
    if param == "load":
        return replace(config, p0=value * base_load)
    raise ValueError(f"continuation parameter must be 'U' or 'load', got {param!r}")


def continuation(param_path, config, seed, param="U", eq_set=None):
    """
    Natural-parameter continuation: each converged point seeds the next Newton solve.

    A Newton failure ends the branch; the parameter value is kept in branch_lost_at.
    """
    eq_set = EquilibriumSet() if eq_set is None else eq_set
    base_load = config.load(seed.grid)
    guess = seed
    for value in param_path:
        cfg = _config_at(config, param, float(value), base_load)
        result = newton_solve(guess, cfg)
        if not result.converged:
            logger.warning(f"Branch lost at {param}={value} ({result.message})")
            eq_set.branch_lost_at = float(value)
            break
        index = eq_set.add(result, cfg, label=f"{param}={value:g}")
        eq_set.branch.append((float(value), index))
        logger.info(f"Continuation {param}={value:g}: |Δu|={norm_h2(result.solution):.6e} "
                    f"in {result.iterations} iteration(s)")
        guess = result.solution
    return eq_set


def seed_search(config, guesses, workers=4, eq_set=None):
    """Newton from every guess concurrently; results merge into the set in guess order."""
    eq_set = EquilibriumSet() if eq_set is None else eq_set
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda g: newton_solve(g, config), guesses))
    for i, result in enumerate(results):
        eq_set.add(result, config, label=f"seed {i}")
    logger.info(f"Seed search kept {len(eq_set)} equilibria from {len(guesses)} guesses")
    return eq_set


# --- Buckling ---

def buckling_mode(grid, gamma_dir="x"):
    """
    Critical edge compression and its mode: smallest γ with Δ²φ = γ(-∂²)φ, ∂² along
    gamma_dir, from the dense generalized symmetric eigenproblem.
    """
    if gamma_dir == "x":
        D = grid.d2x_matrix
    elif gamma_dir == "y":
        D = grid.laplacian_matrix - grid.d2x_matrix
    else:
        raise ValueError(f"gamma_dir must be 'x' or 'y', got {gamma_dir!r}")
    A = grid.biharmonic_matrix.toarray()
    B = -D.toarray()
    values, vectors = scipy.linalg.eigh(A, B, subset_by_index=[0, 0])
    mode = vectors[:, 0].reshape(grid.shape)
    i, j = grid.nx // 2, grid.ny // 2
    mode = mode / np.max(np.abs(mode))
    if mode[i, j] < 0:
        mode = -mode
    logger.info(f"Critical compression gamma_cr={values[0]:.6g} on {grid.nx}x{grid.ny}")
    return float(values[0]), ScalarField(grid, mode)
