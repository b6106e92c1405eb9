"""
Uniform rectangular discretization of the plate and its clamped operators.

Nodes are strictly interior to the plate: node (i, j) sits at
(x0 + (i+1)*hx, y0 + (j+1)*hy). The boundary ring (index -1 and nx, ny) carries
u = 0 and the clamped ghost rule u(-1) = u(1) encodes the zero normal derivative.
"""
import threading
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import map_coordinates
from scipy.sparse.linalg import splu

from config.settings import MIN_NODES
from core.errors import GridMismatchError
from utils.validators import require_finite, require_same_grid

# splu objects are not documented as thread safe; every solve goes through this lock
_FACTOR_LOCK = threading.RLock()


@dataclass(frozen=True)
class PlateGrid:
    nx: int
    ny: int
    Lx: float = 1.0
    Ly: float = 1.0
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if int(self.nx) < MIN_NODES or int(self.ny) < MIN_NODES:
            raise ValueError(f"grid needs nx, ny >= {MIN_NODES}, got {self.nx}x{self.ny}")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError(f"plate extents must be positive, got Lx={self.Lx}, Ly={self.Ly}")

    # --- Geometry ---

    @property
    def hx(self):
        return self.Lx / (self.nx + 1)

    @property
    def hy(self):
        return self.Ly / (self.ny + 1)

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def size(self):
        return self.nx * self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def diameter(self):
        return float(np.hypot(self.Lx, self.Ly))

    @property
    def center(self):
        return (self.x0 + 0.5 * self.Lx, self.y0 + 0.5 * self.Ly)

    @cached_property
    def x(self):
        return self.x0 + self.hx * np.arange(1, self.nx + 1)

    @cached_property
    def y(self):
        return self.y0 + self.hy * np.arange(1, self.ny + 1)

    def mesh(self):
        """Interior node coordinates as two (nx, ny) arrays."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    def contains(self, px, py):
        """True where (px, py) lies in the closed plate rectangle."""
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        return ((px >= self.x0) & (px <= self.x0 + self.Lx)
                & (py >= self.y0) & (py <= self.y0 + self.Ly))

    # --- Sparse operators (assembled once per grid) ---

    @cached_property
    def laplacian_matrix(self):
        """5-point Laplacian with the zero boundary ring, acting on C-ordered values."""
        dxx = _second_difference(self.nx, self.hx)
        dyy = _second_difference(self.ny, self.hy)
        lap = sp.kron(dxx, sp.identity(self.ny)) + sp.kron(sp.identity(self.nx), dyy)
        return lap.tocsr()

    @cached_property
    def d2x_matrix(self):
        return sp.kron(_second_difference(self.nx, self.hx), sp.identity(self.ny)).tocsr()

    @cached_property
    def dx_matrix(self):
        """Centered first difference in x with the zero ring; skew-symmetric."""
        return sp.kron(_first_difference(self.nx, self.hx), sp.identity(self.ny)).tocsr()

    @cached_property
    def biharmonic_matrix(self):
        """
        Clamped biharmonic: the interior Laplacian applied to the ghost-extended Laplacian.

        This equals L @ L plus a diagonal 2/h^4 on nodes next to each edge, so the
        matrix is symmetric positive definite.
        """
        lap = self.laplacian_matrix
        corr = np.zeros(self.shape)
        corr[0, :] += 2.0 / self.hx ** 4
        corr[-1, :] += 2.0 / self.hx ** 4
        corr[:, 0] += 2.0 / self.hy ** 4
        corr[:, -1] += 2.0 / self.hy ** 4
        return (lap @ lap + sp.diags(corr.ravel())).tocsc()

    @cached_property
    def biharmonic_factor(self):
        with _FACTOR_LOCK:
            return splu(self.biharmonic_matrix)

    def solve_biharmonic(self, rhs):
        """Solve Δ²x = rhs (flat or (nx, ny)) with the cached factorization."""
        return solve_factored(self.biharmonic_factor, rhs)


@lru_cache(maxsize=16)
def shifted_biharmonic_factor(grid, shift, convection=0.0):
    """splu of Δ² + shift·I + convection·∂x, cached per (grid, shift, convection)."""
    matrix = grid.biharmonic_matrix + float(shift) * sp.identity(grid.size, format="csc")
    if convection:
        matrix = matrix + float(convection) * grid.dx_matrix
    with _FACTOR_LOCK:
        return splu(matrix.tocsc())


def solve_factored(factor, rhs):
    rhs = np.asarray(rhs, dtype=float).ravel()
    with _FACTOR_LOCK:
        return factor.solve(rhs)


def _second_difference(n, h):
    return sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) / h ** 2


def _first_difference(n, h):
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1]) / (2.0 * h)


class ScalarField:
    """Real values on the interior nodes of a grid; immutable after construction."""

    __slots__ = ("grid", "values")

    def __init__(self, grid, values):
        arr = np.array(values, dtype=float)
        if arr.ndim == 1 and arr.size == grid.size:
            arr = arr.reshape(grid.shape)
        if arr.shape != grid.shape:
            raise GridMismatchError(f"values of shape {arr.shape} do not fit grid {grid.shape}")
        require_finite(arr)
        arr.setflags(write=False)
        self.grid = grid
        self.values = arr

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid, fn):
        """Sample fn(X, Y) at the interior nodes."""
        X, Y = grid.mesh()
        return cls(grid, np.broadcast_to(fn(X, Y), grid.shape))

    @property
    def flat(self):
        return self.values.ravel()

    def max_abs(self):
        return float(np.max(np.abs(self.values)))

    def is_zero(self):
        return not np.any(self.values)

    def _other_values(self, other):
        if isinstance(other, ScalarField):
            require_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.values + self._other_values(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - self._other_values(other))

    def __rsub__(self, other):
        return ScalarField(self.grid, self._other_values(other) - self.values)

    def __mul__(self, other):
        return ScalarField(self.grid, self.values * self._other_values(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarField(self.grid, self.values / self._other_values(other))

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def __repr__(self):
        return f"ScalarField({self.grid.nx}x{self.grid.ny}, max|f|={self.max_abs():.3e})"


class Derivatives(NamedTuple):
    fx: ScalarField
    fy: ScalarField
    fxx: ScalarField
    fxy: ScalarField
    fyy: ScalarField


# --- Padding helpers ---

def _zero_ring(values):
    return np.pad(values, 1)


def _extrapolated_ring(values):
    """Quadratic extrapolation into the ring; exact for quadratics."""
    rows = np.vstack([3 * values[0] - 3 * values[1] + values[2],
                      values,
                      3 * values[-1] - 3 * values[-2] + values[-3]])
    first = 3 * rows[:, 0] - 3 * rows[:, 1] + rows[:, 2]
    last = 3 * rows[:, -1] - 3 * rows[:, -2] + rows[:, -3]
    return np.column_stack([first, rows, last])


def _ghost_padded(values):
    """Two layers: the zero ring plus the reflected clamped ghost layer."""
    g = np.pad(values, 2)
    g[0, :] = g[2, :]
    g[-1, :] = g[-3, :]
    g[:, 0] = g[:, 2]
    g[:, -1] = g[:, -3]
    return g


def _extrapolation_weights(layers, order=3):
    """Lagrange weights carrying the last order+1 samples of a row to `layers` points beyond it."""
    nodes = np.arange(order + 1)
    targets = order + np.arange(1, layers + 1, dtype=float)
    w = np.ones((layers, order + 1))
    for i in nodes:
        for j in nodes:
            if i != j:
                w[:, i] *= (targets - j) / (i - j)
    return w


def extend_past_edge(values, layers):
    """
    Pad (nx, ny) node values by `layers` nodes on every side with the cubic through the
    four outermost nodes of each row and column. Corners are filled by the second pass.
    """
    w = _extrapolation_weights(layers)
    out = np.asarray(values, dtype=float)
    for axis in (0, 1):
        arr = np.moveaxis(out, axis, 0)
        after = np.tensordot(w, arr[-4:], axes=(1, 0))
        before = np.tensordot(w, arr[3::-1], axes=(1, 0))[::-1]
        out = np.moveaxis(np.concatenate([before, arr, after]), 0, axis)
    return out


def _five_point(p, hx, hy):
    c = p[1:-1, 1:-1]
    return ((p[2:, 1:-1] - 2.0 * c + p[:-2, 1:-1]) / hx ** 2
            + (p[1:-1, 2:] - 2.0 * c + p[1:-1, :-2]) / hy ** 2)


# --- Operators ---

def laplacian(f):
    """Centered 5-point Laplacian at interior nodes (u = 0 on the ring)."""
    g = f.grid
    return ScalarField(g, _five_point(_zero_ring(f.values), g.hx, g.hy))


def ghost_laplacian(f):
    """Laplacian on interior nodes and the boundary ring, shape (nx+2, ny+2)."""
    g = f.grid
    return _five_point(_ghost_padded(f.values), g.hx, g.hy)


def biharmonic_clamped(f):
    g = f.grid
    return ScalarField(g, (g.biharmonic_matrix @ f.flat).reshape(g.shape))


def derivatives(f, boundary="clamped"):
    """
    Centered second-order first and second derivatives at interior nodes.

    boundary="clamped" uses the zero ring (u = 0 on the edge); "free" extrapolates
    quadratically into the ring, for fields without boundary conditions such as F0.
    """
    g = f.grid
    if boundary == "clamped":
        p = _zero_ring(f.values)
    elif boundary == "free":
        p = _extrapolated_ring(f.values)
    else:
        raise ValueError(f"unknown boundary treatment {boundary!r}")
    hx, hy = g.hx, g.hy
    c = p[1:-1, 1:-1]
    fx = (p[2:, 1:-1] - p[:-2, 1:-1]) / (2.0 * hx)
    fy = (p[1:-1, 2:] - p[1:-1, :-2]) / (2.0 * hy)
    fxx = (p[2:, 1:-1] - 2.0 * c + p[:-2, 1:-1]) / hx ** 2
    fyy = (p[1:-1, 2:] - 2.0 * c + p[1:-1, :-2]) / hy ** 2
    fxy = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / (4.0 * hx * hy)
    return Derivatives(*(ScalarField(g, a) for a in (fx, fy, fxx, fxy, fyy)))


def eval_extended_many(f, px, py):
    """Bilinear values of the zero extension of f at arbitrary points (any shape)."""
    g = f.grid
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    coords = np.vstack([((px - g.x0) / g.hx).ravel(), ((py - g.y0) / g.hy).ravel()])
    out = map_coordinates(_zero_ring(f.values), coords, order=1, mode="constant", cval=0.0)
    out[~g.contains(px, py).ravel()] = 0.0
    return out.reshape(px.shape)


def eval_extended(f, p):
    """Value of the zero extension of f at the point p = (x, y); 0 outside the plate."""
    return float(eval_extended_many(f, np.array([p[0]]), np.array([p[1]]))[0])


def inner(f, g):
    require_same_grid(f, g)
    return float(f.grid.cell_area * np.sum(f.values * g.values))


def norm_l2(f):
    return float(np.sqrt(inner(f, f)))


def norm_h2(f):
    """
    Discrete ‖Δf‖: trapezoid weights over interior nodes and the boundary ring of the
    ghost Laplacian. Equals ⟨Δ²f, f⟩^(1/2) exactly.
    """
    lap = ghost_laplacian(f)
    w = np.ones(lap.shape)
    w[0, :] *= 0.5
    w[-1, :] *= 0.5
    w[:, 0] *= 0.5
    w[:, -1] *= 0.5
    return float(np.sqrt(f.grid.cell_area * np.sum(w * lap * lap)))


def dirichlet_form(f, g):
    """Discrete ⟨∇f, ∇g⟩ by forward differences; equals -⟨laplacian(f), g⟩."""
    grid = require_same_grid(f, g)
    pf = _zero_ring(f.values)
    pg = _zero_ring(g.values)
    dfx = np.diff(pf[:, 1:-1], axis=0) / grid.hx
    dgx = np.diff(pg[:, 1:-1], axis=0) / grid.hx
    dfy = np.diff(pf[1:-1, :], axis=1) / grid.hy
    dgy = np.diff(pg[1:-1, :], axis=1) / grid.hy
    return float(grid.cell_area * (np.sum(dfx * dgx) + np.sum(dfy * dgy)))
