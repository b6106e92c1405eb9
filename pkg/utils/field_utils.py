"""Analytic field builders for loads, in-plane stresses and initial data."""
import numpy as np

from core.grid import ScalarField


def _unit_coords(grid, X, Y):
    return (X - grid.x0) / grid.Lx, (Y - grid.y0) / grid.Ly


def clamped_mode(grid, m=1, n=1, amplitude=1.0):
    """amplitude·sin²(mπξ)·sin²(nπη); zero value and slope on every edge."""
    def fn(X, Y):
        xi, eta = _unit_coords(grid, X, Y)
        return amplitude * np.sin(m * np.pi * xi) ** 2 * np.sin(n * np.pi * eta) ** 2
    return ScalarField.from_function(grid, fn)


def smooth_bump(grid, amplitude=1.0, center=None, radius=0.25):
    """amplitude·(1 - r²/ρ²)⁴ inside the disc of radius ρ, 0 outside."""
    cx, cy = center if center is not None else grid.center

    def fn(X, Y):
        r2 = ((X - cx) ** 2 + (Y - cy) ** 2) / radius ** 2
        return amplitude * np.where(r2 < 1.0, (1.0 - r2) ** 4, 0.0)
    return ScalarField.from_function(grid, fn)


def uniform(grid, amplitude=1.0):
    return ScalarField(grid, np.full(grid.shape, float(amplitude)))


def compression_load(grid, gamma, direction="x"):
    """
    In-plane stress function of a uniform edge compression γ.

    F0 = -γ(y - yc)²/2 makes -[u, F0] = γ u_xx (compression along x); direction "y"
    swaps the roles of the axes.
    """
    xc, yc = grid.center
    if direction == "x":
        return ScalarField.from_function(grid, lambda X, Y: -0.5 * gamma * (Y - yc) ** 2)
    if direction == "y":
        return ScalarField.from_function(grid, lambda X, Y: -0.5 * gamma * (X - xc) ** 2)
    raise ValueError(f"direction must be 'x' or 'y', got {direction!r}")


def random_smooth_field(grid, rng, n_modes=3, amplitude=1.0):
    """Clamped envelope times a random cosine series; deterministic for a seeded rng."""
    coeffs = rng.standard_normal((n_modes, n_modes))

    def fn(X, Y):
        xi, eta = _unit_coords(grid, X, Y)
        series = np.zeros_like(xi)
        for m in range(n_modes):
            for n in range(n_modes):
                series += coeffs[m, n] * np.cos(m * np.pi * xi) * np.cos(n * np.pi * eta)
        return np.sin(np.pi * xi) ** 2 * np.sin(np.pi * eta) ** 2 * series

    field = ScalarField.from_function(grid, fn)
    scale = field.max_abs()
    return field if scale == 0.0 else field * (amplitude / scale)


def build_field(grid, spec):
    """Build a field from a parametric description (kind plus its parameters)."""
    if spec is None or spec.kind == "zero":
        return ScalarField.zeros(grid)
    if spec.kind == "mode":
        return clamped_mode(grid, spec.m, spec.n, spec.amplitude)
    if spec.kind == "bump":
        return smooth_bump(grid, spec.amplitude, spec.center, spec.radius)
    if spec.kind == "uniform":
        return uniform(grid, spec.amplitude)
    if spec.kind == "compression":
        return compression_load(grid, spec.amplitude, spec.direction)
    raise ValueError(f"unknown field kind {spec.kind!r}")
