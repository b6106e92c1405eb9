import math
from dataclasses import replace

import numpy as np
import pytest

from advanced.diagnostics import (
    DiagnosticsRecord,
    DifferenceProbe,
    LowerFrequencyMonitor,
    convergence_detector,
    difference_energy,
    dissipation_increments,
    energy_rate_residual,
    fit_decay_rate,
    lyapunov_V,
    record,
    run_difference_experiment,
    v_monotone_fraction,
)
from advanced.dynamics import SimConfig, default_time_step, init, n_steps, resolve_config, run, step
from advanced.stationary import (
    EquilibriumSet,
    NewtonResult,
    buckling_mode,
    certificate_tolerance,
    continuation,
    distance_to_set,
    linear_response,
    newton_solve,
    seed_search,
    static_residual,
)
from advanced.verification import (
    check_airy_residual,
    check_biharmonic_symmetry,
    check_newmark_drift,
    check_singular_substitution,
    check_t_star_sampling,
    CheckResult,
    require_all,
    run_suite,
)
from core.aero import AeroParams, t_star
from core.errors import VerificationError
from core.grid import PlateGrid, ScalarField, norm_h2, norm_l2
from core.vonkarman import VonKarman
from utils.field_utils import clamped_mode, compression_load, smooth_bump


@pytest.fixture
def grid():
    return PlateGrid(8, 8)


def _flow_config(grid, **overrides):
    params = dict(U=0.4, k=1.0, beta=0.0, dt=0.01, t_end=0.1,
                  p0=smooth_bump(grid, 20.0), aero=AeroParams(0.4, 16, 16))
    params.update(overrides)
    return SimConfig(**params)


def _record(t, E_red, u_t_norm=1.0, dist=math.nan, nearest=-1, diss=0.0, lf_gap=0.0):
    return DiagnosticsRecord(t=t, step=int(round(t * 100)), E_pl=E_red, E_red=E_red, Pi=0.0,
                             diss_integral=diss, diss_total=diss, q_norm=0.0, u_norm=0.0,
                             u_t_norm=u_t_norm, flux=0.0, lf_gap=lf_gap,
                             dist_to_equilibria=dist, nearest_equilibrium=nearest)


# --- Dynamics ---

def test_config_validation():
    with pytest.raises(ValueError, match="subsonic only"):
        SimConfig(U=1.0)
    with pytest.raises(ValueError):
        SimConfig(k=-1.0)
    with pytest.raises(ValueError):
        SimConfig(history_init="random")
    with pytest.raises(ValueError):
        SimConfig(U=0.2, aero=AeroParams(0.3))


def test_default_step_is_positive_and_filled(grid):
    dt = default_time_step(grid, 0.5)
    assert 0.0 < dt < grid.hx
    assert resolve_config(SimConfig(U=0.5), grid).dt == pytest.approx(dt)


def test_step_count_rounds_up():
    assert n_steps(SimConfig(dt=0.3, t_end=1.0)) == 4
    assert n_steps(SimConfig(dt=0.25, t_end=1.0)) == 4
    assert n_steps(SimConfig(dt=0.25, t_end=0.0)) == 0


@pytest.mark.parametrize("mode", ["zero", "frozen", "ramp"])
def test_history_initialisation(grid, mode):
    u0 = clamped_mode(grid, amplitude=0.1)
    u1 = clamped_mode(grid, 2, 1, amplitude=0.05)
    config = _flow_config(grid, history_init=mode)
    state = init(config, grid, u0, u1)
    hist = state.hist
    horizon = t_star(grid, config.U)
    assert hist.capacity == math.ceil(horizon / config.dt - 1e-9) + 2
    assert hist.covers(horizon)
    newest = hist.slots[-1]
    oldest = hist.slots[0]
    if mode == "zero":
        assert newest.u.is_zero() and newest.u_t.is_zero()
        assert oldest.u.is_zero()
    else:
        assert np.array_equal(newest.u.values, u0.values)
        assert np.array_equal(newest.u_t.values, u1.values)
    if mode == "frozen":
        assert np.array_equal(oldest.u.values, u0.values)
        assert oldest.u_t.is_zero()
    if mode == "ramp":
        assert oldest.u.is_zero()
        mid = hist.displacement_at_lag(0.5 * horizon)
        assert np.allclose(mid.values, 0.5 * u0.values, rtol=1e-6, atol=1e-12)


def test_init_rejects_foreign_grid(grid):
    other = PlateGrid(10, 10)
    with pytest.raises(ValueError):
        init(_flow_config(grid), grid, ScalarField.zeros(other), ScalarField.zeros(other))


def test_zero_length_run_gives_single_record(grid):
    result = run(_flow_config(grid, t_end=0.0), grid, ScalarField.zeros(grid), ScalarField.zeros(grid))
    assert len(result.records) == 1
    assert not result.aborted
    assert result.records[0].t == 0.0


def test_short_run_records_every_stride(grid):
    config = _flow_config(grid, t_end=0.1, diagnostics_stride=3)
    result = run(config, grid, clamped_mode(grid, amplitude=0.01), ScalarField.zeros(grid))
    steps = [r.step for r in result.records]
    assert steps == [0, 3, 6, 9, 10]
    assert result.final_state.step_index == 10
    assert result.final_state.t == pytest.approx(0.1)
    assert all(np.isfinite(r.E_red) for r in result.records)
    totals = [r.diss_total for r in result.records]
    assert totals == sorted(totals)


def test_uncoupled_berger_step_conserves_energy():
    assert check_newmark_drift(quick=True).passed


def test_step_reuses_the_history_window(grid):
    config = _flow_config(grid)
    state = init(config, grid, clamped_mode(grid, amplitude=0.01), ScalarField.zeros(grid))
    capacity = state.hist.capacity
    for _ in range(5):
        state = step(state, config)
    assert len(state.hist) == capacity
    assert state.hist.t_now == pytest.approx(5 * config.dt)


def test_halving_dt_converges_at_second_order(grid):
    finals = []
    for dt in (0.01, 0.005, 0.0025):
        config = _flow_config(grid, dt=dt, t_end=0.4, diagnostics_stride=1000)
        finals.append(run(config, grid, clamped_mode(grid, amplitude=0.01), ScalarField.zeros(grid)).final_state.u)
    coarse = norm_l2(finals[0] - finals[1])
    fine = norm_l2(finals[1] - finals[2])
    assert math.log2(coarse / fine) >= 1.7


def test_probe_rows_are_collected(grid):
    config = _flow_config(grid, t_end=0.02, probe_stride=1, probe_points=((0.5, 0.5, 0.1),))
    result = run(config, grid, clamped_mode(grid, amplitude=0.01), ScalarField.zeros(grid))
    assert len(result.probe_rows) == 3
    t, x, y, z, phi, phi_t = result.probe_rows[-1]
    assert (x, y, z) == (0.5, 0.5, 0.1)
    assert math.isfinite(phi) and math.isfinite(phi_t)


# --- Stationary ---

def test_zero_load_has_trivial_equilibrium(grid):
    config = _flow_config(grid, p0=None)
    result = newton_solve(ScalarField.zeros(grid), config)
    assert result.converged
    assert result.iterations == 0
    assert result.residual_norm == 0.0


def test_newton_certificate_and_linear_regime():
    grid = PlateGrid(10, 10)
    config = SimConfig(U=0.3, k=1.0, p0=smooth_bump(grid, 1e-3), aero=AeroParams(0.3, 16, 16))
    result = newton_solve(ScalarField.zeros(grid), config)
    assert result.converged
    assert result.residual_norm <= certificate_tolerance(config, grid)
    assert norm_l2(static_residual(result.solution, config)) == pytest.approx(result.residual_norm)
    lin = linear_response(config, grid)
    assert norm_l2(result.solution - lin) <= 1e-6 * norm_l2(lin)


def test_equilibrium_set_deduplicates_and_rejects(grid):
    config = _flow_config(grid, p0=smooth_bump(grid, 5.0))
    result = newton_solve(ScalarField.zeros(grid), config)
    eq_set = EquilibriumSet()
    assert eq_set.add(result, config) == 0
    assert eq_set.add(result, config) == 0
    assert len(eq_set) == 1
    failed = NewtonResult(result.solution, 1.0, 30, False)
    assert eq_set.add(failed, config) is None
    index, dist = eq_set.nearest(result.solution, ScalarField.zeros(grid))
    assert index == 0 and dist == 0.0
    payload = eq_set.to_dict()
    assert payload["format_version"] == "1.0"
    assert payload["members"][0]["residual_norm"] <= certificate_tolerance(config, grid)
    mode = clamped_mode(grid, amplitude=0.3)
    assert distance_to_set(result.solution, mode, eq_set) == pytest.approx(norm_l2(mode), rel=1e-12)


def test_nearest_on_empty_set_raises(grid):
    with pytest.raises(ValueError):
        EquilibriumSet().nearest(ScalarField.zeros(grid), ScalarField.zeros(grid))


def test_continuation_in_flow_speed():
    grid = PlateGrid(10, 10)
    config = SimConfig(U=0.0, k=1.0, p0=smooth_bump(grid, 10.0), aero=AeroParams(0.0, 16, 16))
    eq_set = continuation([0.0, 0.1, 0.2], config, ScalarField.zeros(grid), param="U")
    assert [value for value, _ in eq_set.branch] == [0.0, 0.1, 0.2]
    assert eq_set.branch_lost_at is None
    assert all(index is not None for _, index in eq_set.branch)


def test_newton_tail_contracts_quadratically():
    grid = PlateGrid(10, 10)
    config = SimConfig(couple_flow=False, p0=smooth_bump(grid, 5000.0))
    result = newton_solve(ScalarField.zeros(grid), config)
    assert result.converged
    r = result.residual_history
    assert len(r) >= 4
    order = math.log(r[-1] / r[-2]) / math.log(r[-2] / r[-3])
    assert order >= 1.5


def test_symmetric_load_gives_a_symmetric_equilibrium():
    grid = PlateGrid(10, 10)
    bump = smooth_bump(grid, 2000.0).values
    bump = 0.25 * (bump + bump[::-1, :] + bump[:, ::-1] + bump[::-1, ::-1])
    config = SimConfig(U=0.0, k=1.0, p0=ScalarField(grid, bump), aero=AeroParams(0.0, 16, 16))
    result = newton_solve(ScalarField.zeros(grid), config)
    assert result.converged
    u = result.solution.values
    scale = np.abs(u).max()
    assert np.abs(u - u[::-1, :]).max() <= 1e-10 * scale
    assert np.abs(u - u[:, ::-1]).max() <= 1e-10 * scale


def test_continuation_retraces_its_path():
    grid = PlateGrid(10, 10)
    config = SimConfig(U=0.0, k=1.0, p0=smooth_bump(grid, 10.0), aero=AeroParams(0.0, 16, 16))
    path = [0.0, 0.1, 0.2, 0.3, 0.2, 0.1, 0.0]
    eq_set = continuation(path, config, ScalarField.zeros(grid), param="U", eq_set=EquilibriumSet(dedup_tol=0.0))
    assert eq_set.branch_lost_at is None
    start = eq_set[eq_set.branch[0][1]].u
    end = eq_set[eq_set.branch[-1][1]].u
    assert norm_h2(start - end) <= 1e-7


def test_flow_speed_sweep_is_continuous():
    grid = PlateGrid(10, 10)
    config = SimConfig(U=0.0, k=1.0, p0=smooth_bump(grid, 10.0), aero=AeroParams(0.0, 16, 16))
    path = np.linspace(0.0, 0.8, 9)
    eq_set = continuation(path, config, ScalarField.zeros(grid), param="U", eq_set=EquilibriumSet(dedup_tol=0.0))
    assert eq_set.branch_lost_at is None
    assert [value for value, _ in eq_set.branch] == pytest.approx(list(path))
    branch = [eq_set[index].u for _, index in eq_set.branch]
    size = max(norm_h2(u) for u in branch)
    jumps = [norm_h2(b - a) for a, b in zip(branch, branch[1:])]
    assert max(jumps) <= 0.25 * size


def test_equilibrium_is_a_fixed_point_of_the_dynamics():
    grid = PlateGrid(10, 10)
    config = SimConfig(U=0.3, k=1.0, dt=0.01, t_end=1.0, p0=smooth_bump(grid, 10.0),
                       aero=AeroParams(0.3, 16, 16))
    eq = newton_solve(ScalarField.zeros(grid), config)
    assert eq.converged
    state = init(config, grid, eq.solution, ScalarField.zeros(grid))
    for _ in range(100):
        state = step(state, config)
    assert norm_h2(state.u - eq.solution) <= 1e-8


def test_buckling_mode_is_normalised():
    grid = PlateGrid(10, 10)
    gamma_cr, mode = buckling_mode(grid, "x")
    assert gamma_cr > 0.0
    assert mode.max_abs() == pytest.approx(1.0)
    assert mode.values[5, 5] > 0.0
    with pytest.raises(ValueError):
        buckling_mode(grid, "z")


@pytest.mark.slow
def test_compression_past_critical_buckles_both_ways():
    grid = PlateGrid(10, 10)
    gamma_cr, mode = buckling_mode(grid, "x")
    config = SimConfig(couple_flow=False, kind=VonKarman(compression_load(grid, 1.3 * gamma_cr)))
    guesses = [a * mode for a in (2.0, 5.0, -2.0, -5.0)] + [ScalarField.zeros(grid)]
    eq_set = seed_search(config, guesses, workers=4)
    nonzero = [m for m in eq_set if norm_h2(m.u) > 1e-3]
    assert len(nonzero) >= 2
    for member in eq_set:
        assert member.residual_norm <= certificate_tolerance(config, grid)


# --- Diagnostics ---

def test_lower_frequency_monitor_fits_then_flags():
    monitor = LowerFrequencyMonitor(burn_in=1.0)
    fitted = [monitor.check(_record(t, 1.0, lf_gap=g)) for t, g in ((0.0, -0.5), (0.5, 0.2), (1.0, 0.1))]
    assert monitor.bound == 0.2
    assert all(rec.flags == "" for rec in fitted)
    assert monitor.check(_record(1.5, 1.0, lf_gap=0.2)).flags == ""
    flagged = monitor.check(replace(_record(2.0, 1.0, lf_gap=0.3), flags="growth"))
    assert flagged.flags == "growth;lf_violation"
    assert monitor.violations == 1


def test_lower_frequency_bound_never_drops_below_zero():
    monitor = LowerFrequencyMonitor(burn_in=0.0)
    monitor.check(_record(0.0, 1.0, lf_gap=-3.0))
    assert monitor.bound == 0.0
    assert monitor.check(_record(0.1, 1.0, lf_gap=-1.0)).flags == ""
    assert monitor.violations == 0


def test_run_reports_the_lower_frequency_bound(grid):
    config = _flow_config(grid, t_end=0.05, lf_burn_in=0.02)
    result = run(config, grid, clamped_mode(grid, amplitude=0.01), ScalarField.zeros(grid))
    fitted = [r.lf_gap for r in result.records if r.t <= 0.02]
    assert result.lf_bound == max(0.0, *fitted)
    flagged = sum("lf_violation" in r.flags for r in result.records)
    assert result.lf_violations == flagged


def test_decay_fit_recovers_rate():
    t = np.linspace(0.0, 5.0, 200)
    fit = fit_decay_rate(t, 3.0 * np.exp(-2.0 * t), burn_in=1.0)
    assert fit.rate == pytest.approx(2.0, rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0)


def test_decay_fit_edge_cases():
    t = np.linspace(0.0, 1.0, 50)
    assert fit_decay_rate(t, np.full(50, 2.0)).rate == 0.0
    with pytest.raises(ValueError):
        fit_decay_rate(t[:5], np.ones(5))
    with pytest.raises(ValueError):
        fit_decay_rate(t, np.zeros(50))


def test_v_monotone_fraction():
    t = np.arange(10.0)
    assert v_monotone_fraction(t, 10.0 - t) == 1.0
    assert v_monotone_fraction(t, t) == 0.0


def test_convergence_verdicts():
    growing = [_record(0.0, 1.0), _record(1.0, 20.0)]
    assert convergence_detector(growing, window=1.0, tol=1e-6).kind == "growing"
    settled = [_record(0.1 * i, 1.0, u_t_norm=1e-8, dist=1e-6, nearest=2) for i in range(20)]
    verdict = convergence_detector(settled, window=0.5, tol=1e-6, dist_tol=1e-4)
    assert verdict.converged and verdict.index == 2
    moving = [_record(0.1 * i, 1.0, u_t_norm=1e-2, dist=1e-6) for i in range(20)]
    assert convergence_detector(moving, window=0.5, tol=1e-6).kind == "wandering"
    assert convergence_detector([], window=1.0, tol=1e-6).kind == "wandering"


def test_dissipation_increments_are_windowed():
    records = [_record(0.5 * i, 1.0, diss=float(i)) for i in range(8)]
    assert dissipation_increments(records, 1.0) == [1.0, 2.0, 2.0, 2.0]


def test_energy_rate_residual_needs_records(grid):
    assert energy_rate_residual([_record(0.0, 1.0)], _flow_config(grid)) == 0.0


def test_record_of_rest_state(grid):
    config = _flow_config(grid, p0=None)
    state = init(config, grid, ScalarField.zeros(grid), ScalarField.zeros(grid))
    rec = record(state, config)
    assert rec.E_red == 0.0 and rec.E_pl == 0.0
    assert rec.flux == 0.0
    assert math.isnan(rec.dist_to_equilibria)
    assert len(rec.as_row()) == 16


def test_identical_twins_have_zero_difference(grid):
    config = _flow_config(grid, t_end=0.05)
    u0 = clamped_mode(grid, amplitude=0.01)
    result = run_difference_experiment(config, grid, u0, ScalarField.zeros(grid),
                                       ScalarField.zeros(grid))
    assert all(e == 0.0 for e in result.energies)
    assert all(v == 0.0 for v in result.lyapunov)
    assert result.fit is None
    assert result.probe.mu == pytest.approx(result.probe.nu / (2 * t_star(grid, 0.4)))


def test_difference_energy_of_displaced_twin(grid):
    config = _flow_config(grid)
    u0 = clamped_mode(grid, amplitude=0.01)
    s1 = init(config, grid, u0, ScalarField.zeros(grid))
    s2 = init(config, grid, ScalarField.zeros(grid), ScalarField.zeros(grid))
    expected = 0.5 * (norm_h2(u0) ** 2 + 2.0 * norm_l2(u0) ** 2)
    assert difference_energy(s1, s2, beta=2.0) == pytest.approx(expected, rel=1e-12)
    other = PlateGrid(10, 10)
    s3 = init(_flow_config(other), other, ScalarField.zeros(other), ScalarField.zeros(other))
    with pytest.raises(ValueError):
        difference_energy(s1, s3, beta=0.0)


def test_lyapunov_reduces_to_energy_without_cross_terms(grid):
    config = _flow_config(grid)
    s1 = init(config, grid, clamped_mode(grid, amplitude=0.01), ScalarField.zeros(grid))
    s2 = init(config, grid, ScalarField.zeros(grid), ScalarField.zeros(grid))
    probe = DifferenceProbe(nu=0.0, mu=0.0)
    du = clamped_mode(grid, amplitude=0.01)
    expected = 0.5 * norm_h2(du) ** 2
    assert lyapunov_V(s1, s2, probe, k=0.0) == pytest.approx(expected, rel=1e-12)


def test_sandwich_constants_bound_the_samples():
    probe = DifferenceProbe()
    assert all(math.isnan(c) for c in probe.sandwich_constants())
    probe.samples = [(0.0, 2.0, 1.0, 1.0), (0.1, 1.0, 0.8, 0.6), (0.2, 0.0, 0.0, 0.0)]
    a0, a1 = probe.sandwich_constants()
    assert a0 == pytest.approx(0.5)
    assert a1 == pytest.approx(0.5)


# --- Verification suite ---

def test_fast_oracle_checks_pass():
    for check in (check_biharmonic_symmetry, check_airy_residual, check_singular_substitution):
        result = check(quick=True)
        assert result.passed, result
    assert check_t_star_sampling(quick=False).passed


def test_run_suite_rejects_unknown_check():
    with pytest.raises(ValueError):
        run_suite(["no_such_check"])


def test_require_all_raises_on_failure():
    require_all([CheckResult("a", True, 0.0, 1.0)])
    with pytest.raises(VerificationError):
        require_all([CheckResult("a", True, 0.0, 1.0), CheckResult("b", False, 2.0, 1.0)])
