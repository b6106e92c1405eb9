import json
import logging
import math
from pathlib import Path

import numpy as np
import pytest

import main as cli
from advanced.diagnostics import (
    DifferenceProbe,
    convergence_detector,
    dissipation_increments,
    energy_rate_residual,
    run_difference_experiment,
)
from advanced.dynamics import SimConfig, run
from advanced.stationary import seed_search
from advanced.verification import (
    check_bracket_symmetry,
    check_q_oracle,
    check_trace_refinement,
)
from config.manifest import (
    build_grid,
    build_initial,
    build_sim_config,
    expand_sweep,
    load_manifest,
    parse_manifest,
    serialize_manifest,
    single_run,
)
from core.aero import AeroParams
from core.errors import ManifestError, SolverError
from core.grid import PlateGrid, ScalarField
from core.vonkarman import Berger, VonKarman
from utils.field_utils import clamped_mode, random_smooth_field, smooth_bump
from utils.file_handler import read_snapshot, read_table, write_snapshot, write_table

MANIFEST_DIR = Path(__file__).resolve().parent.parent / "manifests"

MINIMAL = {"name": "mini", "grid": {"nx": 8, "ny": 8}, "simulation": {"U": 0.3, "k": 1.0}}


def _manifest(**simulation):
    data = {
        "name": "mini",
        "grid": {"nx": 8, "ny": 8},
        "simulation": {"U": 0.3, "k": 1.0, "dt": 0.01, "t_end": 0.0,
                       "load": {"kind": "bump", "amplitude": 5.0},
                       "initial": {"u0": {"kind": "mode", "amplitude": 0.01}},
                       "aero": {"theta_n": 16, "s_n": 16}},
    }
    data["simulation"].update(simulation)
    return data


def _write(tmp_path, data, name="manifest.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


# --- Manifest ---

def test_minimal_manifest_fills_defaults_and_round_trips():
    m = parse_manifest(json.dumps(MINIMAL))
    assert m.format_version == "1.0"
    assert m.simulation.beta == 0.0
    assert m.simulation.history_init == "frozen"
    assert m.simulation.aero.theta_n == 64
    assert m.simulation.aero.s_rule == "cubic"
    assert parse_manifest(serialize_manifest(m)) == m


def test_unknown_key_is_rejected():
    data = dict(MINIMAL, colour="blue")
    with pytest.raises(ManifestError):
        parse_manifest(json.dumps(data))
    nested = json.loads(json.dumps(MINIMAL))
    nested["simulation"]["mach"] = 0.5
    with pytest.raises(ManifestError):
        parse_manifest(json.dumps(nested))


def test_supersonic_manifest_is_rejected():
    data = json.loads(json.dumps(MINIMAL))
    data["simulation"]["U"] = 1.0
    with pytest.raises(ManifestError, match="subsonic only"):
        parse_manifest(json.dumps(data))
    data["simulation"]["U"] = 0.3
    data["sweep"] = {"U": [0.2, 1.5]}
    with pytest.raises(ManifestError, match="subsonic only"):
        parse_manifest(json.dumps(data))


def test_missing_name_and_bad_json_are_rejected():
    with pytest.raises(ManifestError):
        parse_manifest(json.dumps({"grid": {"nx": 8, "ny": 8}}))
    with pytest.raises(ManifestError):
        parse_manifest("{not json")


def test_probe_points_must_lie_in_k_rho():
    data = json.loads(json.dumps(MINIMAL))
    data["probes"] = {"rho": 0.5, "points": [[0.5, 0.5, 0.2]]}
    parse_manifest(json.dumps(data))
    data["probes"]["points"] = [[0.5, 0.5, 0.8]]
    with pytest.raises(ManifestError):
        parse_manifest(json.dumps(data))
    data["probes"]["points"] = [[0.5, 0.5, -0.1]]
    with pytest.raises(ManifestError):
        parse_manifest(json.dumps(data))


def test_sweep_expands_to_resolved_cells():
    data = json.loads(json.dumps(MINIMAL))
    data["sweep"] = {"k": [0.1, 1.0, 10.0]}
    cells = expand_sweep(parse_manifest(json.dumps(data)))
    assert [label for label, _ in cells] == ["k=0.1", "k=1", "k=10"]
    assert [cell.simulation.k for _, cell in cells] == [0.1, 1.0, 10.0]
    assert all(cell.sweep.k == [] for _, cell in cells)
    for _, cell in cells:
        config = build_sim_config(cell, build_grid(cell))
        assert config.k == cell.simulation.k


def test_cartesian_sweep_and_load_axis():
    data = json.loads(json.dumps(MINIMAL))
    data["sweep"] = {"U": [0.1, 0.2], "load_amplitude": [1.0, 2.0, 3.0]}
    cells = expand_sweep(parse_manifest(json.dumps(data)))
    assert len(cells) == 6
    assert cells[-1][1].simulation.U == 0.2
    assert cells[-1][1].simulation.load.amplitude == 3.0


def test_no_sweep_axes_gives_single_run():
    m = parse_manifest(json.dumps(MINIMAL))
    cells = expand_sweep(m)
    assert len(cells) == 1 and cells[0][1] == single_run(m)


def test_builders_produce_numerical_objects():
    data = _manifest(nonlinearity={"kind": "berger", "upsilon": 1.0, "kappa": 2.0})
    m = parse_manifest(json.dumps(data))
    grid = build_grid(m)
    config = build_sim_config(m, grid)
    u0, u1 = build_initial(m, grid)
    assert grid == PlateGrid(8, 8)
    assert config.kind == Berger(1.0, 2.0)
    assert config.aero == AeroParams(0.3, 16, 16)
    assert config.p0.max_abs() > 0.0
    assert u0.max_abs() == pytest.approx(0.01, rel=0.2)
    assert u1.is_zero()
    vk = parse_manifest(json.dumps(_manifest()))
    assert isinstance(build_sim_config(vk, grid).kind, VonKarman)


@pytest.mark.parametrize("path", sorted(MANIFEST_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_manifests_build(path):
    manifest = load_manifest(str(path))
    for _, cell in expand_sweep(manifest):
        grid = build_grid(cell)
        config = build_sim_config(cell, grid)
        assert config.aero.U == config.U


def test_contrast_manifest_runs_undamped_twins():
    manifest = load_manifest(str(MANIFEST_DIR / "contrast.json"))
    assert manifest.simulation.k == 0.0 and manifest.simulation.beta == 0.0
    assert manifest.difference.enabled


# --- Files ---

def test_snapshot_round_trip_is_exact(tmp_path):
    grid = PlateGrid(9, 8, Lx=2.0, x0=-1.0)
    field = random_smooth_field(grid, np.random.default_rng(11))
    path = write_snapshot(str(tmp_path / "u.txt"), field, 0.125, json.dumps(MINIMAL))
    back, t = read_snapshot(path)
    assert t == 0.125
    assert back.grid == grid
    assert np.array_equal(back.values, field.values)
    lines = (tmp_path / "u.txt").read_text().splitlines()
    assert lines[0] == "# format_version 1.0"
    assert "# nx ny x0 y0 Lx Ly t" in lines


def test_table_header_and_float_format(tmp_path):
    path = write_table(str(tmp_path / "t.csv"), ("a", "b"), [(1.0 / 3.0, 2)], json.dumps(MINIMAL))
    comments, columns, rows = read_table(path)
    assert comments[0].strip() == "# format_version 1.0"
    assert comments[1].startswith("# manifest ")
    assert columns == ["a", "b"]
    assert float(rows[0][0]) == 1.0 / 3.0
    assert rows[0][1] == "2"


# --- Command line ---

def test_simulate_zero_length_writes_header_and_one_record(tmp_path, capsys):
    manifest = _write(tmp_path, _manifest())
    out = tmp_path / "out"
    assert cli.main(["simulate", manifest, "--out", str(out)]) == 0
    comments, columns, rows = read_table(str(out / "mini_records.csv"))
    assert comments[0].strip() == "# format_version 1.0"
    assert columns[:3] == ["t", "step", "E_pl"]
    assert len(rows) == 1
    field, t = read_snapshot(str(out / "mini_final.txt"))
    assert t == 0.0 and field.grid == PlateGrid(8, 8)
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["status"] == "ok"


def test_simulate_header_carries_the_lower_frequency_bound(tmp_path):
    data = _manifest(t_end=0.05)
    data["probes"] = {"lf_burn_in": 0.02}
    manifest = _write(tmp_path, data)
    assert cli.main(["simulate", manifest, "--out", str(tmp_path)]) == 0
    comments, columns, rows = read_table(str(tmp_path / "mini_records.csv"))
    header = dict(line[2:].strip().split(" ", 1) for line in comments[1:3])
    assert float(header["lf_bound"]) >= 0.0
    assert int(header["lf_violations"]) == sum("lf_violation" in row[-1] for row in rows)


def test_simulate_is_deterministic(tmp_path):
    manifest = _write(tmp_path, _manifest(t_end=0.05))
    assert cli.main(["simulate", manifest, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["simulate", manifest, "--out", str(tmp_path / "b")]) == 0
    first = (tmp_path / "a" / "mini_records.csv").read_bytes()
    second = (tmp_path / "b" / "mini_records.csv").read_bytes()
    assert first == second


def test_degenerate_sweep_matches_simulate(tmp_path):
    data = _manifest(t_end=0.05)
    data["sweep"] = {"U": [0.3]}
    manifest = _write(tmp_path, data)
    assert cli.main(["simulate", manifest, "--out", str(tmp_path / "sim")]) == 0
    assert cli.main(["sweep", manifest, "--out", str(tmp_path / "sweep")]) == 0
    single = (tmp_path / "sim" / "mini_records.csv").read_bytes()
    cell = (tmp_path / "sweep" / "U=0.3" / "mini_records.csv").read_bytes()
    assert single == cell
    _, columns, rows = read_table(str(tmp_path / "sweep" / "mini_summary.csv"))
    assert columns[0] == "cell" and len(rows) == 1
    assert rows[0][0] == "U=0.3"


def test_stationary_writes_catalog(tmp_path):
    manifest = _write(tmp_path, _manifest())
    out = tmp_path / "out"
    assert cli.main(["stationary", manifest, "--out", str(out)]) == 0
    catalog = json.loads((out / "mini_catalog.json").read_text())
    assert catalog["format_version"] == "1.0"
    assert catalog["manifest"]["name"] == "mini"
    assert len(catalog["members"]) == 1


def test_invalid_manifest_exits_with_validation_code(tmp_path, capsys):
    data = _manifest()
    data["simulation"]["U"] = 1.0
    manifest = _write(tmp_path, data)
    assert cli.main(["simulate", manifest, "--out", str(tmp_path)]) == 1
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["status"] == "error"
    assert report["error"] == "ManifestError"
    assert "subsonic only" in report["detail"]


def test_numerical_failure_exits_with_code_two(tmp_path, monkeypatch):
    def failing(manifest, out_dir):
        raise SolverError("factorization failed")

    monkeypatch.setattr(cli, "cmd_simulate", failing)
    assert cli.main(["simulate", _write(tmp_path, _manifest()), "--out", str(tmp_path)]) == 2


def test_verify_single_check_writes_report(tmp_path):
    report = tmp_path / "verify.json"
    assert cli.main(["verify", "--check", "singular_substitution", "--report", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert payload["checks"][0]["name"] == "singular_substitution"
    assert payload["checks"][0]["passed"]


def test_bad_arguments_exit_with_validation_code():
    assert cli.main(["frobnicate"]) == 1


# --- Desk-scale end-to-end runs ---

def _benchmark(grid, dt, t_end, **overrides):
    params = dict(U=0.4, k=1.0, beta=0.0, dt=dt, t_end=t_end, p0=smooth_bump(grid, 20.0),
                  aero=AeroParams(0.4, 16, 16))
    params.update(overrides)
    return SimConfig(**params)


@pytest.mark.slow
def test_energy_identity_residual_is_second_order_in_dt_and_h():
    # h = 1/(n + 1): 8 -> 17 nodes halves the mesh width along with dt
    residuals = []
    for n, dt in ((8, 0.01), (17, 0.005)):
        grid = PlateGrid(n, n)
        config = _benchmark(grid, dt, 1.0)
        result = run(config, grid, clamped_mode(grid, amplitude=0.01), ScalarField.zeros(grid))
        residuals.append(energy_rate_residual(result.records, result.config))
    order = math.log2(residuals[0] / residuals[1])
    assert order >= 1.8


@pytest.mark.slow
def test_damped_benchmark_converges_to_a_cataloged_equilibrium():
    grid = PlateGrid(8, 8)
    config = _benchmark(grid, 0.01, 60.0, diagnostics_stride=10)
    eq_set = seed_search(config, [ScalarField.zeros(grid)], workers=1)
    assert len(eq_set) == 1
    result = run(config, grid, clamped_mode(grid, amplitude=0.01), ScalarField.zeros(grid),
                 equilibria=eq_set)
    assert not result.aborted
    verdict = convergence_detector(result.records, window=2.0, tol=1e-6, dist_tol=1e-4)
    assert verdict.converged
    assert result.records[-1].dist_to_equilibria <= 1e-4
    assert dissipation_increments(result.records, 1.0)[-1] <= 1e-8


@pytest.mark.slow
def test_large_damping_differences_decay_exponentially():
    grid = PlateGrid(8, 8)
    config = _benchmark(grid, 0.005, 1.5, k=20.0, beta=20.0)
    u0 = clamped_mode(grid, amplitude=0.01)
    result = run_difference_experiment(config, grid, u0, ScalarField.zeros(grid),
                                       clamped_mode(grid, amplitude=1e-3), DifferenceProbe(), burn_in=0.3)
    assert result.fit is not None
    assert result.fit.rate > 0.0
    assert result.fit.r_squared >= 0.95
    assert result.monotone_fraction >= 0.99


@pytest.mark.slow
def test_undamped_contrast_reports_its_decay_rate(tmp_path):
    # k = beta = 0 leaves only the flow-donated damping; the sign of the rate is not fixed
    grid = PlateGrid(8, 8)
    config = _benchmark(grid, 0.005, 1.5, k=0.0, beta=0.0)
    u0 = clamped_mode(grid, amplitude=0.01)
    result = run_difference_experiment(config, grid, u0, ScalarField.zeros(grid),
                                       clamped_mode(grid, amplitude=1e-3), DifferenceProbe(), burn_in=0.3)
    assert result.fit is not None
    assert math.isfinite(result.fit.rate)
    logging.getLogger(__name__).info(f"undamped contrast: decay rate {result.fit.rate:.4g}, "
                                     f"r^2 {result.fit.r_squared:.3f}")
    assert cli.main(["simulate", str(MANIFEST_DIR / "contrast.json"), "--out", str(tmp_path)]) == 0
    comments, _, rows = read_table(str(tmp_path / "contrast_difference.csv"))
    assert any(line.startswith("# decay_rate ") for line in comments)
    assert len(rows) == 301


@pytest.mark.slow
def test_full_size_oracles():
    for check in (check_bracket_symmetry, check_q_oracle, check_trace_refinement):
        result = check(quick=False)
        assert result.passed, result
