import numpy as np
import pandas as pd
import pytest

from psjoint import simulate
from psjoint.clients import get_executor
from psjoint.config import RunConfig
from psjoint.exceptions import ParameterError, SimulationError, StudyError
from psjoint.file_output import write_study
from psjoint.inference import fit_options
from psjoint.simulate import (
    SimConfig,
    StudyReport,
    paired_comparison,
    poisson_convergence_table,
    run_study,
    simulate_field,
    simulate_selection,
)
from psjoint.spde import matern_correlation


@pytest.fixture
def small_config():
    return SimConfig(grid_size=(10, 10), grid_spacing=0.5, population_size=40, n_initial=15, n_years=6, seed=3)


def test_trend_without_fields():
    config = SimConfig(
        grid_size=(4, 4), population_size=10, n_initial=5, n_years=5, gamma=(1.0, -2.0, 1.0), field_sds=(0.0, 0.0, 0.0), sigma2_eps=0.0
    )
    field = simulate_field(config)
    t = config.t_star
    np.testing.assert_allclose(field.mu, np.tile(1.0 - 2.0 * t + t**2, (16, 1)), atol=1e-15)
    np.testing.assert_array_equal(field.y, field.mu)


def test_independent_fields_variogram():
    config = SimConfig(
        grid_size=(20, 20),
        grid_spacing=0.5,
        population_size=50,
        n_initial=10,
        n_years=200,
        temporal_design="independent_fields",
        field_ranges=(3.0, 3.0, 3.0),
        field_sds=(1.0, 0.0, 0.0),
        sigma2_eps=0.0,
        seed=21,
    )
    field = simulate_field(config)
    values = field.fields["beta"].reshape(20, 20, -1)
    # lag of six cells along x is exactly one range
    product = values[:-6] * values[6:]
    assert abs(product.mean() - matern_correlation(3.0, 3.0)) < 0.1
    assert abs(values.var() - 1.0) < 0.15
    # a new field every year
    assert not np.array_equal(values[..., 0], values[..., 1])


def test_simulation_is_seeded(small_config):
    a, b = simulate_field(small_config), simulate_field(small_config)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(simulate_selection(small_config, a).r, simulate_selection(small_config, b).r)
    other = simulate_field(small_config.replace(seed=4))
    assert not np.array_equal(a.y, other.y)


def test_lattice_factor_cache(small_config):
    config = small_config.replace(field_ranges=(4.0, 3.0, 2.0), field_sds=(0.9, 0.7, 0.4))
    simulate._grid_cholesky.cache_clear()
    cached = simulate_field(config, np.random.default_rng(8))
    assert simulate._grid_cholesky.cache_info().currsize == 2
    # the same lattice passed as explicit locations skips the cache
    direct = simulate_field(config, np.random.default_rng(8), locations=config.grid())
    np.testing.assert_allclose(cached.mu, direct.mu, rtol=1e-10, atol=1e-12)


def test_simulate_selection_table(small_config):
    field = simulate_field(small_config)
    sites = simulate_selection(small_config, field)
    assert sites.n_sites == 40
    assert int(sites.r[:, 0].sum()) == 15
    np.testing.assert_array_equal(sites.pseudo, ~sites.r.any(axis=1))
    np.testing.assert_array_equal(sites.locations, field.locations[sites.site_id])
    selected = sites.r == 1
    np.testing.assert_array_equal(sites.y[selected], field.y[sites.site_id][selected])
    assert np.isnan(sites.y[~selected]).all()


def test_simulate_selection_year_mismatch(small_config):
    field = simulate_field(small_config)
    with pytest.raises(SimulationError, match="years"):
        simulate_selection(small_config.replace(n_years=4), field)


def test_retention_saturation(small_config):
    config = small_config.replace(alpha_ret=50.0, n_years=8)
    sites = simulate_selection(config, simulate_field(config))
    first = sites.r[:, 0] == 1
    assert sites.r[first].all()


def test_null_selection_is_uninformative():
    config = SimConfig(
        grid_size=(10, 10),
        grid_spacing=0.5,
        population_size=50,
        n_initial=25,
        n_years=6,
        field_sds=(1.0, 0.0, 0.0),
        alpha_ret=0.0,
        alpha_rep=0.0,
        sel_field_sd=0.0,
        d_b=0.0,
        d_beta=0.0,
    )
    correlations = []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        field = simulate_field(config, rng)
        sites = simulate_selection(config, field, rng)
        frequency = sites.r[:, 1:].mean(axis=1)
        correlations.append(np.corrcoef(frequency, field.fields["beta0"][sites.site_id])[0, 1])
    assert abs(np.nanmean(correlations)) < 0.05


def test_preferential_selection_sign():
    config = SimConfig(
        grid_size=(15, 15),
        grid_spacing=0.4,
        population_size=100,
        n_initial=30,
        n_years=10,
        field_ranges=(2.0, 2.0, 2.0),
        field_sds=(0.9, 0.0, 0.0),
        alpha_ret=0.0,
        sel_field_sd=0.0,
        d_beta=1.0,
    )
    exceeds = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        field = simulate_field(config, rng)
        sites = simulate_selection(config, field, rng)
        beta0 = field.fields["beta0"]
        later = sites.r[:, 1:] == 1
        selected_mean = np.broadcast_to(beta0[sites.site_id][:, None], later.shape)[later].mean()
        exceeds += selected_mean > beta0.mean()
    assert exceeds >= 95


def test_sim_config_validation():
    with pytest.raises(ParameterError):
        SimConfig(grid_size=(5, 5), population_size=30)
    with pytest.raises(ParameterError):
        SimConfig(temporal_design="wiggly")
    with pytest.raises(ParameterError):
        SimConfig(grid_spacing=0.0)
    with pytest.raises(ParameterError):
        SimConfig(field_sds=(-1.0, 0.0, 0.0))


def test_sim_config_from_config():
    run_config = RunConfig({"simulation": {"GRID_SIZE": [10, 12], "POPULATION_SIZE": 100, "N_INITIAL": 50, "N_YEARS": 7, "D_BETA": 2.0}, "global": {"SEED": 5}})
    config = SimConfig.from_config(run_config)
    assert config.grid_size == (10, 12)
    assert config.n_grid == 120
    assert config.n_years == 7
    assert config.d_beta == 2.0
    assert config.seed == 5
    np.testing.assert_array_equal(config.years, np.arange(1, 8))


def test_fit_spec(small_config):
    spec = small_config.fit_spec(2)
    assert spec.obs_fields == ("beta0", "beta1")
    assert not spec.iid_site_effects
    assert not spec.sel_ar1
    assert small_config.replace(temporal_design="independent_fields").fit_spec(1).obs_fields == ("beta0", "beta1", "beta2")


@pytest.fixture
def tiny_study():
    config = SimConfig(
        grid_size=(8, 8),
        grid_spacing=0.5,
        population_size=30,
        n_initial=15,
        n_years=5,
        field_sds=(0.9, 0.0, 0.0),
        sel_field_sd=0.0,
        seed=17,
    )
    kwargs = {"n_replicates": 2, "implementations": (1, 2), "n_draws": 50, "max_failure_rate": 1.0, "progress": False}
    kwargs["fit_kwargs"] = {"max_evaluations": 30, "theta_covariance": False}
    return config, kwargs


def test_run_study_is_reproducible(tiny_study, tmp_path):
    config, kwargs = tiny_study
    first = run_study(config, **kwargs)
    second = run_study(config, **kwargs)
    assert len(first.replicates) == 4
    assert set(first.replicates["implementation"]) == {1, 2}
    write_study(first, tmp_path / "a")
    write_study(second, tmp_path / "b")
    for name in ("replicates.csv", "summary.csv", "trajectories.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_study_executor_independent(tiny_study):
    config, kwargs = tiny_study
    serial = run_study(config, **kwargs)
    with get_executor("local", 2) as executor:
        parallel = run_study(config, executor=executor, **kwargs)
    pd.testing.assert_frame_equal(serial.replicates, parallel.replicates)


def test_run_study_failure_rate(tiny_study, monkeypatch):
    config, kwargs = tiny_study

    def broken(*args, **kw):
        raise SimulationError("no fit today")

    monkeypatch.setattr(simulate, "_fit_metrics", broken)
    with pytest.raises(StudyError) as info:
        run_study(config, **{**kwargs, "max_failure_rate": 0.2})
    report = info.value.report
    assert report.failure_rate(1) == 1.0
    assert not report.passed
    assert (report.replicates["error"] == "no fit today").all()


def _report(rows, trajectories=None, **config):
    return StudyReport(
        replicates=pd.DataFrame(rows),
        trajectories=pd.DataFrame(trajectories or []),
        config=SimConfig(**config),
    )


def test_study_summary():
    rows = [
        {"replicate": k, "implementation": 2, "status": "ok", "d_beta_hat": v, "d_beta_covered": c, "p1_bias": 0.1, "p2_bias": -0.1}
        for k, (v, c) in enumerate([(0.8, 1.0), (1.2, 1.0), (1.0, 0.0)])
    ]
    rows.append({"replicate": 3, "implementation": 2, "status": "failed", "error": "boom"})
    summary = _report(rows, d_beta=1.0).summary().iloc[0]
    assert summary["n_ok"] == 3
    assert summary["n_failed"] == 1
    assert summary["failure_rate"] == pytest.approx(0.25)
    assert summary["d_beta_mean"] == pytest.approx(1.0)
    assert summary["d_beta_bias"] == pytest.approx(0.0, abs=1e-12)
    assert summary["d_beta_mse"] == pytest.approx(0.08 / 3)
    assert summary["d_beta_coverage"] == pytest.approx(2 / 3)
    assert summary["d_beta_coverage_se"] == pytest.approx(np.sqrt(2 / 9 / 3))
    assert summary["p1_bias"] == pytest.approx(0.1)


def test_paired_comparison():
    rows, trajectories = [], []
    for k in range(4):
        rows.append({"replicate": k, "implementation": 1, "status": "ok", "p1_abs_bias": 0.5, "p2_abs_bias": 0.5})
        rows.append({"replicate": k, "implementation": 2, "status": "ok" if k < 3 else "failed", "p1_abs_bias": 0.2 if k else 0.9, "p2_abs_bias": 0.1})
        for year in (1, 2):
            trajectories.append({"replicate": k, "year": year, "implementation": 1, "p1_est": 1.0})
            trajectories.append({"replicate": k, "year": year, "implementation": 2, "p1_est": 1.1})
    out = paired_comparison(_report(rows, trajectories, field_sds=(2.0, 0.0, 0.0)), 1, 2)
    assert out["n_pairs"] == 3
    assert out["p1_abs_bias_b_lower"] == pytest.approx(2 / 3)
    assert out["p2_abs_bias_b_lower"] == 1.0
    assert out["p1_mean_abs_difference"] == pytest.approx(0.1)
    assert out["p1_relative_difference"] == pytest.approx(0.05)


@pytest.mark.slow
def test_poisson_convergence_table():
    section = {"DOMAIN_SIZE": 10.0, "N_POINTS": 300, "SLOPE": 1.0, "SPACINGS": [2.0, 1.0, 0.5], "MESH_MAX_EDGE": 2.0}
    table = poisson_convergence_table(section, seed=1)
    assert table["spacing"].tolist() == [2.0, 1.0, 0.5]
    assert table["n_pseudo"].is_monotonic_increasing
    assert table["within_2se"].iloc[:-1].all()
    assert (table["abs_error"] < 3.0 * table["se"]).all()


@pytest.mark.slow
def test_null_study_coverage():
    config = SimConfig(
        grid_size=(10, 10),
        grid_spacing=0.5,
        population_size=60,
        n_initial=25,
        n_years=8,
        field_ranges=(2.0, 2.0, 2.0),
        field_sds=(0.9, 0.0, 0.0),
        sel_field_sd=0.0,
        d_b=0.0,
        d_beta=0.0,
        seed=99,
    )
    with get_executor("local", 4) as executor:
        report = run_study(config, n_replicates=50, implementations=(2,), n_draws=100, executor=executor, progress=False)
    row = report.summary().iloc[0]
    assert 0.86 <= row["d_beta_coverage"] <= 1.0
    assert abs(row["d_beta_mean"]) < 2.0 * row["d_beta_mcse"]


def _analysis_study(repo_dir, name, n_replicates):
    run_config = RunConfig.load(str(repo_dir / "analyses" / "black-smoke" / f"study-{name}.yml"))
    study = run_config["study"]
    with get_executor("local", 4) as executor:
        return run_study(
            SimConfig.from_config(run_config),
            n_replicates=n_replicates,
            implementations=study["IMPLEMENTATIONS"],
            n_draws=100,
            fit_kwargs=fit_options(run_config["optimizer"]),
            executor=executor,
            max_failure_rate=0.3,
            progress=False,
        )


@pytest.mark.slow
def test_signal_study(repo_dir):
    report = _analysis_study(repo_dir, "signal", 10)
    summary = report.summary().set_index("implementation")
    # sites reshuffle every year
    assert summary.loc[2, "lifetime"] <= 3.0
    assert 0.5 <= summary.loc[2, "d_beta_mean"] <= 1.5
    assert summary.loc[2, "d_beta_coverage"] >= 0.7
    assert summary.loc[3, "d_beta_mean"] > 0.0

    # the joint fit has the smaller P2-mean bias in most replicates
    assert paired_comparison(report, 1, 2)["p2_abs_bias_b_lower"] >= 0.7
    ok = report.replicates[(report.replicates["status"] == "ok") & (report.replicates["implementation"] == 3)]
    assert (ok["p2_minus_p1"] < 0).mean() >= 0.8


@pytest.mark.slow
def test_rigid_study(repo_dir):
    report = _analysis_study(repo_dir, "rigid", 6)
    summary = report.summary().set_index("implementation")
    assert summary.loc[2, "lifetime"] >= 12.0
    paired = paired_comparison(report, 1, 2)
    assert paired["n_pairs"] >= 4
    assert paired["p1_relative_difference"] < 0.05
