import numpy as np
import pytest
import yaml

from psjoint.cli import EXIT_CONFIG, EXIT_ERROR, EXIT_OK, EXIT_USAGE, main
from psjoint.file_input import read_fit_dir, read_sites, read_table


def _write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture(scope="module")
def toy_config(repo_dir, tmp_path_factory):
    data = repo_dir / "datasets" / "toy-network"
    path = tmp_path_factory.mktemp("config") / "fit.yml"
    return _write_config(
        path,
        {
            "input": {
                "SITES": str(data / "sites.csv"),
                "OBSERVATIONS": str(data / "observations.csv"),
                "DOMAIN": str(data / "domain.txt"),
            },
            "model": {
                "OBS_FIELDS": ["beta0"],
                "IID_SITE_EFFECTS": False,
                "SEL_FIELD": False,
                "SEL_AR1": False,
                "INITIAL_THETA": {"sigma2_eps": 0.01, "range_beta0": 10000.0, "sd_beta0": 0.3},
            },
            "optimizer": {"MAX_EVALUATIONS": 150, "FATOL": 1e-3, "THETA_COVARIANCE": False},
            "sampling": {"N_DRAWS": 50},
        },
    )


@pytest.fixture(scope="module")
def fit_dir(toy_config, tmp_path_factory):
    output = tmp_path_factory.mktemp("fit")
    status = main(["--quiet", "fit", toy_config, "--output", str(output)])
    assert status in (0, 2)
    return output


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["fit"])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["predict", "somewhere", "--grid", "fine"])
    assert info.value.code == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_config_errors(tmp_path, caplog):
    bad = tmp_path / "bad.yml"
    bad.write_text("model:\n  IMPLEMENTATION: [2\n")
    assert main(["fit", str(bad)]) == EXIT_CONFIG
    assert "cannot parse" in caplog.text

    unknown = _write_config(tmp_path / "unknown.yml", {"model": {"IMPLEMENTATON": 2}})
    assert main(["fit", unknown]) == EXIT_CONFIG

    empty = _write_config(tmp_path / "empty.yml", {"model": {"IMPLEMENTATION": 1}})
    assert main(["fit", empty]) == EXIT_CONFIG
    assert "input.SITES" in caplog.text


def test_missing_fit_dir(tmp_path):
    assert main(["predict", str(tmp_path / "nothing"), "--grid", "1000"]) == EXIT_ERROR


def test_fit_writes_directory(fit_dir):
    stored = read_fit_dir(str(fit_dir))
    np.testing.assert_array_equal(stored.years, np.arange(2000, 2008))
    assert stored.draws.shape == (50, stored.layout.size)
    assert "d_beta" in set(stored.theta["name"])
    assert stored.run_config["model"]["OBS_FIELDS"] == ["beta0"]


def test_predict(fit_dir):
    assert main(["--quiet", "predict", str(fit_dir), "--grid", "3000"]) == EXIT_OK
    table = read_table(str(fit_dir / "prediction.csv"), "prediction", ("year", "easting", "northing", "mean", "sd", "value"))
    counts = table.groupby("year").size()
    assert counts.index.tolist() == list(range(2000, 2008))
    assert counts.nunique() == 1
    assert table["easting"].between(0.0, 30000.0 + 1e-6).all()
    assert (table["value"] > 0).all()
    assert (table["sd"] > 0).all()


def test_exposure(fit_dir, tmp_path, repo_dir, caplog, capsys):
    raster = repo_dir / "datasets" / "toy-network" / "population.csv"
    status = main(
        ["--quiet", "exposure", str(fit_dir), "--raster", str(raster), "--years", "2001", "2006", "--threshold", "30", "--output", str(tmp_path)]
    )
    assert status == EXIT_OK
    assert "renormalizing population weights" in caplog.text
    table = read_table(str(tmp_path / "exposure.csv"), "exposure")
    assert table["year"].tolist() == [2001, 2006]
    assert (table["threshold"] == 30.0).all()
    assert table["exceed_mean"].between(0.0, 1.0).all()
    cells = read_table(str(tmp_path / "exceedance.csv"), "exceedance", ("year", "x", "y", "probability"))
    # the unpopulated corner cell is dropped
    assert len(cells) == 2 * 99
    assert "2006" in capsys.readouterr().out


def test_exposure_bad_raster(fit_dir, tmp_path):
    raster = tmp_path / "raster.csv"
    raster.write_text("x,y,count\n1000,1000,3\n")
    assert main(["exposure", str(fit_dir), "--raster", str(raster)]) == EXIT_ERROR


@pytest.fixture
def sim_config(tmp_path):
    return _write_config(
        tmp_path / "sim.yml",
        {
            "global": {"SEED": 4, "EXECUTOR": "serial"},
            "simulation": {
                "GRID_SIZE": [8, 8],
                "GRID_SPACING": 0.5,
                "POPULATION_SIZE": 30,
                "N_INITIAL": 15,
                "N_YEARS": 5,
                "FIELD_SDS": [0.9, 0.0, 0.0],
                "SEL_FIELD_SD": 0.0,
            },
            "optimizer": {"MAX_EVALUATIONS": 30, "THETA_COVARIANCE": False},
            "study": {"N_REPLICATES": 3, "IMPLEMENTATIONS": [1], "N_DRAWS": 20, "MAX_FAILURE_RATE": 1.0},
        },
    )


def test_simulate(sim_config, tmp_path):
    output = tmp_path / "network"
    assert main(["simulate", sim_config, "--output", str(output)]) == EXIT_OK
    sites = read_sites(str(output / "sites.csv"))
    assert len(sites) == 30
    observations = read_table(str(output / "observations.csv"), "observations")
    assert len(observations) == 30 * 5
    assert observations.loc[observations["year"] == 1, "selected"].sum() == 15


def test_study(sim_config, tmp_path, capsys):
    output = tmp_path / "study"
    assert main(["--quiet", "study", sim_config, "--replicates", "1", "--output", str(output)]) == EXIT_OK
    replicates = read_table(str(output / "replicates.csv"), "replicates")
    assert replicates["replicate"].tolist() == [0]
    summary = read_table(str(output / "summary.csv"), "summary", ("implementation", "n_ok", "failure_rate"))
    assert summary["implementation"].tolist() == [1]
    assert "n_ok" in capsys.readouterr().out


@pytest.mark.slow
def test_convergence_check(tmp_path):
    config = _write_config(tmp_path / "conv.yml", {"convergence": {"N_POINTS": 200}})
    assert main(["convergence-check", config, "--spacings", "2", "1", "--output", str(tmp_path)]) == EXIT_OK
    table = read_table(str(tmp_path / "convergence.csv"), "convergence", ("spacing", "slope", "se"))
    assert table["spacing"].tolist() == [2.0, 1.0]
