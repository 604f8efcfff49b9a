import math

import numpy as np
import pandas as pd
import pytest
from scipy.spatial import cKDTree

from psjoint.exceptions import PreprocessError
from psjoint.mesh import DomainPolygon, build_mesh
from psjoint.preprocess import (
    Constants,
    frame_from_site_table,
    generate_pseudosites,
    preprocess,
    site_table_from_frames,
)


def test_preprocess_example():
    data, constants = preprocess([2.0, 4.0, 6.0], [0.0, 10.0, 20.0], [5.0, 5.0, 15.0], [1966, 1981, 1996])
    assert constants.global_mean == 4.0
    # sample standard deviation of the eastings
    assert constants.coord_scale == pytest.approx(10.0)
    np.testing.assert_allclose(data.y, [math.log(0.5), 0.0, math.log(1.5)])
    np.testing.assert_allclose(data.t_star, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(data.coordinates, [[0.0, 0.5], [1.0, 0.5], [2.0, 1.5]])


def test_t_star_affine():
    constants = Constants(global_mean=1.0, coord_scale=1.0, year_min=1966, year_max=1996)
    assert constants.t_star(1981) == pytest.approx(0.5)
    np.testing.assert_allclose(constants.t_star(np.arange(1966, 1997)), np.arange(31) / 30.0)


def test_back_transform_round_trip():
    constants = Constants(global_mean=37.2, coord_scale=2500.0, year_min=1966, year_max=1996)
    values = np.random.default_rng(0).lognormal(3.0, 1.0, 100)
    np.testing.assert_allclose(constants.back_transform(constants.transform(values)), values, rtol=1e-12)
    assert Constants.from_dict(constants.to_dict()) == constants


def test_preprocess_errors():
    with pytest.raises(PreprocessError, match="record site 7 year 1970"):
        preprocess([1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1969, 1970], record_ids=["site 3 year 1969", "site 7 year 1970"])
    with pytest.raises(PreprocessError, match="eastings"):
        preprocess([1.0, 2.0], [5.0, 5.0], [0.0, 1.0], [1969, 1970])
    with pytest.raises(PreprocessError, match="years"):
        preprocess([1.0, 2.0], [0.0, 1.0], [0.0, 1.0], [1970, 1970])


@pytest.fixture
def frames():
    sites = pd.DataFrame(
        {"site_id": [1, 2, 3, 4], "easting": [10000.0, 20000.0, 15000.0, 5000.0], "northing": [10000.0, 12000.0, 22000.0, 5000.0]}
    )
    rows = [(1, year, 20.0 + year - 2000, 1.0) for year in range(2000, 2004)]
    rows += [(2, 2000, 30.0, 0.9), (2, 2001, 28.0, 0.8)]
    rows += [(3, 2002, 15.0, 0.5), (3, 2003, 16.0, 0.95)]
    rows += [(4, 2001, 12.0, 0.2)]
    observations = pd.DataFrame(rows, columns=["site_id", "year", "value", "capture"])
    return sites, observations


def test_site_table_from_frames(frames, caplog):
    sites, observations = frames
    table, constants = site_table_from_frames(sites, observations)
    # site 4 never reaches the capture threshold
    assert "dropping 1 sites" in caplog.text
    assert table.site_id.tolist() == [1, 2, 3]
    np.testing.assert_array_equal(table.years, [2000, 2001, 2002, 2003])
    np.testing.assert_array_equal(table.r, [[1, 1, 1, 1], [1, 1, 0, 0], [0, 0, 0, 1]])
    assert constants.global_mean == pytest.approx(observations["value"].mean())
    assert table.y[0, 1] == pytest.approx(math.log(21.0 / constants.global_mean))
    np.testing.assert_allclose(table.locations * constants.coord_scale, sites[["easting", "northing"]].to_numpy()[:3])
    np.testing.assert_allclose(table.t_star, [0.0, 1 / 3, 2 / 3, 1.0])


def test_selected_column_overrides_capture(frames):
    sites, observations = frames
    observations = observations.assign(selected=observations["capture"] > 0.1)
    observations.loc[len(observations)] = [2, 2003, np.nan, 0.0, True]
    table, _ = site_table_from_frames(sites, observations)
    assert table.site_id.tolist() == [1, 2, 3, 4]
    assert table.r[1].tolist() == [1, 1, 0, 1]
    # operational without a value: selection only
    assert np.isnan(table.y[1, 3])
    assert table.r[2, 2] == 1


def test_frames_without_capture(frames):
    sites, observations = frames
    table, _ = site_table_from_frames(sites, observations.drop(columns="capture"))
    assert table.n_sites == 4
    assert table.r.sum() == len(observations)


def test_frame_errors(frames):
    sites, observations = frames
    bad = pd.concat([observations, pd.DataFrame([(9, 2000, 1.0, 1.0)], columns=observations.columns)])
    with pytest.raises(PreprocessError, match="unknown sites"):
        site_table_from_frames(sites, bad)
    with pytest.raises(PreprocessError, match="covariate"):
        site_table_from_frames(sites, observations, covariates=("elevation",))
    negative = observations.assign(value=observations["value"].where(observations["site_id"] != 3, -1.0))
    with pytest.raises(PreprocessError, match="site 3 year 2002"):
        site_table_from_frames(sites, negative)


def test_site_table_covariates(frames):
    sites, observations = frames
    table, _ = site_table_from_frames(sites.assign(elevation=[1.0, 2.0, 3.0, 4.0]), observations, covariates=("elevation",))
    np.testing.assert_array_equal(table.covariates["elevation"], [1.0, 2.0, 3.0])


def test_frame_from_site_table_round_trip(frames):
    sites, observations = frames
    table, constants = site_table_from_frames(sites, observations)
    frame = frame_from_site_table(table, constants)
    assert len(frame) == table.n_sites * table.n_years
    selected = frame[frame["selected"]].set_index(["site_id", "year"])["value"]
    original = observations[observations["capture"] >= 0.75].set_index(["site_id", "year"])["value"]
    pd.testing.assert_series_equal(selected.sort_index(), original.sort_index(), check_exact=False, rtol=1e-12)
    assert frame.loc[~frame["selected"], "value"].isna().all()


def test_pseudosites_uniform(unit_square):
    points = generate_pseudosites(unit_square, spacing=0.1)
    assert points.min() >= -1e-12 and points.max() <= 1.0 + 1e-12
    distances, _ = cKDTree(points).query(points, k=2)
    nearest = distances[:, 1]
    assert nearest.std() / nearest.mean() < 0.5


def test_pseudosites_at_spacing_are_mesh_vertices(unit_square):
    grid = build_mesh(unit_square, 0.8 * 0.1, 1.2 * 0.1, extension=False)
    np.testing.assert_array_equal(generate_pseudosites(unit_square, spacing=0.1), grid.vertices[grid.domain_vertices])


def test_pseudosite_density_scaling(unit_square):
    coarse = generate_pseudosites(unit_square, spacing=0.1)
    fine = generate_pseudosites(unit_square, spacing=0.05)
    assert 3.0 <= len(fine) / len(coarse) <= 5.0


def test_pseudosites_from_mesh(unit_square, coarse_mesh):
    points = generate_pseudosites(unit_square, mesh=coarse_mesh)
    np.testing.assert_array_equal(points, coarse_mesh.vertices[coarse_mesh.domain_vertices])
    with pytest.raises(PreprocessError, match="spacing or a mesh"):
        generate_pseudosites(unit_square)


def test_pseudosite_exclusions(unit_square):
    points = generate_pseudosites(unit_square, spacing=0.1)
    lake = np.array([[0.2, 0.2], [0.6, 0.2], [0.6, 0.6], [0.2, 0.6]])
    kept = generate_pseudosites(unit_square, spacing=0.1, exclusions=[lake])
    assert len(kept) < len(points)
    inside = (kept[:, 0] >= 0.2) & (kept[:, 0] <= 0.6) & (kept[:, 1] >= 0.2) & (kept[:, 1] <= 0.6)
    assert not inside.any()
    everything = DomainPolygon.rectangle(-1.0, -1.0, 2.0, 2.0)
    with pytest.raises(PreprocessError, match="exclusion"):
        generate_pseudosites(unit_square, spacing=0.1, exclusions=[everything])


def test_pseudosite_spacing_errors(unit_square):
    with pytest.raises(PreprocessError, match="extent"):
        generate_pseudosites(unit_square, spacing=2.0)
    with pytest.raises(PreprocessError, match="positive"):
        generate_pseudosites(unit_square, spacing=-0.1)
