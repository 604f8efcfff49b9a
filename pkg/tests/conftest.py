from pathlib import Path

import numpy as np
import pytest

from psjoint.mesh import DomainPolygon, build_mesh
from psjoint.model import Hyperparameters, JointModelSpec, SiteTable, assemble
from psjoint.spde import fem_matrices

REPO = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def repo_dir():
    return REPO


@pytest.fixture(scope="session")
def unit_square():
    return DomainPolygon.rectangle(0.0, 0.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def coarse_mesh(unit_square):
    return build_mesh(unit_square, 0.15, 0.3, extension=False)


@pytest.fixture(scope="session")
def coarse_fem(coarse_mesh):
    return fem_matrices(coarse_mesh)


@pytest.fixture
def site_panel():
    """Factory for random site tables on the unit square.

    Every observed site is selected in at least one year; responses are standard
    normal wherever a site is selected.
    """

    def make(n_observed, n_years, n_pseudo=0, seed=0, p_select=0.6):
        rng = np.random.default_rng(seed)
        r = (rng.random((n_observed, n_years)) < p_select).astype(np.int8)
        r[np.arange(n_observed), rng.integers(0, n_years, n_observed)] = 1
        y = np.where(r == 1, rng.standard_normal(r.shape), np.nan)
        sites = SiteTable(
            site_id=np.arange(n_observed),
            locations=rng.uniform(0.05, 0.95, size=(n_observed, 2)),
            pseudo=np.zeros(n_observed, dtype=bool),
            r=r,
            y=y,
            years=np.arange(2000, 2000 + n_years),
        )
        if n_pseudo:
            sites = sites.with_pseudosites(rng.uniform(0.05, 0.95, size=(n_pseudo, 2)))
        return sites

    return make


@pytest.fixture
def full_model(site_panel, coarse_fem):
    """Implementation 3 with every effect switched on and non-zero PS scalars."""
    sites = site_panel(6, 4, n_pseudo=4, seed=11)
    spec = JointModelSpec(implementation=3, repulsion_distance=0.3)
    theta = Hyperparameters(d_b=0.7, d_beta=-1.3, rho_a=0.3, rho_b=0.2, range_R=0.4, range_beta0=0.5)
    return assemble(spec, sites, coarse_fem, theta=theta)
