# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#       jupytext_version: 1.15.2
#   kernelspec:
#     display_name: Python 3 (ipykernel)
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Black smoke: a monitoring network that followed the pollution
#
# Annual black smoke concentrations were measured at a network of sites whose composition changed
# every year: sites were installed where levels were expected to be high and removed once levels fell.
# Averages over the operational sites then describe the network rather than the region.
#
# This notebook fits the joint model of the concentrations and the site-selection process to a
# monitoring network, compares it with a model that ignores selection, and turns the fitted field
# into population-weighted exposure. It runs on the bundled toy network in `datasets/toy-network`;
# point the config at a real network to reproduce the full analysis.
#
# The three implementations are
# - **1**: concentrations and selection modelled independently (no preferential sampling),
# - **2**: selection shares the concentration field and site effects through the scalars `d_b` and `d_beta`,
# - **3**: as 2, with pseudo-sites that were never monitored adding the zeros of the selection process.

# %% [markdown]
# ### Imports: setting up our environment

# %%
import logging

import numpy as np
import pandas as pd

import psjoint
from psjoint.config import RunConfig
from psjoint.exposure import exposure_series
from psjoint.file_input import read_observations, read_polygon, read_raster, read_sites
from psjoint.file_output import write_exposure, write_fit_dir
from psjoint.inference import fit_options, optimize_hyperparameters, posterior_summary, sample_posterior
from psjoint.mesh import build_mesh, projector
from psjoint.model import Hyperparameters, JointModelSpec, assemble
from psjoint.preprocess import generate_pseudosites, site_table_from_frames
from psjoint.spde import fem_matrices

psjoint.set_logging()

# %% [markdown]
# ### Configuration
#
# Everything that is not set in `config.yml` falls back to the defaults in `psjoint.config`.

# %%
### GLOBAL CONFIGURATION
# run config with the input paths and model switches
CONFIG = "config.yml"

# population raster for the exposure section, x,y,weight CSV or ESRI ASCII grid
RASTER = "../../datasets/toy-network/population.csv"

# implementations to compare, 3 adds pseudo-sites
IMPLEMENTATIONS = [1, 2, 3]

run_config = RunConfig.load(CONFIG)

# %% [markdown]
# ### Reading and preprocessing the network
#
# Concentrations are divided by their global mean and log-transformed, coordinates are divided by the
# standard deviation of the eastings, and years are mapped onto [0, 1].
# A site counts as operational in a year when its data capture reaches `input.MIN_CAPTURE`.

# %%
inputs = run_config["input"]
sites, constants = site_table_from_frames(
    read_sites(run_config.input_path("SITES")),
    read_observations(run_config.input_path("OBSERVATIONS")),
    min_capture=inputs["MIN_CAPTURE"],
)
print(f"{sites.n_sites} sites over {sites.n_years} years, mean consecutive lifetime {sites.mean_lifetime():.1f} years")
print(f"operational sites per year: {sites.r.sum(axis=0).tolist()}")

# %% [markdown]
# ### Mesh and SPDE matrices

# %%
scale = constants.coord_scale
domain = read_polygon(run_config.input_path("DOMAIN"), scale=scale)
mesh_settings = run_config["mesh"]
mesh = build_mesh(domain, mesh_settings["MIN_EDGE"] / scale, mesh_settings["MAX_EDGE"] / scale, mesh_settings["MIN_ANGLE"])
fem = fem_matrices(mesh)
print(f"mesh with {mesh.n_vertices} vertices and {mesh.n_triangles} triangles")

# pseudo-sites for implementation 3: the mesh vertices inside the domain
with_pseudo = sites.with_pseudosites(generate_pseudosites(domain, mesh=mesh))

# %% [markdown]
# ### Fitting
#
# Hyperparameters are chosen by maximizing the Laplace approximation to their marginal posterior;
# the latent field is then summarized by draws from the Gaussian approximation at the mode.

# %%
initial = dict(run_config["model"]["INITIAL_THETA"])
initial = Hyperparameters(**{k: v / scale if k.startswith("range_") else v for k, v in initial.items()})

fits, ensembles = {}, {}
for implementation in IMPLEMENTATIONS:
    spec = JointModelSpec.from_config(run_config, coord_scale=scale, implementation=implementation)
    table = with_pseudo if implementation == 3 else sites
    assembled = assemble(spec, table, fem, theta=initial)
    fits[implementation] = optimize_hyperparameters(assembled, **fit_options(run_config["optimizer"]))
    ensembles[implementation] = sample_posterior(fits[implementation], run_config["sampling"]["N_DRAWS"], seed=run_config["global"]["SEED"])

# %% [markdown]
# ### Is the network preferentially sampled?
#
# A positive `d_beta` means sites were more likely to be operational where the concentration field was high.

# %%
rows = []
for implementation, fit in fits.items():
    theta = fit.theta_table().set_index("name")
    row = {"implementation": implementation, "log_ml": fit.log_ml, "converged": fit.converged}
    for name in ("d_b", "d_beta"):
        if name in theta.index:
            row[name] = theta.loc[name, "value"]
            row[f"{name}_interval"] = f"[{theta.loc[name, 'lower']:.2f}, {theta.loc[name, 'upper']:.2f}]"
    # retention and repulsion are fixed effects of the selection process
    selection = posterior_summary(ensembles[implementation], blocks=["alpha_ret", "alpha_rep"]).set_index("block")
    for name in selection.index:
        row[name] = selection.loc[name, "mean"]
        row[f"{name}_interval"] = f"[{selection.loc[name, 'q025']:.2f}, {selection.loc[name, 'q975']:.2f}]"
    rows.append(row)
pd.DataFrame(rows)

# %% [markdown]
# ### Network averages against population averages
#
# The P1 mean averages the fitted trajectories of the monitored sites, the P2 mean adds the pseudo-sites.
# Under preferential sampling the P2 mean lies below the P1 mean.

# %%
fit = fits[3]
p1 = constants.back_transform(fit.assembled.pmean_design("P1") @ fit.x_mode)
p2 = constants.back_transform(fit.assembled.pmean_design("P2") @ fit.x_mode)
network = [np.nanmean(np.exp(sites.y[:, j])) * constants.global_mean for j in range(sites.n_years)]
pd.DataFrame({"year": sites.years, "network_average": network, "P1_mean": p1, "P2_mean": p2})

# %%
posterior_summary(ensembles[2], blocks=["gamma0", "gamma1", "gamma2"])

# %% [markdown]
# ### Population-weighted exposure
#
# The fitted field is averaged over a population raster for every year, together with the fraction of
# the population living where the concentration exceeds `exposure.THRESHOLD`.

# %%
raster = read_raster(RASTER, constants)
proj = projector(mesh, raster.centroids)
raster = type(raster)(raster.centroids[proj.inside], raster.weights[proj.inside]).normalized()
series = exposure_series(
    fit.assembled,
    ensembles[3],
    raster,
    proj.A[proj.inside],
    [int(y) for y in sites.years],
    run_config["exposure"]["THRESHOLD"],
    constants.back_transform,
    include_iid=run_config["exposure"]["INCLUDE_IID"],
    seed=run_config["global"]["SEED"],
)
series.table

# %% [markdown]
# ### Saving the results
#
# The fit directory can be reused with `psjoint predict` and `psjoint exposure`.

# %%
output = run_config.resolve(run_config["output"]["DIRECTORY"])
write_fit_dir(output, run_config, constants, fits[3], ensembles[3])
write_exposure(series, output)
logging.getLogger("psjoint").info(f"results written to {output}")
