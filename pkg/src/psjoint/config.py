import copy
import logging
import os

import yaml

from .exceptions import ConfigError

log = logging.getLogger(__name__)

# lengths in "mesh", "priors" and "model" are given in original coordinate units (e.g. metres)
# and are divided by the stored coordinate scale once the data have been preprocessed;
# simulation studies work directly in grid units, where the coordinate scale is 1
config = {
    "global": {
        # master seed, every random stream is derived from it
        "SEED": 20240101,
        # executor for replicate-level parallelism: "local" (process pool), "dask" or "serial"
        "EXECUTOR": "local",
        # number of worker processes for the "local" executor
        "N_WORKERS": 4,
    },
    "input": {
        # CSV with columns site_id,easting,northing
        "SITES": None,
        # CSV with columns site_id,year,value and optionally capture / selected
        "OBSERVATIONS": None,
        # text file with the domain boundary ring followed by hole rings
        "DOMAIN": None,
        # a (site, year) counts as operational if its data capture fraction reaches this value
        "MIN_CAPTURE": 0.75,
        # optional column with the data capture fraction of every (site, year)
        "CAPTURE_COLUMN": "capture",
        # optional boolean column that overrides the capture rule
        "SELECTED_COLUMN": "selected",
    },
    "model": {
        # 1: independent processes (d fixed to 0), 2: joint over observed sites, 3: joint with pseudo-sites
        "IMPLEMENTATION": 2,
        # "P1" (observed sites only) or "P2" (observed sites plus pseudo-sites)
        "POPULATION": "P1",
        # pseudo-site spacing, None reuses the mesh vertices inside the domain
        "PSEUDOSITE_SPACING": None,
        # repulsion distance c
        "REPULSION_DISTANCE": 10000.0,
        # Matern fields in the observation process, subset of beta0, beta1, beta2
        "OBS_FIELDS": ["beta0", "beta1", "beta2"],
        # bivariate IID site effects (b0, b1) at observed sites
        "IID_SITE_EFFECTS": True,
        # Matern correction field beta*0 in the selection process
        "SEL_FIELD": True,
        # AR1 year effect beta*1 in the selection process
        "SEL_AR1": True,
        # names of per-site covariates entering the selection predictor
        "SEL_COVARIATES": [],
        # starting values for the hyperparameters, keys as in Hyperparameters
        "INITIAL_THETA": {},
    },
    "mesh": {
        # shortest edge allowed away from the boundary
        "MIN_EDGE": 5000.0,
        # longest edge inside the domain
        "MAX_EDGE": 7000.0,
        # minimum interior angle in degrees
        "MIN_ANGLE": 25.0,
        # add a coarse exterior band against SPDE boundary effects
        "EXTENSION": True,
    },
    "priors": {
        # PC prior: P(range < RANGE0) = ALPHA_RANGE
        "RANGE0": 3400.0,
        "ALPHA_RANGE": 0.05,
        # PC prior: P(sd > SD0) = ALPHA_SD
        "SD0": 1.0,
        "ALPHA_SD": 0.01,
        # Gamma(shape, rate) on the noise precision and the AR1 marginal precision
        "GAMMA_SHAPE": 1.0,
        "GAMMA_RATE": 5e-5,
        # Wishart degrees of freedom for the inverse IID covariance, identity scale
        "WISHART_DOF": 4.0,
        # variance of the Gaussian prior on log((1 + rho_a) / (1 - rho_a))
        "AR1_LOGIT_VAR": 0.15,
        # variance of the Gaussian prior on d_b and d_beta
        "D_VAR": 10.0,
        # precision of the vague Gaussian prior on fixed effects
        "FIXED_PRECISION": 1e-4,
    },
    "optimizer": {
        # Nelder-Mead evaluation cap
        "MAX_EVALUATIONS": 2000,
        # Nelder-Mead stops once the simplex objective spread is below this value
        "FATOL": 1e-6,
        # Newton iteration cap for the latent mode
        "NEWTON_MAX_ITER": 50,
        # relative gradient tolerance for the latent mode
        "NEWTON_TOL": 1e-8,
        # step-halving cap in the Newton line search
        "MAX_HALVINGS": 30,
        # compute a finite-difference covariance of the hyperparameters at the optimum
        "THETA_COVARIANCE": True,
        # finite-difference step on the unconstrained scale
        "FD_STEP": 1e-2,
    },
    "sampling": {
        # posterior draws at the mode
        "N_DRAWS": 1000,
        # draws per chunk, every chunk gets its own derived seed
        "CHUNK_SIZE": 250,
    },
    "exposure": {
        # guide value in original units
        "THRESHOLD": 34.0,
        # add fresh IID site effects per cell and draw
        "INCLUDE_IID": True,
    },
    "simulation": {
        # candidate lattice size (nx, ny)
        "GRID_SIZE": [50, 50],
        # lattice spacing in grid units
        "GRID_SPACING": 0.2,
        # size of the random initial population drawn from the lattice
        "POPULATION_SIZE": 200,
        # sites chosen completely at random in year 1
        "N_INITIAL": 100,
        "N_YEARS": 30,
        # "rigid_quadratic" or "independent_fields"
        "TEMPORAL_DESIGN": "rigid_quadratic",
        # fixed trend (gamma0, gamma1, gamma2)
        "GAMMA": [0.0, 0.0, 0.0],
        # Matern ranges and sds of beta0, beta1, beta2 (independent_fields uses the first entry)
        "FIELD_RANGES": [4.0, 3.0, 3.0],
        "FIELD_SDS": [0.9, 0.7, 0.0],
        # IID site effects (sd_b1, sd_b2, rho_b), zeros switch them off
        "IID_SDS": [0.0, 0.0],
        "IID_RHO": 0.0,
        "SIGMA2_EPS": 0.01,
        # selection coefficients
        "ALPHA00": 0.0,
        "ALPHA01": -1.0,
        "ALPHA1": 0.0,
        "ALPHA2": 0.0,
        "ALPHA_RET": 2.0,
        "ALPHA_REP": 0.0,
        "REPULSION_DISTANCE": 0.5,
        # selection correction field beta*0
        "SEL_FIELD_RANGE": 3.5,
        "SEL_FIELD_SD": 0.45,
        # true PS parameters
        "D_B": 0.0,
        "D_BETA": 1.0,
        # mesh used when fitting simulated data, in grid units
        "MESH_MIN_EDGE": 0.6,
        "MESH_MAX_EDGE": 1.2,
        "MESH_MIN_ANGLE": 25.0,
        # diagonal jitter relative to the field variance for the dense Cholesky
        "JITTER": 1e-9,
        # PC prior range0 used when fitting simulated data, in grid units
        "PRIOR_RANGE0": 1.0,
    },
    "convergence": {
        # side length of the square test domain
        "DOMAIN_SIZE": 10.0,
        # expected number of Poisson points
        "N_POINTS": 300,
        # log-intensity slope of the centred covariate
        "SLOPE": 1.0,
        # pseudo-site spacings, coarse to fine
        "SPACINGS": [2.0, 1.0, 0.5],
        # longest edge of the mesh the points are projected onto
        "MESH_MAX_EDGE": 2.0,
    },
    "study": {
        "N_REPLICATES": 100,
        # implementations fitted to every replicate
        "IMPLEMENTATIONS": [1, 2],
        # a study fails when more replicates than this fraction fail to fit
        "MAX_FAILURE_RATE": 0.2,
        # posterior draws per replicate fit
        "N_DRAWS": 200,
    },
    "output": {
        "DIRECTORY": "output",
    },
}

PATH_KEYS = ("SITES", "OBSERVATIONS", "DOMAIN")


def _check_value(section, key, value, default):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(
            f"{section}.{key}: expected {type(default).__name__}, got {type(value).__name__} ({value!r})"
        )


class RunConfig:
    """Run configuration: the defaults in ``config`` overridden by a YAML file.

    Only the overrides are kept in ``overrides`` so that saving a loaded
    configuration writes back exactly what was read.
    """

    def __init__(self, overrides=None, base_dir=".", check_files=True):
        self.overrides = copy.deepcopy(overrides or {})
        self.base_dir = base_dir
        self.check_files = check_files
        self.validate()

    def validate(self):
        if not isinstance(self.overrides, dict):
            raise ConfigError("top level of the config must be a mapping of sections")
        for section, values in self.overrides.items():
            if section not in config:
                raise ConfigError(f"unknown section: {section}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section} must be a mapping")
            for key, value in values.items():
                if key not in config[section]:
                    raise ConfigError(f"unknown key: {section}.{key}")
                _check_value(section, key, value, config[section][key])

        model = self.section("model")
        if model["IMPLEMENTATION"] not in (1, 2, 3):
            raise ConfigError(f"model.IMPLEMENTATION must be 1, 2 or 3, got {model['IMPLEMENTATION']}")
        if model["POPULATION"] not in ("P1", "P2"):
            raise ConfigError(f"model.POPULATION must be P1 or P2, got {model['POPULATION']}")
        if model["IMPLEMENTATION"] == 3 and model["POPULATION"] != "P2":
            raise ConfigError("model.IMPLEMENTATION 3 requires model.POPULATION P2")
        unknown = set(model["OBS_FIELDS"]) - {"beta0", "beta1", "beta2"}
        if unknown:
            raise ConfigError(f"model.OBS_FIELDS: unknown fields {sorted(unknown)}")
        design = self.section("simulation")["TEMPORAL_DESIGN"]
        if design not in ("rigid_quadratic", "independent_fields"):
            raise ConfigError(f"simulation.TEMPORAL_DESIGN: unknown design {design}")

        for key in PATH_KEYS:
            path = self.section("input")[key]
            if self.check_files and path is not None and not os.path.exists(self.resolve(path)):
                raise ConfigError(f"input.{key}: file not found: {path}")

    def section(self, name):
        merged = copy.deepcopy(config[name])
        merged.update(copy.deepcopy(self.overrides.get(name, {})))
        return merged

    def __getitem__(self, name):
        return self.section(name)

    def resolve(self, path):
        if path is None or os.path.isabs(path):
            return path
        return os.path.normpath(os.path.join(self.base_dir, path))

    def input_path(self, key):
        return self.resolve(self.section("input")[key])

    def with_overrides(self, section, **values):
        overrides = copy.deepcopy(self.overrides)
        overrides.setdefault(section, {}).update(values)
        return RunConfig(overrides, base_dir=self.base_dir, check_files=self.check_files)

    def resolved(self):
        """Copy with every input path made absolute, for saving next to results."""
        overrides = copy.deepcopy(self.overrides)
        for key in PATH_KEYS:
            if overrides.get("input", {}).get(key) is not None:
                overrides["input"][key] = os.path.abspath(self.resolve(overrides["input"][key]))
        return RunConfig(overrides, base_dir=self.base_dir, check_files=self.check_files)

    def to_dict(self):
        return copy.deepcopy(self.overrides)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.overrides == other.overrides

    @classmethod
    def load(cls, path, check_files=True):
        try:
            with open(path) as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as err:
            mark = getattr(err, "problem_mark", None)
            where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark is not None else ""
            raise ConfigError(f"cannot parse {path}{where}: {getattr(err, 'problem', err)}") from err
        except OSError as err:
            raise ConfigError(f"cannot read {path}: {err}") from err
        log.debug(f"loaded run config from {path}")
        return cls(data or {}, base_dir=os.path.dirname(os.path.abspath(path)), check_files=check_files)

    def save(self, path):
        from .file_output import atomic_write

        text = yaml.safe_dump(self.overrides, sort_keys=False, default_flow_style=None)
        atomic_write(path, text)
