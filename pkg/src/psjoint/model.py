"""
Joint latent Gaussian model of the observation process and the site-selection process.

The latent vector is laid out as ``[fixed effects; beta0; beta1; beta2; b pairs; beta*0; beta*1]``.
Observations enter through ``A_obs``; Bernoulli selection outcomes through
``A_sel = A_base + d_b * A_copy_b + d_beta * A_copy_beta`` where the copy matrices
reference the shared observation-process blocks at the lagged year.
"""

from dataclasses import dataclass, field, fields, replace
from functools import cached_property
import logging
import math

import numpy as np
import pandas as pd
from scipy import sparse, special, stats
from scipy.spatial import cKDTree

from .exceptions import ModelAssemblyError, ParameterError, SiteTableError
from .mesh import projector
from .spde import MaternParams, matern_precision, pc_prior_logdensity

log = logging.getLogger(__name__)

OBS_FIXED = ("gamma0", "gamma1", "gamma2")
SEL_FIXED = ("alpha00", "alpha01", "alpha1", "alpha2", "alpha_ret", "alpha_rep")
FIELDS = ("beta0", "beta1", "beta2")
# time weight of every shared component: 1, t* or t*^2
TIME_POWER = {"beta0": 0, "beta1": 1, "beta2": 2, "b0": 0, "b1": 1}


def scale_years(years):
    years = np.asarray(years, dtype=float)
    span = years.max() - years.min()
    if span == 0:
        return np.zeros_like(years)
    return (years - years.min()) / span


@dataclass
class SiteTable:
    """Population of candidate locations with their yearly selection indicators and responses."""

    site_id: np.ndarray
    locations: np.ndarray
    pseudo: np.ndarray
    r: np.ndarray
    y: np.ndarray
    years: np.ndarray
    t_star: np.ndarray = None
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        self.site_id = np.asarray(self.site_id)
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        self.pseudo = np.asarray(self.pseudo, dtype=bool)
        self.r = np.asarray(self.r, dtype=np.int8)
        self.y = np.asarray(self.y, dtype=float)
        self.years = np.asarray(self.years)
        if self.t_star is None:
            self.t_star = scale_years(self.years)
        self.t_star = np.asarray(self.t_star, dtype=float)
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        self.validate()

    @property
    def n_sites(self):
        return len(self.site_id)

    @property
    def n_years(self):
        return len(self.years)

    @property
    def observed(self):
        return ~self.pseudo

    @property
    def observed_index(self):
        return np.flatnonzero(~self.pseudo)

    def validate(self):
        M, N = self.n_sites, self.n_years
        if self.locations.shape != (M, 2) or self.pseudo.shape != (M,):
            raise SiteTableError(f"locations/kinds do not match {M} sites")
        if self.r.shape != (M, N) or self.y.shape != (M, N) or self.t_star.shape != (N,):
            raise SiteTableError(f"selection/response panels must have shape ({M}, {N})")
        if not np.isin(self.r, (0, 1)).all():
            raise SiteTableError("selection indicators must be 0 or 1")
        if len(np.unique(self.site_id)) != M:
            raise SiteTableError("site ids must be unique")
        pseudo_selected = self.pseudo & (self.r.any(axis=1) | np.isfinite(self.y).any(axis=1))
        if pseudo_selected.any():
            raise SiteTableError(f"pseudo site {self.site_id[np.argmax(pseudo_selected)]} has a selection or a response")
        never = ~self.pseudo & ~self.r.any(axis=1)
        if never.any():
            raise SiteTableError(f"observed site {self.site_id[np.argmax(never)]} is never selected")
        stray = np.isfinite(self.y) & (self.r == 0)
        if stray.any():
            i, j = np.argwhere(stray)[0]
            raise SiteTableError(f"site {self.site_id[i]} has a response in year {self.years[j]} without being selected")
        for name, values in self.covariates.items():
            if values.shape != (M,):
                raise SiteTableError(f"covariate {name} needs one value per site")
        if N > 1:
            reinstalled = ((np.diff(self.r.astype(int), axis=1) == 1) & (np.maximum.accumulate(self.r, axis=1)[:, :-1] == 1)).any(axis=1)
            if reinstalled.any():
                log.warning(f"{int(reinstalled.sum())} sites are re-installed after a removal")

    def with_pseudosites(self, coordinates, covariates=None):
        coords = np.asarray(coordinates, dtype=float).reshape(-1, 2)
        K, N = len(coords), self.n_years
        start = int(np.max(self.site_id)) + 1 if self.n_sites else 0
        extra_cov = covariates or {}
        return SiteTable(
            site_id=np.concatenate([self.site_id, np.arange(start, start + K)]),
            locations=np.vstack([self.locations, coords]),
            pseudo=np.concatenate([self.pseudo, np.ones(K, dtype=bool)]),
            r=np.vstack([self.r, np.zeros((K, N), dtype=np.int8)]),
            y=np.vstack([self.y, np.full((K, N), np.nan)]),
            years=self.years,
            t_star=self.t_star,
            covariates={k: np.concatenate([v, extra_cov[k]]) for k, v in self.covariates.items()},
        )

    def mean_lifetime(self):
        """Mean length of the runs of consecutive selected years over observed sites."""
        runs = []
        for row in self.r[~self.pseudo]:
            padded = np.concatenate([[0], row, [0]])
            edges = np.flatnonzero(np.diff(padded))
            runs += list(edges[1::2] - edges[::2])
        return float(np.mean(runs)) if runs else 0.0


@dataclass(frozen=True)
class PriorSettings:
    range0: float = 1.0
    alpha_range: float = 0.05
    sd0: float = 1.0
    alpha_sd: float = 0.01
    gamma_shape: float = 1.0
    gamma_rate: float = 5e-5
    wishart_dof: float = 4.0
    ar1_logit_var: float = 0.15
    d_var: float = 10.0

    @classmethod
    def from_config(cls, section, coord_scale=1.0):
        return cls(
            range0=section["RANGE0"] / coord_scale,
            alpha_range=section["ALPHA_RANGE"],
            sd0=section["SD0"],
            alpha_sd=section["ALPHA_SD"],
            gamma_shape=section["GAMMA_SHAPE"],
            gamma_rate=section["GAMMA_RATE"],
            wishart_dof=section["WISHART_DOF"],
            ar1_logit_var=section["AR1_LOGIT_VAR"],
            d_var=section["D_VAR"],
        )


@dataclass(frozen=True)
class EffectSpec:
    name: str
    # matern_field | ar1 | iid_bivariate | fixed_coeff
    kind: str
    hyper: tuple = ()
    constraint: bool = False
    # vertices | sites | years | none
    support: str = "none"
    process: str = "obs"

    @property
    def components(self):
        if self.kind == "iid_bivariate":
            return ("b0", "b1")
        return (self.name,)


@dataclass(frozen=True)
class CopySpec:
    source: tuple
    scale_param: str
    # "reactive" maps year j to j - 1 (year 1 to itself), "none" keeps the year
    lag: str = "reactive"

    def weight_power(self, component):
        return TIME_POWER[component]

    def lag_index(self, j):
        """0-based source year for 0-based year j."""
        if self.lag == "reactive":
            return np.maximum(np.asarray(j) - 1, 0)
        if self.lag == "none":
            return np.asarray(j)
        raise ModelAssemblyError(f"unknown lag {self.lag}")


@dataclass(frozen=True)
class JointModelSpec:
    implementation: int = 2
    obs_fixed: tuple = OBS_FIXED
    obs_fields: tuple = FIELDS
    iid_site_effects: bool = True
    sel_fixed: tuple = SEL_FIXED
    sel_covariates: tuple = ()
    sel_field: bool = True
    sel_ar1: bool = True
    repulsion_distance: float = 1.0
    fixed_precision: float = 1e-4
    priors: PriorSettings = PriorSettings()
    # None derives the PS copies from the implementation
    copies: tuple = None

    def __post_init__(self):
        if self.implementation not in (1, 2, 3):
            raise ParameterError(f"implementation must be 1, 2 or 3, got {self.implementation}")
        if self.repulsion_distance <= 0:
            raise ParameterError(f"repulsion distance must be positive, got {self.repulsion_distance}")

    @classmethod
    def from_config(cls, run_config, coord_scale=1.0, implementation=None):
        model = run_config["model"]
        return cls(
            implementation=model["IMPLEMENTATION"] if implementation is None else implementation,
            obs_fields=tuple(f for f in FIELDS if f in model["OBS_FIELDS"]),
            iid_site_effects=model["IID_SITE_EFFECTS"],
            sel_field=model["SEL_FIELD"],
            sel_ar1=model["SEL_AR1"],
            sel_covariates=tuple(model["SEL_COVARIATES"]),
            repulsion_distance=model["REPULSION_DISTANCE"] / coord_scale,
            fixed_precision=run_config["priors"]["FIXED_PRECISION"],
            priors=PriorSettings.from_config(run_config["priors"], coord_scale),
        )

    @property
    def has_observation_process(self):
        return bool(self.obs_fixed or self.obs_fields or self.iid_site_effects)

    @property
    def fixed_effects(self):
        return self.obs_fixed + self.sel_fixed + tuple(f"alpha_{c}" for c in self.sel_covariates)

    @property
    def effects(self):
        out = [EffectSpec(name, "fixed_coeff", process="obs") for name in self.obs_fixed]
        out += [EffectSpec(name, "fixed_coeff", process="sel") for name in self.sel_fixed]
        out += [EffectSpec(f"alpha_{c}", "fixed_coeff", process="sel") for c in self.sel_covariates]
        out += [
            EffectSpec(k, "matern_field", (f"range_{k}", f"sd_{k}"), True, "vertices", "obs")
            for k in self.obs_fields
        ]
        if self.iid_site_effects:
            out.append(EffectSpec("b", "iid_bivariate", ("sd_b1", "sd_b2", "rho_b"), True, "sites", "obs"))
        if self.sel_field:
            out.append(EffectSpec("beta_star0", "matern_field", ("range_R", "sd_R"), True, "vertices", "sel"))
        if self.sel_ar1:
            out.append(EffectSpec("beta_star1", "ar1", ("rho_a", "sigma2_a"), True, "years", "sel"))
        return tuple(out)

    @property
    def derived_copies(self):
        if self.copies is not None:
            return tuple(self.copies)
        if self.implementation == 1:
            return ()
        out = []
        if self.iid_site_effects:
            out.append(CopySpec(("b0", "b1"), "d_b"))
        if self.obs_fields:
            out.append(CopySpec(tuple(self.obs_fields), "d_beta"))
        return tuple(out)

    def hyper_names(self):
        names = ["sigma2_eps"] if self.has_observation_process else []
        for e in self.effects:
            names += list(e.hyper)
        names += [c.scale_param for c in self.derived_copies]
        return names

    def check_symbols(self):
        components = {c for e in self.effects for c in e.components}
        for copy in self.derived_copies:
            missing = [s for s in copy.source if s not in components]
            if missing:
                raise ModelAssemblyError(f"copy {copy.scale_param} references undeclared effects: {missing}")
            if copy.scale_param not in ("d_b", "d_beta"):
                raise ModelAssemblyError(f"unknown PS scale parameter: {copy.scale_param}")


def _fisher(rho):
    return math.log((1.0 + rho) / (1.0 - rho))


def _inverse_fisher(z):
    return math.tanh(0.5 * z)


# unconstrained transform of every hyperparameter
TRANSFORMS = {
    "sigma2_eps": "log",
    "sd_b1": "log",
    "sd_b2": "log",
    "rho_b": "fisher",
    "range_R": "log",
    "sd_R": "log",
    "rho_a": "fisher",
    "sigma2_a": "log",
    "d_b": "identity",
    "d_beta": "identity",
}
TRANSFORMS.update({f"{p}_{k}": "log" for k in FIELDS for p in ("range", "sd")})


@dataclass(frozen=True)
class Hyperparameters:
    sigma2_eps: float = 0.1
    range_beta0: float = 1.0
    sd_beta0: float = 1.0
    range_beta1: float = 1.0
    sd_beta1: float = 0.5
    range_beta2: float = 1.0
    sd_beta2: float = 0.5
    sd_b1: float = 0.3
    sd_b2: float = 0.3
    rho_b: float = 0.0
    range_R: float = 1.0
    sd_R: float = 0.5
    rho_a: float = 0.5
    sigma2_a: float = 0.1
    d_b: float = 0.0
    d_beta: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value):
                raise ParameterError(f"hyperparameter {f.name} is not finite: {value}")
            kind = TRANSFORMS[f.name]
            if kind == "log" and value <= 0:
                raise ParameterError(f"hyperparameter {f.name} must be positive, got {value}")
            if kind == "fisher" and not -1 < value < 1:
                raise ParameterError(f"hyperparameter {f.name} must lie in (-1, 1), got {value}")

    def matern(self, name):
        if name == "beta_star0":
            return MaternParams(self.range_R, self.sd_R)
        return MaternParams(getattr(self, f"range_{name}"), getattr(self, f"sd_{name}"))

    @property
    def sigma_b(self):
        off = self.rho_b * self.sd_b1 * self.sd_b2
        return np.array([[self.sd_b1**2, off], [off, self.sd_b2**2]])

    def replace(self, **values):
        return replace(self, **values)

    def to_vector(self, names):
        out = []
        for name in names:
            value, kind = getattr(self, name), TRANSFORMS[name]
            out.append(math.log(value) if kind == "log" else _fisher(value) if kind == "fisher" else value)
        return np.array(out, dtype=float)

    def from_vector(self, names, vector):
        values = {}
        for name, u in zip(names, np.asarray(vector, dtype=float)):
            kind = TRANSFORMS[name]
            values[name] = math.exp(u) if kind == "log" else _inverse_fisher(u) if kind == "fisher" else float(u)
        return self.replace(**values)

    def to_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _log_gamma_precision(variance, shape, rate):
    # Gamma prior on 1 / variance, expressed on log(variance)
    precision = 1.0 / variance
    return shape * math.log(rate) - special.gammaln(shape) + shape * math.log(precision) - rate * precision


def _log_pc(params, priors):
    return pc_prior_logdensity(params, priors.range0, priors.alpha_range, priors.sd0, priors.alpha_sd) + math.log(params.range) + math.log(params.sd)


def _log_wishart(theta, dof):
    sigma = theta.sigma_b
    det = np.linalg.det(sigma)
    density = stats.wishart.logpdf(np.linalg.inv(sigma), df=dof, scale=np.eye(2))
    jacobian = (
        math.log(4.0)
        + 3.0 * math.log(theta.sd_b1)
        + 3.0 * math.log(theta.sd_b2)
        + math.log(0.5 * (1.0 - theta.rho_b**2))
        - 3.0 * math.log(det)
    )
    return float(density + jacobian)


def log_hyperprior(spec, theta):
    """Log prior density of the free hyperparameters on their unconstrained scale."""
    priors = spec.priors
    names = set(spec.hyper_names())
    total = 0.0
    if "sigma2_eps" in names:
        total += _log_gamma_precision(theta.sigma2_eps, priors.gamma_shape, priors.gamma_rate)
    for k in spec.obs_fields:
        total += _log_pc(theta.matern(k), priors)
    if spec.iid_site_effects:
        total += _log_wishart(theta, priors.wishart_dof)
    if spec.sel_field:
        total += _log_pc(theta.matern("beta_star0"), priors)
    if spec.sel_ar1:
        total += _log_gamma_precision(theta.sigma2_a, priors.gamma_shape, priors.gamma_rate)
        total += stats.norm.logpdf(_fisher(theta.rho_a), scale=math.sqrt(priors.ar1_logit_var))
    for d in ("d_b", "d_beta"):
        if d in names:
            total += stats.norm.logpdf(getattr(theta, d), scale=math.sqrt(priors.d_var))
    return float(total)


@dataclass(frozen=True)
class Block:
    name: str
    start: int
    size: int
    kind: str
    constrained: bool

    @property
    def stop(self):
        return self.start + self.size

    @property
    def slice(self):
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class LatentLayout:
    blocks: tuple

    @property
    def size(self):
        return self.blocks[-1].stop if self.blocks else 0

    def __contains__(self, name):
        return any(b.name == name for b in self.blocks)

    def __getitem__(self, name):
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def component(self, name):
        """Index array of a latent component, b0 and b1 address the interleaved b pairs."""
        if name in ("b0", "b1"):
            b = self["b"]
            return np.arange(b.start + (name == "b1"), b.stop, 2)
        return np.arange(self[name].start, self[name].stop)

    def table(self):
        return pd.DataFrame(
            [(b.name, b.start, b.size, b.kind, b.constrained) for b in self.blocks],
            columns=["block", "start", "size", "kind", "constrained"],
        )

    @classmethod
    def from_table(cls, df):
        return cls(tuple(Block(r.block, int(r.start), int(r.size), r.kind, bool(r.constrained)) for r in df.itertuples()))


@dataclass(frozen=True)
class Ledger:
    """Bernoulli contributions of the selection likelihood."""

    site: np.ndarray
    year: np.ndarray
    outcome: np.ndarray

    def __len__(self):
        return len(self.site)

    def as_set(self):
        return {(int(i), int(j), int(o)) for i, j, o in zip(self.site, self.year, self.outcome)}


def zero_ledger(sites, implementation):
    """
    Selection contributions (site, 0-based year, outcome).

    Implementations 1 and 2 use the full panel of observed sites. Implementation 3 keeps
    every selection, a placement zero for every pseudo site and year, and a retention zero
    where an observed site was online the year before and removed.
    """
    M, N = sites.r.shape
    observed = sites.observed
    if implementation in (1, 2):
        keep = np.repeat(observed[:, None], N, axis=1)
    elif implementation == 3:
        previous = np.zeros_like(sites.r)
        previous[:, 1:] = sites.r[:, :-1]
        keep = observed[:, None] & ((sites.r == 1) | (previous == 1))
        keep |= sites.pseudo[:, None]
    else:
        raise ParameterError(f"implementation must be 1, 2 or 3, got {implementation}")
    site, year = np.nonzero(keep)
    return Ledger(site=site, year=year, outcome=sites.r[site, year].astype(np.int8))


def repulsion_covariate(sites, j, c):
    """I[i][j]: another site online in year j - 1 (0-based j) lies within distance c."""
    if c <= 0:
        raise ParameterError(f"repulsion distance must be positive, got {c}")
    if j == 0:
        return np.zeros(sites.n_sites, dtype=np.int8)
    return repulsion_indicator(sites.locations, sites.r[:, j - 1] == 1, c)


def repulsion_indicator(locations, online, c):
    """1 where another online location lies within distance c (inclusive)."""
    online = np.asarray(online, dtype=bool)
    if not online.any():
        return np.zeros(len(locations), dtype=np.int8)
    tree = cKDTree(locations[online])
    counts = np.asarray(tree.query_ball_point(locations, r=c, return_length=True))
    return ((counts - online.astype(int)) > 0).astype(np.int8)


def repulsion_matrix(sites, c):
    return np.column_stack([repulsion_covariate(sites, j, c) for j in range(sites.n_years)])


def ar1_precision(n, rho, sigma2):
    """Stationary AR1 precision with marginal variance sigma2."""
    if n == 1:
        return sparse.csr_matrix(np.array([[1.0 / sigma2]]))
    main = np.full(n, 1.0 + rho**2)
    main[[0, -1]] = 1.0
    off = np.full(n - 1, -rho)
    return (sparse.diags([off, main, off], [-1, 0, 1]) / (sigma2 * (1.0 - rho**2))).tocsr()


def _column(values):
    return sparse.csr_matrix(np.asarray(values, dtype=float).reshape(-1, 1))


def _pairs(n_rows, b_index, t, n_pairs):
    # columns (2k, 2k + 1) receive (1, t) for every row whose site has pair k
    rows = np.flatnonzero(b_index >= 0)
    k = b_index[rows]
    data = np.concatenate([np.ones(len(rows)), t[rows]])
    return sparse.csr_matrix(
        (data, (np.concatenate([rows, rows]), np.concatenate([2 * k, 2 * k + 1]))), shape=(n_rows, 2 * n_pairs)
    )


def field_design(layout, points_projector, t_star, include_fixed=True):
    """Rows map x to mu at projected points and scaled year t_star, without b effects."""
    A = sparse.csr_matrix(points_projector)
    n = A.shape[0]
    cols = []
    for b in layout.blocks:
        if b.name in OBS_FIXED:
            value = t_star ** OBS_FIXED.index(b.name) if include_fixed else 0.0
            cols.append(_column(np.full(n, value)))
        elif b.name in FIELDS:
            cols.append(A * t_star ** TIME_POWER[b.name])
        else:
            cols.append(sparse.csr_matrix((n, b.size)))
    return sparse.hstack(cols, format="csr")


@dataclass(frozen=True)
class AssembledModel:
    spec: JointModelSpec
    sites: SiteTable
    fem: object
    layout: LatentLayout
    ledger: Ledger
    site_projector: sparse.csr_matrix
    obs_site: np.ndarray
    obs_year: np.ndarray
    y: np.ndarray
    A_obs: sparse.csr_matrix
    A_sel_base: sparse.csr_matrix
    A_sel_b: sparse.csr_matrix
    A_sel_beta: sparse.csr_matrix
    constraints: sparse.csr_matrix
    repulsion: np.ndarray
    theta: Hyperparameters = Hyperparameters()

    @property
    def n_latent(self):
        return self.layout.size

    @property
    def hyper_names(self):
        return self.spec.hyper_names()

    def at(self, theta):
        if isinstance(theta, Hyperparameters):
            return replace(self, theta=theta)
        return replace(self, theta=self.theta.from_vector(self.hyper_names, theta))

    @cached_property
    def A_sel(self):
        names = self.hyper_names
        d_b = self.theta.d_b if "d_b" in names else 0.0
        d_beta = self.theta.d_beta if "d_beta" in names else 0.0
        return (self.A_sel_base + d_b * self.A_sel_b + d_beta * self.A_sel_beta).tocsr()

    @cached_property
    def Q_prior(self):
        theta = self.theta
        blocks = []
        for b in self.layout.blocks:
            if b.kind == "fixed_coeff":
                blocks.append(sparse.csr_matrix(np.array([[self.spec.fixed_precision]])))
            elif b.kind == "matern_field":
                blocks.append(matern_precision(self.fem, theta.matern(b.name)))
            elif b.kind == "iid_bivariate":
                blocks.append(sparse.kron(sparse.identity(b.size // 2), sparse.csr_matrix(np.linalg.inv(theta.sigma_b))))
            elif b.kind == "ar1":
                blocks.append(ar1_precision(b.size, theta.rho_a, theta.sigma2_a))
        return sparse.block_diag(blocks, format="csr")

    @property
    def years(self):
        return self.sites.years

    @property
    def t_star(self):
        return self.sites.t_star

    @property
    def n_vertices(self):
        return self.fem.n

    def field_design(self, points_projector, t_star, include_fixed=True):
        return field_design(self.layout, points_projector, t_star, include_fixed)

    def site_design(self, site_index, year):
        """Rows map x to mu of the given sites in a 0-based year, with b effects at observed sites."""
        site_index = np.asarray(site_index)
        t = float(self.sites.t_star[year])
        rows = self.field_design(self.site_projector[site_index], t)
        if "b" in self.layout:
            b = self.layout["b"]
            n = len(site_index)
            pairs = _pairs(n, self._b_index[site_index], np.full(n, t), b.size // 2)
            padded = sparse.hstack(
                [sparse.csr_matrix((n, b.start)), pairs, sparse.csr_matrix((n, self.n_latent - b.stop))], format="csr"
            )
            rows = (rows + padded).tocsr()
        return rows

    def pmean_design(self, population="P1"):
        """(N x n_latent) rows averaging mu over a population for every year."""
        if population == "P1":
            index = self.sites.observed_index
        elif population == "P2":
            index = np.arange(self.sites.n_sites)
        else:
            raise ParameterError(f"unknown population {population}")
        rows = [sparse.csr_matrix(self.site_design(index, j).mean(axis=0)) for j in range(self.sites.n_years)]
        return sparse.vstack(rows, format="csr")

    @cached_property
    def _b_index(self):
        out = np.full(self.sites.n_sites, -1)
        out[self.sites.observed_index] = np.arange(len(self.sites.observed_index))
        return out


def assemble(spec, sites, fem, theta=None):
    """
    Build the layout, design matrices and constraints of the joint model.

    Args:
        spec: JointModelSpec
        sites: SiteTable in the scaled coordinate frame
        fem: FemMatrices of the mesh covering every site
        theta: Hyperparameters the model is evaluated at (defaults when omitted)

    Returns:
        AssembledModel
    """
    spec.check_symbols()
    if spec.implementation == 3 and not sites.pseudo.any():
        log.warning("implementation 3 without pseudo sites: only selections and retention zeros contribute")
    for name in spec.sel_covariates:
        if name not in sites.covariates:
            raise ModelAssemblyError(f"selection covariate {name} is not in the site table")

    proj = projector(fem.mesh, sites.locations)
    if proj.n_outside:
        first = sites.site_id[np.argmax(~proj.inside)]
        raise ModelAssemblyError(f"{proj.n_outside} sites lie outside the mesh, e.g. site {first}")
    A_sites = proj.A
    M, N = sites.r.shape
    t = sites.t_star
    obs_index = sites.observed_index
    n_obs_sites = len(obs_index)
    b_index = np.full(M, -1)
    b_index[obs_index] = np.arange(n_obs_sites)

    support = {"vertices": fem.n, "sites": n_obs_sites, "years": N}
    blocks, start = [], 0
    for effect in spec.effects:
        size = 1 if effect.kind == "fixed_coeff" else support[effect.support] * (2 if effect.kind == "iid_bivariate" else 1)
        constrained = effect.constraint
        if constrained and support[effect.support] < 2:
            log.warning(f"dropping the sum-to-zero constraint of {effect.name}: fewer than 2 support points")
            constrained = False
        blocks.append(Block(effect.name, start, size, effect.kind, constrained))
        start += size
    layout = LatentLayout(tuple(blocks))

    # observation rows
    has_y = np.isfinite(sites.y) & (sites.r == 1) & sites.observed[:, None]
    if not spec.has_observation_process:
        has_y[:] = False
    obs_site, obs_year = np.nonzero(has_y)
    y = sites.y[obs_site, obs_year]
    t_obs = t[obs_year]
    n_obs = len(y)
    obs_cols = []
    for b in layout.blocks:
        if b.name in OBS_FIXED:
            obs_cols.append(_column(t_obs ** OBS_FIXED.index(b.name)))
        elif b.name in FIELDS:
            obs_cols.append(sparse.diags(t_obs ** TIME_POWER[b.name]) @ A_sites[obs_site])
        elif b.kind == "iid_bivariate":
            obs_cols.append(_pairs(n_obs, b_index[obs_site], t_obs, n_obs_sites))
        else:
            obs_cols.append(sparse.csr_matrix((n_obs, b.size)))
    A_obs = sparse.hstack(obs_cols, format="csr") if obs_cols else sparse.csr_matrix((n_obs, 0))

    # selection rows
    ledger = zero_ledger(sites, spec.implementation)
    repulsion = repulsion_matrix(sites, spec.repulsion_distance)
    ls, ly = ledger.site, ledger.year
    n_sel = len(ledger)
    t_sel = t[ly]
    previous = np.where(ly > 0, sites.r[ls, np.maximum(ly - 1, 0)], 0)
    sel_columns = {
        "alpha00": (ly == 0).astype(float),
        "alpha01": (ly > 0).astype(float),
        "alpha1": t_sel,
        "alpha2": t_sel**2,
        "alpha_ret": previous.astype(float),
        "alpha_rep": repulsion[ls, ly].astype(float),
    }
    sel_columns.update({f"alpha_{c}": sites.covariates[c][ls] for c in spec.sel_covariates})

    base_cols = []
    for b in layout.blocks:
        if b.name in sel_columns:
            base_cols.append(_column(sel_columns[b.name]))
        elif b.name == "beta_star0":
            base_cols.append(A_sites[ls])
        elif b.name == "beta_star1":
            base_cols.append(sparse.csr_matrix((np.ones(n_sel), (np.arange(n_sel), ly)), shape=(n_sel, N)))
        else:
            base_cols.append(sparse.csr_matrix((n_sel, b.size)))
    A_sel_base = sparse.hstack(base_cols, format="csr")

    copy_parts = {"d_b": sparse.csr_matrix((n_sel, layout.size)), "d_beta": sparse.csr_matrix((n_sel, layout.size))}
    for copy in spec.derived_copies:
        t_lag = t[copy.lag_index(ly)]
        cols = []
        for b in layout.blocks:
            if b.name in FIELDS and b.name in copy.source:
                cols.append(sparse.diags(t_lag ** TIME_POWER[b.name]) @ A_sites[ls])
            elif b.kind == "iid_bivariate" and {"b0", "b1"} & set(copy.source):
                cols.append(_pairs(n_sel, b_index[ls], t_lag, n_obs_sites))
            else:
                cols.append(sparse.csr_matrix((n_sel, b.size)))
        copy_parts[copy.scale_param] = copy_parts[copy.scale_param] + sparse.hstack(cols, format="csr")

    # one sum-to-zero row per random-effect component
    rows = []
    for b in layout.blocks:
        if not b.constrained:
            continue
        if b.kind == "iid_bivariate":
            for comp in ("b0", "b1"):
                rows.append(layout.component(comp))
        else:
            rows.append(np.arange(b.start, b.stop))
    C = sparse.csr_matrix(
        (
            np.ones(sum(len(r) for r in rows)),
            (np.repeat(np.arange(len(rows)), [len(r) for r in rows]), np.concatenate(rows) if rows else np.zeros(0, int)),
        ),
        shape=(len(rows), layout.size),
    )

    log.info(
        f"assembled implementation {spec.implementation}: {layout.size} latent, {n_obs} observations, "
        f"{n_sel} selection entries, {len(rows)} constraints"
    )
    return AssembledModel(
        spec=spec,
        sites=sites,
        fem=fem,
        layout=layout,
        ledger=ledger,
        site_projector=A_sites,
        obs_site=obs_site,
        obs_year=obs_year,
        y=y,
        A_obs=A_obs,
        A_sel_base=A_sel_base,
        A_sel_b=copy_parts["d_b"],
        A_sel_beta=copy_parts["d_beta"],
        constraints=C,
        repulsion=repulsion,
        theta=theta if theta is not None else Hyperparameters(),
    )


def linear_predictors(assembled, x):
    """eta = A_obs x and nu = A_sel x at the model's hyperparameters."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != assembled.n_latent:
        raise ModelAssemblyError(f"latent vector has length {x.shape[0]}, layout expects {assembled.n_latent}")
    return assembled.A_obs @ x, assembled.A_sel @ x


# every symbol of the observation and selection equations and the model component it resolves to
SYMBOLS = {
    "gamma0": ("latent", "gamma0"),
    "gamma1": ("latent", "gamma1"),
    "gamma2": ("latent", "gamma2"),
    "b0": ("latent", "b"),
    "b1": ("latent", "b"),
    "sigma2_b1": ("hyper", "sd_b1"),
    "sigma2_b2": ("hyper", "sd_b2"),
    "rho_b": ("hyper", "rho_b"),
    "beta0": ("latent", "beta0"),
    "beta1": ("latent", "beta1"),
    "beta2": ("latent", "beta2"),
    "zeta0": ("hyper", ("range_beta0", "sd_beta0")),
    "zeta1": ("hyper", ("range_beta1", "sd_beta1")),
    "zeta2": ("hyper", ("range_beta2", "sd_beta2")),
    "sigma2_eps": ("hyper", "sigma2_eps"),
    "alpha00": ("latent", "alpha00"),
    "alpha01": ("latent", "alpha01"),
    "alpha1": ("latent", "alpha1"),
    "alpha2": ("latent", "alpha2"),
    "alpha_ret": ("latent", "alpha_ret"),
    "alpha_rep": ("latent", "alpha_rep"),
    "I": ("data", "repulsion"),
    "c": ("setting", "repulsion_distance"),
    "beta_star0": ("latent", "beta_star0"),
    "zeta_R": ("hyper", ("range_R", "sd_R")),
    "beta_star1": ("latent", "beta_star1"),
    "rho_a": ("hyper", "rho_a"),
    "sigma2_a": ("hyper", "sigma2_a"),
    "d_b": ("hyper", "d_b"),
    "d_beta": ("hyper", "d_beta"),
    "t_star": ("data", "t_star"),
    "phi": ("copy", "lag"),
}


def resolve_symbol(assembled, symbol):
    """Return the model component a symbol refers to, raising if it is absent."""
    if symbol not in SYMBOLS:
        raise ModelAssemblyError(f"unknown symbol {symbol}")
    category, target = SYMBOLS[symbol]
    if category == "latent":
        if target not in assembled.layout:
            raise ModelAssemblyError(f"symbol {symbol}: block {target} is not in the layout")
        return assembled.layout[target]
    if category == "hyper":
        names = target if isinstance(target, tuple) else (target,)
        missing = [n for n in names if n not in assembled.hyper_names]
        if missing:
            raise ModelAssemblyError(f"symbol {symbol}: hyperparameters {missing} are not free")
        return names
    if category == "data":
        return getattr(assembled, target) if target == "repulsion" else assembled.sites.t_star
    if category == "setting":
        return getattr(assembled.spec, target)
    if category == "copy":
        copies = assembled.spec.derived_copies
        if not copies:
            raise ModelAssemblyError(f"symbol {symbol}: no copies in implementation {assembled.spec.implementation}")
        return tuple(c.lag for c in copies)
    raise ModelAssemblyError(f"symbol {symbol}: unknown category {category}")
