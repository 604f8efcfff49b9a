"""
Synthetic preferentially sampled monitoring networks and recovery studies.

Fields are drawn with an exact dense Cholesky factor of the closed-form Matern
covariance, independently of the finite-element approximation used for fitting.
"""

from dataclasses import dataclass, fields, replace
from functools import lru_cache
import logging
import math

import numpy as np
import pandas as pd
from scipy import linalg, special
from scipy.spatial import distance
from tqdm import tqdm

from .clients import SerialExecutor
from .exceptions import ParameterError, PsjointError, SimulationError, StudyError
from .inference import latent_marginal_sd, optimize_hyperparameters, sample_posterior
from .mesh import DomainPolygon, build_mesh
from .model import FIELDS, Hyperparameters, JointModelSpec, PriorSettings, SiteTable, assemble, repulsion_indicator, scale_years
from .preprocess import generate_pseudosites
from .spde import fem_matrices

log = logging.getLogger(__name__)

DESIGNS = ("rigid_quadratic", "independent_fields")


@dataclass(frozen=True)
class SimConfig:
    grid_size: tuple = (50, 50)
    grid_spacing: float = 0.2
    population_size: int = 200
    n_initial: int = 100
    n_years: int = 30
    temporal_design: str = "rigid_quadratic"
    gamma: tuple = (0.0, 0.0, 0.0)
    field_ranges: tuple = (4.0, 3.0, 3.0)
    field_sds: tuple = (0.9, 0.7, 0.0)
    iid_sds: tuple = (0.0, 0.0)
    iid_rho: float = 0.0
    sigma2_eps: float = 0.01
    alpha00: float = 0.0
    alpha01: float = -1.0
    alpha1: float = 0.0
    alpha2: float = 0.0
    alpha_ret: float = 2.0
    alpha_rep: float = 0.0
    repulsion_distance: float = 0.5
    sel_field_range: float = 3.5
    sel_field_sd: float = 0.45
    d_b: float = 0.0
    d_beta: float = 1.0
    mesh_min_edge: float = 0.6
    mesh_max_edge: float = 1.2
    mesh_min_angle: float = 25.0
    jitter: float = 1e-9
    prior_range0: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                object.__setattr__(self, f.name, tuple(value))
        if self.grid_spacing <= 0:
            raise ParameterError(f"grid spacing must be positive, got {self.grid_spacing}")
        if len(self.grid_size) != 2 or min(self.grid_size) < 1:
            raise ParameterError(f"grid size must be two positive integers, got {self.grid_size}")
        if not 0 < self.n_initial <= self.population_size <= self.n_grid:
            raise ParameterError(
                f"need 0 < n_initial <= population_size <= grid size, got {self.n_initial}, "
                f"{self.population_size}, {self.n_grid}"
            )
        if self.n_years < 1:
            raise ParameterError(f"need at least one year, got {self.n_years}")
        if self.temporal_design not in DESIGNS:
            raise ParameterError(f"unknown temporal design {self.temporal_design}")
        if self.sigma2_eps < 0 or min(self.field_sds) < 0 or min(self.iid_sds) < 0 or self.sel_field_sd < 0:
            raise ParameterError("variances and standard deviations must be non-negative")

    @classmethod
    def from_config(cls, run_config):
        values = {k.lower(): v for k, v in run_config["simulation"].items()}
        return cls(**values, seed=run_config["global"]["SEED"])

    def replace(self, **values):
        return replace(self, **values)

    @property
    def n_grid(self):
        return int(self.grid_size[0] * self.grid_size[1])

    @property
    def years(self):
        return np.arange(1, self.n_years + 1)

    @property
    def t_star(self):
        return scale_years(self.years)

    def grid(self):
        """Cell-centred lattice coordinates, x-major."""
        return _lattice(tuple(self.grid_size), self.grid_spacing)

    def domain(self):
        nx, ny = self.grid_size
        return DomainPolygon.rectangle(0.0, 0.0, nx * self.grid_spacing, ny * self.grid_spacing)

    def fit_spec(self, implementation):
        """Model fitted to a simulated dataset; quadratic fields with non-zero truth only for the rigid design."""
        if self.temporal_design == "rigid_quadratic":
            obs_fields = tuple(f for f, sd in zip(FIELDS, self.field_sds) if sd > 0) or ("beta0",)
        else:
            obs_fields = FIELDS
        return JointModelSpec(
            implementation=implementation,
            obs_fields=obs_fields,
            iid_site_effects=max(self.iid_sds) > 0,
            sel_field=self.sel_field_sd > 0,
            sel_ar1=False,
            repulsion_distance=self.repulsion_distance,
            priors=PriorSettings(range0=self.prior_range0),
        )

    def initial_theta(self):
        r0 = 0.25 * self.domain().extent
        return Hyperparameters(
            sigma2_eps=0.05,
            range_beta0=r0,
            range_beta1=r0,
            range_beta2=r0,
            range_R=r0,
            sd_beta0=0.5,
            sd_beta1=0.5,
            sd_beta2=0.5,
            sd_R=0.5,
        )


def _lattice(grid_size, spacing):
    nx, ny = grid_size
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    return (np.column_stack([ix.ravel(), iy.ravel()]) + 0.5) * spacing


def _matern_cov(points, range_, sd):
    h = distance.cdist(points, points)
    x = math.sqrt(8.0) / range_ * h
    with np.errstate(invalid="ignore"):
        corr = x * special.kv(1, x)
    corr[h == 0] = 1.0
    return sd**2 * corr


def _cholesky(points, range_, sd, jitter):
    if len(np.unique(points, axis=0)) != len(points):
        raise SimulationError("duplicate locations make the Matern covariance singular")
    K = _matern_cov(points, range_, sd)
    K[np.diag_indices_from(K)] += jitter * sd**2
    try:
        return linalg.cholesky(K, lower=True)
    except np.linalg.LinAlgError as err:
        raise SimulationError(f"Matern covariance (range {range_}, sd {sd}) is not positive definite: {err}") from err


# a 50 x 50 lattice factor takes 50 MB
@lru_cache(maxsize=2)
def _grid_cholesky(grid_size, spacing, range_, jitter):
    """Unit-variance factor on the lattice; scale draws by the sd."""
    return _cholesky(_lattice(grid_size, spacing), range_, 1.0, jitter)


def draw_matern(points, range_, sd, rng, size=1, jitter=1e-9):
    """(n, size) exact draws of a zero-mean Matern field at ``points``."""
    points = np.asarray(points, dtype=float)
    if sd == 0:
        return np.zeros((len(points), size))
    L = _cholesky(points, range_, sd, jitter)
    return L @ rng.standard_normal((len(points), size))


@dataclass
class SimulatedField:
    locations: np.ndarray
    years: np.ndarray
    t_star: np.ndarray
    # (n, N) latent mean and noisy responses
    mu: np.ndarray
    y: np.ndarray
    fields: dict
    # (n, 2) site effects
    b: np.ndarray
    # (n, N) time-weighted contributions that the selection process may copy
    shared_beta: np.ndarray
    shared_b: np.ndarray


def simulate_field(config, rng=None, locations=None):
    """
    Draw the observation-process truth at ``locations`` (the lattice by default).

    The rigid design composes beta0 + beta1 t + beta2 t^2 from three fields drawn once;
    the independent design draws a new field with the first range and sd every year.
    """
    rng = np.random.default_rng([config.seed, 0]) if rng is None else rng
    on_grid = locations is None
    points = config.grid() if on_grid else np.asarray(locations, dtype=float)
    n, t = len(points), config.t_star

    def draw(range_, sd, size=1):
        if sd == 0:
            return np.zeros((n, size))
        if on_grid:
            factor = _grid_cholesky(tuple(config.grid_size), config.grid_spacing, range_, config.jitter)
            return sd * (factor @ rng.standard_normal((n, size)))
        return draw_matern(points, range_, sd, rng, size=size, jitter=config.jitter)

    trend = config.gamma[0] + config.gamma[1] * t + config.gamma[2] * t**2
    field_values = {}
    if config.temporal_design == "rigid_quadratic":
        shared_beta = np.zeros((n, len(t)))
        for k, name in enumerate(FIELDS):
            values = draw(config.field_ranges[k], config.field_sds[k])[:, 0]
            field_values[name] = values
            shared_beta += values[:, None] * t[None, :] ** k
    else:
        shared_beta = draw(config.field_ranges[0], config.field_sds[0], size=len(t))
        field_values["beta"] = shared_beta

    if max(config.iid_sds) > 0:
        s1, s2 = config.iid_sds
        cov = np.array([[s1**2, config.iid_rho * s1 * s2], [config.iid_rho * s1 * s2, s2**2]])
        b = rng.multivariate_normal(np.zeros(2), cov, size=n)
    else:
        b = np.zeros((n, 2))
    shared_b = b[:, :1] + b[:, 1:] * t[None, :]

    mu = trend[None, :] + shared_beta + shared_b
    y = mu + math.sqrt(config.sigma2_eps) * rng.standard_normal(mu.shape)
    return SimulatedField(
        locations=points,
        years=config.years,
        t_star=t,
        mu=mu,
        y=y,
        fields=field_values,
        b=b,
        shared_beta=shared_beta,
        shared_b=shared_b,
    )


def simulate_selection(config, field, rng=None):
    """
    Run the site-selection process over a random population of lattice points.

    Year 1 selects ``n_initial`` population members completely at random; later years
    draw every member from a Bernoulli with retention, repulsion, the selection field
    and the d-scaled shared effects of the previous year.

    Returns:
        SiteTable indexed by lattice position; members never selected are marked pseudo
    """
    rng = np.random.default_rng([config.seed, 1]) if rng is None else rng
    n_grid, N = field.mu.shape
    if field.mu.shape[1] != config.n_years:
        raise SimulationError(f"field has {field.mu.shape[1]} years, config asks for {config.n_years}")
    if config.population_size > n_grid:
        raise SimulationError(f"population of {config.population_size} exceeds the {n_grid} field locations")

    population = np.sort(rng.choice(n_grid, config.population_size, replace=False))
    locations = field.locations[population]
    star = draw_matern(locations, config.sel_field_range, config.sel_field_sd, rng, jitter=config.jitter)[:, 0]
    t = field.t_star
    P = len(population)

    r = np.zeros((P, N), dtype=np.int8)
    r[rng.choice(P, config.n_initial, replace=False), 0] = 1
    for j in range(1, N):
        online = r[:, j - 1] == 1
        nu = (
            config.alpha01
            + config.alpha1 * t[j]
            + config.alpha2 * t[j] ** 2
            + config.alpha_ret * online
            + config.alpha_rep * repulsion_indicator(locations, online, config.repulsion_distance)
            + star
            + config.d_b * field.shared_b[population, j - 1]
            + config.d_beta * field.shared_beta[population, j - 1]
        )
        r[:, j] = rng.random(P) < special.expit(nu)
        if not r[:, j].any():
            log.warning(f"no site selected in year {field.years[j]}")

    y = np.where(r == 1, field.y[population], np.nan)
    return SiteTable(
        site_id=population,
        locations=locations,
        pseudo=~r.any(axis=1),
        r=r,
        y=y,
        years=field.years,
        t_star=t,
    )


@lru_cache(maxsize=4)
def _study_fem(domain_size, min_edge, max_edge, min_angle):
    domain = DomainPolygon.rectangle(0.0, 0.0, *domain_size)
    return fem_matrices(build_mesh(domain, min_edge, max_edge, min_angle=min_angle, extension=True))


def _fit_metrics(config, field, sites, fem, implementation, draw_seed, n_draws, fit_kwargs):
    spec = config.fit_spec(implementation)
    assembled = assemble(spec, sites, fem, theta=config.initial_theta())
    kwargs = dict(fit_kwargs)
    kwargs["theta_covariance"] = kwargs.get("theta_covariance", True) and implementation != 1
    fit = optimize_hyperparameters(assembled, **kwargs)
    ensemble = sample_posterior(fit, n_draws, seed=draw_seed)
    model = fit.assembled

    mu_true = field.mu[sites.site_id]
    y_true = field.y[sites.site_id]
    everyone = np.arange(sites.n_sites)
    observed = sites.observed_index
    est = np.empty_like(mu_true)
    var = np.empty_like(mu_true)
    for j in range(sites.n_years):
        design = model.site_design(everyone, j)
        est[:, j] = design @ fit.x_mode
        var[:, j] = (ensemble.draws @ design.T.toarray()).var(axis=0, ddof=1)

    p1_design, p2_design = model.pmean_design("P1"), model.pmean_design("P2")
    p1_est, p2_est = p1_design @ fit.x_mode, p2_design @ fit.x_mode
    p1_draws = ensemble.draws @ p1_design.T.toarray()
    p1_lower, p1_upper = np.quantile(p1_draws, [0.025, 0.975], axis=0)
    p1_true = mu_true[observed].mean(axis=0)
    p2_true = mu_true.mean(axis=0)

    held = sites.r == 0
    sigma2 = fit.theta_hat.sigma2_eps
    metrics = {
        "converged": fit.converged,
        "n_evaluations": fit.n_evaluations,
        "log_ml": fit.log_ml,
        "p1_bias": float(np.mean(p1_est - p1_true)),
        "p1_abs_bias": float(np.mean(np.abs(p1_est - p1_true))),
        "p1_coverage": float(np.mean((p1_lower <= p1_true) & (p1_true <= p1_upper))),
        "p2_bias": float(np.mean(p2_est - p2_true)),
        "p2_abs_bias": float(np.mean(np.abs(p2_est - p2_true))),
        "p2_minus_p1": float(np.mean(p2_est - p1_est)),
        "rmse": float(np.sqrt(np.mean((est - mu_true) ** 2))),
        "pmsdr": float(np.mean(((y_true - est) ** 2 / (var + sigma2))[held])) if held.any() else np.nan,
    }
    table = fit.theta_table().set_index("name")
    for d in ("d_b", "d_beta"):
        truth = getattr(config, d)
        if d in table.index:
            row = table.loc[d]
            metrics.update(
                {
                    f"{d}_hat": row["value"],
                    f"{d}_lower": row["lower"],
                    f"{d}_upper": row["upper"],
                    f"{d}_covered": float(row["lower"] <= truth <= row["upper"]) if np.isfinite(row["internal_se"]) else np.nan,
                }
            )
        else:
            metrics.update({f"{d}_hat": np.nan, f"{d}_lower": np.nan, f"{d}_upper": np.nan, f"{d}_covered": np.nan})

    trajectory = pd.DataFrame(
        {"year": sites.years, "p1_est": p1_est, "p1_true": p1_true, "p2_est": p2_est, "p2_true": p2_true}
    )
    return metrics, trajectory


def run_replicate(config, implementations, seed, n_draws=200, fit_kwargs=None):
    """
    Simulate one dataset and fit every implementation to it.

    Returns:
        (list of per-implementation rows, trajectory DataFrame)
    """
    seed = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    field_seq, selection_seq, fit_seq = seed.spawn(3)
    field = simulate_field(config, np.random.default_rng(field_seq))
    sites = simulate_selection(config, field, np.random.default_rng(selection_seq))
    nx, ny = config.grid_size
    fem = _study_fem(
        (nx * config.grid_spacing, ny * config.grid_spacing), config.mesh_min_edge, config.mesh_max_edge, config.mesh_min_angle
    )

    rows, trajectories = [], []
    draw_seeds = fit_seq.generate_state(len(implementations))
    for implementation, draw_seed in zip(implementations, draw_seeds):
        row = {
            "implementation": implementation,
            "status": "ok",
            "error": "",
            "n_sites": int(sites.observed.sum()),
            "lifetime": sites.mean_lifetime(),
        }
        try:
            metrics, trajectory = _fit_metrics(config, field, sites, fem, implementation, int(draw_seed), n_draws, fit_kwargs or {})
        except (PsjointError, ValueError, np.linalg.LinAlgError) as err:
            log.warning(f"implementation {implementation} failed: {err}")
            row.update(status="failed", error=str(err))
        else:
            row.update(metrics)
            trajectories.append(trajectory.assign(implementation=implementation))
        rows.append(row)
    trajectory = pd.concat(trajectories, ignore_index=True) if trajectories else pd.DataFrame()
    return rows, trajectory


@dataclass
class StudyReport:
    replicates: pd.DataFrame
    trajectories: pd.DataFrame
    config: SimConfig
    max_failure_rate: float = 0.2

    def failure_rate(self, implementation):
        rows = self.replicates[self.replicates["implementation"] == implementation]
        return float((rows["status"] != "ok").mean()) if len(rows) else 0.0

    @property
    def passed(self):
        return all(self.failure_rate(i) <= self.max_failure_rate for i in self.replicates["implementation"].unique())

    def summary(self):
        """One row per implementation: bias, MSE and coverage with Monte Carlo standard errors."""
        rows = []
        for implementation, group in self.replicates.groupby("implementation", sort=True):
            ok = group[group["status"] == "ok"]
            n = len(ok)
            row = {"implementation": implementation, "n_ok": n, "n_failed": len(group) - n, "failure_rate": self.failure_rate(implementation)}
            for d in ("d_b", "d_beta"):
                est = ok[f"{d}_hat"].dropna() if f"{d}_hat" in ok else pd.Series(dtype=float)
                covered = ok[f"{d}_covered"].dropna() if f"{d}_covered" in ok else pd.Series(dtype=float)
                truth = getattr(self.config, d)
                coverage = covered.mean() if len(covered) else np.nan
                row.update(
                    {
                        f"{d}_mean": est.mean() if len(est) else np.nan,
                        f"{d}_bias": est.mean() - truth if len(est) else np.nan,
                        f"{d}_mcse": est.std(ddof=1) / math.sqrt(len(est)) if len(est) > 1 else np.nan,
                        f"{d}_mse": ((est - truth) ** 2).mean() if len(est) else np.nan,
                        f"{d}_coverage": coverage,
                        f"{d}_coverage_se": math.sqrt(coverage * (1 - coverage) / len(covered)) if len(covered) else np.nan,
                    }
                )
            for key in ("p1_bias", "p2_bias"):
                values = ok[key] if key in ok else pd.Series(dtype=float)
                row[key] = values.mean() if n else np.nan
                row[f"{key}_mcse"] = values.std(ddof=1) / math.sqrt(n) if n > 1 else np.nan
            for key in ("p1_abs_bias", "p2_abs_bias", "p1_coverage", "p2_minus_p1", "rmse", "pmsdr", "lifetime"):
                row[key] = ok[key].mean() if n and key in ok else np.nan
            rows.append(row)
        return pd.DataFrame(rows)


def run_study(config, n_replicates=100, implementations=(1, 2), n_draws=200, fit_kwargs=None, executor=None, max_failure_rate=0.2, progress=True):
    """
    Simulate ``n_replicates`` datasets and fit every implementation to each.

    Replicate seeds are spawned from ``config.seed``, so the report only depends on the
    config and never on the executor.

    Raises:
        StudyError: more than ``max_failure_rate`` of the fits of an implementation failed;
            the partial report is attached
    """
    seeds = np.random.SeedSequence(config.seed).spawn(n_replicates)
    executor = SerialExecutor() if executor is None else executor
    futures = [executor.submit(run_replicate, config, tuple(implementations), seed, n_draws, fit_kwargs) for seed in seeds]

    rows, trajectories = [], []
    for k, future in enumerate(tqdm(futures, desc="replicates", disable=not progress)):
        try:
            replicate_rows, trajectory = future.result()
        except (PsjointError, ValueError, np.linalg.LinAlgError) as err:
            log.warning(f"replicate {k} failed before fitting: {err}")
            replicate_rows = [{"implementation": i, "status": "failed", "error": str(err)} for i in implementations]
            trajectory = pd.DataFrame()
        rows += [{"replicate": k, **row} for row in replicate_rows]
        if len(trajectory):
            trajectories.append(trajectory.assign(replicate=k))

    report = StudyReport(
        replicates=pd.DataFrame(rows),
        trajectories=pd.concat(trajectories, ignore_index=True) if trajectories else pd.DataFrame(),
        config=config,
        max_failure_rate=max_failure_rate,
    )
    for implementation in implementations:
        rate = report.failure_rate(implementation)
        if rate > max_failure_rate:
            raise StudyError(f"implementation {implementation}: {rate:.0%} of the fits failed", report=report)
    return report


def paired_comparison(report, a, b):
    """
    Compare implementation ``b`` against ``a`` on the replicates where both fits succeeded.

    Returns:
        dict with the number of pairs, the fractions of pairs where ``b`` has the smaller
        absolute P1/P2-mean bias, and the mean absolute difference of the P1-mean estimates
    """
    ok = report.replicates[report.replicates["status"] == "ok"]
    left = ok[ok["implementation"] == a].set_index("replicate")
    right = ok[ok["implementation"] == b].set_index("replicate")
    common = left.index.intersection(right.index)
    out = {"n_pairs": len(common)}
    for key in ("p1_abs_bias", "p2_abs_bias"):
        out[f"{key}_b_lower"] = float((right.loc[common, key] < left.loc[common, key]).mean()) if len(common) else np.nan

    traj = report.trajectories
    if len(common) and len(traj):
        ta = traj[traj["implementation"] == a].set_index(["replicate", "year"])["p1_est"]
        tb = traj[traj["implementation"] == b].set_index(["replicate", "year"])["p1_est"]
        diff = (ta - tb).dropna().abs()
        out["p1_mean_abs_difference"] = float(diff.mean())
    else:
        out["p1_mean_abs_difference"] = np.nan
    sd = report.config.field_sds[0]
    out["p1_relative_difference"] = out["p1_mean_abs_difference"] / sd if sd > 0 else np.nan
    return out


def poisson_convergence_table(section, seed=0):
    """
    Selection slopes of a logistic fit with pseudo-site zeros at decreasing spacings.

    Points follow a Poisson process on a square with log-intensity ``a + slope * z``, where
    ``z`` is the centred, scaled x coordinate. As the pseudo-sites become denser the
    logistic slope approaches the Poisson slope.

    Args:
        section: the ``convergence`` config section
        seed: seed of the point pattern

    Returns:
        DataFrame with one row per spacing, coarse to fine
    """
    size, slope = float(section["DOMAIN_SIZE"]), float(section["SLOPE"])
    mean_intensity = math.sinh(slope) / slope if slope != 0 else 1.0
    a = math.log(section["N_POINTS"] / (size**2 * mean_intensity))
    rng = np.random.default_rng(seed)

    def covariate(points):
        return (points[:, 0] - 0.5 * size) / (0.5 * size)

    lam_max = math.exp(a + abs(slope))
    candidates = rng.uniform(0.0, size, size=(rng.poisson(lam_max * size**2), 2))
    keep = rng.random(len(candidates)) < np.exp(a + slope * covariate(candidates)) / lam_max
    points = candidates[keep]
    if len(points) < 2:
        raise SimulationError(f"only {len(points)} points simulated; increase N_POINTS")
    log.info(f"simulated {len(points)} Poisson points")

    domain = DomainPolygon.rectangle(0.0, 0.0, size, size)
    max_edge = float(section["MESH_MAX_EDGE"])
    fem = fem_matrices(build_mesh(domain, 0.5 * max_edge, max_edge, extension=False))
    spec = JointModelSpec(
        implementation=3,
        obs_fixed=(),
        obs_fields=(),
        iid_site_effects=False,
        sel_fixed=("alpha00",),
        sel_covariates=("z",),
        sel_field=False,
        sel_ar1=False,
        copies=(),
    )
    observed = SiteTable(
        site_id=np.arange(len(points)),
        locations=points,
        pseudo=np.zeros(len(points), dtype=bool),
        r=np.ones((len(points), 1)),
        y=np.full((len(points), 1), np.nan),
        years=np.array([0]),
        covariates={"z": covariate(points)},
    )

    rows = []
    for spacing in sorted(section["SPACINGS"], reverse=True):
        pseudo = generate_pseudosites(domain, spacing=spacing)
        sites = observed.with_pseudosites(pseudo, covariates={"z": covariate(pseudo)})
        fit = optimize_hyperparameters(assemble(spec, sites, fem))
        k = fit.layout["alpha_z"].start
        rows.append(
            {
                "spacing": spacing,
                "n_pseudo": len(pseudo),
                "slope": float(fit.x_mode[k]),
                "se": float(latent_marginal_sd(fit, [k])[0]),
            }
        )
        log.info(f"spacing {spacing}: {len(pseudo)} pseudo-sites, slope {rows[-1]['slope']:.4f}")

    table = pd.DataFrame(rows)
    table["diff"] = table["slope"] - table["slope"].shift(-1)
    table["combined_se"] = np.sqrt(table["se"] ** 2 + table["se"].shift(-1) ** 2)
    table["within_2se"] = table["diff"].abs() < 2.0 * table["combined_se"]
    table["abs_error"] = (table["slope"] - slope).abs()
    return table
