"""Empirical-Bayes fitting of the joint model with a Laplace approximation."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math

import numpy as np
import pandas as pd
from scipy import optimize, sparse
from tqdm import tqdm

from .exceptions import (
    ConvergenceError,
    FactorizationError,
    InitializationError,
    NonFiniteError,
    ParameterError,
)
from .linalg import Conditioner, Factor
from .model import TRANSFORMS, log_hyperprior

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


def _model_at(assembled, theta):
    return assembled if theta is None else assembled.at(theta)


def _data_terms(model, x):
    eta = model.A_obs @ x
    nu = model.A_sel @ x
    s2 = model.theta.sigma2_eps
    resid = model.y - eta
    gaussian = float(np.sum(resid**2) / (2.0 * s2) + 0.5 * len(resid) * math.log(s2)) if len(resid) else 0.0
    outcome = model.ledger.outcome
    bernoulli = float(np.sum(np.logaddexp(0.0, nu) - outcome * nu)) if len(nu) else 0.0
    return gaussian, bernoulli, resid, nu


def neg_log_joint(assembled, theta, x):
    """
    Negative log joint density of (y, r, x, theta) up to a constant.

    The omitted constant is ``n_obs / 2 * log(2 pi)``; the Gaussian normalizer of the latent
    prior, ``-1/2 log|Q_prior|``, is left to ``laplace_log_marginal``.
    """
    model = _model_at(assembled, theta)
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n_latent,):
        raise ParameterError(f"latent vector has shape {x.shape}, expected ({model.n_latent},)")
    gaussian, bernoulli, _, _ = _data_terms(model, x)
    terms = {
        "latent_prior": 0.5 * float(x @ (model.Q_prior @ x)),
        "gaussian": gaussian,
        "bernoulli": bernoulli,
        "hyperprior": -log_hyperprior(model.spec, model.theta),
    }
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite {name} term ({value}) at theta={model.theta}", term=name)
    return sum(terms.values())


def _x_objective(model, x):
    gaussian, bernoulli, _, _ = _data_terms(model, x)
    return 0.5 * float(x @ (model.Q_prior @ x)) + gaussian + bernoulli


def _x_gradient(model, x):
    _, _, resid, nu = _data_terms(model, x)
    g = model.Q_prior @ x
    if len(resid):
        g = g - model.A_obs.T @ resid / model.theta.sigma2_eps
    if len(nu):
        g = g + model.A_sel.T @ (_expit(nu) - model.ledger.outcome)
    return np.asarray(g).ravel()


def _x_hessian(model, x):
    H = model.Q_prior.copy()
    if model.A_obs.shape[0]:
        H = H + (model.A_obs.T @ model.A_obs) / model.theta.sigma2_eps
    if model.A_sel.shape[0]:
        p = _expit(model.A_sel @ x)
        H = H + model.A_sel.T @ sparse.diags(p * (1.0 - p)) @ model.A_sel
    return sparse.csc_matrix(H)


def _expit(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


@dataclass
class ModeResult:
    x: np.ndarray
    Q_post: sparse.csc_matrix
    factor: Factor
    n_steps: int
    trace: list = field(default_factory=list)


class _Projector:
    # Euclidean projection onto {x : C x = 0}
    def __init__(self, C):
        self.C = C
        self.k = C.shape[0]
        if self.k:
            self.CCt = np.linalg.inv((C @ C.T).toarray())

    def __call__(self, v):
        if not self.k:
            return v
        return v - self.C.T @ (self.CCt @ (self.C @ v))


def inner_mode(assembled, theta=None, x0=None, max_iter=50, tol=1e-8, max_halvings=30):
    """
    Maximize the x-conditional log joint under the sum-to-zero constraints by damped Newton.

    Every Newton direction is corrected by conditioning on ``C x = 0`` with the current
    Hessian, so iterates stay feasible; step halving guards against overshooting.

    Returns:
        ModeResult with the mode, the posterior precision at the mode and its factor
    """
    model = _model_at(assembled, theta)
    C = model.constraints
    project = _Projector(C)
    x = np.zeros(model.n_latent) if x0 is None else project(np.asarray(x0, dtype=float).copy())
    f = _x_objective(model, x)
    if not np.isfinite(f):
        raise NonFiniteError(f"non-finite objective at the starting point, theta={model.theta}", term="objective")
    g = _x_gradient(model, x)
    g0 = np.linalg.norm(project(g))
    trace, n_steps = [], 0
    for iteration in range(max_iter + 1):
        grad_norm = float(np.linalg.norm(project(g)))
        trace.append({"iteration": iteration, "objective": f, "gradient": grad_norm})
        if grad_norm <= tol * (1.0 + g0):
            break
        if iteration == max_iter:
            raise ConvergenceError(f"Newton iteration did not converge in {max_iter} steps at theta={model.theta}", trace)
        factor = Factor(_x_hessian(model, x), theta=model.theta)
        step = Conditioner(factor, C).correct(-factor.solve(g))
        decrement = float(-g @ step)
        if decrement <= 1e-14 * (1.0 + abs(f)):
            break
        s = 1.0
        for _ in range(max_halvings + 1):
            x_new = x + s * step
            f_new = _x_objective(model, x_new)
            if np.isfinite(f_new) and f_new <= f - 1e-4 * s * decrement:
                break
            s *= 0.5
        else:
            raise ConvergenceError(f"line search failed after {max_halvings} halvings at theta={model.theta}", trace)
        x, f = x_new, f_new
        g = _x_gradient(model, x)
        n_steps += 1

    Q_post = _x_hessian(model, x)
    return ModeResult(x=x, Q_post=Q_post, factor=Factor(Q_post, theta=model.theta), n_steps=n_steps, trace=trace)


@dataclass
class LaplaceResult:
    log_ml: float
    mode: ModeResult


def laplace(assembled, theta=None, x0=None, **newton):
    model = _model_at(assembled, theta)
    mode = inner_mode(model, x0=x0, **newton)
    x = mode.x
    gaussian, bernoulli, _, _ = _data_terms(model, x)
    loglik = -gaussian - 0.5 * len(model.y) * LOG_2PI - bernoulli
    prior_factor = Factor(model.Q_prior, theta=model.theta)
    C = model.constraints
    log_ml = (
        loglik
        - 0.5 * float(x @ (model.Q_prior @ x))
        + 0.5 * prior_factor.logdet()
        - 0.5 * mode.factor.logdet()
        + 0.5 * Conditioner(prior_factor, C).logdet()
        - 0.5 * Conditioner(mode.factor, C).logdet()
    )
    if not np.isfinite(log_ml):
        raise NonFiniteError(f"non-finite Laplace marginal at theta={model.theta}", term="log_ml")
    return LaplaceResult(log_ml=float(log_ml), mode=mode)


def laplace_log_marginal(assembled, theta=None, **newton):
    """Laplace approximation of log p(y, r | theta) conditional on the sum-to-zero constraints."""
    return laplace(assembled, theta, **newton).log_ml


@dataclass
class FitResult:
    theta_hat: object
    hyper_names: list
    x_mode: np.ndarray
    Q_post: sparse.csc_matrix
    log_ml: float
    log_posterior: float
    converged: bool
    n_evaluations: int
    trace: pd.DataFrame
    assembled: object
    theta_cov: np.ndarray = None

    @property
    def layout(self):
        return self.assembled.layout

    def theta_table(self):
        """Hyperparameters with unconstrained standard errors and 95% intervals on the natural scale."""
        u = self.theta_hat.to_vector(self.hyper_names)
        if self.theta_cov is not None:
            se = np.sqrt(np.where(np.diag(self.theta_cov) > 0, np.diag(self.theta_cov), np.nan))
        else:
            se = np.full(len(u), np.nan)
        rows = []
        for name, ui, si in zip(self.hyper_names, u, se):
            lower, upper = (_natural(name, ui - 1.959963984540054 * si), _natural(name, ui + 1.959963984540054 * si))
            rows.append((name, getattr(self.theta_hat, name), ui, si, lower, upper))
        return pd.DataFrame(rows, columns=["name", "value", "internal", "internal_se", "lower", "upper"])


def _natural(name, u):
    if not np.isfinite(u):
        return np.nan
    kind = TRANSFORMS[name]
    if kind == "log":
        return math.exp(u)
    if kind == "fisher":
        return math.tanh(0.5 * u)
    return u


def fit_options(section):
    """Keyword arguments of ``optimize_hyperparameters`` from the ``optimizer`` config section."""
    return {
        "max_evaluations": section["MAX_EVALUATIONS"],
        "fatol": section["FATOL"],
        "theta_covariance": section["THETA_COVARIANCE"],
        "fd_step": section["FD_STEP"],
        "max_iter": section["NEWTON_MAX_ITER"],
        "tol": section["NEWTON_TOL"],
        "max_halvings": section["MAX_HALVINGS"],
    }


def optimize_hyperparameters(
    assembled,
    theta0=None,
    max_evaluations=2000,
    fatol=1e-6,
    initial_step=0.5,
    theta_covariance=False,
    fd_step=1e-2,
    **newton,
):
    """
    Nelder-Mead over the unconstrained hyperparameters maximizing the Laplace marginal plus the log prior.

    The latent mode of the previous evaluation warm-starts the next one. Evaluations that fail
    (non-SPD precision, Newton failure) count as -inf and the simplex moves away from them.
    """
    theta0 = assembled.theta if theta0 is None else theta0
    names = assembled.hyper_names
    spec = assembled.spec
    u0 = theta0.to_vector(names)
    state = {"x": None, "best": -np.inf}
    records = []

    def objective(u):
        try:
            theta = theta0.from_vector(names, u)
            result = laplace(assembled, theta, x0=state["x"], **newton)
            value = result.log_ml + log_hyperprior(spec, theta)
            log_ml = result.log_ml
        except (FactorizationError, ConvergenceError, NonFiniteError, ValueError, OverflowError, np.linalg.LinAlgError) as err:
            log.debug(f"evaluation at {u} failed: {err}")
            value, log_ml = -np.inf, np.nan
        else:
            if np.isfinite(value):
                state["x"] = result.mode.x
        state["best"] = max(state["best"], value)
        records.append({"evaluation": len(records), **dict(zip(names, u)), "log_ml": log_ml, "objective": value, "best": state["best"]})
        return -value if np.isfinite(value) else np.inf

    if not np.isfinite(objective(u0)):
        raise InitializationError(f"objective is not finite at the initial hyperparameters {theta0}")

    converged = True
    if names:
        simplex = np.vstack([u0] + [u0 + initial_step * e for e in np.eye(len(u0))])
        result = optimize.minimize(
            objective,
            u0,
            method="Nelder-Mead",
            options={"maxfev": max_evaluations, "fatol": fatol, "xatol": np.inf, "initial_simplex": simplex},
        )
        u_hat = result.x
        converged = bool(result.status == 0)
        if not converged:
            log.warning(f"Nelder-Mead stopped without converging: {result.message}")
    else:
        u_hat = u0

    theta_hat = theta0.from_vector(names, u_hat)
    final = laplace(assembled, theta_hat, x0=state["x"], **newton)
    model = assembled.at(theta_hat)
    fit = FitResult(
        theta_hat=theta_hat,
        hyper_names=list(names),
        x_mode=final.mode.x,
        Q_post=final.mode.Q_post,
        log_ml=final.log_ml,
        log_posterior=final.log_ml + log_hyperprior(spec, theta_hat),
        converged=converged,
        n_evaluations=len(records),
        trace=pd.DataFrame(records),
        assembled=model,
    )
    log.info(f"fit finished after {fit.n_evaluations} evaluations, log marginal {fit.log_ml:.4f}, converged={converged}")
    if theta_covariance and names:
        fit.theta_cov = theta_covariance_matrix(fit, step=fd_step, **newton)
    return fit


def theta_covariance_matrix(fit, step=1e-2, **newton):
    """Inverse negative finite-difference Hessian of the log posterior over the unconstrained hyperparameters."""
    names, spec = fit.hyper_names, fit.assembled.spec
    u0 = fit.theta_hat.to_vector(names)
    k = len(u0)
    cache = {}

    def h(offset):
        key = tuple(np.round(offset / step).astype(int))
        if key not in cache:
            theta = fit.theta_hat.from_vector(names, u0 + offset)
            cache[key] = laplace_log_marginal(fit.assembled, theta, x0=fit.x_mode, **newton) + log_hyperprior(spec, theta)
        return cache[key]

    E = np.eye(k) * step
    H = np.empty((k, k))
    try:
        center = h(np.zeros(k))
        for i in range(k):
            H[i, i] = (h(E[i]) - 2.0 * center + h(-E[i])) / step**2
            for j in range(i):
                H[i, j] = H[j, i] = (h(E[i] + E[j]) - h(E[i] - E[j]) - h(-E[i] + E[j]) + h(-E[i] - E[j])) / (4.0 * step**2)
    except (FactorizationError, ConvergenceError, NonFiniteError, ValueError, OverflowError) as err:
        log.warning(f"hyperparameter covariance unavailable: {err}")
        return np.full((k, k), np.nan)
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        return np.full((k, k), np.nan)
    if np.any(np.diag(cov) <= 0):
        log.warning("finite-difference Hessian is not negative definite at the optimum")
    return cov


@dataclass
class PosteriorEnsemble:
    draws: np.ndarray
    theta: object
    layout: object
    seed: int = 0

    @property
    def n_draws(self):
        return self.draws.shape[0]

    def component(self, name):
        return self.draws[:, self.layout.component(name)]


def sample_posterior(fit, M=1000, seed=0, chunk_size=250, n_threads=1, progress=False):
    """
    Draw from the Gaussian approximation at the mode, conditioned on the sum-to-zero constraints.

    Every chunk of draws gets its own seed spawned from ``seed``, so the ensemble does not
    depend on ``n_threads``.
    """
    if M < 1:
        raise ParameterError(f"need at least one draw, got {M}")
    if not fit.converged:
        log.warning(f"sampling from a fit that did not converge after {fit.n_evaluations} evaluations")
    factor = Factor(fit.Q_post, theta=fit.theta_hat)
    conditioner = Conditioner(factor, fit.assembled.constraints)
    sizes = [min(chunk_size, M - start) for start in range(0, M, chunk_size)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))

    def chunk(k):
        rng = np.random.default_rng(seeds[k])
        z = rng.standard_normal((fit.x_mode.size, sizes[k]))
        return conditioner.correct(fit.x_mode[:, None] + factor.whiten(z))

    indices = range(len(sizes))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(tqdm(pool.map(chunk, indices), total=len(sizes), disable=not progress, desc="draws"))
    else:
        parts = [chunk(k) for k in tqdm(indices, disable=not progress, desc="draws")]
    draws = np.hstack(parts).T
    return PosteriorEnsemble(draws=draws, theta=fit.theta_hat, layout=fit.layout, seed=seed)


def latent_marginal_sd(fit, indices):
    """Constrained posterior standard deviations of selected latent components."""
    indices = np.atleast_1d(indices)
    factor = Factor(fit.Q_post, theta=fit.theta_hat)
    E = np.zeros((fit.x_mode.size, len(indices)))
    E[indices, np.arange(len(indices))] = 1.0
    var = factor.solve(E)[indices, np.arange(len(indices))]
    var = var - np.diag(Conditioner(factor, fit.assembled.constraints).covariance_correction(indices))
    return np.sqrt(np.clip(var, 0.0, None))


def posterior_summary(ensemble, blocks=None):
    """Mean, sd and equal-tailed 95% interval per latent component of the chosen blocks."""
    rows = []
    for block in ensemble.layout.blocks:
        if blocks is not None and block.name not in blocks:
            continue
        values = ensemble.draws[:, block.slice]
        q = np.quantile(values, [0.025, 0.975], axis=0)
        for k in range(block.size):
            rows.append((block.name, k, values[:, k].mean(), values[:, k].std(ddof=1), q[0, k], q[1, k]))
    return pd.DataFrame(rows, columns=["block", "index", "mean", "sd", "q025", "q975"])
