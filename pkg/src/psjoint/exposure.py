"""Population-weighted exposure and exceedance integrals over posterior field draws."""

from dataclasses import dataclass
import logging

import numpy as np
import pandas as pd
from scipy import sparse

from .exceptions import ExposureError

log = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-10


@dataclass(frozen=True)
class PopulationRaster:
    """Raster cell centroids in the scaled model frame and their population weights."""

    centroids: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        centroids = np.asarray(self.centroids, dtype=float).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=float).ravel()
        if len(weights) != len(centroids):
            raise ExposureError(f"{len(weights)} weights for {len(centroids)} cells")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ExposureError("population weights must be finite and non-negative")
        object.__setattr__(self, "centroids", centroids)
        object.__setattr__(self, "weights", weights)

    @property
    def n_cells(self):
        return len(self.weights)

    @property
    def total(self):
        return float(self.weights.sum())

    @property
    def is_normalized(self):
        return abs(self.total - 1.0) <= NORMALIZATION_TOL

    def normalized(self):
        if self.total <= 0:
            raise ExposureError("population raster has zero total weight")
        if self.is_normalized:
            return self
        log.warning(f"renormalizing population weights by a factor of {1.0 / self.total:.6g}")
        return PopulationRaster(self.centroids, self.weights / self.total)

    def uniform(self):
        return PopulationRaster(self.centroids, np.full(self.n_cells, 1.0 / self.n_cells))


def _check_weights(weights, n_cells):
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n_cells,):
        raise ExposureError(f"{weights.shape[0]} weights for {n_cells} cells")
    if abs(weights.sum() - 1.0) > NORMALIZATION_TOL:
        raise ExposureError(f"weights sum to {weights.sum():.12g}, normalize the raster first")
    return weights


def summarize(samples):
    """Mean and equal-tailed 95% interval of a sample."""
    samples = np.asarray(samples, dtype=float)
    lower, upper = np.quantile(samples, [0.025, 0.975])
    return {"mean": float(samples.mean()), "q025": float(lower), "q975": float(upper)}


def weighted_mean_draws(values, weights):
    """Per-draw weighted mean over cells of an (M, n_cells) array."""
    values = np.atleast_2d(values)
    return values @ _check_weights(weights, values.shape[1])


def exceedance_draws(values, weights, threshold):
    """
    Pointwise exceedance probabilities and per-draw exceeding proportions.

    Returns:
        (probability per cell, population proportion per draw, area proportion per draw)
    """
    values = np.atleast_2d(values)
    weights = _check_weights(weights, values.shape[1])
    above = values > threshold
    return above.mean(axis=0), above @ weights, above.mean(axis=1)


def _matrix(projector):
    return sparse.csr_matrix(getattr(projector, "A", projector))


def cell_values(model, ensemble, projector, year, include_iid=True, rng=None):
    """
    (M, n_cells) linear predictor of every draw at the raster cells in a 0-based year.

    Site effects are not defined off-site; with ``include_iid`` every cell and draw gets a
    fresh (b0, b1) pair from the fitted site-effect covariance, drawn from ``rng`` (a
    Generator or an integer seed). ``include_iid=False`` gives the smoothed field without
    site-level variability.
    """
    A = _matrix(projector)
    if A.shape[1] != model.n_vertices:
        raise ExposureError(f"projector has {A.shape[1]} columns, the mesh has {model.n_vertices} vertices")
    if not 0 <= year < len(model.t_star):
        raise ExposureError(f"year index {year} outside the fitted {len(model.t_star)} years")
    if include_iid and rng is None:
        raise ExposureError("fresh site effects need an rng or a seed, or pass include_iid=False")
    t = float(model.t_star[year])
    design = model.field_design(A, t)
    values = np.asarray(ensemble.draws @ design.T.toarray())
    if include_iid:
        if "b" not in ensemble.layout:
            log.debug("model has no site effects, nothing to add per cell")
        else:
            rng = np.random.default_rng(rng)
            b = rng.multivariate_normal(np.zeros(2), ensemble.theta.sigma_b, size=values.shape)
            values = values + b[..., 0] + t * b[..., 1]
    return values


def population_mean(model, ensemble, raster, projector, year, back_transform, include_iid=True, rng=None):
    """Posterior summary of the population-weighted mean exposure in a 0-based year."""
    _check_projector(projector, raster)
    _check_weights(raster.weights, raster.n_cells)
    values = back_transform(cell_values(model, ensemble, projector, year, include_iid, rng))
    draws = weighted_mean_draws(values, raster.weights)
    return {**summarize(draws), "include_iid": include_iid}


def exceedance(model, ensemble, raster, projector, year, threshold, back_transform, include_iid=True, rng=None):
    """
    Exceedance of ``threshold`` (original units) in a 0-based year.

    Returns:
        (probability per cell, population proportion summary, area proportion summary)
    """
    _check_projector(projector, raster)
    _check_weights(raster.weights, raster.n_cells)
    values = back_transform(cell_values(model, ensemble, projector, year, include_iid, rng))
    probability, population, area = exceedance_draws(values, raster.weights, threshold)
    return probability, summarize(population), summarize(area)


def _check_projector(projector, raster):
    rows = _matrix(projector).shape[0]
    if rows != raster.n_cells:
        raise ExposureError(f"projector has {rows} rows for {raster.n_cells} raster cells")


@dataclass
class ExposureSeries:
    table: pd.DataFrame
    cells: pd.DataFrame

    def validate(self):
        t = self.table
        for prefix in ("", "exceed_", "area_"):
            if (t[f"{prefix}q025"] > t[f"{prefix}q975"]).any():
                raise ExposureError(f"{prefix or 'mean '}interval is inverted")
        # a proportion mean may sit above a zero q975 when exceedances are rare
        lower, mean, upper = (t[k].to_numpy() for k in ("q025", "mean", "q975"))
        outside = ((mean < lower) | (mean > upper)) & ~(np.isclose(mean, lower) | np.isclose(mean, upper))
        if outside.any():
            raise ExposureError("population-mean exposure lies outside its 95% interval")
        for prefix in ("exceed_", "area_"):
            cols = t[[f"{prefix}mean", f"{prefix}q025", f"{prefix}q975"]]
            if ((cols < 0) | (cols > 1)).any().any():
                raise ExposureError(f"{prefix.rstrip('_')} proportions leave [0, 1]")
        return self


def exposure_series(model, ensemble, raster, projector, years, threshold, back_transform, include_iid=True, seed=0):
    """
    Yearly population-mean exposure and exceedance summaries for calendar ``years``.

    One random stream per year is spawned from ``seed`` for the per-cell site effects.
    """
    _check_projector(projector, raster)
    _check_weights(raster.weights, raster.n_cells)
    fitted = [int(y) for y in model.years]
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(years))]
    rows, cells = [], []
    for year, rng in zip(years, rngs):
        if year not in fitted:
            raise ExposureError(f"year {year} is not one of the fitted years {fitted[0]}..{fitted[-1]}")
        j = fitted.index(year)
        values = back_transform(cell_values(model, ensemble, projector, j, include_iid, rng))
        mean = summarize(weighted_mean_draws(values, raster.weights))
        probability, population, area = exceedance_draws(values, raster.weights, threshold)
        rows.append(
            {
                "year": year,
                **mean,
                **{f"exceed_{k}": v for k, v in summarize(population).items()},
                **{f"area_{k}": v for k, v in summarize(area).items()},
                "threshold": threshold,
                "include_iid": include_iid,
            }
        )
        cells.append(
            pd.DataFrame({"year": year, "x": raster.centroids[:, 0], "y": raster.centroids[:, 1], "probability": probability})
        )
        log.debug(f"{year}: population mean {mean['mean']:.4g}")
    return ExposureSeries(table=pd.DataFrame(rows), cells=pd.concat(cells, ignore_index=True)).validate()
