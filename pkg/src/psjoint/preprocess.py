"""Data cleaning transforms, site tables from raw tables, and pseudo-site populations."""

from dataclasses import asdict, dataclass
import logging

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import Polygon

from .exceptions import PreprocessError
from .mesh import DomainPolygon, build_mesh
from .model import SiteTable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Constants:
    """Everything needed to move between raw and model units."""

    global_mean: float
    coord_scale: float
    year_min: int
    year_max: int

    def transform(self, values):
        return np.log(np.asarray(values, dtype=float) / self.global_mean)

    def back_transform(self, y):
        return self.global_mean * np.exp(np.asarray(y, dtype=float))

    def scale(self, coordinates):
        return np.asarray(coordinates, dtype=float) / self.coord_scale

    def t_star(self, years):
        return (np.asarray(years, dtype=float) - self.year_min) / (self.year_max - self.year_min)

    def to_dict(self):
        return {k: (int(v) if k.startswith("year") else float(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def identity(cls, years):
        years = np.asarray(years)
        return cls(global_mean=1.0, coord_scale=1.0, year_min=int(years.min()), year_max=int(years.max()))


@dataclass(frozen=True)
class PreprocessedData:
    y: np.ndarray
    coordinates: np.ndarray
    t_star: np.ndarray


def preprocess(values, eastings, northings, years, record_ids=None):
    """
    y = log(value / mean), coordinates divided by the sd of the eastings, years mapped to [0, 1].

    The standard deviation uses ``ddof=1``.
    """
    values = np.asarray(values, dtype=float)
    bad = np.flatnonzero(~(values > 0))
    if len(bad):
        record = record_ids[bad[0]] if record_ids is not None else bad[0]
        raise PreprocessError(f"value {values[bad[0]]} of record {record} is not positive")
    eastings = np.asarray(eastings, dtype=float)
    if len(np.unique(eastings)) < 2:
        raise PreprocessError("need at least two distinct eastings to scale coordinates")
    years = np.asarray(years)
    if len(np.unique(years)) < 2:
        raise PreprocessError("need at least two distinct years to rescale time")

    constants = Constants(
        global_mean=float(values.mean()),
        coord_scale=float(np.std(eastings, ddof=1)),
        year_min=int(years.min()),
        year_max=int(years.max()),
    )
    coordinates = constants.scale(np.column_stack([eastings, np.asarray(northings, dtype=float)]))
    data = PreprocessedData(y=constants.transform(values), coordinates=coordinates, t_star=constants.t_star(years))
    return data, constants


def site_table_from_frames(
    sites, observations, min_capture=0.75, capture_column="capture", selected_column="selected", covariates=()
):
    """
    Build the observed-site table from ``site_id,easting,northing`` and ``site_id,year,value`` frames.

    A (site, year) is operational when the optional boolean ``selected_column`` says so;
    otherwise when its capture fraction reaches ``min_capture``; otherwise when it has a value.
    An operational year may lack a value; it then only enters the selection process.
    """
    obs = observations.copy()
    missing = [c for c in covariates if c not in sites.columns]
    if missing:
        raise PreprocessError(f"sites table lacks the covariate columns {missing}")
    unknown = set(obs["site_id"]) - set(sites["site_id"])
    if unknown:
        raise PreprocessError(f"observations reference unknown sites: {sorted(unknown)[:5]}")
    if selected_column in obs:
        selected = obs[selected_column].astype(bool).to_numpy()
    elif capture_column in obs:
        selected = (obs[capture_column].to_numpy(dtype=float) >= min_capture)
    else:
        selected = obs["value"].notna().to_numpy()
    obs["selected"] = selected

    valued = obs[obs["value"].notna()]
    years = np.arange(int(obs["year"].min()), int(obs["year"].max()) + 1)
    _, constants = preprocess(
        valued["value"].to_numpy(),
        sites["easting"].to_numpy(),
        sites["northing"].to_numpy(),
        years,
        record_ids=[f"site {s} year {y}" for s, y in zip(valued["site_id"], valued["year"])],
    )

    ever = obs.groupby("site_id")["selected"].any()
    keep = sites[sites["site_id"].map(ever).fillna(False).astype(bool)].reset_index(drop=True)
    dropped = len(sites) - len(keep)
    if dropped:
        log.warning(f"dropping {dropped} sites that are never operational")

    row = {sid: k for k, sid in enumerate(keep["site_id"])}
    M, N = len(keep), len(years)
    r = np.zeros((M, N), dtype=np.int8)
    y = np.full((M, N), np.nan)
    used = obs[obs["selected"] & obs["site_id"].isin(row.keys())]
    i = used["site_id"].map(row).to_numpy()
    j = used["year"].to_numpy() - years[0]
    r[i, j] = 1
    y[i, j] = constants.transform(used["value"].to_numpy())

    table = SiteTable(
        site_id=keep["site_id"].to_numpy(),
        locations=constants.scale(keep[["easting", "northing"]].to_numpy()),
        pseudo=np.zeros(M, dtype=bool),
        r=r,
        y=y,
        years=years,
        t_star=constants.t_star(years),
        covariates={c: keep[c].to_numpy(dtype=float) for c in covariates},
    )
    log.info(f"site table: {M} sites, {N} years, {int(r.sum())} operational site-years")
    return table, constants


def generate_pseudosites(domain, spacing=None, mesh=None, exclusions=()):
    """
    Near-uniform candidate locations that were never monitored.

    Args:
        domain: DomainPolygon
        spacing: target distance between pseudo-sites; None takes the vertices of ``mesh``
            inside the domain
        mesh: Mesh to reuse when ``spacing`` is None
        exclusions: rings (or DomainPolygons) inside which no pseudo-site may lie

    Returns:
        (n, 2) array of coordinates
    """
    if spacing is None:
        if mesh is None:
            raise PreprocessError("either a spacing or a mesh is needed for pseudo-sites")
        points = mesh.vertices[mesh.domain_vertices]
    else:
        if spacing <= 0:
            raise PreprocessError(f"pseudo-site spacing must be positive, got {spacing}")
        if spacing > domain.extent:
            raise PreprocessError(f"pseudo-site spacing {spacing} exceeds the domain extent {domain.extent:.4g}")
        grid = build_mesh(domain, 0.8 * spacing, 1.2 * spacing, min_angle=25.0, extension=False)
        points = grid.vertices[grid.domain_vertices]

    for ring in exclusions:
        polygon = ring.polygon if isinstance(ring, DomainPolygon) else Polygon(ring)
        points = points[~shapely.intersects_xy(polygon, points[:, 0], points[:, 1])]
    if len(points) == 0:
        raise PreprocessError("no pseudo-sites left after applying the exclusion polygons")
    return points


def frame_from_site_table(sites, constants=None):
    """Long (site_id, year, value, selected) frame of a site table in raw units."""
    i, j = np.nonzero(np.ones_like(sites.r, dtype=bool))
    values = sites.y[i, j]
    if constants is not None:
        values = np.where(np.isfinite(values), constants.back_transform(np.nan_to_num(values)), np.nan)
    return pd.DataFrame(
        {
            "site_id": sites.site_id[i],
            "year": sites.years[j],
            "value": values,
            "selected": sites.r[i, j].astype(bool),
        }
    )
