"""Readers for raw inputs, versioned tables and fit directories."""

from dataclasses import dataclass
from functools import cached_property
import logging
import os
import re

import numpy as np
import pandas as pd
from scipy import sparse
import yaml

from .config import RunConfig
from .exceptions import SchemaError
from .exposure import PopulationRaster
from .file_output import SCHEMA_VERSIONS
from .inference import PosteriorEnsemble
from .mesh import DomainPolygon, Mesh
from .model import Hyperparameters, LatentLayout, field_design
from .preprocess import Constants
from .spde import fem_matrices

log = logging.getLogger(__name__)

HEADER = re.compile(r"^# psjoint (\w+) v(\d+)\.(\d+)\s*$")


def read_header(path):
    """(kind, major, minor) of a psjoint table, None for a plain CSV."""
    with open(path) as f:
        first = f.readline()
    match = HEADER.match(first)
    if match is None:
        if first.startswith("# psjoint"):
            raise SchemaError(f"{path}: malformed header line {first.strip()!r}")
        return None
    kind, major, minor = match.groups()
    return kind, int(major), int(minor)


def read_table(path, kind, columns=(), require_header=True):
    """
    Read a CSV written by ``file_output.write_table``.

    Raw input files may omit the header line when ``require_header`` is False; a header
    that is present must name ``kind`` and a supported major version.
    """
    if not os.path.exists(path):
        raise SchemaError(f"{path}: file not found")
    found = read_header(path)
    if found is None:
        if require_header:
            raise SchemaError(f"{path}: missing '# psjoint {kind}' header line")
    else:
        found_kind, major, minor = found
        if found_kind != kind:
            raise SchemaError(f"{path}: expected a {kind} table, found {found_kind}")
        if major != SCHEMA_VERSIONS[kind][0]:
            raise SchemaError(f"{path}: unsupported {kind} schema v{major}.{minor}, this version reads v{SCHEMA_VERSIONS[kind][0]}.x")
    df = pd.read_csv(path, comment="#")
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    return df


def read_sites(path):
    return read_table(path, "sites", ("site_id", "easting", "northing"), require_header=False)


def read_observations(path):
    return read_table(path, "observations", ("site_id", "year", "value"), require_header=False)


def _rings(lines):
    rings, current = [], []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            if current:
                rings.append(current)
                current = []
            continue
        current.append([float(v) for v in line.replace(",", " ").split()])
    if current:
        rings.append(current)
    return rings


def read_polygon(path, scale=1.0):
    """
    Domain polygon file: blocks of ``x y`` lines separated by blank lines.

    The first block is the boundary, every later block a hole. Coordinates are divided
    by ``scale``.
    """
    with open(path) as f:
        rings = _rings(f)
    if not rings:
        raise SchemaError(f"{path}: no polygon rings found")
    rings = [np.asarray(r, dtype=float) / scale for r in rings]
    if any(r.ndim != 2 or r.shape[1] != 2 for r in rings):
        raise SchemaError(f"{path}: every polygon line needs exactly two coordinates")
    return DomainPolygon(rings[0], tuple(rings[1:])).validate()


def _read_ascii_grid(path):
    meta, n_header = {}, 0
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or not re.match(r"^[A-Za-z_]+$", parts[0]):
                break
            meta[parts[0].lower()] = float(parts[1])
            n_header += 1
    for key in ("ncols", "nrows", "cellsize"):
        if key not in meta:
            raise SchemaError(f"{path}: ASCII grid header lacks {key}")
    ncols, nrows, size = int(meta["ncols"]), int(meta["nrows"]), meta["cellsize"]
    values = np.loadtxt(path, skiprows=n_header, ndmin=2)
    if values.shape != (nrows, ncols):
        raise SchemaError(f"{path}: grid has shape {values.shape}, header says ({nrows}, {ncols})")
    if "xllcenter" in meta:
        x0, y0 = meta["xllcenter"], meta["yllcenter"]
    else:
        x0, y0 = meta["xllcorner"] + 0.5 * size, meta["yllcorner"] + 0.5 * size
    cols, rows = np.meshgrid(np.arange(ncols), np.arange(nrows))
    x = x0 + cols * size
    # first row is the northernmost
    y = y0 + (nrows - 1 - rows) * size
    valid = np.isfinite(values)
    if "nodata_value" in meta:
        valid &= values != meta["nodata_value"]
    return np.column_stack([x[valid], y[valid]]), values[valid]


def read_raster(path, constants=None):
    """
    Population raster from an ESRI ASCII grid (``.asc``) or an ``x,y,weight`` CSV.

    Cells without population are dropped; centroids are moved into the model frame with
    the stored coordinate scale. Weights are returned as read, not normalized.
    """
    if path.endswith(".asc"):
        centroids, weights = _read_ascii_grid(path)
    else:
        df = pd.read_csv(path, comment="#")
        missing = [c for c in ("x", "y", "weight") if c not in df.columns]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        centroids, weights = df[["x", "y"]].to_numpy(dtype=float), df["weight"].to_numpy(dtype=float)
    keep = weights > 0
    if not keep.any():
        raise SchemaError(f"{path}: raster has no populated cells")
    if constants is not None:
        centroids = constants.scale(centroids)
    log.info(f"read {int(keep.sum())} populated cells from {path}")
    return PopulationRaster(centroids[keep], weights[keep])


def read_mesh(path):
    """Mesh written by ``file_output.export_mesh``."""
    found = read_header(path)
    if found is None or found[0] != "mesh" or found[1] != SCHEMA_VERSIONS["mesh"][0]:
        raise SchemaError(f"{path}: not a supported psjoint mesh file")
    with open(path) as f:
        lines = [line.strip() for line in f][1:]

    settings = {}
    pos = 0
    while lines[pos].split()[0] in ("min_edge", "max_edge", "min_angle"):
        key, value = lines[pos].split()
        settings[key] = float(value)
        pos += 1

    def block(keyword):
        nonlocal pos
        key, count = lines[pos].split()
        if key != keyword:
            raise SchemaError(f"{path}: expected '{keyword}' at line {pos + 2}, found {key!r}")
        rows = [line.split() for line in lines[pos + 1 : pos + 1 + int(count)]]
        pos += 1 + int(count)
        return rows

    vertices = block("vertices")
    triangles = block("triangles")
    _, n_rings = lines[pos].split()
    pos += 1
    rings = [np.array(block("ring"), dtype=float) for _ in range(int(n_rings))]
    return Mesh(
        vertices=np.array([v[:2] for v in vertices], dtype=float),
        triangles=np.array([t[:3] for t in triangles], dtype=np.int64),
        boundary_flags=np.array([v[2] == "1" for v in vertices]),
        domain_triangles=np.array([t[3] == "1" for t in triangles]),
        domain=DomainPolygon(rings[0], tuple(rings[1:])),
        min_edge=settings["min_edge"],
        max_edge=settings["max_edge"],
        min_angle=settings["min_angle"],
    )


def read_coo(path):
    with open(path) as f:
        f.readline()
        shape = tuple(int(v) for v in f.readline().split()[2:4])
    df = read_table(path, "coo", ("row", "col", "value"))
    return sparse.coo_matrix((df["value"], (df["row"], df["col"])), shape=shape).tocsr()


@dataclass
class StoredFit:
    """A finished fit reloaded from its directory, enough to predict and integrate exposure."""

    run_config: RunConfig
    constants: Constants
    mesh: Mesh
    layout: LatentLayout
    theta: pd.DataFrame
    x_mode: np.ndarray
    years: np.ndarray
    t_star: np.ndarray
    draws: np.ndarray = None

    @cached_property
    def fem(self):
        return fem_matrices(self.mesh)

    @property
    def n_vertices(self):
        return self.mesh.n_vertices

    def field_design(self, points_projector, t_star, include_fixed=True):
        return field_design(self.layout, points_projector, t_star, include_fixed)

    def hyperparameters(self):
        return Hyperparameters(**dict(zip(self.theta["name"], self.theta["value"].astype(float))))

    def ensemble(self):
        if self.draws is None:
            raise SchemaError("the fit directory holds no posterior draws")
        return PosteriorEnsemble(draws=self.draws, theta=self.hyperparameters(), layout=self.layout)


def read_fit_dir(directory):
    def path(name):
        return os.path.join(directory, name)

    with open(path("constants.yml")) as f:
        constants = Constants.from_dict(yaml.safe_load(f))
    layout = LatentLayout.from_table(read_table(path("layout.csv"), "layout", ("block", "start", "size", "kind", "constrained")))
    latent = read_table(path("latent.csv"), "latent", ("block", "index", "mode"))
    years = read_table(path("years.csv"), "years", ("year", "t_star"))
    draws = None
    if os.path.exists(path("ensemble.csv")):
        draws = read_table(path("ensemble.csv"), "ensemble").drop(columns="draw").to_numpy(dtype=float)
        if draws.shape[1] != layout.size:
            raise SchemaError(f"{path('ensemble.csv')}: {draws.shape[1]} latent columns, layout has {layout.size}")
    return StoredFit(
        run_config=RunConfig.load(path("run_config.yml"), check_files=False),
        constants=constants,
        mesh=read_mesh(path("mesh.txt")),
        layout=layout,
        theta=read_table(path("theta.csv"), "theta", ("name", "value")),
        x_mode=latent["mode"].to_numpy(dtype=float),
        years=years["year"].to_numpy(),
        t_star=years["t_star"].to_numpy(dtype=float),
        draws=draws,
    )
