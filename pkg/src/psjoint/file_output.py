"""Versioned CSV tables, mesh exports and fit-directory artifacts, all written atomically."""

import logging
import os
import tempfile

import numpy as np
import pandas as pd
from scipy import sparse
import yaml

log = logging.getLogger(__name__)

# major.minor per table kind; readers refuse other major versions
SCHEMA_VERSIONS = {
    "sites": (1, 0),
    "observations": (1, 0),
    "layout": (1, 0),
    "years": (1, 0),
    "theta": (1, 0),
    "latent": (1, 0),
    "trace": (1, 0),
    "ensemble": (1, 0),
    "coo": (1, 0),
    "mesh": (1, 0),
    "replicates": (1, 0),
    "summary": (1, 0),
    "trajectories": (1, 0),
    "prediction": (1, 0),
    "exposure": (1, 0),
    "exceedance": (1, 0),
    "convergence": (1, 0),
}
FLOAT_FORMAT = "%.10g"


def header(kind):
    major, minor = SCHEMA_VERSIONS[kind]
    return f"# psjoint {kind} v{major}.{minor}\n"


def atomic_write(path, text):
    """Write ``text`` to a temporary file next to ``path`` and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_table(df, path, kind):
    atomic_write(path, header(kind) + df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))
    log.debug(f"wrote {len(df)} rows to {path}")


def write_yaml(data, path):
    atomic_write(path, yaml.safe_dump(data, sort_keys=False))


def export_mesh(mesh, path):
    """Text dump of vertices, triangles and domain rings that ``file_input.read_mesh`` reads back."""
    lines = [
        header("mesh").rstrip("\n"),
        f"min_edge {mesh.min_edge!r}",
        f"max_edge {mesh.max_edge!r}",
        f"min_angle {mesh.min_angle!r}",
        f"vertices {mesh.n_vertices}",
    ]
    lines += [f"{float(x)!r} {float(y)!r} {int(b)}" for (x, y), b in zip(mesh.vertices, mesh.boundary_flags)]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {j} {k} {int(d)}" for (i, j, k), d in zip(mesh.triangles, mesh.domain_triangles)]
    rings = [mesh.domain.boundary, *mesh.domain.holes]
    lines.append(f"rings {len(rings)}")
    for ring in rings:
        lines.append(f"ring {len(ring)}")
        lines += [f"{float(x)!r} {float(y)!r}" for x, y in ring]
    atomic_write(path, "\n".join(lines) + "\n")


def dump_coo(matrix, path):
    """Sparse matrix as (row, col, value) triplets."""
    coo = sparse.coo_matrix(matrix)
    df = pd.DataFrame({"row": coo.row, "col": coo.col, "value": coo.data})
    atomic_write(path, header("coo") + f"# shape {coo.shape[0]} {coo.shape[1]}\n" + df.to_csv(index=False, float_format="%.17g", lineterminator="\n"))


def write_site_table(sites, directory, constants=None):
    """``sites.csv`` (site_id, easting, northing, pseudo) and ``observations.csv`` in original units."""
    from .preprocess import frame_from_site_table

    scale = constants.coord_scale if constants is not None else 1.0
    frame = pd.DataFrame(
        {
            "site_id": sites.site_id,
            "easting": sites.locations[:, 0] * scale,
            "northing": sites.locations[:, 1] * scale,
            "pseudo": sites.pseudo,
        }
    )
    write_table(frame, os.path.join(directory, "sites.csv"), "sites")
    write_table(frame_from_site_table(sites, constants), os.path.join(directory, "observations.csv"), "observations")


def write_fit_dir(directory, run_config, constants, fit, ensemble=None):
    """All artifacts ``predict`` and ``exposure`` need to work from a finished fit."""
    os.makedirs(directory, exist_ok=True)
    run_config.resolved().save(os.path.join(directory, "run_config.yml"))
    write_yaml(constants.to_dict(), os.path.join(directory, "constants.yml"))
    export_mesh(fit.assembled.fem.mesh, os.path.join(directory, "mesh.txt"))
    write_table(fit.layout.table(), os.path.join(directory, "layout.csv"), "layout")
    write_table(fit.theta_table(), os.path.join(directory, "theta.csv"), "theta")

    names = np.empty(fit.x_mode.size, dtype=object)
    index = np.empty(fit.x_mode.size, dtype=int)
    for block in fit.layout.blocks:
        names[block.slice] = block.name
        index[block.slice] = np.arange(block.size)
    latent = pd.DataFrame({"block": names, "index": index, "mode": fit.x_mode})
    write_table(latent, os.path.join(directory, "latent.csv"), "latent")
    write_table(fit.trace, os.path.join(directory, "trace.csv"), "trace")
    years = pd.DataFrame({"year": fit.assembled.years, "t_star": fit.assembled.t_star})
    write_table(years, os.path.join(directory, "years.csv"), "years")
    if ensemble is not None:
        draws = pd.DataFrame(ensemble.draws, columns=[f"x{k}" for k in range(ensemble.draws.shape[1])])
        draws.insert(0, "draw", np.arange(ensemble.n_draws))
        write_table(draws, os.path.join(directory, "ensemble.csv"), "ensemble")
    log.info(f"fit artifacts written to {directory}")


def write_study(report, directory):
    os.makedirs(directory, exist_ok=True)
    write_table(report.replicates, os.path.join(directory, "replicates.csv"), "replicates")
    write_table(report.summary(), os.path.join(directory, "summary.csv"), "summary")
    write_table(report.trajectories, os.path.join(directory, "trajectories.csv"), "trajectories")


def write_exposure(series, directory):
    os.makedirs(directory, exist_ok=True)
    write_table(series.table, os.path.join(directory, "exposure.csv"), "exposure")
    write_table(series.cells, os.path.join(directory, "exceedance.csv"), "exceedance")
