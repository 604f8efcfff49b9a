"""Command-line entry point: fit, simulate, study, predict, exposure and convergence-check."""

import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd
import shapely
from shapely.geometry import MultiPoint

from . import set_logging
from .clients import get_executor
from .config import RunConfig
from .exceptions import ConfigError, PreprocessError, PsjointError, StudyError
from .exposure import exposure_series
from .file_input import read_fit_dir, read_observations, read_polygon, read_raster, read_sites
from .file_output import write_exposure, write_fit_dir, write_site_table, write_study, write_table
from .inference import fit_options, optimize_hyperparameters, sample_posterior
from .mesh import DomainPolygon, build_mesh, projector
from .model import Hyperparameters, JointModelSpec, assemble
from .preprocess import generate_pseudosites, site_table_from_frames
from .simulate import SimConfig, poisson_convergence_table, run_study, simulate_field, simulate_selection
from .spde import fem_matrices

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2
EXIT_USAGE = 64
EXIT_CONFIG = 65


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_dir(args, run_config):
    if args.output is not None:
        return args.output
    return run_config.resolve(run_config["output"]["DIRECTORY"])


def _domain(run_config, sites, constants, max_edge):
    path = run_config.input_path("DOMAIN")
    if path is not None:
        return read_polygon(path, scale=constants.coord_scale)
    # without a domain file: the convex hull of the sites, padded by one edge length
    hull = MultiPoint(sites.locations).convex_hull.buffer(max_edge, join_style=2)
    log.warning("no domain file given, using the padded convex hull of the sites")
    return DomainPolygon(np.asarray(hull.exterior.coords))


def _initial_theta(run_config, scale):
    values = dict(run_config["model"]["INITIAL_THETA"])
    for key in values:
        if key.startswith("range_"):
            values[key] = values[key] / scale
    try:
        return Hyperparameters(**values)
    except TypeError as err:
        raise ConfigError(f"model.INITIAL_THETA: {err}") from err


def cmd_fit(args):
    run_config = RunConfig.load(args.config)
    inputs = run_config["input"]
    model = run_config["model"]
    if run_config.input_path("SITES") is None or run_config.input_path("OBSERVATIONS") is None:
        raise ConfigError("fit needs input.SITES and input.OBSERVATIONS")
    sites, constants = site_table_from_frames(
        read_sites(run_config.input_path("SITES")),
        read_observations(run_config.input_path("OBSERVATIONS")),
        min_capture=inputs["MIN_CAPTURE"],
        capture_column=inputs["CAPTURE_COLUMN"],
        selected_column=inputs["SELECTED_COLUMN"],
        covariates=model["SEL_COVARIATES"],
    )
    scale = constants.coord_scale
    mesh_settings = run_config["mesh"]
    max_edge = mesh_settings["MAX_EDGE"] / scale
    domain = _domain(run_config, sites, constants, max_edge)
    mesh = build_mesh(domain, mesh_settings["MIN_EDGE"] / scale, max_edge, mesh_settings["MIN_ANGLE"], mesh_settings["EXTENSION"])

    if model["POPULATION"] == "P2":
        if model["SEL_COVARIATES"]:
            raise PreprocessError("selection covariates are not available at pseudo-sites")
        spacing = model["PSEUDOSITE_SPACING"]
        pseudo = generate_pseudosites(domain, spacing=None if spacing is None else spacing / scale, mesh=mesh)
        sites = sites.with_pseudosites(pseudo)
        log.info(f"added {len(pseudo)} pseudo-sites")

    spec = JointModelSpec.from_config(run_config, coord_scale=scale)
    assembled = assemble(spec, sites, fem_matrices(mesh), theta=_initial_theta(run_config, scale))
    fit = optimize_hyperparameters(assembled, **fit_options(run_config["optimizer"]))
    sampling = run_config["sampling"]
    ensemble = sample_posterior(
        fit, sampling["N_DRAWS"], seed=run_config["global"]["SEED"], chunk_size=sampling["CHUNK_SIZE"], progress=not args.quiet
    )
    write_fit_dir(_output_dir(args, run_config), run_config, constants, fit, ensemble)
    print(fit.theta_table().to_string(index=False))
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def cmd_simulate(args):
    run_config = RunConfig.load(args.config)
    config = SimConfig.from_config(run_config)
    field = simulate_field(config)
    sites = simulate_selection(config, field)
    write_site_table(sites, _output_dir(args, run_config))
    log.info(f"simulated {int(sites.observed.sum())} monitored sites, mean lifetime {sites.mean_lifetime():.2f} years")
    return EXIT_OK


def cmd_study(args):
    run_config = RunConfig.load(args.config)
    config = SimConfig.from_config(run_config)
    study = run_config["study"]
    settings = run_config["global"]
    output = _output_dir(args, run_config)
    executor = get_executor(settings["EXECUTOR"], settings["N_WORKERS"])
    try:
        report = run_study(
            config,
            n_replicates=args.replicates or study["N_REPLICATES"],
            implementations=study["IMPLEMENTATIONS"],
            n_draws=study["N_DRAWS"],
            fit_kwargs=fit_options(run_config["optimizer"]),
            executor=executor,
            max_failure_rate=study["MAX_FAILURE_RATE"],
            progress=not args.quiet,
        )
    except StudyError as err:
        if err.report is not None:
            write_study(err.report, output)
        raise
    finally:
        executor.shutdown()
    write_study(report, output)
    print(report.summary().to_string(index=False))
    return EXIT_OK


def cmd_predict(args):
    stored = read_fit_dir(args.fit_dir)
    constants = stored.constants
    spacing = args.grid / constants.coord_scale
    xmin, ymin, xmax, ymax = stored.mesh.domain.polygon.bounds
    gx, gy = np.meshgrid(np.arange(xmin, xmax + 0.5 * spacing, spacing), np.arange(ymin, ymax + 0.5 * spacing, spacing))
    points = np.column_stack([gx.ravel(), gy.ravel()])
    proj = projector(stored.mesh, points)
    inside = proj.inside & shapely.intersects_xy(stored.mesh.domain.polygon, points[:, 0], points[:, 1])
    points, A = points[inside], proj.A[inside]

    frames = []
    for j, year in enumerate(stored.years):
        design = stored.field_design(A, float(stored.t_star[j]))
        mean = design @ stored.x_mode
        sd = (stored.draws @ design.T.toarray()).std(axis=0, ddof=1) if stored.draws is not None else np.full(len(mean), np.nan)
        frames.append(
            pd.DataFrame(
                {
                    "year": year,
                    "easting": points[:, 0] * constants.coord_scale,
                    "northing": points[:, 1] * constants.coord_scale,
                    "mean": mean,
                    "sd": sd,
                    "value": constants.back_transform(mean),
                }
            )
        )
    output = args.output or os.path.join(args.fit_dir, "prediction.csv")
    write_table(pd.concat(frames, ignore_index=True), output, "prediction")
    log.info(f"wrote predictions at {len(points)} grid points for {len(stored.years)} years to {output}")
    return EXIT_OK


def cmd_exposure(args):
    stored = read_fit_dir(args.fit_dir)
    settings = stored.run_config["exposure"]
    raster = read_raster(args.raster, stored.constants)
    proj = projector(stored.mesh, raster.centroids)
    if proj.n_outside:
        log.warning(f"dropping {proj.n_outside} raster cells outside the mesh")
        raster = type(raster)(raster.centroids[proj.inside], raster.weights[proj.inside])
    raster = raster.normalized()
    threshold = settings["THRESHOLD"] if args.threshold is None else args.threshold
    include_iid = settings["INCLUDE_IID"] and not args.exclude_iid
    series = exposure_series(
        stored,
        stored.ensemble(),
        raster,
        proj.A[proj.inside],
        args.years or [int(y) for y in stored.years],
        threshold,
        stored.constants.back_transform,
        include_iid=include_iid,
        seed=stored.run_config["global"]["SEED"],
    )
    write_exposure(series, args.output or args.fit_dir)
    print(series.table.to_string(index=False))
    return EXIT_OK


def cmd_convergence_check(args):
    run_config = RunConfig.load(args.config)
    section = run_config["convergence"]
    if args.spacings:
        section["SPACINGS"] = args.spacings
    table = poisson_convergence_table(section, seed=run_config["global"]["SEED"])
    output = os.path.join(_output_dir(args, run_config), "convergence.csv")
    write_table(table, output, "convergence")
    print(table.to_string(index=False))
    return EXIT_OK


def build_parser():
    parser = ArgumentParser(prog="psjoint", description="Joint models of preferentially sampled monitoring networks")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="no progress bars")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("fit", help="fit the joint model to monitoring data")
    p.add_argument("config", help="YAML run config")
    p.add_argument("--output", help="fit directory, defaults to output.DIRECTORY")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="write one synthetic network")
    p.add_argument("config")
    p.add_argument("--output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="simulation study over replicated synthetic networks")
    p.add_argument("config")
    p.add_argument("--output")
    p.add_argument("--replicates", type=int, help="overrides study.N_REPLICATES")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("predict", help="per-year field mean/sd on a regular grid")
    p.add_argument("fit_dir")
    p.add_argument("--grid", type=float, required=True, help="grid spacing in original units")
    p.add_argument("--output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("exposure", help="population-weighted exposure and exceedance series")
    p.add_argument("fit_dir")
    p.add_argument("--raster", required=True, help="ESRI ASCII grid (.asc) or x,y,weight CSV")
    p.add_argument("--threshold", type=float, help="overrides exposure.THRESHOLD")
    p.add_argument("--years", type=int, nargs="+")
    p.add_argument("--exclude-iid", action="store_true", help="leave out per-cell site effects")
    p.add_argument("--output")
    p.set_defaults(func=cmd_exposure)

    p = sub.add_parser("convergence-check", help="logistic slopes at decreasing pseudo-site spacings")
    p.add_argument("config")
    p.add_argument("--spacings", type=float, nargs="+")
    p.add_argument("--output")
    p.set_defaults(func=cmd_convergence_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    set_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except ConfigError as err:
        log.error(str(err))
        return EXIT_CONFIG
    except (PsjointError, OSError) as err:
        log.error(f"{type(err).__name__}: {err}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
