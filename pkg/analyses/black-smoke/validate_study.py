# Compare the tables written by `psjoint study` with the acceptance ranges in a reference file.
# Reference files for the three study configs in this directory are available in `reference/`.

from __future__ import annotations
import argparse
from collections import defaultdict
import json
import math
import os
import sys

import numpy as np

from psjoint.config import RunConfig
from psjoint.file_input import read_table
from psjoint.simulate import SimConfig, StudyReport, paired_comparison


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser()
    parser.add_argument("--study", help="directory written by `psjoint study`. Defaults to the output directory of --config.")
    parser.add_argument("--config", help="study config the tables were produced with", required=True)
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--reference", help="JSON file with [lower, upper] ranges the study results must fall into")
    group.add_argument("--dump-json", help="Print the checked quantities as JSON to screen", action="store_true")
    parser.add_argument("--verbose", help="Print every checked quantity, not only the failures", action="store_true")
    return parser.parse_args()


def load_report(directory: str, run_config: RunConfig) -> StudyReport:
    def table(name):
        return read_table(os.path.join(directory, f"{name}.csv"), name)

    return StudyReport(
        replicates=table("replicates"),
        trajectories=table("trajectories"),
        config=SimConfig.from_config(run_config),
        max_failure_rate=run_config["study"]["MAX_FAILURE_RATE"],
    )


# flatten a study report to a JSON-compatible dict with structure:
# { "summary": { "<implementation>": { "<column>": value, ... } }, "paired": { "<a>-<b>": {...} },
#   "p2_below_p1": { "<implementation>": fraction } }
def as_dict(report: StudyReport) -> dict[str, dict]:
    out = defaultdict(dict)
    for row in report.summary().to_dict(orient="records"):
        implementation = str(int(row.pop("implementation")))
        # bias in units of its Monte Carlo standard error, for checks against zero
        for d in ("d_b", "d_beta"):
            mcse = row.get(f"{d}_mcse", np.nan)
            row[f"{d}_bias_in_mcse"] = row[f"{d}_bias"] / mcse if mcse and np.isfinite(mcse) else np.nan
        out["summary"][implementation] = row

    implementations = sorted(report.replicates["implementation"].unique())
    for a in implementations:
        for b in implementations:
            if a < b:
                out["paired"][f"{a}-{b}"] = paired_comparison(report, a, b)

    ok = report.replicates[report.replicates["status"] == "ok"]
    for implementation, group in ok.groupby("implementation"):
        if "p2_minus_p1" in group:
            out["p2_below_p1"][str(int(implementation))] = float((group["p2_minus_p1"] < 0).mean())
    return out


def _check(name: str, value, bounds: list[float], verbose: bool) -> str | None:
    lower, upper = bounds
    if value is None or not math.isfinite(value):
        return f"{name}: no value (got {value})"
    if not lower <= value <= upper:
        return f"{name}: {value:.4g} outside [{lower}, {upper}]"
    if verbose:
        print(f"{name}: {value:.4g} within [{lower}, {upper}]")
    return None


def validate(results: dict, reference: dict, verbose=False) -> dict[str, list[str]]:
    errors = defaultdict(list)
    for group in ("summary", "paired"):
        for key, ranges in reference.get(group, {}).items():
            if key not in results.get(group, {}):
                errors[f"{group} {key}"].append("Not found in the study tables.")
                continue
            for column, bounds in ranges.items():
                message = _check(column, results[group][key].get(column), bounds, verbose)
                if message is not None:
                    errors[f"{group} {key}"].append(message)

    for implementation, bounds in reference.get("p2_below_p1", {}).items():
        message = _check("fraction of replicates with P2 mean below P1 mean", results.get("p2_below_p1", {}).get(implementation), bounds, verbose)
        if message is not None:
            errors[f"implementation {implementation}"].append(message)

    return errors


if __name__ == "__main__":
    args = parse_args()
    run_config = RunConfig.load(args.config)
    directory = args.study or run_config.resolve(run_config["output"]["DIRECTORY"])
    results = as_dict(load_report(directory, run_config))

    if args.dump_json:
        # numpy scalars serialize through .item()
        print(json.dumps(results, indent=2, sort_keys=True, default=lambda v: v.item()))
        sys.exit(0)

    with open(args.reference) as reference:
        ref_ranges = json.load(reference)

    print(f"Validating '{directory}' against reference '{args.reference}'...")
    errs = validate(results=results, reference=ref_ranges, verbose=args.verbose)
    if len(errs) == 0:
        print("All good!")
    else:
        for name, errors in errs.items():
            errors = "\n\t".join(errors)
            print(f"{name}\n\t{errors}")
        sys.exit(1)
