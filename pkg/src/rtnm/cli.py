"""Command-line interface.

Stages communicate through files only: ``match`` writes a design from
covariates and adoption times (it refuses a schema that names an outcome
column), ``estimate`` adds outcomes, ``infer`` and ``test`` work from the
estimate artifact alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import artifacts as art
from .bootstrap import CovarianceEstimate, bootstrap_covariance
from .distance import DistanceSpec
from .errors import IndexMismatch, RTNMError, SchemaError
from .estimate import ADJUSTMENTS, AttVector, estimate_att
from .homogeneity import build_hypothesis, standard_hypotheses, wald_test
from .matching import MatchBounds
from .nested import NestedDesign, run_rtnm, verify_nested
from .panel import Schema, balance_report, format_cohort, load_panel, write_panel
from .simulate import DgpConfig, simulate
from .study import StudySettings, run_study

log = logging.getLogger("rtnm")


def parse_cohorts(text: str | None) -> list[int] | None:
    """``"1..4"`` or ``"1,2,3"``."""
    if text is None:
        return None
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x.strip()]


def _load_schema(path: str | None) -> Schema:
    if path is None:
        return Schema(outcome=None)
    with open(path, encoding="utf-8") as fh:
        return Schema.from_mapping(json.load(fh))


def _write_artifact(kind: str, payload: dict, manifest: dict, out: str, extra_outputs=()) -> None:
    art.write_json(art.artifact(kind, payload, manifest), out)
    art.write_manifest(manifest, [out, *extra_outputs], art.manifest_path(out))


def _emit(obj) -> None:
    sys.stdout.write(art.dumps(obj))


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    schema = _load_schema(args.schema)
    data = load_panel(args.input, schema)
    cohorts = data.cohorts()
    sizes = {format_cohort(g): int(np.sum(data.adoption == g)) for g in cohorts}
    sizes["inf"] = int(np.sum(np.isinf(data.adoption)))
    _emit({
        "status": "ok",
        "n_units": data.n_units,
        "t0": data.t0,
        "t_max": data.t_max,
        "covariates": list(data.covariate_names),
        "cohort_sizes": sizes,
        "has_outcomes": data.outcomes is not None,
    })
    return 0


def _bounds(args) -> MatchBounds:
    max_ratio = math.inf if args.max_ratio is None else args.max_ratio
    size = None if args.max_stratum_size in (None, 0) else args.max_stratum_size
    return MatchBounds(min_ratio=args.min_ratio, max_ratio=max_ratio, max_stratum_size=size)


def cmd_match(args) -> int:
    schema = _load_schema(args.schema)
    if schema.outcome is not None:
        raise SchemaError(
            "match builds the design without outcomes; remove the 'outcome' role from the schema"
        )
    data = load_panel(args.input, schema)
    spec = DistanceSpec(args.metric, args.ridge)
    design = run_rtnm(data, parse_cohorts(args.cohorts), spec, _bounds(args), seed=args.seed)
    diag = verify_nested(design)
    settings = {"design": design.config, "config_hash": design.config_hash()}
    manifest = art.run_manifest("match", settings, {"input": args.input, **({"schema": args.schema} if args.schema else {})})
    payload = design.to_dict()
    payload["kind"] = "design"
    payload["diagnostics"] = {"ok": diag.ok, "violations": [vars(v) for v in diag.violations]}
    extra = []
    if args.balance:
        art.write_csv(balance_report(data, design).table, args.balance)
        extra.append(args.balance)
    art.write_json({**payload, "manifest": manifest}, args.out)
    art.write_manifest(manifest, [args.out, *extra], art.manifest_path(args.out))
    if not diag.ok:
        log.error("nested design has %d violation(s): %s", len(diag.violations), diag.summary())
        return 3
    return 0


def _load_design(path: str) -> NestedDesign:
    return NestedDesign.from_dict(art.read_json(path, "design"))


def cmd_estimate(args) -> int:
    schema = _load_schema(args.schema)
    if schema.outcome is None:
        schema = Schema.from_mapping({**schema.to_mapping(), "outcome": args.outcome})
    data = load_panel(args.input, schema)
    design = _load_design(args.design)
    att = estimate_att(data, design, adjust=args.adjust)
    inputs = {"input": args.input, "design": args.design}
    manifest = art.run_manifest("estimate", {"adjust": args.adjust}, inputs)
    extra = []
    if args.csv:
        art.write_csv(art.estimates_frame(att), args.csv)
        extra.append(args.csv)
    _write_artifact("estimate", {"estimate": att.to_dict()}, manifest, args.out, extra)
    return 0


def _load_estimate(path: str) -> AttVector:
    return AttVector.from_dict(art.read_json(path, "estimate")["estimate"])


def _load_sigma(path: str) -> CovarianceEstimate:
    return CovarianceEstimate.from_dict(art.read_json(path, "covariance")["covariance"])


def _check_design(att: AttVector, design_path: str | None) -> None:
    if design_path is None:
        return
    design = _load_design(design_path)
    if tuple(s.id for s in design.outermost) != att.block_ids:
        raise IndexMismatch("estimate blocks do not match the outermost strata of the design")


def cmd_infer(args) -> int:
    att = _load_estimate(args.estimate)
    _check_design(att, args.design)
    sigma = bootstrap_covariance(att, args.boot, args.seed, threads=args.threads)
    inputs = {"estimate": args.estimate, **({"design": args.design} if args.design else {})}
    manifest = art.run_manifest("infer", {"boot": args.boot, "seed": args.seed}, inputs)
    extra = []
    if args.csv:
        art.write_csv(art.estimates_frame(att, sigma), args.csv)
        extra.append(args.csv)
    _write_artifact("covariance", {"covariance": sigma.to_dict()}, manifest, args.out, extra)
    return 0


def _hypotheses(args, att: AttVector):
    if args.family == "standard":
        return standard_hypotheses(att.index)
    if args.family == "custom":
        if args.contrast is None:
            raise SchemaError("--family custom needs --contrast R.json (a list of rows)")
        with open(args.contrast, encoding="utf-8") as fh:
            R = json.load(fh)
        return [build_hypothesis(att.index, "custom", R)]
    if args.param is None:
        raise SchemaError(f"--family {args.family} needs --param")
    return [build_hypothesis(att.index, args.family, args.param)]


def cmd_test(args) -> int:
    att = _load_estimate(args.estimate)
    _check_design(att, args.design)
    sigma = _load_sigma(args.sigma)
    results = [wald_test(att, sigma, h, args.boot, args.seed, threads=args.threads) for h in _hypotheses(args, att)]
    table = pd.DataFrame([
        {"hypothesis": r.label, "W_obs": r.W_obs, "F": r.F, "q": r.q, "p_value": r.p_value, "stars": r.stars}
        for r in results
    ])
    inputs = {"estimate": args.estimate, "sigma": args.sigma}
    settings = {"boot": args.boot, "seed": args.seed, "family": args.family, "param": args.param}
    manifest = art.run_manifest("test", settings, inputs)
    extra = []
    if args.csv:
        art.write_csv(table, args.csv)
        extra.append(args.csv)
    _write_artifact("test", {"tests": [r.to_dict() for r in results]}, manifest, args.out, extra)
    sys.stdout.write(table.to_string(index=False) + "\n")
    return 0


def cmd_report(args) -> int:
    att = _load_estimate(args.estimate)
    sigma = _load_sigma(args.sigma) if args.sigma else None
    if sigma is not None and sigma.index.pairs != att.index.pairs:
        raise IndexMismatch("covariance and estimate use different cell indexes")
    grid = art.report_grid(att, sigma)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.reset_index().to_csv(out, index=False, lineterminator="\n")
    text = art.grid_text(grid)
    if args.text:
        Path(args.text).write_text(text, encoding="utf-8", newline="\n")
    sys.stdout.write(text)
    return 0


def cmd_simulate(args) -> int:
    config = DgpConfig.load(args.config) if args.config else DgpConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for r in range(args.reps):
        sim = simulate(config.replace(seed=config.seed + r))
        panel_path = out / f"panel_r{r:03d}.csv"
        truth_path = out / f"truth_r{r:03d}.csv"
        write_panel(sim.data, panel_path)
        truth = pd.DataFrame({
            "g": [g for g, _ in sim.truth.index],
            "t": [t for _, t in sim.truth.index],
            "att": sim.truth.values,
        })
        art.write_csv(truth, truth_path)
        written += [panel_path, truth_path]
    schema_path = out / "schema.json"
    art.write_json({"schema_version": 1, "unit": "unit", "period": "period", "first_treated": "first_treated"}, schema_path)
    art.write_json({"schema_version": art.SCHEMA_VERSION, "kind": "dgp", **config.to_dict()}, out / "dgp.json")
    manifest = art.run_manifest("simulate", {"dgp": config.to_dict(), "reps": args.reps}, {})
    art.write_manifest(manifest, written + [schema_path, out / "dgp.json"], out / "manifest.json")
    return 0


def cmd_study(args) -> int:
    config = DgpConfig.load(args.config) if args.config else DgpConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    settings = StudySettings(
        spec=DistanceSpec(args.metric, args.ridge),
        bounds=_bounds(args),
        adjust=args.adjust,
        B_cov=args.boot,
        B_test=args.test_boot or args.boot,
        tests=not args.no_tests,
    )
    result = run_study(config, args.reps, settings, workers=args.threads)
    report = result.report()
    art.write_csv(report, args.out)
    manifest = art.run_manifest(
        "study", {"dgp": config.to_dict(), "reps": args.reps, "settings": settings.to_dict()}, {}
    )
    art.write_manifest(manifest, [args.out], art.manifest_path(args.out))
    sys.stdout.write(f"bias ratio (matched / naive): {result.bias_ratio():.4f}\n")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_matching_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--metric", choices=("mahalanobis", "rank"), default="rank")
    p.add_argument("--ridge", type=float, default=None, help="covariance ridge (default 1e-6 * trace / dim)")
    p.add_argument("--max-stratum-size", type=int, default=10, help="0 removes the cap")
    p.add_argument("--min-ratio", type=int, default=1)
    p.add_argument("--max-ratio", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtnm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a long-format panel")
    p.add_argument("--input", required=True)
    p.add_argument("--schema")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("match", help="build the nested design (no outcomes read)")
    p.add_argument("--input", required=True)
    p.add_argument("--schema")
    p.add_argument("--cohorts", help="e.g. 1..4 (default: 1 to the last observed cohort)")
    _add_matching_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--balance", help="write the balance table to this CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("estimate", help="group-time effects from a design")
    p.add_argument("--input", required=True)
    p.add_argument("--schema")
    p.add_argument("--outcome", default="outcome", help="outcome column when the schema omits it")
    p.add_argument("--design", required=True)
    p.add_argument("--adjust", choices=ADJUSTMENTS, default="none")
    p.add_argument("--csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("infer", help="block-bootstrap covariance")
    p.add_argument("--estimate", required=True)
    p.add_argument("--design")
    p.add_argument("--boot", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv", help="write g,t,estimate,se,ci_lo,ci_hi,n_strata_used")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("test", help="bootstrap Wald homogeneity tests")
    p.add_argument("--estimate", required=True)
    p.add_argument("--design")
    p.add_argument("--sigma", required=True)
    p.add_argument("--family", choices=("fixed-cohort", "fixed-time", "fixed-lag", "custom", "standard"), required=True)
    p.add_argument("--param", type=int)
    p.add_argument("--contrast")
    p.add_argument("--boot", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("report", help="cohort x period table of estimates")
    p.add_argument("--estimate", required=True)
    p.add_argument("--sigma")
    p.add_argument("--text")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="write simulated panels and their true effects")
    p.add_argument("--config")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="replicated simulation study")
    p.add_argument("--config")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int)
    _add_matching_flags(p)
    p.set_defaults(max_stratum_size=0)
    p.add_argument("--adjust", choices=ADJUSTMENTS, default="none")
    p.add_argument("--boot", type=int, default=1000)
    p.add_argument("--test-boot", type=int)
    p.add_argument("--no-tests", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except RTNMError as exc:
        sys.stderr.write(art.dumps({
            "error": type(exc).__name__,
            "message": str(exc),
            "exit_code": exc.exit_code,
        }))
        return exc.exit_code
    except (ValueError, OSError) as exc:
        sys.stderr.write(art.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 2}))
        return 2


if __name__ == "__main__":
    sys.exit(main())
