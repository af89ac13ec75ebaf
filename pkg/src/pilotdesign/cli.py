"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 design construction failed,
4 too many experiment cells failed, 5 file I/O or parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import criteria, data_io, design_gen, design_search, fpca_pace, sim_harness
from .design_gen import DesignSpec
from .errors import ConstructionFailed, ParseError, PilotDesignError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_CONSTRUCTION, EXIT_EXPERIMENT, EXIT_IO = 0, 2, 3, 4, 5
DEFAULT_THRESHOLDS = "0.99,0.97,0.95"

log = logging.getLogger("pilotdesign")


def _thresholds(text: str) -> tuple:
    try:
        values = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if not values or any(not 0 < t <= 1 for t in values):
        raise argparse.ArgumentTypeError("thresholds must lie in (0, 1]")
    return values


def _delta(text: str):
    if text == "auto":
        return "auto"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("delta must be a number or 'auto'") from None
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _design_indices(text: str, v: int) -> tuple:
    """Parse ``3-7-12`` (1-based grid labels) into sorted 0-based indices."""
    try:
        idx = sorted(int(x) - 1 for x in text.replace(",", "-").split("-") if x.strip())
    except ValueError:
        raise ValidationError(f"bad design {text!r}; use 1-based labels like 1-6-13") from None
    if not idx or idx[0] < 0 or idx[-1] >= v or len(set(idx)) != len(idx):
        raise ValidationError(f"design {text!r} must list distinct points in 1..{v}")
    return tuple(idx)


# ---------------------------------------------------------------------------
# commands

def cmd_design_generate(args) -> int:
    delta = 1.0 if args.delta == "auto" else args.delta
    spec = DesignSpec(args.subjects, args.grid, args.obs, args.snippet_frac, delta, args.gap,
                      args.seed)
    extra = {}
    if args.structure == "hybrid" and args.delta == "auto":
        design, used = design_gen.generate_hybrid_design_adaptive(spec, args.delta_step)
        spec = spec.replace(delta=used)
        extra["delta_used"] = used
    else:
        design = design_gen.generate_design(args.structure, spec)
    side = data_io.write_design(design, args.out, spec, **extra)
    print(f"wrote {args.out} and {side}")
    print(f"structure={design.structure_tag} n={design.n} v={design.v} K={design.K}"
          + (f" delta={spec.delta:g}" if args.structure == "hybrid" else ""))
    if spec.K >= 2 and spec.v >= 2:
        target = design_gen.compute_target_concurrence(spec)
        dev = design_gen.concurrence_deviations(design, spec)
        print(f"targets: c1={target.c1:.6g} c2={target.c2:.6g} c3={target.c3:.6g}")
        print("max deviation: " + " ".join(f"{k}={dev[k]:.6g}" for k in ("c1", "c2", "c3")))
    return EXIT_OK


def cmd_design_inspect(args) -> int:
    design, meta = data_io.read_design(args.path)
    C = design_gen.concurrence(design)
    print(f"structure={design.structure_tag} n={design.n} v={design.v} K={design.K} "
          f"snippet_rows={design.snippet_rows}")
    print(f"column counts: min={int(np.diag(C).min())} max={int(np.diag(C).max())}")
    off = C[np.triu_indices(design.v, 1)]
    if off.size:
        print(f"pair counts: min={int(off.min())} max={int(off.max())}")
    if "spec" in meta:
        spec = DesignSpec(**meta["spec"])
        if spec.n == design.n and spec.v == design.v and spec.K == design.K and spec.K >= 2:
            dev = design_gen.concurrence_deviations(design, spec)
            print("max deviation: " + " ".join(f"{k}={dev[k]:.6g}" for k in ("c1", "c2", "c3")))
            if design.structure_tag == "hybrid":
                checks = design_gen.check_hybrid_constraints(design, spec)
                for name, ok in checks.items():
                    print(f"  {name}: {'ok' if ok else 'VIOLATED'}")
    return EXIT_OK


def _sim_config(args) -> sim_harness.SimConfig:
    data = {}
    if getattr(args, "config", None):
        data = _load_json(args.config)
        data.pop("output_dir", None)
    return sim_harness.SimConfig.from_dict(data)


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    if args.seed is not None:
        cfg = sim_harness.SimConfig.from_dict({**cfg.to_dict(), "master_seed": args.seed})
    X, U = sim_harness.simulate_dataset(cfg, args.dataset_id, args.subjects)
    ids = tuple(str(i + 1) for i in range(args.subjects))
    if args.design:
        design, _ = data_io.read_design(args.design)
        if design.v != cfg.v:
            raise ValidationError("design grid size differs from the simulation grid")
        U = U.copy()
        mask = np.zeros_like(U, dtype=bool)
        mask[: design.n] = design.entries.astype(bool)
        U[~mask] = np.nan
        U, ids = U[: design.n], ids[: design.n]
    data_io.write_dense_csv(data_io.DenseDataset(ids, cfg.grid, U), args.out, args.layout)
    print(f"wrote {args.out}")
    if args.truth:
        data_io.write_dense_csv(data_io.DenseDataset(tuple(str(i + 1) for i in range(len(X))),
                                                     cfg.grid, X), args.truth, args.layout)
        print(f"wrote {args.truth}")
    return EXIT_OK


def _sparse_from_dense(dense: data_io.DenseDataset) -> fpca_pace.SparseDataset:
    subjects = []
    for row in dense.values:
        idx = np.flatnonzero(np.isfinite(row))
        if idx.size:
            subjects.append((idx, row[idx]))
    return fpca_pace.SparseDataset(dense.grid, tuple(subjects))


def _pace_options(args) -> fpca_pace.PaceOptions:
    return fpca_pace.PaceOptions(
        fve_threshold=args.fve, n_components=args.components,
        bandwidth_mean=args.bandwidth_mean, bandwidth_cov=args.bandwidth_cov,
        kernel=args.kernel, assume_noisy=not args.noiseless)


def cmd_fit(args) -> int:
    dense = data_io.ingest_dense_csv(args.data, args.layout)
    model = fpca_pace.fit_pace(_sparse_from_dense(dense), _pace_options(args))
    data_io.write_model(model, args.out)
    print(f"wrote {args.out}")
    print(f"M={model.M} fve={model.fve:.6g} sigma2={model.sigma2:.6g}")
    print("eigenvalues: " + " ".join(f"{x:.6g}" for x in model.eigenvalues))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = data_io.read_model(args.model)
    truth = data_io.read_model(args.true_model) if args.true_model else None
    for text in args.design:
        t = _design_indices(text, model.v)
        line = (f"design={criteria.format_design(t)} F={criteria.f_value(model, t):.12g} "
                f"MISE={criteria.mise(model, t):.12g}")
        if truth is not None:
            line += f" F_true={criteria.f_value(truth, t):.12g}"
        print(line)
    if truth is not None:
        K = args.obs or len(_design_indices(args.design[0], model.v))
        res = criteria.are(model, truth, K)
        print(f"ARE={res.are:.12g} t_opt={criteria.format_design(res.t_opt)} "
              f"t_star={criteria.format_design(res.t_star)}")
    return EXIT_OK


def cmd_search(args) -> int:
    model = data_io.read_model(args.model)
    method = design_search.SearchMethod(args.method, args.samples, args.seed)
    t, value = design_search.search_optimal(model, args.obs, method)
    print(f"optimum design={criteria.format_design(t)} F={value:.12g}")
    if args.true_model:
        truth = data_io.read_model(args.true_model)
        reports = design_search.threshold_analysis(model, truth, args.obs, args.thresholds)
        print("theta,set_size,t_worst,eff_true_worst,t_median,eff_true_median")
        for r in reports:
            print(f"{r.theta:g},{r.set_size},{criteria.format_design(r.t_worst)},"
                  f"{r.eff_true_worst:.6g},{criteria.format_design(r.t_median)},"
                  f"{r.eff_true_median:.6g}")
    return EXIT_OK


def _experiment_config(args) -> tuple[sim_harness.SimConfig, Path]:
    data = _load_json(args.config) if args.config else {}
    out = args.out or data.get("output_dir")
    data.pop("output_dir", None)
    if args.thresholds is not None:
        data["thresholds"] = list(args.thresholds)
    if out is None:
        raise ValidationError("no output directory: pass --out or set output_dir in the config")
    return sim_harness.SimConfig.from_dict(data), Path(out)


def _threads(args) -> int:
    return args.threads if args.threads is not None else sim_harness.default_threads()


def _finish_experiment(result, out: Path, plots: bool) -> int:
    written = data_io.write_experiment(result, out, plots)
    for p in written:
        print(f"wrote {p}")
    table = result.median_table("composite")
    print("median composite criterion")
    print("structure," + ",".join(str(n) for n in result.config.subject_counts))
    for s in result.config.structures:
        print(s + "," + ",".join(data_io.fmt(table[(s, n)]) for n in result.config.subject_counts))
    frac = result.failure_fraction()
    if frac > result.config.failure_tolerance:
        print(f"error: {frac:.1%} of cells failed (tolerance "
              f"{result.config.failure_tolerance:.1%})", file=sys.stderr)
        return EXIT_EXPERIMENT
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg, out = _experiment_config(args)
    result = sim_harness.run_experiment(cfg, threads=_threads(args))
    return _finish_experiment(result, out, args.plots)


def cmd_real_data(args) -> int:
    cfg, out = _experiment_config(args)
    dense = data_io.ingest_dense_csv(args.data, args.layout)
    print(f"read {dense.n} subjects on {dense.v} grid points "
          f"({dense.missing_fraction:.2%} missing)")
    if cfg.v != dense.v:
        cfg = sim_harness.SimConfig.from_dict({**cfg.to_dict(), "v": dense.v})
    result = sim_harness.real_data_experiment(dense.values, dense.grid, cfg,
                                              threads=_threads(args))
    return _finish_experiment(result, out, args.plots)


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return data


# ---------------------------------------------------------------------------
# parser

def _add_pace_flags(p):
    p.add_argument("--fve", type=float, default=0.95, help="FVE threshold for choosing M")
    p.add_argument("--components", type=int, default=None, help="fix the number of components")
    p.add_argument("--bandwidth-mean", type=float, default=None, help="mean bandwidth (GCV)")
    p.add_argument("--bandwidth-cov", type=float, default=None,
                   help="covariance bandwidth (GCV)")
    p.add_argument("--kernel", choices=("gaussian", "epanechnikov"), default="gaussian",
                   help="smoothing kernel")
    p.add_argument("--noiseless", action="store_true",
                   help="data carry no measurement error (sigma2 = 0)")


def _add_experiment_flags(p):
    p.add_argument("--config", help="JSON file with SimConfig fields and output_dir")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="worker processes (default: PILOTDESIGN_THREADS or CPU count)")
    p.add_argument("--thresholds", type=_thresholds, default=None,
                   help=f"efficiency thresholds (default {DEFAULT_THRESHOLDS})")
    p.add_argument("--plots", action="store_true", help="also write SVG box plots")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pilotdesign",
                                     description="Sampling designs for sparse functional data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    design = sub.add_parser("design", help="generate or inspect incidence matrices")
    dsub = design.add_subparsers(dest="design_command", required=True)
    gen = dsub.add_parser("generate", help="generate a design")
    gen.add_argument("--config", help="JSON file supplying defaults for these flags")
    gen.add_argument("--structure", choices=design_gen.STRUCTURES, default="hybrid",
                     help="design structure (default hybrid)")
    gen.add_argument("--subjects", type=int, default=30, help="number of subjects n")
    gen.add_argument("--grid", type=int, default=25, help="grid size v")
    gen.add_argument("--obs", type=int, default=5, help="observations per subject K")
    gen.add_argument("--snippet-frac", type=float, default=0.2, help="snippet fraction w")
    gen.add_argument("--delta", type=_delta, default=1.0,
                     help="concurrence slack, or 'auto' to grow it until construction succeeds")
    gen.add_argument("--delta-step", type=float, default=0.5, help="increment for --delta auto")
    gen.add_argument("--gap", type=int, default=2, help="minimum snippet gap")
    gen.add_argument("--seed", type=int, default=0, help="design seed")
    gen.add_argument("--out", help="design CSV path (required)")
    gen.set_defaults(func=cmd_design_generate)
    ins = dsub.add_parser("inspect", help="summarise a design file")
    ins.add_argument("path", help="design CSV written by design generate")
    ins.set_defaults(func=cmd_design_inspect)

    sim = sub.add_parser("simulate", help="write a synthetic dataset")
    sim.add_argument("--config", help="JSON file with SimConfig fields")
    sim.add_argument("--subjects", type=_positive_int, default=100, help="number of subjects")
    sim.add_argument("--dataset-id", type=int, default=0, help="index of the random stream")
    sim.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    sim.add_argument("--design", help="keep only the points marked by this design file")
    sim.add_argument("--layout", choices=("wide", "long"), default="wide", help="CSV layout")
    sim.add_argument("--truth", help="also write the noiseless curves here")
    sim.add_argument("--out", required=True, help="dataset CSV path")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit functional PCA to a dataset")
    fit.add_argument("--config", help="JSON file supplying defaults for these flags")
    fit.add_argument("--data", help="dense CSV (required)")
    fit.add_argument("--layout", choices=("wide", "long"), default="wide", help="CSV layout")
    _add_pace_flags(fit)
    fit.add_argument("--out", help="model JSON path (required)")
    fit.set_defaults(func=cmd_fit)

    ev = sub.add_parser("evaluate", help="criterion values of given designs")
    ev.add_argument("--config", help="JSON file supplying defaults for these flags")
    ev.add_argument("--model", help="model JSON (required)")
    ev.add_argument("--design", action="append",
                    help="1-based grid labels joined by '-', repeatable (required)")
    ev.add_argument("--true-model", help="reference model for F_true and ARE")
    ev.add_argument("--obs", type=int, default=None, help="K for the ARE search")
    ev.set_defaults(func=cmd_evaluate)

    se = sub.add_parser("search", help="find the criterion-optimal design")
    se.add_argument("--config", help="JSON file supplying defaults for these flags")
    se.add_argument("--model", help="model JSON (required)")
    se.add_argument("--obs", type=int, default=5, help="observations per subject K")
    se.add_argument("--method", choices=design_search.SEARCH_KINDS, default="exhaustive",
                    help="search algorithm")
    se.add_argument("--samples", type=_positive_int, default=2000,
                    help="draws for the heuristic search")
    se.add_argument("--seed", type=int, default=0, help="heuristic search seed")
    se.add_argument("--true-model", help="reference model for the threshold analysis")
    se.add_argument("--thresholds", type=_thresholds, default=_thresholds(DEFAULT_THRESHOLDS),
                    help="efficiency thresholds (default 0.99,0.97,0.95)")
    se.set_defaults(func=cmd_search)

    ex = sub.add_parser("experiment", help="run the synthetic design comparison")
    _add_experiment_flags(ex)
    ex.set_defaults(func=cmd_experiment)

    rd = sub.add_parser("real-data", help="run the design comparison on a dense dataset")
    rd.add_argument("--data", required=True, help="dense CSV")
    rd.add_argument("--layout", choices=("wide", "long"), default="wide", help="CSV layout")
    _add_experiment_flags(rd)
    rd.set_defaults(func=cmd_real_data)
    return parser


# flags these commands need, from the command line or from --config
_REQUIRED = {"generate": ("out",), "fit": ("data", "out"), "evaluate": ("model", "design"),
             "search": ("model",)}


def _parse(parser, argv):
    """Parse, taking flag defaults from ``--config`` so explicit flags win."""
    args = parser.parse_args(argv)
    leaf = getattr(args, "design_command", None) or args.command
    if leaf in _REQUIRED and getattr(args, "config", None):
        args = _apply_config_defaults(parser, argv, args)
    if leaf in _REQUIRED:
        missing = [f"--{name}" for name in _REQUIRED[leaf] if getattr(args, name) is None]
        if missing:
            _find_subparser(parser, args).error(
                "the following arguments are required: " + ", ".join(missing))
    return args


def _apply_config_defaults(parser, argv, args):
    data = _load_json(args.config)
    known = set(vars(args))
    defaults = {}
    for key, value in data.items():
        name = key.replace("-", "_")
        if name not in known or name in ("func", "command", "design_command", "config"):
            raise ValidationError(f"unknown config key {key!r}")
        defaults[name] = value
    _find_subparser(parser, args).set_defaults(**defaults)
    return parser.parse_args(argv)


def _find_subparser(parser, args):
    for action in parser._subparsers._group_actions:
        p = action.choices[args.command]
        if args.command == "design":
            for inner in p._subparsers._group_actions:
                return inner.choices[args.design_command]
        return p
    raise AssertionError("no subparsers")


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_VALIDATION
    except ConstructionFailed as exc:
        constraint = f" [constraint: {exc.constraint}]" if exc.constraint else ""
        print(f"error: construction failed{constraint}: {exc}", file=sys.stderr)
        return EXIT_CONSTRUCTION
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PilotDesignError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
