"""Command-line entry point: ``spectral-cmm <command> [options]``.

Configuration precedence is defaults < ``--config`` file < ``SPECTRAL_CMM_SEED`` < flags.
"""

import argparse
import copy
import csv
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import oracles, pipeline
from .cmm import write_results
from .config import ExperimentConfig
from .contrastive import SpectralModel, write_curve
from .datagen import Dataset
from .errors import (DegenerateInput, DegenerateMatrix, InfeasibleConstraint, InvalidInput,
                     NumericalFailure, Refused, SpectralCMMError, Unsupported)

log = logging.getLogger("spectral_cmm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_DEGENERATE = 0, 1, 2, 3
STUDIES = ("transition", "modulus-sweep", "lemma2-check")
SUMMARY_COLUMNS = ("experiment", "method", "n", "dim", "metric", "count", "failures",
                   "p25", "p50", "p75")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_list(text, kind=float):
    """``"1,2,3"`` or an inclusive integer range ``"1..50"``."""
    text = str(text).strip()
    if ".." in text and "," not in text:
        lo, hi = text.split("..", 1)
        try:
            lo_i, hi_i = int(lo), int(hi)
        except ValueError as exc:
            raise UsageError(f"ranges must have integer ends: {text!r}") from exc
        if hi_i < lo_i:
            raise UsageError(f"empty range {text!r}")
        return [kind(v) for v in range(lo_i, hi_i + 1)]
    try:
        values = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse list {text!r}") from exc
    if not values:
        raise UsageError("empty list")
    return values


def parse_ladder(text, points):
    """``"1e-4..1"`` as a log-spaced ladder, or an explicit comma list."""
    if ".." not in text:
        return parse_list(text)
    lo, hi = (float(v) for v in text.split("..", 1))
    if not 0 < lo < hi:
        raise UsageError("a ladder needs 0 < low < high")
    return list(np.logspace(math.log10(lo), math.log10(hi), points))


def _add_config_flags(p):
    g = p.add_argument_group("configuration overrides")
    g.add_argument("--config", help="TOML config file")
    g.add_argument("--seed", type=int)
    g.add_argument("--output-dir")
    g.add_argument("--dgp", choices=("npiv", "proxy"))
    g.add_argument("--rho", type=float)
    g.add_argument("--d", type=int, help="latent dimension of the npiv process")
    g.add_argument("--d-ex", type=int, help="observed proxy dimension")
    g.add_argument("--n", type=int, help="total rows (one half learns features, one fits)")
    g.add_argument("--test-factor", type=float)
    g.add_argument("--train-fraction", type=float)
    g.add_argument("--J", dest="J_grid", help="feature dimensions to try, e.g. 10,20,30")
    g.add_argument("--hidden", help="hidden widths, e.g. 50,50,50")
    g.add_argument("--epochs", type=int, dest="max_epochs")
    g.add_argument("--patience", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--cov-penalty", type=float)
    g.add_argument("--cov-split", type=float)
    g.add_argument("--recipe", choices=("eq9prime", "alg1"))
    g.add_argument("--theory", action="store_true",
                   help="use alpha' = 1 for the instrument kernel instead of alpha + 1")
    g.add_argument("--overlap", choices=("auto", "none", "product"))
    g.add_argument("--alpha", dest="alphas")
    g.add_argument("--lambda", dest="lambdas", help="multipliers of the base scale")
    g.add_argument("--nu", dest="nus", help="multipliers of the base scale")
    g.add_argument("--bw-x", help="multipliers of the median distance")
    g.add_argument("--bw-z", help="multipliers of the median distance")
    g.add_argument("--base-rule", choices=("fixed", "rate"))
    g.add_argument("--base-value", type=float)


def build_config(args, environ=None):
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    cfg.with_env(environ)
    sections = {
        "": ("seed", "output_dir"),
        "data": ("dgp", "rho", "d", "d_ex", "n", "test_factor", "train_fraction"),
        "spectral": ("max_epochs", "patience", "lr", "batch_size", "dropout", "cov_penalty",
                     "cov_split"),
        "kernel": ("recipe", "overlap"),
        "estimator": ("base_rule", "base_value"),
    }
    for section, names in sections.items():
        target = getattr(cfg, section) if section else cfg
        for name in names:
            value = getattr(args, name, None)
            if value is not None:
                setattr(target, name, value)
    lists = {"spectral": (("J_grid", int), ("hidden", int)),
             "estimator": (("alphas", float), ("lambdas", float), ("nus", float),
                           ("bw_x", float), ("bw_z", float))}
    for section, names in lists.items():
        for name, kind in names:
            value = getattr(args, name, None)
            if value is not None:
                setattr(getattr(cfg, section), name, parse_list(value, kind))
    if getattr(args, "theory", False):
        cfg.kernel.alpha_prime = "one"
    return cfg.validate()


def _refuse_existing(path, force):
    if os.path.exists(path) and not force:
        raise Refused(f"{path} exists; pass --force to overwrite")


def _load_data(args, cfg):
    if getattr(args, "data", None):
        return Dataset.load(args.data)
    if cfg.data.path:
        return Dataset.load(cfg.data.path)
    return pipeline.make_dataset(cfg)


def _load_model(path, required):
    if path:
        return SpectralModel.load(path)
    if required:
        raise InvalidInput("the learned kernel needs a trained model (--model)")
    return None


def cmd_gen_data(args, cfg):
    out = args.out or os.path.join(cfg.output_dir, "data")
    data = pipeline.make_dataset(cfg)
    data.save(out, force=args.force)
    sizes = {k: len(v) for k, v in data.splits.items()}
    print(f"wrote {out}: z dim {data.z.shape[1]}, x dim {data.x.shape[1]}, splits {sizes}")
    return EXIT_OK


def cmd_train(args, cfg):
    out = args.out or os.path.join(cfg.output_dir, "model.json")
    curve = args.curve or os.path.splitext(out)[0] + "_curve.csv"
    _refuse_existing(out, args.force)
    data = _load_data(args, cfg)
    model = pipeline.train_model(data, cfg)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    model.save(out)
    write_curve(model.curve, curve)
    r = model.report
    print(f"J={r['J']} held-out divergence {r['val_divergence']:.4f} "
          f"(best epoch {r['best_epoch']}); model {out}, curve {curve}")
    return EXIT_OK


def cmd_fit(args, cfg):
    out = args.out or os.path.join(cfg.output_dir, f"fit_{args.kernel}")
    if os.path.exists(out) and os.listdir(out) and not args.force:
        raise Refused(f"{out} exists; pass --force to overwrite")
    data = _load_data(args, cfg)
    model = _load_model(args.model, args.kernel == "learned")
    sel = pipeline.fit_family(data, cfg, args.kernel, model)
    os.makedirs(out, exist_ok=True)
    write_results(sel.rows, os.path.join(out, "grid.csv"))
    doc = {"method": args.kernel, "selected": sel.config, "scorer_nu": sel.scorer_nu,
           "lam": sel.fit.lam, "nu": sel.fit.nu, "diagnostics": sel.fit.diagnostics,
           "kernel_x": sel.fit.kernel.to_dict() if sel.fit.kernel is not None else None}
    with open(os.path.join(out, "selection.json"), "w") as fh:
        json.dump(doc, fh, indent=2, default=float)
    msg = f"selected config {sel.config['config_id']} violation {sel.config['heldout_violation']:.4g}"
    if sel.config.get("test_mse") is not None:
        msg += f" test_mse {sel.config['test_mse']:.4g}"
    print(msg)
    return EXIT_OK


def cmd_eval(args, cfg):
    methods = cfg.methods if args.kernel == "all" else [args.kernel]
    data = _load_data(args, cfg)
    model = _load_model(args.model, False)
    if "learned" in methods and model is None:
        if args.kernel == "learned":
            raise InvalidInput("the learned kernel needs a trained model (--model)")
        model = pipeline.train_model(data, cfg)
    rows = pipeline.evaluate(data, cfg, model, methods)
    out = args.out or os.path.join(cfg.output_dir, "results.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    pipeline.write_rows(rows, out, append=True)
    for r in rows:
        print(f"{r.method:14s} {r.metric:18s} {r.value:.6g}")
    return EXIT_OK


def cmd_oracle(args):
    if args.study == "transition":
        rows = oracles.transition_table(args.rho, args.J, parse_list(args.M, int))
        columns = oracles.SWEEP_COLUMNS
    elif args.study == "modulus-sweep":
        lambdas = parse_ladder(args.lambda_ladder, args.points)
        rows = oracles.modulus_sweep(args.rho, args.alpha, lambdas, K=args.K)
        columns = oracles.SWEEP_COLUMNS
    else:
        rows = oracles.lemma2_check(args.grid, args.count, args.seed)
        columns = ("index", "loss_gap", "l2_sq", "hs_sq", "trace_residual")
    if args.out:
        oracles.write_sweep(rows, args.out, columns)
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def percentile_summary(rows, failures=None):
    """25/50/75 percentiles per (experiment, method, n, dim, metric) cell."""
    failures = failures or {}
    cells = {}
    for r in rows:
        cells.setdefault((r.experiment, r.method, r.n, r.dim, r.metric), []).append(r.value)
    out = []
    for key in sorted(cells):
        vals = np.asarray(cells[key], dtype=float)
        vals = vals[np.isfinite(vals)]
        q = np.percentile(vals, [25, 50, 75]) if vals.size else [np.nan] * 3
        out.append(dict(zip(SUMMARY_COLUMNS, key + (int(vals.size), failures.get(key[0], 0),
                                                    *(float(v) for v in q)))))
    return out


def sweep_cells(cfg, axes):
    names = sorted(axes)
    for values in itertools.product(*(axes[k] for k in names)):
        cell = copy.deepcopy(cfg)
        for name, value in zip(names, values):
            if name == "seed":
                cell.seed = int(value)
            else:
                setattr(cell.data, name, type(getattr(cell.data, name))(value))
        yield cell


def _run_cell(cfg):
    try:
        rows, _, _ = pipeline.run_experiment(cfg)
        return cfg, rows, None
    except (SpectralCMMError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return cfg, [], f"{type(exc).__name__}: {exc}"


def cmd_sweep(args, cfg):
    axes = {"seed": parse_list(args.seeds, int)}
    for name, flag in (("n", args.n_axis), ("rho", args.rho_axis), ("d", args.d_axis),
                       ("d_ex", args.d_ex_axis)):
        if flag:
            axes[name] = parse_list(flag, float if name == "rho" else int)
    out = args.out or os.path.join(cfg.output_dir, "sweep")
    raw = os.path.join(out, "rows.csv")
    if os.path.exists(raw) and not args.force:
        raise Refused(f"{raw} exists; pass --force to overwrite")
    os.makedirs(out, exist_ok=True)
    if os.path.exists(raw):
        os.remove(raw)
    cells = list(sweep_cells(cfg, axes))
    all_rows, failures, failed_cells = [], {}, []

    def record(cell, rows, err):
        # appends happen here, in the parent process only
        if err is None:
            pipeline.write_rows(rows, raw, append=True)
            all_rows.extend(rows)
            return
        d = cell.data
        dim = d.d if d.dgp == "npiv" else d.d_ex
        exp = pipeline.experiment_id(d.dgp, d.n // 2, dim, d.rho if d.dgp == "npiv" else None)
        failures[exp] = failures.get(exp, 0) + 1
        failed_cells.append({"experiment": exp, "seed": cell.seed, "error": err})
        log.warning("cell %s seed %d failed: %s", exp, cell.seed, err)

    if args.jobs <= 1:
        for cell in cells:
            record(*_run_cell(cell))
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for result in pool.map(_run_cell, cells):
                record(*result)
    summary = percentile_summary(all_rows, failures)
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(summary)
    if failed_cells:
        with open(os.path.join(out, "failures.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("experiment", "seed", "error"))
            writer.writeheader()
            writer.writerows(failed_cells)
    print(f"{len(cells)} cells, {len(failed_cells)} failed; summary in {out}/summary.csv")
    return EXIT_OK


def cmd_print_config(args, cfg):
    sys.stdout.write(cfg.to_toml())
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="spectral-cmm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="learn spectral features")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset directory (generated from the config when omitted)")
    p.add_argument("--out", help="model JSON path")
    p.add_argument("--curve", help="training-curve CSV path")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("fit", help="select and fit one estimator family")
    _add_config_flags(p)
    p.add_argument("--data")
    p.add_argument("--model", help="trained model JSON")
    p.add_argument("--kernel", choices=("learned", "rbf"), default="learned")
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="fit, select and score estimators; append result rows")
    _add_config_flags(p)
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--kernel", choices=("learned", "rbf", "all"), default="all")
    p.add_argument("--out", help="result CSV (appended)")

    p = sub.add_parser("oracle", help="exact-operator studies")
    p.add_argument("study", help="one of: " + ", ".join(STUDIES))
    p.add_argument("--rho", type=float, default=0.7)
    p.add_argument("--J", type=int, default=5)
    p.add_argument("--M", default="1..50")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--lambda-ladder", default="1e-4..1")
    p.add_argument("--points", type=int, default=9)
    p.add_argument("--K", type=int, default=60)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (stdout when omitted)")

    p = sub.add_parser("sweep", help="run a grid of experiments and aggregate percentiles")
    _add_config_flags(p)
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--n-axis", help="values of n, e.g. 2000,4000")
    p.add_argument("--rho-axis")
    p.add_argument("--d-axis")
    p.add_argument("--d-ex-axis")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("print-config", help="print the effective configuration as TOML")
    _add_config_flags(p)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "fit": cmd_fit, "eval": cmd_eval,
            "sweep": cmd_sweep, "print-config": cmd_print_config}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "oracle":
            if args.study not in STUDIES:
                raise UsageError(f"unknown study {args.study!r}; choose from {', '.join(STUDIES)}")
            return cmd_oracle(args)
        return COMMANDS[args.command](args, build_config(args))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInput, Refused, Unsupported) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DegenerateMatrix, DegenerateInput, InfeasibleConstraint) as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
