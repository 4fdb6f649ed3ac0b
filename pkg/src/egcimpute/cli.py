"""Command-line interface: ``egcimpute <subcommand> [flags]``.

Data go to files only; progress and diagnostics go to standard error.  Every
output file starts with a ``#`` line naming the tool version, the seed and
the command line, so reruns with the same flags are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import logging
import shlex
import sys
import time

import numpy as np

from . import __version__
from .bench import (MECHANISMS, MaskSpec, baseline_impute, evaluate, generate_synthetic, mask,
                    marginal_fit_diagnostic, run_grid, summary_table, write_metrics_csv)
from .data_model import VariableSchema, load_dataset, write_dataset
from .em_fit import FitConfig, fit
from .impute import multiple_impute, single_impute, summarize_uncertainty
from .marginals import MarginalFitConfig
from .model_io import load_model, save_model

log = logging.getLogger("egcimpute")


def _header(args) -> str:
    seed = getattr(args, "seed", None)
    return f"egcimpute {__version__} seed={seed} flags: {shlex.join(args.argv)}"


def _add_io(p, data=True, schema=True):
    if data:
        p.add_argument("--data", required=True, help="input CSV")
    if schema:
        p.add_argument("--schema", required=True, help="schema sidecar file")
    p.add_argument("--na", default="", help="missing-value token (default: empty cell)")


def _add_fit_flags(p):
    g = p.add_argument_group("fitting")
    g.add_argument("--max-iter", type=int, default=50)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--rank", type=int, default=None, help="low-rank latent correlation")
    g.add_argument("--batch-size", type=int, default=None, help="minibatch EM")
    g.add_argument("--passes", type=int, default=2, help="minibatch passes over the data")
    g.add_argument("--lr-c", type=float, default=5.0, help="step size c / (t + c)")
    g.add_argument("--method", choices=("ep", "meanfield"), default="ep")
    g.add_argument("--loglik-samples", type=int, default=500, help="GHK draws per row (0 = skip)")
    g.add_argument("--track-loglik", action="store_true", help="report the likelihood every iteration")
    g.add_argument("--mc-samples", type=int, default=5000, help="draws for categorical locations")
    g.add_argument("--beta", type=float, default=1000.0, help="softmax temperature")
    g.add_argument("--merge-rare", action="store_true", help="merge categories below 1e-4")
    g.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")


def _fit_config(args) -> FitConfig:
    marg = MarginalFitConfig(n_samples=args.mc_samples, beta=args.beta, merge_rare=args.merge_rare)
    return FitConfig(max_iter=args.max_iter, tol=args.tol, rank=args.rank, batch_size=args.batch_size,
                     n_passes=args.passes, lr_c=args.lr_c, method=args.method,
                     loglik_samples=args.loglik_samples, track_loglik=args.track_loglik,
                     threads=args.threads, seed=args.seed, marginal=marg)


def _load(args, path=None):
    return load_dataset(path or args.data, VariableSchema.read(args.schema), na=args.na)


# ---------------------------------------------------------------------------
# subcommands

def cmd_fit(args):
    data = _load(args)
    cfg = _fit_config(args)
    t0 = time.perf_counter()
    model = fit(data, cfg)  # progress arrives through the package logger
    total = time.perf_counter() - t0
    info = model.info
    timing = info.get("timing", {})
    log.info("iterations %d converged %s", info.get("iterations", 0), info.get("converged"))
    if info.get("loglik") is not None:
        log.info("loglik %.6f (se %.6f)", info["loglik"], info["loglik_se"])
    if timing.get("total"):
        log.info("marginal estimation %.2fs of %.2fs (%.1f%%)", timing["marginals"], timing["total"],
                 100 * timing["marginals"] / timing["total"])
    log.info("wall time %.2fs", total)
    save_model(model, args.out, _header(args))


def cmd_impute(args):
    data = _load(args)
    model = load_model(args.model)
    cfg = FitConfig(threads=args.threads, method=args.method)
    write_dataset(single_impute(data, model, cfg), args.out, na=args.na, comment=_header(args))


def cmd_sample(args):
    data = _load(args)
    model = load_model(args.model)
    mi = multiple_impute(data, model, m=args.m, seed=args.seed, burn_in=args.burn_in)
    for s, completed in enumerate(mi):
        write_dataset(completed, f"{args.out_prefix}_s{s + 1}.csv", na=args.na, comment=_header(args))
    if args.summary:
        summary = summarize_uncertainty(mi, args.alpha)
        with open(args.summary, "w", newline="") as handle:
            handle.write(f"# {_header(args)}\n")
            w = csv.writer(handle)
            w.writerow(["row", "variable", "key", "value"])
            for i, name, key, value in summary.rows_for_csv(data.schema):
                w.writerow([i, name, key, repr(value)])
    log.info("wrote %d completions", mi.m)


def cmd_generate(args):
    data, truth = generate_synthetic(args.n, args.pcat, args.K, args.seed, p_cont=args.pcont,
                                     p_ord=args.pord, levels=args.levels, exp_scale=args.exp_scale,
                                     cutoffs=args.cutoffs, mu_scale=args.mu_scale)
    data.schema.write(args.schema_out)
    write_dataset(data, args.out, comment=_header(args))
    if args.truth_model:
        save_model(truth, args.truth_model, _header(args))


def _mask_spec(args) -> MaskSpec:
    for mech in MECHANISMS:
        ratio = getattr(args, mech.lower())
        if ratio is not None:
            return MaskSpec(mech, ratio, args.seed)
    raise ValueError("one of --mcar, --mar, --mnar is required")


def cmd_mask(args):
    data = _load(args)
    masked, hidden = mask(data, _mask_spec(args))
    write_dataset(masked, args.out, na=args.na, comment=_header(args))
    if args.index_out:
        rows, cols = np.nonzero(hidden)
        with open(args.index_out, "w", newline="") as handle:
            handle.write(f"# {_header(args)}\n")
            w = csv.writer(handle)
            w.writerow(["row", "variable"])
            names = data.schema.names
            for i, j in zip(rows, cols):
                w.writerow([int(i), names[j]])
    log.info("hid %d of %d observed cells", int(hidden.sum()), int((~np.isnan(data.values)).sum()))


def cmd_evaluate(args):
    schema = VariableSchema.read(args.schema)
    truth = load_dataset(args.truth, schema, na=args.na)
    imputed = load_dataset(args.imputed, schema, na=args.na)
    masked = load_dataset(args.masked, schema, na=args.na)
    if not truth.values.shape == imputed.values.shape == masked.values.shape:
        raise ValueError(f"shape mismatch: truth {truth.values.shape}, imputed {imputed.values.shape}, "
                         f"masked {masked.values.shape}")
    hidden = np.isnan(masked.values) & ~np.isnan(truth.values)
    base = baseline_impute(masked)
    methods = {"EGC": evaluate(truth, imputed, hidden, base), "baseline": evaluate(truth, base, hidden, base)}
    rows = []
    for name, met in methods.items():
        for cls, metric, err, sc in met.class_rows():
            rows.append({"method": name, "class": cls, "metric": metric, "error": err, "scaled": sc,
                         "repetition": args.seed, "n": truth.n, "p_cat": "", "K": "", "mechanism": "",
                         "ratio": ""})
            log.info("%-8s %-11s %s %.4f scaled %.4f", name, cls, metric, err, sc)
    write_metrics_csv(rows, args.out, _header(args))
    if args.diagnostic:
        model = load_model(args.diagnostic)
        with open(args.diagnostic_out or args.out + ".marginals.csv", "w", newline="") as handle:
            handle.write(f"# {_header(args)}\n")
            w = csv.writer(handle)
            w.writerow(["variable", "category", "observed", "model"])
            for name, k, freq, est in marginal_fit_diagnostic(model, masked, seed=args.seed):
                w.writerow([name, k, repr(freq), repr(est)])


def cmd_bench(args):
    cfg = _fit_config(args)
    rows = run_grid(n=args.n, p_cats=args.pcat, Ks=args.K, mechanisms=args.mechanisms, ratios=args.ratios,
                    seeds=range(args.seed, args.seed + args.reps), cfg=cfg, progress=log.info,
                    exp_scale=args.exp_scale, cutoffs=args.cutoffs, mu_scale=args.mu_scale)
    write_metrics_csv(rows, args.out, _header(args))
    table = summary_table(rows)
    if args.summary:
        with open(args.summary, "w") as handle:
            handle.write(f"# {_header(args)}\n{table}\n")
    print(table, file=sys.stderr)


# ---------------------------------------------------------------------------

def _generator_flags(p):
    p.add_argument("--pcont", type=int, default=5)
    p.add_argument("--pord", type=int, default=5)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--exp-scale", type=float, default=3.0)
    p.add_argument("--cutoffs", choices=("even", "uniform"), default="even")
    p.add_argument("--mu-scale", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egcimpute", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"egcimpute {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to data with missing values")
    _add_io(p)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impute", help="single imputation from a fitted model")
    _add_io(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=("ep", "meanfield"), default="ep")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("sample", help="multiple imputation")
    _add_io(p)
    p.add_argument("--model", required=True)
    p.add_argument("--m", type=int, default=20, help="number of completions")
    p.add_argument("--out-prefix", required=True, help="completion s goes to <prefix>_s<s>.csv")
    p.add_argument("--summary", default=None, help="write category probabilities and intervals here")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("generate", help="draw a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--pcat", type=int, default=5)
    p.add_argument("--K", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out", required=True)
    p.add_argument("--truth-model", default=None, help="also save the generating model")
    _generator_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("mask", help="hide observed cells")
    _add_io(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--mcar", type=float, metavar="RATIO")
    g.add_argument("--mar", type=float, metavar="RATIO")
    g.add_argument("--mnar", type=float, metavar="RATIO")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--index-out", default=None, help="CSV of hidden (row, variable) cells")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("evaluate", help="error of an imputation on the hidden cells")
    p.add_argument("--truth", required=True)
    p.add_argument("--imputed", required=True)
    p.add_argument("--masked", required=True, help="the masked input; hidden = missing here, present in truth")
    p.add_argument("--schema", required=True)
    p.add_argument("--na", default="")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--diagnostic", default=None, metavar="MODEL", help="also write the marginal-fit diagnostic")
    p.add_argument("--diagnostic-out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="run the synthetic experiment grid")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--pcat", type=int, nargs="+", default=[1, 3, 5])
    p.add_argument("--K", type=int, nargs="+", default=[3, 6, 9])
    p.add_argument("--mechanisms", nargs="+", default=list(MECHANISMS), type=str.upper, choices=MECHANISMS)
    p.add_argument("--ratios", type=float, nargs="+", default=[0.3])
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="first repetition seed")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--summary", default=None, help="summary table file")
    _generator_flags(p)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    logging.captureWarnings(True)
    try:
        args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"egcimpute {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
