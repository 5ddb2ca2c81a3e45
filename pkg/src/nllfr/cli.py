"""Command-line entry point: ``nllfr <command> ...``.

Exit codes: 0 on success, 2 for invalid usage, configuration or input
files, 1 when a computation fails.  Errors are printed to stderr as one
JSON object with ``error`` and ``message`` keys.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .data_io import (SyntheticSpec, denormalize_output, generate_synthetic, load_csv,
                      normalize, normalize_input, read_table, save_csv)
from .errors import ConfigError, DataFormatError, DimensionError, NllfrError
from .lti_core import as_signal
from .nllfr_model import (NllfrModel, linear_model, load_model, nrmse, rmse, save_model,
                          shift_diagnostic, simulate, simulation_nrmse)
from .residual_search import InferredDataset
from .shooting import TRACE_COLUMNS, write_trace_csv
from .static_net import init_residual_map, train_residual

log = logging.getLogger("nllfr")

REPORT_COLUMNS = tuple(c for c in TRACE_COLUMNS if c != "elapsed")
USAGE_ERRORS = (ConfigError, DataFormatError, DimensionError, FileNotFoundError,
                IsADirectoryError, json.JSONDecodeError)


# -- helpers -------------------------------------------------------------------------
def _load_config(args):
    config = pipeline.PipelineConfig.from_json(args.config) if args.config else \
        pipeline.PipelineConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "stage_budget", None) is not None:
        if args.stage_budget < 0:
            raise ConfigError("--stage-budget must be >= 0")
        config = replace(config, shooting=replace(config.shooting,
                                                  max_iterations=args.stage_budget))
    return config


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_columns(path, columns):
    """Write named 2-D blocks side by side.

    One-letter signal names are numbered per channel (``x1, x2``); longer
    names label single columns.
    """
    header, blocks = [], []
    for name, block in columns.items():
        block = as_signal(block)
        header += [name] if len(name) > 1 or name == "n" else \
            [f"{name}{i + 1}" for i in range(block.shape[1])]
        blocks.append(block)
    with open(path, "w", newline="") as fh:
        np.savetxt(fh, np.hstack(blocks), delimiter=",", fmt="%.17g", header=",".join(header),
                   comments="")


def _columns(header, prefix):
    idx = [i for i, h in enumerate(header) if h.startswith(prefix) and h[len(prefix):].isdigit()]
    return sorted(idx, key=lambda i: int(header[i][len(prefix):]))


def _model_io(model, dataset):
    """Inputs in model units and a function mapping model outputs back to data units."""
    rec = model.normalization
    if rec is None:
        return dataset.u, (lambda y: y), dataset.y
    return normalize_input(dataset.u, rec), (lambda y: denormalize_output(y, rec)), \
        (dataset.y - rec["y_mean"]) / rec["y_std"]


def write_inferred(path, data, ds):
    s = slice(ds.start, ds.stop)
    _write_columns(path, {"n": np.arange(ds.start, ds.stop)[:, None], "u": data.u[s],
                          "y": data.y[s], "x": ds.x_star, "w": ds.w_star})


def read_inferred(path):
    """Read a file written by ``write_inferred``; returns ``(u, y, InferredDataset)``."""
    header, table, _ = read_table(path)
    if "n" not in header:
        raise DataFormatError(f"{path}: missing column 'n'")
    cols = {p: _columns(header, p) for p in ("u", "y", "x", "w")}
    for p, idx in cols.items():
        if not idx:
            raise DataFormatError(f"{path}: no '{p}' columns")
    n = table[:, header.index("n")]
    if table.shape[0] < 2 or np.any(np.diff(n) != 1):
        raise DataFormatError(f"{path}: sample index must be consecutive with >= 2 rows")
    u, y, x, w = (table[:, cols[p]] for p in ("u", "y", "x", "w"))
    # the final row only supplies the successor state of the previous one
    ds = InferredDataset(w_star=w[:-1], x_star=x[:-1], y_star=y[:-1], start=0, x_final=x[-1])
    return u[:-1], y[:-1], ds


# -- commands ---------------------------------------------------------------------------
def cmd_synth(args):
    spec = SyntheticSpec.from_json(args.spec)
    if args.seed is not None:
        spec = replace(spec, rng_seed=args.seed)
    dataset, truth = generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(dataset, out, extra={"y0_": truth.y0, "x": truth.x[:-1], "w": truth.w,
                                  "z": truth.z} if args.with_truth else None)
    if args.truth_model and truth.model is not None:
        save_model(truth.model, args.truth_model)
    return 0


def cmd_linear_init(args):
    dataset = load_csv(args.data)
    config = pipeline.PipelineConfig(n_x=args.nx)
    data, rec = normalize(dataset)
    lti = pipeline.initial_model(data, config)
    model = linear_model(lti)
    save_model(NllfrModel(model.lti, model.residual, rec), args.out)
    return 0


def cmd_identify(args):
    config = _load_config(args)
    dataset = load_csv(args.data)
    config.validate(dataset)
    out = _out_dir(args.out)
    result = pipeline.identify(dataset, config)
    save_model(result.model, out / "model.json")
    save_model(result.stage2_model, out / "stage2_model.json")
    write_trace_csv(result.shooting.trace, out / "report.csv", REPORT_COLUMNS)
    summary = {
        "config": config.to_dict(),
        "final_nrmse": result.final_nrmse,
        "initial_nrmse": result.shooting.trace[0]["nrmse"],
        "continuity": result.shooting.continuity,
        "shooting_iterations": result.shooting.iterations,
        "shooting_message": result.shooting.message,
    }
    if result.search is not None:
        data, _ = normalize(dataset) if config.normalize_data else (dataset, None)
        write_inferred(out / "inferred.csv", data, result.search.dataset)
        write_trace_csv([{"iteration": k, "loss": v}
                         for k, v in enumerate(result.search.loss_trace)],
                        out / "search_trace.csv", ("iteration", "loss"))
        write_trace_csv([{"iteration": k, "loss": v}
                         for k, v in enumerate(result.training.loss_trace)],
                        out / "train_trace.csv", ("iteration", "loss"))
        diag = result.diagnostics
        _write_columns(out / "shift.csv", {
            "n": np.arange(diag.simulation_error.size)[:, None],
            "one_step_error": diag.one_step_errors[:diag.simulation_error.size, None],
            "simulation_error": diag.simulation_error[:, None],
            "bound": diag.bound_curve[:, None]})
        summary["search"] = {"restart": result.search.restart,
                             "restart_losses": result.search.restart_losses,
                             "final_loss": float(result.search.loss_trace[-1])}
        summary["shift"] = {"epsilon": diag.epsilon, "lipschitz": diag.lipschitz_estimate,
                            "diverged": diag.diverged}
    _write_json(out / "summary.json", summary)
    _write_json(out / "timings.json", result.timings)
    print(f"final NRMSE {result.final_nrmse:.4g} %  continuity {result.shooting.continuity:.3g}")
    return 0


def cmd_simulate(args):
    model = load_model(args.model)
    dataset = load_csv(args.data)
    u, to_data, _ = _model_io(model, dataset)
    sim = simulate(model, u)
    if sim.diverged:
        raise NllfrError(f"simulation diverged after {sim.y.shape[0]} samples")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_columns(out, {"u": dataset.u, "y": to_data(sim.y), "x": sim.x[:-1],
                         "z": sim.z, "w": sim.w})
    return 0


def cmd_evaluate(args):
    model = load_model(args.model)
    dataset = load_csv(args.data)
    u, to_data, y_model = _model_io(model, dataset)
    sim = simulate(model, u)
    if sim.diverged:
        raise NllfrError(f"simulation diverged after {sim.y.shape[0]} samples")
    s = slice(args.discard, None)
    y_hat = to_data(sim.y)
    report = {
        "normalized": {"rmse": rmse(y_model[s], sim.y[s]), "nrmse": nrmse(y_model[s], sim.y[s])},
        "physical": {"rmse": rmse(dataset.y[s], y_hat[s]), "nrmse": nrmse(dataset.y[s], y_hat[s])},
        "discard": args.discard,
    }
    if args.out:
        _write_json(args.out, report)
    json.dump(report, sys.stdout, indent=2, sort_keys=True, default=_jsonable)
    sys.stdout.write("\n")
    return 0


def cmd_diagnose_shift(args):
    """Retrain the network on inferred signals, logging loss and simulation NRMSE."""
    config = _load_config(args)
    model = load_model(args.model)
    u, y, ds = read_inferred(args.inferred)
    if ds.x_star.shape[1] != model.n_x or ds.w_star.shape[1] != model.n_w:
        raise DimensionError("inferred.csv", f"x{model.n_x}, w{model.n_w}",
                             (ds.x_star.shape[1], ds.w_star.shape[1]))
    out = _out_dir(args.out)
    seeds = config.seeds()
    net = model.residual.net
    res0 = init_residual_map(model.n_x, model.n_u, model.n_z, model.n_w, net.hidden_widths,
                             net.activation, rng=seeds[1])
    rows = []

    def track(k, res):
        m = NllfrModel(model.lti, res)
        rows.append({"iteration": k, "nrmse": simulation_nrmse(m, u, y, ds.x_star[0])})

    train_cfg = replace(config.train, rng_seed=seeds[2])
    result = train_residual(res0, ds, u, train_cfg, track)
    for row in rows:
        row["loss"] = float(result.loss_trace[row["iteration"]])
    write_trace_csv(rows, out / "shift_trace.csv", ("iteration", "loss", "nrmse"))

    diag = shift_diagnostic(model, ds, u)
    k = diag.simulation_error.size
    _write_columns(out / "error_bound.csv", {
        "n": np.arange(k)[:, None], "one_step_error": diag.one_step_errors[:k, None],
        "simulation_error": diag.simulation_error[:, None], "bound": diag.bound_curve[:, None]})
    nr = np.array([r["nrmse"] for r in rows])
    summary = {"epsilon": diag.epsilon, "lipschitz": diag.lipschitz_estimate,
               "diverged": diag.diverged,
               "loss_monotone": bool(np.all(np.diff(result.loss_trace) <= 0)),
               "nrmse_exceeds_initial": bool(np.any(nr[1:] > nr[0])),
               "initial_nrmse": float(nr[0]), "final_nrmse": float(nr[-1])}
    _write_json(out / "summary.json", summary)
    return 0


def cmd_compare_shooting(args):
    config = _load_config(args)
    dataset = load_csv(args.data)
    out = _out_dir(args.out)
    runs = pipeline.compare_shooting(dataset, config, args.seeds, tuple(args.scenarios))
    (out / "runs").mkdir(exist_ok=True)
    summary = {}
    for sc in args.scenarios:
        mine = [r for r in runs if r["scenario"] == sc]
        for k, r in enumerate(mine):
            write_trace_csv(r["trace"], out / "runs" / f"{sc}_seed{k}.csv", REPORT_COLUMNS)
        grid, med, mad = pipeline.median_mad(
            [[(row["iteration"], row["nrmse"]) for row in r["trace"]] for r in mine])
        write_trace_csv([{"iteration": i, "median_nrmse": m, "mad_nrmse": a}
                         for i, m, a in zip(grid, med, mad)],
                        out / f"{sc}_trace.csv", ("iteration", "median_nrmse", "mad_nrmse"))
        finals = [r["final_nrmse"] for r in mine]
        starts = [r["initial_nrmse"] for r in mine]
        summary[sc] = {"median_final_nrmse": float(np.median(finals)),
                       "median_initial_nrmse": float(np.median(starts)),
                       "final_nrmse": finals, "seeds": [r["seed"] for r in mine]}
    _write_json(out / "summary.json", summary)
    return 0


# -- parser -----------------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="nllfr", description="NL-LFR system identification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    s.add_argument("spec", help="JSON synthetic spec")
    s.add_argument("--out", required=True, help="output CSV")
    s.add_argument("--seed", type=int)
    s.add_argument("--with-truth", action="store_true",
                   help="append noiseless output and true latent signals as extra columns")
    s.add_argument("--truth-model", help="also save the planted model as JSON")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("linear-init", help="fit the initial linear model")
    s.add_argument("data")
    s.add_argument("--nx", type=int, default=2)
    s.add_argument("--out", required=True, help="output model JSON")
    s.set_defaults(func=cmd_linear_init)

    s = sub.add_parser("identify", help="run the three identification stages")
    s.add_argument("data")
    _common(s)
    s.add_argument("--stage-budget", type=int, help="override the shooting iteration budget")
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("simulate", help="free-run a model on the inputs of a dataset")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", help="RMSE and NRMSE of a model on a dataset")
    s.add_argument("model")
    s.add_argument("data")
    s.add_argument("--discard", type=int, default=0, help="leading samples to skip")
    s.add_argument("--out", help="also write the report as JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("diagnose-shift", help="training loss versus simulation NRMSE")
    s.add_argument("model")
    s.add_argument("inferred")
    _common(s)
    s.set_defaults(func=cmd_diagnose_shift)

    s = sub.add_parser("compare-shooting", help="scenarios S1-S4 over several seeds")
    s.add_argument("data")
    _common(s)
    s.add_argument("--stage-budget", type=int, help="override the shooting iteration budget")
    s.add_argument("--seeds", type=int, default=5, help="number of seeds per scenario")
    s.add_argument("--scenarios", nargs="+", default=list(pipeline.SCENARIOS),
                   choices=list(pipeline.SCENARIOS))
    s.set_defaults(func=cmd_compare_shooting)
    return p


def _common(s):
    s.add_argument("--config", help="pipeline configuration JSON")
    s.add_argument("--seed", type=int, help="root seed override")
    s.add_argument("--out", required=True, help="output directory")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        _report(exc)
        return 2
    except (NllfrError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        _report(exc)
        return 1


def _report(exc):
    json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
    sys.stderr.write("\n")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
