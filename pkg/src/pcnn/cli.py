"""Command-line entry point: ingest, generate, train, predict, evaluate, compare, sweep, gradcheck.

Every flag can also be given in a JSON config file (`--config run.json`) under
the flag's long name with dashes replaced by underscores; flags on the command
line win. The effective settings are archived as run_config.json next to the
outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import re
import sys
from typing import Optional

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
THREADS_ENV = "PCNN_NUM_THREADS"

log = logging.getLogger("pcnn")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _safe_name(segment_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", segment_id)


def _write_json(path, doc):
    from .ingest import atomic_write_text
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _archive(args, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    doc = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    _write_json(os.path.join(out_dir, "run_config.json"), doc)


def _load_series(path, slot_minutes=None, segment=None):
    from .ingest import read_series_csv
    if not os.path.exists(path):
        raise DataError(f"series file not found: {path}")
    series = read_series_csv(path, slot_minutes=slot_minutes)
    if segment is not None:
        series = [s for s in series if s.segment_id == segment]
        if not series:
            raise DataError(f"segment {segment!r} not in {path}")
    return series


def _pcnn_config(args, layers=None):
    from .model import PcnnConfig
    try:
        return PcnnConfig(d=args.d, t=args.t, n_layers=args.layers if layers is None else layers, filters=args.filters,
                          last_filters=args.last_filters, learning_rate=args.learning_rate,
                          l2_lambda=args.l2_lambda, batch_size=args.batch_size, epochs=args.epochs,
                          seed=args.seed, horizon=args.horizon, precision=args.precision,
                          rho=args.rho, epsilon=args.epsilon)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


# ---------------------------------------------------------------- commands

def cmd_ingest(args):
    from .ingest import (aggregate_rows, aggregate_traversals, pair_traversals, read_aggregated_csv,
                         read_vpr_csv, write_series_csv)
    if not os.path.exists(args.input):
        raise DataError(f"input not found: {args.input}")
    strict = not args.lenient
    common = dict(slot_minutes=args.slot_minutes, start_hour=args.start_hour, end_hour=args.end_hour,
                  workdays_only=not args.all_days)
    if args.format == "vpr":
        parsed = read_vpr_csv(args.input, strict)
        traversals, dropped = pair_traversals(parsed.items, args.max_gap)
        print(f"{len(parsed.items)} records, {len(traversals)} traversals, {dropped} pairs dropped")
        series = aggregate_traversals(traversals, utc_offset_hours=args.utc_offset, **common)
    else:
        parsed = read_aggregated_csv(args.input, strict)
        series = aggregate_rows(parsed.items, **common)
    for line, msg in parsed.skipped:
        print(f"skipped line {line}: {msg}", file=sys.stderr)
    if parsed.skipped:
        print(f"{len(parsed.skipped)} malformed rows skipped")
    if not series:
        raise DataError("no segment produced a series")
    out_dir = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(out_dir, exist_ok=True)
    write_series_csv(args.output, list(series.values()))
    _archive(args, out_dir)
    for seg, s in series.items():
        print(f"{seg}: {s.n_days} days x {s.slots_per_day} slots, baseline {s.baseline_travel_time:.1f}s, "
              f"congested {s.congested_fraction():.1%}")
    return EXIT_OK


def cmd_generate(args):
    from .synth import SynthConfig, make_benchmark
    try:
        cfg = SynthConfig(days=args.days, slot_minutes=args.slot_minutes, segments=args.segments, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out_dir = os.path.dirname(os.path.abspath(args.output))
    bundle = make_benchmark(cfg, split=(min(20, cfg.days), 0, 0) if cfg.days < 30 else (20, 5, 5),
                            out_dir=out_dir, name=os.path.basename(args.output))
    _archive(args, out_dir)
    for s in bundle.series:
        print(f"{s.segment_id}: {s.n_days} days x {s.slots_per_day} slots, congested {s.congested_fraction():.1%}")
    return EXIT_OK


def cmd_train(args):
    from .model import TrainingError, train, write_train_report
    config = _pcnn_config(args)
    series = _load_series(args.series, args.slot_minutes, args.segment)
    os.makedirs(args.out, exist_ok=True)
    _archive(args, args.out)
    try:
        if args.pooled or len(series) == 1:
            jobs = [(args.out, series)]
        else:
            jobs = [(os.path.join(args.out, _safe_name(s.segment_id)), [s]) for s in series]
        index = {}
        for out_dir, group in jobs:
            os.makedirs(out_dir, exist_ok=True)
            with _limit_threads():
                trained, report = train(group, config)
            trained.save(os.path.join(out_dir, "model.json"))
            write_train_report(os.path.join(out_dir, "train_report.json"), report)
            for s in group:
                index[s.segment_id] = os.path.relpath(os.path.join(out_dir, "model.json"), args.out)
            last = report.val_mae[-1] if report.val_mae else None
            print(f"{','.join(trained.segment_ids)}: {report.n_train} instances, final loss "
                  f"{report.epoch_losses[-1]:.6f}, validation MAE {last if last is None else f'{last:.4f}'}, "
                  f"{report.wall_time:.1f}s")
        _write_json(os.path.join(args.out, "index.json"), index)
    except TrainingError as exc:
        raise DataError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return EXIT_OK


def _load_models(path):
    """{segment_id or '*': TrainedPcnn} from a model file or a train output directory."""
    from .model import TrainedPcnn
    if os.path.isdir(path):
        index_path = os.path.join(path, "index.json")
        if not os.path.exists(index_path):
            raise DataError(f"{path} holds no index.json")
        with open(index_path) as fh:
            index = json.load(fh)
        cache = {}
        out = {}
        for seg, rel in index.items():
            if rel not in cache:
                cache[rel] = TrainedPcnn.load(os.path.join(path, rel))
            out[seg] = cache[rel]
        return out
    if not os.path.exists(path):
        raise DataError(f"model not found: {path}")
    try:
        trained = TrainedPcnn.load(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None
    return {seg: trained for seg in trained.segment_ids}


def _model_for(models, segment_id):
    if segment_id in models:
        return models[segment_id]
    if len(set(map(id, models.values()))) == 1:
        return next(iter(models.values()))
    raise DataError(f"no model for segment {segment_id!r}")


def _check_compatible(trained, args):
    for name in ("d", "t"):
        given = getattr(args, name, None)
        if given is not None and given != getattr(trained.config, name):
            raise UsageError(f"model was trained with {name}={getattr(trained.config, name)}, got {name}={given}")


def cmd_predict(args):
    models = _load_models(args.model)
    series = _load_series(args.series, args.slot_minutes, args.segment)
    results = []
    for s in series:
        trained = _model_for(models, s.segment_id)
        _check_compatible(trained, args)
        try:
            value, raw = trained.predict(s, args.day, args.slot, args.horizon)
        except IndexError as exc:
            raise UsageError(str(exc)) from None
        results.append({"segment_id": s.segment_id, "day": args.day, "origin_slot": args.slot,
                        "target_slot": args.slot + args.horizon - 1, "horizon": args.horizon,
                        "predicted": value, "raw": raw})
    print(json.dumps(results if len(results) != 1 else results[0], indent=2))
    return EXIT_OK


def cmd_evaluate(args):
    from .evaluation import (ForecastReport, breakdown, write_breakdown_csv, write_metrics_json,
                             write_mre_cdf_csv)
    from .ingest import atomic_write_text
    from .model import split_days
    models = _load_models(args.model)
    series = _load_series(args.series, args.slot_minutes, args.segment)
    os.makedirs(args.out, exist_ok=True)
    _archive(args, args.out)
    parts = []
    lines = ["segment_id,day,target_slot,hour,predicted,raw,observed"]
    for s in series:
        trained = _model_for(models, s.segment_id)
        _check_compatible(trained, args)
        try:
            days = split_days(s.n_days, trained.config).test
        except ValueError as exc:
            raise DataError(str(exc)) from None
        m, n, pred, obs, raw = trained.predict_days(s, days, args.horizon)
        target = n + (args.horizon or trained.config.horizon) - 1
        rep = ForecastReport.from_predictions(s.segment_id, m, target, pred, obs, s.start_hour, s.slot_minutes)
        parts.append(rep)
        for k in range(len(rep)):
            lines.append(f"{s.segment_id},{m[k]},{target[k]},{rep.hours[k]},{pred[k]!r},{raw[k]!r},{obs[k]!r}")
    report = ForecastReport.concat(parts)
    bd = breakdown(report)
    write_metrics_json(os.path.join(args.out, "metrics.json"), bd.overall)
    write_breakdown_csv(os.path.join(args.out, "breakdown.csv"), bd)
    write_mre_cdf_csv(os.path.join(args.out, "mre_cdf.csv"), bd.cdf)
    atomic_write_text(os.path.join(args.out, "predictions.csv"), "\n".join(lines) + "\n")
    o = bd.overall
    mre = "undefined" if o.mre is None else f"{o.mre:.4f}"
    print(f"{o.count} predictions: MAE {o.mae:.4f}, RMSE {o.rmse:.4f}, MRE {mre} "
          f"({o.excluded} zero-congestion rows left out of MRE)")
    return EXIT_OK


def cmd_compare(args):
    from .evaluation import write_comparison_csv
    from .experiments import compare_methods
    config = _pcnn_config(args)
    series = _load_series(args.series, args.slot_minutes, args.segment)
    os.makedirs(args.out, exist_ok=True)
    _archive(args, args.out)
    try:
        with _limit_threads():
            rows = compare_methods(series, args.methods, args.slot_sizes, config, args.knn_k,
                                   knn_grid=args.knn_grid)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_comparison_csv(os.path.join(args.out, "comparison.csv"), rows)
    for r in rows:
        if r["status"] == "ok":
            print(f"{r['slot_minutes']:>2} min {r['method']:<7} MAE {r['mae']:.4f} RMSE {r['rmse']:.4f} "
                  f"MRE {r['mre'] if r['mre'] is None else format(r['mre'], '.4f')}")
        else:
            print(f"{r['slot_minutes']:>2} min {r['method']:<7} failed: {r['error']}")
    return EXIT_OK


def _parse_grid(items):
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        key = {"L": "n_layers", "layers": "n_layers"}.get(key, key)
        if key not in ("d", "t", "n_layers") or not values:
            raise UsageError(f"bad grid entry {item!r}; use d=3,6 t=3,6 or L=1-9")
        vals = []
        for part in values.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                vals.extend(range(int(lo), int(hi) + 1))
            else:
                vals.append(int(part))
        grid[key] = tuple(vals)
    return grid


def cmd_sweep(args):
    from .evaluation import _csv_text
    from .experiments import DEFAULT_SWEEP, sweep
    from .ingest import atomic_write_text
    grid = _parse_grid(args.grid) if args.grid else DEFAULT_SWEEP
    # the base only has to be valid at some grid point; each point is checked on its own
    base = _pcnn_config(args, min(grid["n_layers"]) if "n_layers" in grid else None)
    series = _load_series(args.series, args.slot_minutes, args.segment)
    os.makedirs(args.out, exist_ok=True)
    _archive(args, args.out)
    try:
        with _limit_threads():
            rows, best = sweep(series, base, grid)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    keys = sorted(grid)
    header = keys + ["status", "val_mae", "val_rmse", "val_mre", "final_loss"]
    atomic_write_text(os.path.join(args.out, "sweep.csv"),
                      _csv_text(header, [[r.get(k) for k in header] for r in rows]))
    _write_json(os.path.join(args.out, "best.json"), best)
    for r in rows:
        point = " ".join(f"{k}={r[k]}" for k in keys)
        print(f"{point}: " + (f"validation MAE {r['val_mae']:.4f}" if r["status"] == "ok" else r["status"]))
    if best:
        print("best: " + " ".join(f"{k}={best[k]}" for k in keys))
    return EXIT_OK


def cmd_gradcheck(args):
    from .model import build_model
    from .neuralnet import gradient_check
    config = _pcnn_config(args).replace(precision="f64")
    worst = 0.0
    failed = False
    for k in range(args.seeds):
        seed = args.seed + k
        rng = np.random.default_rng(seed)
        model = build_model(config.replace(seed=seed))
        x = rng.uniform(size=(args.batch,) + config.input_shape)
        y = rng.uniform(size=args.batch)
        with _limit_threads():
            report = gradient_check(model, x, y, config.l2_lambda, args.tolerance)
        worst = max(worst, report.max_rel_error)
        failed |= not report.passed
        print(f"seed {seed}: {report.summary()}")
    print(f"max relative error over {args.seeds} seed(s): {worst:.3e}")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def _add_model_flags(p, training=True):
    p.add_argument("--d", type=int, default=9, help="days of history (rows below the recent row)")
    p.add_argument("--t", type=int, default=6, help="half-width of the slot window")
    p.add_argument("--layers", type=int, default=5, help="number of convolution layers")
    p.add_argument("--filters", type=int, default=64)
    p.add_argument("--last-filters", type=int, default=16)
    p.add_argument("--horizon", type=int, default=1, help="steps ahead u")
    if training:
        p.add_argument("--learning-rate", type=float, default=0.005)
        p.add_argument("--l2-lambda", type=float, default=0.001)
        p.add_argument("--batch-size", type=int, default=128)
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--rho", type=float, default=0.9)
        p.add_argument("--epsilon", type=float, default=1e-8)


def _add_common(p):
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.add_argument("--slot-minutes", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcnn", description="Periodic CNN congestion forecasting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="raw passage records or aggregated travel times -> series CSV")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["vpr", "aggregated"], default="aggregated")
    p.add_argument("--output", required=True)
    p.add_argument("--start-hour", type=int, default=6)
    p.add_argument("--end-hour", type=int, default=24)
    p.add_argument("--max-gap", type=float, default=1800.0, help="seconds between sightings to pair them")
    p.add_argument("--utc-offset", type=float, default=0.0, help="hours added to UTC before slotting")
    p.add_argument("--all-days", action="store_true", help="keep weekends")
    p.add_argument("--lenient", action="store_true", help="skip malformed rows instead of aborting")
    p.set_defaults(func=cmd_ingest, slot_minutes=5)

    p = sub.add_parser("generate", help="synthetic benchmark series")
    _add_common(p)
    p.add_argument("--output", required=True)
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--segments", type=int, default=1)
    p.set_defaults(func=cmd_generate, slot_minutes=5)

    p = sub.add_parser("train", help="train PCNN (one model per segment unless --pooled)")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--series", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segment")
    p.add_argument("--pooled", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="one prediction from a trained model")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--series", required=True)
    p.add_argument("--segment")
    p.add_argument("--day", type=int, required=True)
    p.add_argument("--slot", type=int, required=True, help="origin slot n (first unseen slot)")
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--d", type=int)
    p.add_argument("--t", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics of a trained model on its test days")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--series", required=True)
    p.add_argument("--segment")
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--t", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="PCNN and baselines on identical splits")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--series", required=True)
    p.add_argument("--segment")
    p.add_argument("--out", required=True)
    p.add_argument("--methods", nargs="+", default=["ha1", "ha2", "lr1", "lr2", "knn", "arima", "mlp1", "mlp2",
                                                    "pcnn"])
    p.add_argument("--slot-sizes", type=int, nargs="+", default=[5])
    p.add_argument("--knn-k", type=int, default=15)
    p.add_argument("--knn-grid", type=int, nargs="+", help="pick K by validation MAE, e.g. 5 10 15 ... 50")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="grid over d, t or layers; best by validation MAE")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--series", required=True)
    p.add_argument("--segment")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", nargs="+", help="e.g. d=3,6,9,12 t=3,6,9,12 or L=1-9")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="analytic vs central-difference gradients of the full model")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _config_path(argv):
    for k, item in enumerate(argv):
        if item == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if item.startswith("--config="):
            return item.split("=", 1)[1]
    return None


def _apply_config_file(parser, argv):
    """Parse with defaults taken from --config, so explicit flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    sub = choices[command]
    known = {a.dest for a in sub._actions}
    unknown = set(doc) - known - {"command"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    sub.set_defaults(**{k: v for k, v in doc.items() if k != "command"})
    # required flags supplied by the file no longer need to be on the command line
    for action in sub._actions:
        if action.dest in doc:
            action.required = False
    return parser.parse_args(argv)


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        from .domain import DomainError
        from .ingest import DataFormatError
        if isinstance(exc, (DataFormatError, DomainError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
