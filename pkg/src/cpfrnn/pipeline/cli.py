"""Command line entry point: ``cpfrnn {train,evaluate,forecast,synth,ecdf-dump,sweep}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..cpf import smoothed_ecdf, step_ecdf
from ..training import ConfigError, DivergenceError, RunConfig, predict, train
from .checkpoint import CheckpointError, from_model, load_checkpoint, save_checkpoint
from .data import DataError, load_csv, normalize, split_train_test
from .metrics import compute_metrics
from .synth import KINDS, synth_generate

log = logging.getLogger("cpfrnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def cmd_synth(args) -> None:
    params = {}
    for item in args.param or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--param expects key=value, got {item!r}")
        params[key] = _parse_value(val)
    if args.n is not None:
        params["n"] = args.n
    ds = synth_generate(args.kind, args.length, params, seed=args.seed)
    ds.to_csv(args.out)


def _prepare(ck, data_path: str, split: str):
    ds = load_csv(data_path, ck.config.target)
    if ds.n != ck.n:
        raise DataError(f"{data_path}: {ds.n} driving columns, checkpoint was trained with {ck.n}")
    if split == "test":
        _, ds = split_train_test(ds, ck.config.train_fraction, ck.config.T)
    raw = ds.windows(ck.config.T)
    norm = ck.scaler.apply(ds).windows(ck.config.T) if ck.scaler is not None else raw
    return raw, norm


def _predictions(ck, data_path, split):
    raw, norm = _prepare(ck, data_path, split)
    model = ck.build()
    pred = predict(model, norm, seed=ck.config.seed)
    if ck.scaler is not None:
        pred = ck.scaler.denormalize_target(pred)
    return model, raw, norm, pred


def cmd_train(args) -> None:
    config = RunConfig.from_file(args.config)
    ds = load_csv(args.data, config.target)
    train_ds, test_ds = split_train_test(ds, config.train_fraction, config.T)
    train_n, test_n, scaler = normalize(train_ds, test_ds, config.normalization)
    model, report = train(config, train_n.windows(config.T), test_n.windows(config.T))
    save_checkpoint(from_model(model, config, ds.n, scaler), args.checkpoint)
    out = report.to_dict()
    out["scaler_warnings"] = scaler.warnings
    Path(args.report).write_text(json.dumps(out, indent=2))


def cmd_evaluate(args) -> None:
    ck = load_checkpoint(args.checkpoint)
    _, raw, _, pred = _predictions(ck, args.data, args.split)
    metrics = compute_metrics(raw.label, pred)
    Path(args.out).write_text(json.dumps(metrics.to_dict(), indent=2))
    print(metrics.table_row())


def cmd_forecast(args) -> None:
    ck = load_checkpoint(args.checkpoint)
    model, raw, norm, pred = _predictions(ck, args.data, args.split)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "y_true", "y_pred"])
        for j, (yt, yp) in enumerate(zip(raw.label, pred)):
            w.writerow([j, repr(float(yt)), repr(float(yp))])
    if args.snapshot_out:
        save_snapshot(model, norm, args.snapshot_out, seed=ck.config.seed)


def save_snapshot(model, windows, path, seed: int = 0) -> None:
    """Store projections and weights of the final weighted ensemble of the last window."""
    last = windows.take(slice(len(windows) - 1, len(windows)))
    rng = np.random.default_rng(seed)
    fwd = model.forward(last.x, last.y_hist, None, rng, keep_ensembles=True)
    if not fwd.ensembles:
        raise DataError("model keeps no weighted ensemble (deterministic mode); nothing to snapshot")
    ens = fwd.ensembles[-1]
    if hasattr(model, "out_head"):
        proj = model.out_head(ens.hidden).data
    elif ens is fwd.ensembles[0]:
        proj = model._project_encoder(ens.hidden)
    else:
        proj = model._project_decoder(ens.hidden)
    np.savez(path, projections=np.asarray(proj).reshape(-1), weights=ens.norm_weights.data.reshape(-1))


def cmd_ecdf_dump(args) -> None:
    snap = np.load(args.snapshot)
    pts, w = snap["projections"], snap["weights"]
    lo, hi = float(pts.min()), float(pts.max())
    pad = 0.05 * (hi - lo) if hi > lo else 1.0
    grid = np.linspace(lo - pad, hi + pad, args.points)
    f_step, f_smooth = step_ecdf(pts, w, grid), smoothed_ecdf(pts, w, grid)
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["grid", "ecdf_step", "ecdf_continuous"])
        for row in zip(grid, f_step, f_smooth):
            wr.writerow([repr(float(v)) for v in row])


def cmd_sweep(args) -> None:
    from .sweep import run_sweep
    config = RunConfig.from_file(args.config)
    ds = load_csv(args.data, config.target)
    train_ds, test_ds = split_train_test(ds, config.train_fraction, config.T)
    train_n, _, _ = normalize(train_ds, test_ds, config.normalization)
    result = run_sweep(config, train_n.windows(config.T), points=args.points, radius=args.radius,
                       batch=args.batch)
    result.to_csv(args.out)
    print(json.dumps(result.summary()))


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpfrnn", description="Particle-filtered recurrent forecasting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("train", help="train a model from a config file and a CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "write metrics JSON for a checkpoint"),
                                 ("forecast", cmd_forecast, "write per-window predictions CSV")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--split", choices=("all", "test"), default="all",
                       help="evaluate every window, or only the chronological test part")
        if name == "forecast":
            s.add_argument("--snapshot-out", help="also save the last window's weighted ensemble (.npz)")
        s.set_defaults(func=func)

    s = sub.add_parser("synth", help="write a synthetic dataset CSV")
    s.add_argument("--kind", required=True, choices=KINDS)
    s.add_argument("--length", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, help="driver count for driven-ar")
    s.add_argument("--param", action="append", help="generator parameter key=value (repeatable)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ecdf-dump", help="write step and continuous ECDF on a grid for an ensemble snapshot")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--points", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ecdf_dump)

    s = sub.add_parser("sweep", help="loss along a parameter ray under both resamplers")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--points", type=int, default=1000)
    s.add_argument("--radius", type=float, default=0.5)
    s.add_argument("--batch", type=int, default=16, help="number of training windows in the fixed batch")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (train, evaluate, forecast, synth, ecdf-dump, sweep)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"cpfrnn: usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, CheckpointError, DivergenceError, ValueError) as exc:
        print(f"cpfrnn: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cpfrnn: cannot access {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
