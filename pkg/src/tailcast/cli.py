"""Operator command line wiring the pipeline end to end.

Subcommands: synth, ingest, fit-evt, build-graph, train, evaluate,
compare. Options can come from a flat ``key = value`` config file via
--config; explicit flags win over the file. TAILCAST_OUT overrides the
output directory. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evt, graph, ingest, metrics, synth
from .errors import ConfigError, DataError, NumericError
from .model import (ModelConfig, init_params, load_checkpoint,
                    save_checkpoint)
from .training import (LossConfig, OptimizerState, TrainSchedule, train,
                       write_report_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def read_config_file(path: str) -> dict[str, str]:
    """Flat key=value text; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _merged(args: argparse.Namespace, spec: dict[str, type]) -> dict:
    """Config-file values with CLI flags layered on top."""
    base: dict[str, str] = {}
    if getattr(args, "config", None):
        base = read_config_file(args.config)
    out = {}
    for key, cast in spec.items():
        cli_val = getattr(args, key.replace("-", "_"), None)
        if cli_val is not None:
            out[key] = cli_val
        elif key in base:
            try:
                out[key] = cast(base[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
    unknown = set(base) - set(spec)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return out


def _out_dir(args) -> Path:
    out = os.environ.get("TAILCAST_OUT") or getattr(args, "out", None)
    if out is None:
        raise ConfigError("no output directory (use --out or TAILCAST_OUT)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_stations(data_dir: str | Path) -> list[ingest.StationSeries]:
    data_dir = Path(data_dir)
    meta_path = data_dir / "metadata.csv"
    if not meta_path.exists():
        raise DataError(f"{meta_path} not found")
    metas = ingest.parse_metadata_csv(meta_path)
    out = []
    for meta in metas:
        csv_path = data_dir / f"{meta.station_id}.csv"
        if not csv_path.exists():
            raise DataError(f"{csv_path} not found")
        out.append(ingest.parse_station_csv(csv_path, meta))
    return out


def write_stations(out_dir: Path, series_list) -> None:
    ingest.write_metadata_csv(out_dir / "metadata.csv",
                              [s.meta for s in series_list])
    for series in series_list:
        ingest.write_station_csv(out_dir / f"{series.meta.station_id}.csv",
                                 series)


def _parse_date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError as exc:
        raise ConfigError(f"bad date {text!r}") from exc


def cmd_synth(args) -> int:
    cfg_fields = {"stations": int, "years": int, "seed": int,
                  "gpd-xi": float, "gpd-sigma": float, "exceed-prob": float,
                  "ar1": float, "noise-sd": float}
    vals = _merged(args, cfg_fields)
    config = synth.SynthConfig(
        n_stations=vals.get("stations", 20),
        n_years=vals.get("years", 15),
        seed=vals.get("seed", 0),
        gpd_xi=vals.get("gpd-xi", 0.2),
        gpd_sigma=vals.get("gpd-sigma", 5.0),
        exceed_prob=vals.get("exceed-prob", 0.10),
        ar1_coeff=vals.get("ar1", 0.75),
        noise_sd=vals.get("noise-sd", 2.0))
    config.validate()
    out = _out_dir(args)
    series_list = synth.generate(config)
    write_stations(out, series_list)
    print(f"wrote {len(series_list)} station files to {out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    policy = ingest.ImputePolicy(kind=args.policy,
                                 max_gap_days=args.max_gap_days)
    series_list = load_stations(args.data_dir)
    out = _out_dir(args)
    cleaned = [ingest.impute_missing(ingest.fill_value_gaps(s), policy)
               for s in series_list]
    write_stations(out, cleaned)
    print(f"cleaned {len(cleaned)} stations into {out}")
    return EXIT_OK


def cmd_fit_evt(args) -> int:
    series_list = load_stations(args.data_dir)
    out = _out_dir(args)
    descriptors = evt.fit_stations(series_list, quantile=args.quantile)
    evt.write_fit_report(out / "evt_fit.csv", descriptors)
    bad = [sid for sid, d in descriptors.items() if not d.converged]
    print(f"fit {len(descriptors)} stations "
          f"({len(bad)} unconverged) -> {out / 'evt_fit.csv'}")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    series_list = load_stations(args.data_dir)
    out = _out_dir(args)
    train_end = _parse_date(args.train_end)
    descriptors = evt.fit_stations(series_list)
    spec = graph.build_graph(series_list, descriptors, train_end,
                             mode=args.mode,
                             sparsify_threshold=args.sparsify)
    graph.write_adjacency_csv(out / "adjacency.csv", spec)
    if args.mode == "di":
        graph.write_weights_csv(out / "weights.csv", spec, descriptors)
    print(f"graph over {spec.n} stations -> {out}")
    return EXIT_OK


TRAIN_KEYS = {
    "mode": str, "c-in": int, "c-out": int, "train-end": str,
    "val-start": str, "beta": float, "hidden-dim": int, "n-heads": int,
    "n-layers": int, "attention-bias": str, "seed": int,
    "batch-size": int, "learning-rate": float, "max-epochs": int,
    "patience": int, "min-delta": float, "loss": str,
}


def build_and_train(data_dir, out_dir: Path, vals: dict):
    mode = vals.get("mode", "di")
    if mode not in ("baseline", "di"):
        raise ConfigError(f"unknown mode {mode!r}")
    loss_kind = vals.get("loss", "weighted_f1" if mode == "di" else "bce")
    if mode == "baseline" and loss_kind == "weighted_f1" and "loss" not in vals:
        loss_kind = "bce"
    split = ds.SplitSpec(train_end_date=_parse_date(vals["train-end"]),
                         val_start_date=_parse_date(vals["val-start"]))
    series_list = load_stations(data_dir)
    descriptors = evt.fit_stations(series_list) if mode == "di" else None
    gspec = graph.build_graph(series_list, descriptors,
                              split.train_end_date, mode=mode)
    c_in = vals.get("c-in", 10)
    c_out = vals.get("c-out", 3)
    data = ds.build_dataset(series_list, descriptors, mode, c_in, c_out, split)

    seed = vals.get("seed", 0)
    config = ModelConfig(
        mode=mode, c_in=c_in, c_out=c_out,
        n_features=len(data.stats.feature_names),
        n_layers=vals.get("n-layers", 2),
        hidden_dim=vals.get("hidden-dim", 64),
        n_heads=vals.get("n-heads", 4),
        attention_bias=vals.get("attention-bias", "log_bias"),
        seed=seed)
    model = init_params(config, data.stats.mean, data.stats.sd,
                        data.stats.feature_names, gspec)
    loss = LossConfig(kind=loss_kind, beta=vals.get("beta", 1.0),
                      station_weights=gspec.w if mode == "di" else None)
    schedule = TrainSchedule(max_epochs=vals.get("max-epochs", 100),
                             batch_size=vals.get("batch-size", 64),
                             patience=vals.get("patience", 10),
                             min_delta=vals.get("min-delta", 1e-4),
                             shuffle_seed=seed)
    opt = OptimizerState(learning_rate=vals.get("learning-rate", 0.001))
    model, report = train(model, data.train, data.val, loss, schedule, opt)

    save_checkpoint(out_dir / "model.ckpt", model)
    write_report_csv(out_dir / "epochs.csv", report)
    ds.write_manifest(out_dir / "manifest.json", data, split)
    with (out_dir / "run_config.txt").open("w") as fh:
        for key in sorted(vals):
            fh.write(f"{key} = {vals[key]}\n")
    return model, report, data


def cmd_train(args) -> int:
    vals = _merged(args, TRAIN_KEYS)
    for required in ("train-end", "val-start"):
        if required not in vals:
            raise ConfigError(f"--{required} is required")
    out = _out_dir(args)
    model, report, _ = build_and_train(args.data_dir, out, vals)
    best = report.epochs[report.best_epoch]
    print(f"best epoch {best.epoch}: val_loss={best.val_loss:.4f} "
          f"val_ba={best.val_ba:.4f} ({report.stopping_reason})")
    return EXIT_OK


def _evaluate_checkpoint(model, data_dir, split, threshold):
    from .model import forward
    series_list = load_stations(data_dir)
    mode = model.config.mode
    descriptors = evt.fit_stations(series_list) if mode == "di" else None
    data = ds.build_dataset(series_list, descriptors, mode,
                            model.config.c_in, model.config.c_out, split)
    if data.stats.feature_names != model.feature_names:
        raise ConfigError(
            f"checkpoint features {len(model.feature_names)} != dataset "
            f"features {len(data.stats.feature_names)}")
    # score with the checkpoint's own normalization
    panel = data.train.x_panel * data.stats.sd + data.stats.mean
    panel = (panel - model.norm_mean) / model.norm_sd
    for ws in (data.train, data.val):
        ws.x_panel = panel
    ys, ps = [], []
    for start in range(0, len(data.val), 128):
        idx = np.arange(start, min(start + 128, len(data.val)))
        x, y = data.val.batch(idx)
        ys.append(y)
        ps.append(forward(model, x).value)
    y = np.concatenate(ys).reshape(-1)
    p = np.concatenate(ps).reshape(-1)
    return y, p


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    split = ds.SplitSpec(train_end_date=_parse_date(args.train_end),
                         val_start_date=_parse_date(args.val_start))
    out = _out_dir(args)
    y, p = _evaluate_checkpoint(model, args.data_dir, split, args.threshold)
    report = metrics.evaluate(y, p, threshold=args.threshold)
    (out / "metrics.json").write_text(report.to_json())
    roc_points, _ = metrics.roc_auc(y, p)
    pr_points, _ = metrics.pr_curve_ap(y, p)
    metrics.write_curve_csv(out / "roc.csv", roc_points)
    metrics.write_curve_csv(out / "pr.csv", pr_points)
    if args.threshold_sweep:
        with (out / "threshold_sweep.csv").open("w") as fh:
            fh.write("threshold,accuracy,balanced_accuracy,precision,"
                     "recall,tnr,f1\n")
            for th in np.linspace(0.05, 0.95, 19):
                s = metrics.scalar_metrics(metrics.confusion(y, p, th))
                fh.write(",".join([f"{th:.2f}"] + [f"{s[k]:.6f}" for k in (
                    "accuracy", "balanced_accuracy", "precision",
                    "recall", "tnr", "f1")]) + "\n")
    print(f"val AUC={report.auc_roc:.4f} BA={report.balanced_accuracy:.4f} "
          f"-> {out / 'metrics.json'}")
    return EXIT_OK


COMPARE_FIELDS = ["accuracy", "balanced_accuracy", "precision", "recall",
                  "tnr", "f1", "auc_roc", "average_precision"]


def cmd_compare(args) -> int:
    rep_a = metrics.MetricsReport.from_json(Path(args.report_a).read_text())
    rep_b = metrics.MetricsReport.from_json(Path(args.report_b).read_text())
    print(f"{'metric':<20}{'a':>12}{'b':>12}{'delta (b-a)':>14}")
    for name in COMPARE_FIELDS:
        va, vb = getattr(rep_a, name), getattr(rep_b, name)
        print(f"{name:<20}{va:>12.4f}{vb:>12.4f}{vb - va:>14.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tailcast")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--stations", type=int)
    p.add_argument("--years", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--gpd-xi", type=float)
    p.add_argument("--gpd-sigma", type=float)
    p.add_argument("--exceed-prob", type=float)
    p.add_argument("--ar1", type=float)
    p.add_argument("--noise-sd", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate and impute raw station CSVs")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out")
    p.add_argument("--policy", default="linear_interpolate",
                   choices=["drop_day", "linear_interpolate"])
    p.add_argument("--max-gap-days", type=int, default=3)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit-evt", help="per-station GPD fit report")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out")
    p.add_argument("--quantile", type=float, default=0.90)
    p.set_defaults(func=cmd_fit_evt)

    p = sub.add_parser("build-graph", help="station graph export")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out")
    p.add_argument("--train-end", required=True)
    p.add_argument("--mode", default="di", choices=["baseline", "di"])
    p.add_argument("--sparsify", type=float)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train a forecaster")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out")
    p.add_argument("--mode", choices=["baseline", "di"])
    p.add_argument("--c-in", type=int)
    p.add_argument("--c-out", type=int)
    p.add_argument("--train-end")
    p.add_argument("--val-start")
    p.add_argument("--beta", type=float)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--attention-bias", choices=["mask_only", "log_bias"])
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", type=float)
    p.add_argument("--loss", choices=["weighted_f1", "bce"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics and curves on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out")
    p.add_argument("--train-end", required=True)
    p.add_argument("--val-start", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--threshold-sweep", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="side-by-side metric reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
