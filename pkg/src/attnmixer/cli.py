"""Command-line interface: ``attnmixer <command> [options]``.

Model and training options may come from a JSON file given with ``--config``;
flags given on the command line override file values, which override the
built-in defaults. Every command prints its resolved configuration first.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import g1_spec, gen_synthetic, GroundTruthGraph, load_csv, load_params, save_params, write_csv
from .errors import AttnMixerError, ConfigError, StorageError
from .evaluate import anomaly_score, attention_stats, export_attention, metrics_or_partial
from .model import MixerConfig, count_flops, measure_flops, mixer_forward
from .training import Scaler, TrainSettings, predict, prepare, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5

# model/training options shared by train and ablate; defaults follow the reference setup
MODEL_DEFAULTS = {
    "T": 16, "H": 1, "K": 2, "gru_hidden": 32, "lam": 5e-5, "smpr_mode": "entropy", "seed": 0,
    "tie_qk": False, "disable_samp": False, "disable_tamp": False,
    "epochs": 200, "batch_size": 64, "lr": 1e-3, "patience": 15,
}
_TYPES = {"T": int, "H": int, "K": int, "gru_hidden": int, "lam": float, "smpr_mode": str, "seed": int,
          "epochs": int, "batch_size": int, "lr": float, "patience": int}
_FLAGS = ("tie_qk", "disable_samp", "disable_tamp")

ABLATIONS = (
    ("full", {}),
    ("w/o SAMP", {"disable_samp": True}),
    ("w/o TAMP", {"disable_tamp": True}),
    ("w/o SMPR", {"lam": 0.0}),
    ("tied-QK", {"tie_qk": True}),
)


# ---------------------------------------------------------------- argument plumbing

def _add_model_options(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with option values, overridden by flags (default: none)")
    g = p.add_argument_group("model and training")
    for key, typ in _TYPES.items():
        flag = "--" + key.replace("_", "-")
        extra = {"choices": ("literal", "entropy")} if key == "smpr_mode" else {}
        g.add_argument(flag, dest=key, type=typ, default=None,
                       help=f"(default: {MODEL_DEFAULTS[key]})", **extra)
    g.add_argument("--lambda", dest="lam", type=float, default=None, help=f"alias of --lam (default: {MODEL_DEFAULTS['lam']})")
    for key in _FLAGS:
        g.add_argument("--" + key.replace("_", "-"), dest=key, action="store_true", default=None,
                       help="(default: off)")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def resolve_options(args: argparse.Namespace, keys=tuple(MODEL_DEFAULTS)) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    resolved = {k: MODEL_DEFAULTS[k] for k in keys if k in MODEL_DEFAULTS}
    if getattr(args, "config", None):
        doc = _read_json(args.config)
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        for k, v in doc.items():
            if k in resolved:
                resolved[k] = v
            elif not hasattr(args, k):
                raise ConfigError(f"unknown config key {k!r}")
            elif getattr(args, k) is None:
                setattr(args, k, v)
    for k in resolved:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = v
    for k, typ in _TYPES.items():
        if k in resolved:
            try:
                resolved[k] = typ(resolved[k])
            except (TypeError, ValueError):
                raise ConfigError(f"option {k} must be {typ.__name__}, got {resolved[k]!r}") from None
    for k in _FLAGS:
        if k in resolved and not isinstance(resolved[k], bool):
            raise ConfigError(f"option {k} must be true or false")
    return resolved


def _mixer_config(opts: dict, D: int) -> MixerConfig:
    return MixerConfig(T=opts["T"], D=D, K=opts["K"], gru_hidden=opts["gru_hidden"], smpr_mode=opts["smpr_mode"],
                       lam=opts["lam"], tie_qk=opts["tie_qk"], disable_samp=opts["disable_samp"],
                       disable_tamp=opts["disable_tamp"], seed=opts["seed"])


def _settings(opts: dict) -> TrainSettings:
    return TrainSettings(H=opts["H"], epochs=opts["epochs"], batch_size=opts["batch_size"], lr=opts["lr"],
                         patience=opts["patience"])


def _echo(command: str, resolved: dict):
    print(f"# {command} config: " + json.dumps(resolved, sort_keys=True))


def _write_rows(path, header, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _num(x) -> str:
    return format(float(x), ".17g")


def _load_model(args):
    """Checkpoint, its config and the prepared data (scaled with the stored scaler)."""
    params, config, doc = load_params(args.checkpoint)
    frame = load_csv(args.data)
    if frame.D != config.D:
        raise ConfigError(f"checkpoint expects D={config.D} features, data has {frame.D}")
    H = doc.get("H", 1) if getattr(args, "H", None) is None else args.H
    scaler = Scaler.from_json(doc["scaler"]) if "scaler" in doc else None
    ratios = tuple(doc.get("ratios", (0.7, 0.15, 0.15)))
    data = prepare(frame, config.T, H, ratios, scaler=scaler)
    return params, config, doc, data, H


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    resolved = {"out": args.out, "graph": args.graph, "N": args.N, "seed": args.seed, "noise": args.noise,
                "shock_prob": args.shock_prob, "ar_coef": args.ar_coef}
    _echo("generate", resolved)
    spec = g1_spec(N=args.N, noise=args.noise, shock_prob=args.shock_prob, ar_coef=args.ar_coef)
    frame, graph = gen_synthetic(spec, args.seed)
    write_csv(frame, args.out)
    graph_path = args.graph or _sibling(args.out, ".graph.json")
    try:
        with open(graph_path, "w", encoding="utf-8") as fh:
            json.dump(graph.to_json(), fh, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write {graph_path}: {exc}") from exc
    print(f"wrote {frame.N} rows x {frame.D} features to {args.out}; {len(graph.edges)} edges to {graph_path}")
    return EXIT_OK


def _sibling(path: str, suffix: str) -> str:
    for ext in (".csv", ".json"):
        if path.endswith(ext):
            return path[: -len(ext)] + suffix
    return path + suffix


def _require_paths(args, *names):
    missing = [n for n in names if not getattr(args, n, None)]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + n for n in missing))


def _train_one(opts, frame, data=None):
    config = _mixer_config(opts, frame.D)
    return config, *train(config, frame, _settings(opts), data=data)


def cmd_train(args) -> int:
    opts = resolve_options(args)
    _require_paths(args, "data", "out")
    _echo("train", {"data": args.data, "out": args.out, "report": args.report, **opts})
    frame = load_csv(args.data)
    config, params, report = _train_one(opts, frame)
    save_params(args.out, params, config, H=opts["H"], ratios=list(_settings(opts).ratios),
                scaler=report.scaler.to_json(),
                training={k: opts[k] for k in ("epochs", "batch_size", "lr", "patience")})
    report_path = args.report or _sibling(args.out, ".report.csv")
    _write_rows(report_path, ["epoch", "train_loss", "val_mse", "best"],
                [[i + 1, _num(tl), _num(vm), int(i + 1 == report.best_epoch)]
                 for i, (tl, vm) in enumerate(zip(report.train_loss, report.val_mse))])
    m = report.test_metrics
    print(f"best epoch {report.best_epoch}, stopped at {report.stop_epoch}/{report.max_epochs}, "
          f"{report.wall_time:.1f}s")
    print(f"test r2={m.r2:.4f} rmse={m.rmse:.4g} mae={m.mae:.4g} (n={m.n})")
    print(f"checkpoint: {args.out}; report: {report_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, config, doc, data, H = _load_model(args)
    _echo("eval", {"checkpoint": args.checkpoint, "data": args.data, "out": args.out, "H": H,
                   "inverse": args.inverse, "model": config.to_dict()})
    rows = []
    for name in ("train", "val", "test"):
        ds = getattr(data, name)
        y, y_hat = ds.y, predict(params, config, ds.X)
        if args.inverse:
            y, y_hat = data.scaler.inverse_kpi(y), data.scaler.inverse_kpi(y_hat)
        m = metrics_or_partial(y, y_hat)
        rows.append([name, H, _num(m.r2), _num(m.rmse), _num(m.mae)])
        print(f"{name:5s} r2={m.r2:.4f} rmse={m.rmse:.4g} mae={m.mae:.4g} n={m.n}")
    _write_rows(args.out, ["split", "horizon", "r2", "rmse", "mae"], rows)
    return EXIT_OK


def cmd_ablate(args) -> int:
    opts = resolve_options(args)
    _require_paths(args, "data", "out")
    _echo("ablate", {"data": args.data, "out": args.out, **opts})
    frame = load_csv(args.data)
    data = prepare(frame, opts["T"], opts["H"])
    rows = []
    print(f"{'variant':10s} {'r2':>8s} {'rmse':>10s} {'mae':>10s} {'best':>5s}")
    for name, change in ABLATIONS:
        config, _, report = _train_one({**opts, **change}, frame, data)
        m = report.test_metrics
        rows.append([name, opts["H"], _num(m.r2), _num(m.rmse), _num(m.mae), report.best_epoch])
        print(f"{name:10s} {m.r2:8.4f} {m.rmse:10.4g} {m.mae:10.4g} {report.best_epoch:5d}")
    _write_rows(args.out, ["variant", "horizon", "r2", "rmse", "mae", "best_epoch"], rows)
    return EXIT_OK


def cmd_attention(args) -> int:
    params, config, doc, data, H = _load_model(args)
    _echo("attention", {"checkpoint": args.checkpoint, "data": args.data, "out": args.out, "graph": args.graph,
                        "split": args.split, "top_k": args.top_k, "model": config.to_dict()})
    graph = GroundTruthGraph.from_json(_read_json(args.graph)) if args.graph else None
    X = getattr(data, args.split).X
    with ad.no_grad():
        _, record = mixer_forward(X, params, config, capture=True)
    stats = attention_stats(record, graph, args.top_k)
    export_attention(record, args.out, stats)
    for k, (s, t) in enumerate(zip(stats.spatial, stats.temporal)):
        fmt = lambda st: "off" if st is None else f"entropy={st.entropy:.4f} gini={st.gini:.4f}"  # noqa: E731
        print(f"round {k}: spatial {fmt(s)}; temporal {fmt(t)}")
    if stats.edge_mass_ratio is not None:
        print(f"true-edge mass ratio: {stats.edge_mass_ratio:.4f}")
    print(f"attention written to {args.out}")
    return EXIT_OK


def cmd_flops(args) -> int:
    config = MixerConfig(T=args.T, D=args.D, K=args.K, gru_hidden=args.gru_hidden)
    _echo("flops", {"T": args.T, "D": args.D, "K": args.K, "gru_hidden": args.gru_hidden})
    rep = count_flops(config)
    measured = measure_flops(config)
    print(f"samp={rep.samp_flops}")
    print(f"tamp={rep.tamp_flops}")
    print(f"decoder={rep.decoder_flops}")
    print(f"total={rep.total}")
    print(f"instrumented={measured}")
    if measured != rep.total:
        print("MISMATCH between closed form and instrumented count", file=sys.stderr)
        return 1
    return EXIT_OK


def cmd_anomaly(args) -> int:
    params, config, doc, data, H = _load_model(args)
    _echo("anomaly", {"checkpoint": args.checkpoint, "data": args.data, "out": args.out, "q": args.q,
                      "model": config.to_dict()})
    calib = np.abs(data.val.y - predict(params, config, data.val.X))
    y_hat = predict(params, config, data.test.X)
    verdict = anomaly_score(data.test.y, y_hat, calib, args.q)
    stamps = data.frame.timestamps
    rows = [[stamps[r], _num(y), _num(f), _num(res), _num(verdict.threshold)]
            for r, y, f, res, flag in zip(data.test.target_rows, data.test.y, y_hat, verdict.residuals, verdict.flags)
            if flag]
    _write_rows(args.out, ["timestamp", "actual", "forecast", "residual", "threshold"], rows)
    print(f"threshold={verdict.threshold:.6g}; flagged {len(rows)} of {len(y_hat)} test steps; written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for options whose default is resolved later."""

    def _get_help_string(self, action):
        if action.default is None or "(default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="attnmixer", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic benchmark and its edge list", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--graph", default=None, help="edge list JSON (default: <out>.graph.json)")
    p.add_argument("--N", type=int, default=4000, help="rows after burn-in")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--noise", type=float, default=0.05, help="observation noise std")
    p.add_argument("--shock-prob", type=float, default=0.02, help="per-step driver shock probability")
    p.add_argument("--ar-coef", type=float, default=0.7, help="driver AR(1) coefficient")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and save a checkpoint plus a per-epoch report", formatter_class=fmt)
    p.add_argument("--data", help="input CSV (required; may come from --config)")
    p.add_argument("--out", help="checkpoint JSON (required, may come from --config)")
    p.add_argument("--report", default=None, help="per-epoch CSV (default: <out>.report.csv)")
    _add_model_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics CSV for all splits", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON (required)")
    p.add_argument("--data", required=True, help="input CSV (required)")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--H", type=int, default=None, help="horizon (default: the one stored in the checkpoint)")
    p.add_argument("--inverse", action="store_true", help="report metrics in original KPI units")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the five model variants and compare", formatter_class=fmt)
    p.add_argument("--data", help="input CSV (required; may come from --config)")
    p.add_argument("--out", help="comparison CSV (required, may come from --config)")
    _add_model_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attention", help="export attention matrices and sparsity statistics", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON (required)")
    p.add_argument("--data", required=True, help="input CSV (required)")
    p.add_argument("--out", required=True, help="attention JSON")
    p.add_argument("--graph", default=None, help="edge list JSON for the true-edge mass ratio (default: none)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="windows to run")
    p.add_argument("--top-k", type=int, default=1, help="k for the top-k mass statistic")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("flops", help="closed-form and instrumented FLOP counts", formatter_class=fmt)
    p.add_argument("--T", type=int, default=16, help="window length")
    p.add_argument("--D", type=int, default=8, help="number of variates")
    p.add_argument("--K", type=int, default=2, help="SAMP/TAMP rounds")
    p.add_argument("--gru-hidden", type=int, default=32, help="decoder hidden size")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("anomaly", help="flag test steps with outsized forecast residuals", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON (required)")
    p.add_argument("--data", required=True, help="input CSV (required)")
    p.add_argument("--out", required=True, help="flagged steps CSV")
    p.add_argument("--q", type=float, default=0.99, help="quantile of validation residuals used as threshold")
    p.set_defaults(func=cmd_anomaly)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors, 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except AttnMixerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
