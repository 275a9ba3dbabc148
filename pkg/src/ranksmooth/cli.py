"""Command-line front door: data generation, training, evaluation,
ablation grids, and diagnostics, with CSV/SVG outputs.

Every run writes a manifest (command, fully resolved config, seed, git
describe, timestamps) before any compute starts, so a crashed run still
leaves a record of the attempt. All CSV outputs are deterministic given
identical flags and seed; wall-clock timings go to a separate
timings.csv sidecar to keep that true.

Config precedence: command-line flags override `key = value` lines from
--config, which override built-in defaults. The RANK_SMOOTH_SEED
environment variable supplies the seed when --seed is absent.

Exit codes: 0 success, 1 diagnostic failure (failed grad check), 2 usage
or input errors.
"""

import argparse
import json
import os
import subprocess
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .data import CsvFormatError, gen_synthetic_clusters, load_features_csv, save_features_csv
from .encoder import encode, init_encoder, load_encoder, save_encoder
from .experiments import (
    LOSS_KINDS,
    RECORD_METRIC_FIELDS,
    CsvSpec,
    TrainConfig,
    ablate,
    approx_error_sweep,
    grad_check,
    operating_region_sweep,
    train,
)
from .plots import line_chart
from .ranking import mean_ap, recall_at_k
from .smoothap import SmoothApConfig, batch_ap_error, batch_operating_region, smooth_ap_loss

SEED_ENV_VAR = "RANK_SMOOTH_SEED"

METRIC_COLUMNS = ("step",) + RECORD_METRIC_FIELDS


class UsageError(ValueError):
    """Bad flags or unusable input files; exits with status 2."""


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


class Manifest:
    """Run manifest written before compute and finalized afterwards."""

    def __init__(self, path, command, config, seed):
        self.path = Path(path)
        self.body = {
            "command": command,
            "config": config,
            "seed": seed,
            "git_describe": _git_describe(),
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished_at": None,
            "outputs": [],
        }
        self._write()

    def _write(self):
        with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.body, fh, indent=2)
            fh.write("\n")

    def finish(self, outputs):
        self.body["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.body["outputs"] = [str(p) for p in outputs]
        self._write()


def _read_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(text, like):
    if isinstance(like, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"cannot parse boolean from {text!r}")
    if like is None or isinstance(like, str):
        return text
    if isinstance(like, int):
        return int(text)
    return float(text)


def _resolve(args, defaults):
    """flags > config file > defaults; returns a plain namespace dict."""
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_values:
            resolved[key] = _coerce(file_values[key], default)
        else:
            resolved[key] = default
    return resolved


def _resolve_seed(args, resolved):
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in resolved and resolved["seed"] is not None:
        return resolved["seed"]
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV_VAR}={env!r} is not an integer") from exc
    return 0


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _int_list(text, flag):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from exc


def _float_list(text, flag):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{flag} expects comma-separated numbers, got {text!r}") from exc


def _records_rows(records):
    return [
        [
            r.step,
            r.train_loss,
            r.test_map,
            r.recall_at_1,
            r.recall_at_4,
            r.recall_at_16,
            r.ap_error,
            r.operating_region,
        ]
        for r in records
    ]


def _write_metric_plots(out, records, outputs):
    steps = [r.step for r in records]
    for name in ("train_loss", "test_map", "ap_error"):
        path = out / f"plot_{name}.svg"
        line_chart(path, steps, {name: [getattr(r, name) for r in records]}, name, "step", name)
        outputs.append(path)


# ---------------------------------------------------------------------------
# subcommands

GEN_DEFAULTS = {
    "classes": 50,
    "per_class": 20,
    "dim": 64,
    "noise": 0.13,
    "signal_dim": 16,
}


def cmd_gen_data(args):
    resolved = _resolve(args, GEN_DEFAULTS)
    seed = _resolve_seed(args, resolved)
    if resolved["classes"] < 2:
        raise UsageError("--classes must be at least 2")
    if resolved["per_class"] < 2:
        raise UsageError("--per-class must be at least 2")
    out = Path(args.output)
    signal_dim = resolved["signal_dim"] if resolved["signal_dim"] > 0 else None
    manifest = Manifest(
        str(out) + ".manifest.json", "gen-data", dict(resolved, seed=seed), seed
    )
    ds = gen_synthetic_clusters(
        resolved["classes"], resolved["per_class"], resolved["dim"],
        resolved["noise"], seed, signal_dim=signal_dim,
    )
    save_features_csv(out, ds)
    manifest.finish([out])
    print(f"wrote {len(ds)} rows to {out}")
    return 0


TRAIN_DEFAULTS = {
    "loss": "smooth-ap",
    "tau": 0.01,
    "batch": 64,
    "per_class": 4,
    "steps": 2000,
    "eval_every": 200,
    "lr": 1e-4,
    "weight_decay": 4e-5,
    "test_fraction": 0.5,
    "d_out": 16,
    "hidden_dim": 0,
    "bias": False,
}


def _train_config(resolved, seed, data_path):
    if resolved["loss"] not in LOSS_KINDS:
        raise UsageError(f"--loss must be one of {', '.join(LOSS_KINDS)}")
    if resolved["tau"] is not None and resolved["tau"] <= 0:
        raise UsageError("--tau must be positive")
    if not Path(data_path).exists():
        raise UsageError(f"dataset not found: {data_path}")
    try:
        return TrainConfig(
            loss=resolved["loss"],
            tau=resolved["tau"],
            batch_size=resolved["batch"],
            per_class=resolved["per_class"],
            steps=resolved["steps"],
            eval_every=resolved["eval_every"],
            lr=resolved["lr"],
            weight_decay=resolved["weight_decay"],
            seed=seed,
            data=CsvSpec(path=str(data_path)),
            test_fraction=resolved["test_fraction"],
            d_out=resolved["d_out"],
            hidden_dim=resolved["hidden_dim"] or None,
            bias=resolved["bias"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _config_dict(cfg):
    body = asdict(cfg)
    body["data"] = asdict(cfg.data)
    return body


def cmd_train(args):
    resolved = _resolve(args, TRAIN_DEFAULTS)
    seed = _resolve_seed(args, resolved)
    cfg = _train_config(resolved, seed, args.data)
    out = _out_dir(args.output)
    manifest = Manifest(out / "manifest.json", "train", _config_dict(cfg), seed)
    result = train(cfg)
    outputs = [out / "metrics.csv", out / "timings.csv", out / "encoder.bin"]
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, _records_rows(result.records))
    _write_csv(
        out / "timings.csv",
        ("step", "wall_ms"),
        [[r.step, r.wall_ms] for r in result.records],
    )
    save_encoder(out / "encoder.bin", result.params)
    if args.plot:
        _write_metric_plots(out, result.records, outputs)
    manifest.finish(outputs)
    final = result.final
    print(f"final step {final.step}: test mAP {final.test_map:.4f}, loss {final.train_loss:.4f}")
    return 0


EVAL_DEFAULTS = {"tau": 0.01, "d_out": 16}


def cmd_eval(args):
    resolved = _resolve(args, EVAL_DEFAULTS)
    seed = _resolve_seed(args, resolved)
    if not Path(args.data).exists():
        raise UsageError(f"dataset not found: {args.data}")
    if args.checkpoint and not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    out = _out_dir(args.output)
    config = {
        "data": str(args.data),
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
        "tau": resolved["tau"],
        "d_out": resolved["d_out"],
        "seed": seed,
    }
    manifest = Manifest(out / "manifest.json", "eval", config, seed)
    ds = load_features_csv(args.data)
    if args.checkpoint:
        params = load_encoder(args.checkpoint)
    else:
        params = init_encoder(ds.dim, resolved["d_out"], seed=seed)
    batch = encode(ds.features, ds.class_ids, params)
    diag = SmoothApConfig(resolved["tau"])
    loss_value = smooth_ap_loss(batch, diag).loss
    recalls = recall_at_k(batch, (1, 4, 16))
    row = [
        0,
        loss_value,
        mean_ap(batch),
        recalls[1],
        recalls[4],
        recalls[16],
        batch_ap_error(batch, diag),
        batch_operating_region(batch, diag),
    ]
    _write_csv(out / "metrics.csv", METRIC_COLUMNS, [row])
    manifest.finish([out / "metrics.csv"])
    print(f"mAP {row[2]:.4f}, recall@1 {row[3]:.4f} over {len(ds)} instances")
    return 0


ABLATE_PARAMS = {"tau": float, "per_class": int, "batch_size": int, "lr": float}


def cmd_ablate(args):
    resolved = _resolve(args, TRAIN_DEFAULTS)
    seed = _resolve_seed(args, resolved)
    if args.param not in ABLATE_PARAMS:
        raise UsageError(f"--param must be one of {', '.join(ABLATE_PARAMS)}")
    kind = ABLATE_PARAMS[args.param]
    values = (
        _int_list(args.values, "--values") if kind is int else _float_list(args.values, "--values")
    )
    if not values:
        raise UsageError("--values must list at least one value")
    cfg = _train_config(resolved, seed, args.data)
    out = _out_dir(args.output)
    manifest = Manifest(
        out / "manifest.json",
        "ablate",
        {"base": _config_dict(cfg), "param": args.param, "values": values},
        seed,
    )
    rows = []
    for value, final, _ in ablate(cfg, args.param, values):
        rows.append([value] + _records_rows([final])[0])
    _write_csv(out / "summary.csv", (args.param,) + METRIC_COLUMNS, rows)
    manifest.finish([out / "summary.csv"])
    for row in rows:
        print(f"{args.param}={row[0]}: test mAP {row[3]:.4f}")
    return 0


GRAD_CHECK_DEFAULTS = {
    "loss": "smooth-ap",
    "tau": 1.0,
    "m": 16,
    "d": 8,
    "fd_step": 1e-6,
    "tolerance": 1e-5,
}


def cmd_grad_check(args):
    resolved = _resolve(args, GRAD_CHECK_DEFAULTS)
    seed = _resolve_seed(args, resolved)
    if resolved["loss"] not in LOSS_KINDS:
        raise UsageError(f"--loss must be one of {', '.join(LOSS_KINDS)}")
    if resolved["tau"] <= 0:
        raise UsageError("--tau must be positive")
    report = grad_check(
        loss=resolved["loss"],
        m=resolved["m"],
        d=resolved["d"],
        tau=resolved["tau"],
        fd_step=resolved["fd_step"],
        tolerance=resolved["tolerance"],
        seed=seed,
    )
    print(
        f"{report.loss}: max rel error embedding {report.max_rel_error_embedding:.3e}, "
        f"params {report.max_rel_error_params:.3e}, tolerance {report.tolerance:.1e} "
        f"-> {'PASS' if report.passed else 'FAIL'}"
    )
    if args.output:
        out = _out_dir(args.output)
        _write_csv(
            out / "grad_check.csv",
            ("loss", "tau", "fd_step", "tolerance", "max_rel_error_embedding",
             "max_rel_error_params", "passed"),
            [[report.loss, report.tau if report.tau is not None else float("nan"),
              report.fd_step, report.tolerance, report.max_rel_error_embedding,
              report.max_rel_error_params, int(report.passed)]],
        )
    return 0 if report.passed else 1


APPROX_DEFAULTS = {
    "taus": "0.1,0.01,0.001",
    "steps": 20,
    "batch": 64,
    "per_class": 4,
    "lr": 1e-4,
    "d_out": 16,
}


def cmd_approx_error(args):
    resolved = _resolve(args, APPROX_DEFAULTS)
    seed = _resolve_seed(args, resolved)
    if not Path(args.data).exists():
        raise UsageError(f"dataset not found: {args.data}")
    taus = _float_list(resolved["taus"], "--taus")
    if not taus or any(t <= 0 for t in taus):
        raise UsageError("--taus must list positive temperatures")
    out = _out_dir(args.output)
    config = dict(resolved, taus=taus, data=str(args.data), seed=seed)
    manifest = Manifest(out / "manifest.json", "approx-error", config, seed)
    ds = load_features_csv(args.data)
    sweep = approx_error_sweep(
        ds, taus, resolved["steps"], batch_size=resolved["batch"],
        per_class=resolved["per_class"], d_out=resolved["d_out"],
        lr=resolved["lr"], seed=seed,
    )
    rows = [[tau, step, err] for tau in taus for step, err in enumerate(sweep[tau])]
    _write_csv(out / "approx_error.csv", ("tau", "step", "ap_error"), rows)
    outputs = [out / "approx_error.csv"]
    if args.plot:
        path = out / "plot_approx_error.svg"
        line_chart(
            path,
            list(range(resolved["steps"])),
            {f"tau={tau:g}": sweep[tau] for tau in taus},
            "AP approximation error per training batch",
            "step",
            "ap_error",
        )
        outputs.append(path)
    manifest.finish(outputs)
    for tau in taus:
        print(f"tau={tau:g}: mean ap_error {float(np.mean(sweep[tau])):.5f}")
    return 0


REGION_DEFAULTS = {
    "batch_sizes": "32,64,128,256",
    "tau": 0.01,
    "threshold": 0.005,
    "lr": 0.6,
    "repeats": 16,
    "d_out": 16,
}


def cmd_region_sweep(args):
    resolved = _resolve(args, REGION_DEFAULTS)
    seed = _resolve_seed(args, resolved)
    if not Path(args.data).exists():
        raise UsageError(f"dataset not found: {args.data}")
    sizes = _int_list(resolved["batch_sizes"], "--batch-sizes")
    if not sizes or any(b < 1 for b in sizes):
        raise UsageError("--batch-sizes must list positive integers")
    if resolved["tau"] <= 0 or resolved["threshold"] <= 0:
        raise UsageError("--tau and --threshold must be positive")
    out = _out_dir(args.output)
    config = dict(resolved, batch_sizes=sizes, data=str(args.data), seed=seed)
    manifest = Manifest(out / "manifest.json", "region-sweep", config, seed)
    ds = load_features_csv(args.data)
    sweep = operating_region_sweep(
        ds, sizes, tau=resolved["tau"], grad_threshold=resolved["threshold"],
        d_out=resolved["d_out"], lr=resolved["lr"], seed=seed,
        repeats=resolved["repeats"],
    )
    rows = [[b, sweep[b]] for b in sizes]
    _write_csv(out / "region_sweep.csv", ("batch_size", "mean_operating_region"), rows)
    outputs = [out / "region_sweep.csv"]
    if args.plot:
        path = out / "plot_region_sweep.svg"
        line_chart(path, sizes, {"P": [sweep[b] for b in sizes]},
                   "Operating-region fraction vs batch size", "batch size", "P")
        outputs.append(path)
    manifest.finish(outputs)
    for b in sizes:
        print(f"B={b}: mean P {sweep[b]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_common(parser, with_out=True):
    parser.add_argument("--seed", type=int, default=None,
                        help=f"random seed (falls back to ${SEED_ENV_VAR}, then 0)")
    parser.add_argument("--config", default=None, help="key=value config file")
    if with_out:
        parser.add_argument("-o", "--out", dest="output", required=True, help="output directory")


def _add_train_flags(parser):
    parser.add_argument("--data", required=True, help="feature CSV path")
    parser.add_argument("--loss", default=None, choices=LOSS_KINDS)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--per-class", dest="per_class", type=int, default=None)
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    parser.add_argument("--test-fraction", dest="test_fraction", type=float, default=None)
    parser.add_argument("--d-out", dest="d_out", type=int, default=None)
    parser.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=None)
    parser.add_argument("--bias", action="store_const", const=True, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ranksmooth",
        description="Retrieval training and evaluation with exact and smoothed average precision.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic feature CSV")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", dest="per_class", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--signal-dim", dest="signal_dim", type=int, default=None,
                   help="shared signal subspace dimension; 0 for fully isotropic means")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("-o", "--out", dest="output", required=True, help="output CSV path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an encoder and log metrics")
    _add_train_flags(p)
    p.add_argument("--plot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a dataset with a checkpoint or fresh encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--d-out", dest="d_out", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="vary one training parameter over a grid")
    _add_train_flags(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="compare analytic gradients to finite differences")
    p.add_argument("--loss", default=None, choices=LOSS_KINDS)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--fd-step", dest="fd_step", type=float, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("-o", "--out", dest="output", default=None, help="optional report directory")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("approx-error", help="AP approximation error per temperature")
    p.add_argument("--data", required=True)
    p.add_argument("--taus", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--per-class", dest="per_class", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--d-out", dest="d_out", type=int, default=None)
    p.add_argument("--plot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_approx_error)

    p = sub.add_parser("region-sweep", help="operating-region fraction vs batch size")
    p.add_argument("--data", required=True)
    p.add_argument("--batch-sizes", dest="batch_sizes", default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--d-out", dest="d_out", type=int, default=None)
    p.add_argument("--plot", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_region_sweep)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CsvFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
