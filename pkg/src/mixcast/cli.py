"""Command-line surface: synth | train | predict | eval.

Configuration is a flat key=value file with environment (MIXCAST_*) and
command-line overrides; every command validates the fully resolved config
before writing anything and echoes it into the output directory, so reruns
with the same seed reproduce outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as ev
from .data import DataError
from .dist import BaseKind
from .model import (
    ModelConfig, ModelParams, NumericError, load_checkpoint, predict_distribution,
    save_checkpoint, stochastic_forward,
)
from .train import IMM, MSE, TrainConfig, train

ENV_PREFIX = "MIXCAST_"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (type, default)
SCHEMA = {
    "seed": (int, 0),
    "data_kind": (str, "synthetic"),
    "loss": (str, IMM),
    "epochs": (int, 100),
    "batch_size": (int, 64),
    "lr": (float, 2e-4),
    "k_train": (int, 5),
    "k_eval": (int, 100),
    "patience": (int, 10),
    "clip_norm": (float, 5.0),
    "beta_a": (float, 0.0),
    "beta_b": (float, 0.9),
    "adam_eps": (float, 1e-8),
    "d": (int, 32),
    "heads": (int, 4),
    "d_k": (int, 8),
    "d_v": (int, 8),
    "enc_blocks": (int, 2),
    "dec_blocks": (int, 1),
    "ff": (int, 64),
    "dropout": (float, 0.3),
    "enc_len": (int, 4),
    "pred_len": (int, 2),
    "base": (str, "gaussian"),
    "n_subjects": (int, 1),
    "window_stride": (int, 1),
    "step_seconds": (int, 300),
    "max_jump": (float, 40.0),
    "n_train": (int, 2000),
    "n_val": (int, 100),
    "n_test": (int, 100),
    "grid_start": (float, -4.0),
    "grid_stop": (float, 3.0),
    "grid_step": (float, 0.5),
    "branch_prob": (float, 0.5),
    "gp_length_scale": (float, 1.0),
    "gp_amplitude": (float, 0.15),
    "obs_noise": (float, 0.02),
    "branch_slope": (float, 1.5),
    "mesh_size": (int, 12),
    "emit_draws": (bool, False),
    "svg": (bool, True),
    "out": (str, ""),
    "data": (str, ""),
    "checkpoint": (str, ""),
    "manifest": (str, ""),
}


def load_config_file(path) -> dict:
    """Parse a flat key=value file; blank lines and #-comments are skipped."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(file_values: dict, env: dict, overrides: dict) -> dict:
    """defaults < config file < environment < command line."""
    resolved = {key: default for key, (_, default) in SCHEMA.items()}

    def coerce(key, raw, origin):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} (from {origin})")
        typ = SCHEMA[key][0]
        try:
            return _parse_bool(raw) if typ is bool else typ(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key!r} (from {origin}): {raw!r}") from None

    for key, raw in file_values.items():
        resolved[key] = coerce(key, raw, "config file")
    for key in SCHEMA:
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            resolved[key] = coerce(key, env[env_key], f"env {env_key}")
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    validate_config(resolved)
    return resolved


def validate_config(cfg: dict):
    try:
        model_config(cfg)
        train_config(cfg)
        if cfg["data_kind"] == "synthetic":
            synthetic_config(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["data_kind"] not in ("synthetic", "cgm"):
        raise ConfigError(f"data_kind must be synthetic or cgm, got {cfg['data_kind']!r}")
    if cfg["window_stride"] < 1 or cfg["step_seconds"] < 1:
        raise ConfigError("window_stride and step_seconds must be >= 1")
    if cfg["mesh_size"] < 1:
        raise ConfigError("mesh_size must be >= 1")


def model_config(cfg: dict) -> ModelConfig:
    d_t = data_mod.TIME_FEATURE_COUNT if cfg["data_kind"] == "cgm" else 0
    return ModelConfig(
        d=cfg["d"], heads=cfg["heads"], d_k=cfg["d_k"], d_v=cfg["d_v"],
        enc_blocks=cfg["enc_blocks"], dec_blocks=cfg["dec_blocks"], ff=cfg["ff"],
        dropout_p=cfg["dropout"], t_enc=cfg["enc_len"], t_pred=cfg["pred_len"],
        d_t=d_t, n_subjects=cfg["n_subjects"], base=BaseKind(cfg["base"]),
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        loss_kind=cfg["loss"], k_train=cfg["k_train"], k_eval=cfg["k_eval"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        beta_a=cfg["beta_a"], beta_b=cfg["beta_b"], eps=cfg["adam_eps"],
        seed=cfg["seed"], patience=cfg["patience"], clip_norm=cfg["clip_norm"],
    )


def synthetic_config(cfg: dict) -> data_mod.SyntheticConfig:
    return data_mod.SyntheticConfig(
        n_train=cfg["n_train"], n_val=cfg["n_val"], n_test=cfg["n_test"],
        grid_start=cfg["grid_start"], grid_stop=cfg["grid_stop"],
        grid_step=cfg["grid_step"], branch_prob=cfg["branch_prob"],
        gp_length_scale=cfg["gp_length_scale"], gp_amplitude=cfg["gp_amplitude"],
        obs_noise=cfg["obs_noise"], branch_slope=cfg["branch_slope"],
    )


def write_resolved_config(cfg: dict, out_dir: Path):
    lines = []
    for key in sorted(SCHEMA):
        value = cfg[key]
        text = repr(float(value)) if isinstance(value, float) else str(value)
        lines.append(f"{key}={text}")
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _require(cfg: dict, *keys):
    for key in keys:
        if not cfg[key]:
            raise ConfigError(f"missing required setting {key!r}")


def _window_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), 4, int(index)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# manifest io


def write_dataset_manifest(dataset: data_mod.Dataset, path: Path):
    lines = [f"kind {dataset.kind}", f"step_seconds {dataset.step_seconds}",
             f"normalize {repr(dataset.affine.mean)} {repr(dataset.affine.std)}"]
    for sid, index in sorted(dataset.subject_index.items()):
        lines.append(f"subject {sid} {index}")
    for seg_id, split in sorted(dataset.split_assignment.items()):
        lines.append(f"segment {seg_id} {split}")
    path.write_text("\n".join(lines) + "\n")


def read_dataset_manifest(path):
    kind = None
    step_seconds = 0
    affine = None
    subjects = {}
    assignment = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read dataset manifest {path}: {exc}") from None
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "kind":
            kind = parts[1]
        elif parts[0] == "step_seconds":
            step_seconds = int(parts[1])
        elif parts[0] == "normalize":
            affine = data_mod.Affine(float(parts[1]), float(parts[2]))
        elif parts[0] == "subject":
            subjects[parts[1]] = int(parts[2])
        elif parts[0] == "segment":
            assignment[parts[1]] = parts[2]
        else:
            raise DataError(f"unknown manifest entry {parts[0]!r}")
    if kind is None or affine is None:
        raise DataError(f"incomplete dataset manifest {path}")
    return kind, step_seconds, affine, subjects, assignment


# ---------------------------------------------------------------------------
# dataset loading


def _load_training_dataset(cfg: dict) -> data_mod.Dataset:
    kind = cfg["data_kind"]
    if kind == "synthetic":
        base = Path(cfg["data"])
        splits = []
        for name in ("train", "val", "test"):
            path = base / f"{name}.csv"
            if not path.exists():
                raise DataError(f"missing synthetic data file {path}")
            splits.append(data_mod.read_synthetic_csv(path))
        return data_mod.build_synthetic_dataset(*splits, cfg["enc_len"], cfg["pred_len"])
    series = data_mod.ingest_csv(cfg["data"])
    return data_mod.build_cgm_dataset(
        series, cfg["enc_len"], cfg["pred_len"], seed=cfg["seed"],
        stride=cfg["window_stride"], max_jump=cfg["max_jump"],
        step_seconds=cfg["step_seconds"])


def _load_eval_windows(cfg: dict):
    """Rebuild the test windows exactly as the training run saw them."""
    manifest_path = cfg["manifest"] or str(Path(cfg["checkpoint"]).parent / "dataset_manifest.txt")
    kind, step_seconds, affine, subjects, assignment = read_dataset_manifest(manifest_path)
    if kind != cfg["data_kind"]:
        raise ConfigError(f"config data_kind={cfg['data_kind']} but manifest kind={kind}")
    if kind == "synthetic":
        path = Path(cfg["data"]) / "test.csv"
        if not path.exists():
            raise DataError(f"missing synthetic data file {path}")
        series = data_mod.read_synthetic_csv(path)
        windows = [data_mod.synthetic_window(s, cfg["enc_len"], cfg["pred_len"])
                   for s in series]
    else:
        series = data_mod.ingest_csv(cfg["data"])
        min_len = cfg["enc_len"] + cfg["pred_len"]
        windows = []
        for raw in series:
            for seg_item in data_mod.segment(raw, min_len, cfg["max_jump"], cfg["step_seconds"]):
                if assignment.get(seg_item.segment_id) != "test":
                    continue
                idx = subjects.get(seg_item.subject_id, 0)
                windows.extend(data_mod.windowize(
                    seg_item, cfg["enc_len"], cfg["pred_len"],
                    stride=cfg["window_stride"], subject_index=idx))
    data_mod.apply_normalization(windows, affine)
    return windows, affine, step_seconds


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    scfg = synthetic_config(cfg)
    train_series, val_series, test_series = data_mod.generate_synthetic(scfg, cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name, series_list in (("train", train_series), ("val", val_series),
                              ("test", test_series)):
        data_mod.write_synthetic_csv(series_list, out / f"{name}.csv")
    lines = []
    for name, series_list in (("train", train_series), ("val", val_series),
                              ("test", test_series)):
        for s in series_list:
            branch = "up" if s.branch > 0 else "down"
            lines.append(f"series {s.series_id} {name} {branch}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    write_resolved_config(cfg, out)
    print(f"wrote {len(train_series)}/{len(val_series)}/{len(test_series)} series to {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    _require(cfg, "out", "data")
    dataset = _load_training_dataset(cfg)
    if cfg["data_kind"] == "cgm":
        cfg["n_subjects"] = len(dataset.subject_index) + 1  # row 0 = unseen subjects
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    if not dataset.train:
        raise DataError("no training windows after preprocessing")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    write_dataset_manifest(dataset, out / "dataset_manifest.txt")

    params = ModelParams(mcfg, seed=cfg["seed"])
    t0 = time.perf_counter()
    result = train(params, mcfg, dataset.train, dataset.val, tcfg,
                   log=lambda msg: print(msg, flush=True))
    wall = time.perf_counter() - t0

    save_checkpoint(result.params, out / "checkpoint.bin")
    with open(out / "training_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_nll"])
        for rec in result.history:
            w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_nll)])
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "wall_seconds"])
        for rec in result.history:
            w.writerow([rec.epoch, repr(rec.wall_seconds)])
    print(f"trained {len(result.history)} epochs (best {result.best_epoch}) "
          f"in {wall:.1f}s; checkpoint at {out / 'checkpoint.bin'}")
    return EXIT_OK


def _load_model(cfg: dict) -> tuple:
    mcfg = model_config(cfg)
    try:
        params = load_checkpoint(cfg["checkpoint"], mcfg)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {cfg['checkpoint']}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return params, mcfg


def cmd_predict(cfg: dict) -> int:
    _require(cfg, "out", "data", "checkpoint")
    windows, affine, _ = _load_eval_windows(cfg)
    params, mcfg = _load_model(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    k = cfg["k_eval"]
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "horizon", "draw", "mu", "scale"])
        for idx, window in enumerate(windows):
            sample = predict_distribution(params, mcfg, window, k,
                                          _window_seed(cfg["seed"], idx))
            point = affine.invert(ev.point_forecast(sample))
            for h in range(1, mcfg.t_pred + 1):
                w.writerow([window.window_id, h, "point", repr(float(point[h - 1])), ""])
                if cfg["emit_draws"]:
                    for j, draw in enumerate(sample.draws):
                        if mcfg.base is BaseKind.GAUSSIAN:
                            scale_value = float(np.exp(0.5 * draw.log_scale[h - 1]))
                        else:
                            scale_value = float(np.exp(draw.log_scale[h - 1]))
                        w.writerow([window.window_id, h, j,
                                    repr(float(draw.mean[h - 1])), repr(scale_value)])
    print(f"wrote predictions for {len(windows)} windows to {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "out", "data", "checkpoint")
    windows, affine, step_seconds = _load_eval_windows(cfg)
    params, mcfg = _load_model(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)

    if not windows:
        print("warning: empty test set; writing headers-only reports", file=sys.stderr)
        ev.emit_reports(out, svg=False)
        return EXIT_OK

    samples = []
    point_rows = []
    det_rows = []
    for idx, window in enumerate(windows):
        sample = predict_distribution(params, mcfg, window, cfg["k_eval"],
                                      _window_seed(cfg["seed"], idx))
        samples.append(sample)
        point_rows.append(affine.invert(ev.point_forecast(sample)))
        det = stochastic_forward(params, mcfg, window, seed=0, stochastic=False)
        det_rows.append(det.mean)

    pairs = [(w.y_raw, point) for w, point in zip(windows, point_rows)]
    metrics = ev.aggregate_metrics(pairs, mcfg.t_pred, step_seconds)

    targets = np.stack([w.y for w in windows])
    imm_ll = ev.test_loglik_imm(zip(samples, targets), mcfg.base)
    baseline_ll, _ = ev.test_loglik_gaussian_baseline(np.stack(det_rows), targets)

    cdf_matrix = ev.mixture_cdf_matrix(zip(samples, targets), mcfg.base)
    calib = ev.calibration(cdf_matrix, cfg["mesh_size"])
    sharp = ev.sharpness_report(samples, mcfg.base)

    ev.emit_reports(out, metrics=metrics, calibration_report=calib, sharpness=sharp,
                    logliks={"imm": imm_ll, "gaussian_baseline": baseline_ll},
                    svg=cfg["svg"])
    print(f"evaluated {len(windows)} windows: imm_ll={imm_ll:.4f} "
          f"gaussian_baseline_ll={baseline_ll:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixcast",
        description="Probabilistic multi-horizon forecasting: generate data, "
                    "train, predict, and evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("synth", "generate a synthetic branching dataset"),
        ("train", "train a forecaster"),
        ("predict", "write point and per-draw predictions"),
        ("eval", "write metric, likelihood, calibration, and sharpness reports"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="flat key=value config file")
        for key, (typ, _) in SCHEMA.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                               default=None)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {key: getattr(args, key) for key in SCHEMA}
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, os.environ, overrides)
        handler = {"synth": cmd_synth, "train": cmd_train,
                   "predict": cmd_predict, "eval": cmd_eval}[args.command]
        return handler(cfg)
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
