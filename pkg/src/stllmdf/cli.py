"""Batch entry points: prepare, train-denoiser, train, eval, sweep-missing, ablate, gradcheck.

Every command takes ``--config`` (``key = value`` text), ``--seed`` and
``--out``.  Artifacts land in the output directory; ``run.log`` carries no
timestamps so identical runs give identical files.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as D
from . import gradcheck, stdf
from .config import RunConfig, dump_config, load_config
from .diffusion import NoisePredictor, mean_impute
from .errors import ConfigurationError, GradCheckError, InsufficientDataError, IntegrityError, \
    ShapeError, UndefinedMetricError, UsageError
from .metrics import MetricsReport, hi_baseline, horizon_report, mae
from .model import Forecaster
from .training import TrainingDiverged, recover_inputs, train_denoiser, train_forecaster

log = logging.getLogger("stllmdf")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
ERRORS = (ConfigurationError, ShapeError, IntegrityError, InsufficientDataError, UsageError,
          UndefinedMetricError, GradCheckError, TrainingDiverged, FileNotFoundError)


@dataclass
class Prepared:
    train: D.WindowedDataset
    val: D.WindowedDataset
    test: D.WindowedDataset
    normalizer: D.Normalizer
    cache_hit: bool


# ------------------------------------------------------------------- helpers

def _source(cfg: RunConfig) -> D.SeriesSource:
    if cfg.is_synthetic:
        return D.synthetic_series(cfg.synthetic_steps, cfg.synthetic_nodes, cfg.num_features,
                                  cfg.granularity, cfg.synthetic_noise, cfg.seed, cfg.start_time,
                                  cfg.synthetic_missing)
    return D.load_source(cfg.dataset, cfg.num_features, cfg.granularity, cfg.start_time)


def _cache_key(cfg: RunConfig) -> str:
    key = cfg.data_hash()
    if not cfg.is_synthetic:
        digest = hashlib.sha256(Path(cfg.dataset).read_bytes()).hexdigest()[:16]
        key = hashlib.sha256(f"{key}:{digest}".encode()).hexdigest()[:16]
    return key


def _write_csv(path: Path, rows: list, fields: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _dtype(cfg: RunConfig):
    return ad.dtype_for(cfg.profile)


def _load_denoiser(cfg: RunConfig, out: Path) -> NoisePredictor:
    bundle = out / "denoiser"
    if not (bundle / "manifest.txt").exists():
        raise ConfigurationError(f"no denoiser bundle in {bundle}; run train-denoiser first "
                                 "or set enable_denoise = false")
    arrays, manifest = stdf.load_bundle(bundle)
    _check_hash("denoiser", manifest.get("config_hash"), cfg.denoiser_hash())
    net = _new_denoiser(cfg)
    net.load_state(arrays)
    return net.set_frozen(True)


def _new_denoiser(cfg: RunConfig) -> NoisePredictor:
    return NoisePredictor(cfg.num_features, cfg.denoiser_hidden, cfg.denoiser_width,
                          cfg.timestep_dim, cfg.max_period, np.random.default_rng(cfg.seed),
                          _dtype(cfg))


def _check_hash(kind: str, stored, expected: str) -> None:
    if stored != expected:
        raise ConfigurationError(f"{kind} bundle was produced by config hash {stored}, "
                                 f"current config hash is {expected}; refusing to continue")


def _load_forecaster(cfg: RunConfig, out: Path, num_nodes: int) -> Forecaster:
    bundle = out / "forecaster"
    if not (bundle / "manifest.txt").exists():
        raise ConfigurationError(f"no forecaster bundle in {bundle}; run train first")
    arrays, manifest = stdf.load_bundle(bundle)
    _check_hash("forecaster", manifest.get("config_hash"), cfg.train_hash())
    model = Forecaster(cfg.model_config(num_nodes), cfg.seed)
    model.load_state(arrays)
    return model


def _recover(cfg: RunConfig, ds: D.WindowedDataset, denoiser) -> np.ndarray:
    if denoiser is None or ds.mask.all():
        return ds.inputs
    log.info("recovering %d missing entries in %d windows", int((~ds.mask).sum()),
             int((~ds.mask.reshape(len(ds), -1).all(axis=1)).sum()))
    steps = cfg.ddim_steps if cfg.sampler == "ddim" else None
    return recover_inputs(ds, denoiser, cfg.schedule(), cfg.sampler_config(), steps,
                          cfg.recovery_samples)


def _corrupt(cfg: RunConfig, ds: D.WindowedDataset, ratio: float) -> D.WindowedDataset:
    return D.inject_missing(ds, D.CorruptionSpec(ratio, cfg.seed))[0]


def _report(cfg: RunConfig, pred, ds: D.WindowedDataset, norm: D.Normalizer) -> MetricsReport:
    return horizon_report(pred, ds.targets, cfg.horizons, cfg.granularity, norm, cfg.mape_floor,
                          cfg.train_hash(), cfg.seed)


# ------------------------------------------------------------------ commands

def cmd_prepare(cfg: RunConfig, out: Path) -> Prepared:
    """Build, split, normalize and cache the windows; reuse the cache when its hash matches."""
    cfg.validate_paths()
    key = _cache_key(cfg)
    cache = out / "cache"
    hit = D.load_cache(cache, key)
    if hit is not None:
        splits, norm = hit
        log.info("cache hit (%s): %s", key, ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
        return Prepared(splits["train"], splits["val"], splits["test"], norm, True)
    src = _source(cfg)
    ds = D.build_windows(src, cfg.window_spec())
    train, val, test = D.split_chronological(ds, cfg.split_spec())
    (train, val, test), norm = D.fit_apply_normalizer(train, val, test, dtype=_dtype(cfg))
    D.save_cache(cache, {"train": train, "val": val, "test": test}, norm, key, src.digest())
    log.info("cache built (%s): %d windows, train=%d val=%d test=%d", key, len(ds), len(train),
             len(val), len(test))
    return Prepared(train, val, test, norm, False)


def cmd_train_denoiser(cfg: RunConfig, out: Path) -> NoisePredictor:
    prep = cmd_prepare(cfg, out)
    net = _new_denoiser(cfg)
    manifest = {"kind": "denoiser", "config_hash": cfg.denoiser_hash(), "seed": cfg.seed,
                "frozen": "true", "schedule": "linear", "diffusion_steps": cfg.diffusion_steps,
                "beta_min": repr(cfg.beta_min), "beta_max": repr(cfg.beta_max)}
    try:
        curve = train_denoiser(net, prep.train.inputs, prep.train.mask, cfg.schedule(),
                               epochs=cfg.denoiser_epochs, batch_size=cfg.batch_size,
                               lr=cfg.denoiser_lr, seed=cfg.seed)
    except TrainingDiverged as exc:
        stdf.save_bundle(out / "denoiser", net.state(), manifest | {"status": "diverged"})
        log.error("%s; last good parameters saved", exc)
        raise
    stdf.save_bundle(out / "denoiser", net.state(), manifest | {"status": "ok"})
    _write_csv(out / "denoiser_curve.csv",
               [r | {"config_hash": cfg.denoiser_hash()} for r in curve],
               ["epoch", "loss", "steps", "config_hash"])
    if curve:
        log.info("denoiser trained: %d epochs, final loss %.6f", len(curve), curve[-1]["loss"])
    return net


def cmd_train(cfg: RunConfig, out: Path) -> Forecaster:
    prep = cmd_prepare(cfg, out)
    denoiser = _load_denoiser(cfg, out) if cfg.enable_denoise else None
    model = Forecaster(cfg.model_config(prep.train.inputs.shape[2]), cfg.seed)
    for part, flag in (("llm", cfg.freeze_llm), ("embedding", cfg.freeze_embedding),
                       ("head", cfg.freeze_head)):
        if flag:
            model.freeze(part)
    result = train_forecaster(model, prep.train, prep.val, epochs=cfg.epochs,
                              batch_size=cfg.batch_size, lr=cfg.lr, weight_decay=cfg.weight_decay,
                              patience=cfg.patience, seed=cfg.seed,
                              train_inputs=_recover(cfg, prep.train, denoiser),
                              val_inputs=_recover(cfg, prep.val, denoiser))
    stdf.save_bundle(out / "forecaster", model.state(),
                     {"kind": "forecaster", "config_hash": cfg.train_hash(), "seed": cfg.seed,
                      "best_epoch": result.best_epoch, "num_nodes": prep.train.inputs.shape[2]})
    (out / "config.txt").write_text(dump_config(cfg))
    _write_csv(out / "train_curve.csv", [r | {"config_hash": cfg.train_hash()} for r in result.curve],
               ["epoch", "train_mae", "val_mae", "steps", "config_hash"])
    log.info("forecaster trained: best epoch %d, validation MAE %.6f", result.best_epoch,
             result.best_val_mae)
    return model


def _write_predictions(out: Path, name: str, pred, norm, cfg: RunConfig) -> None:
    stdf.save(out / f"{name}.stdf", norm.inverse(pred))
    stdf.write_manifest(out / f"{name}.manifest.txt",
                        {"config_hash": cfg.train_hash(), "seed": cfg.seed, "units": "original",
                         "shape": ",".join(map(str, pred.shape))})


def cmd_eval(cfg: RunConfig, out: Path, baseline: str | None = None) -> MetricsReport:
    prep = cmd_prepare(cfg, out)
    test = _corrupt(cfg, prep.test, cfg.missing_ratio) if cfg.missing_ratio else prep.test
    if baseline == "hi":
        pred = hi_baseline(test.inputs, cfg.output_len, cfg.hi_mode, cfg.vocab_slots)
        report = _report(cfg, pred, test, prep.normalizer)
        report.to_json(out / "metrics_hi.json")
        report.to_csv(out / "per_horizon_hi.csv")
        _write_predictions(out, "predictions_hi", pred, prep.normalizer, cfg)
        log.info("HI baseline (%s): MAE %.6f RMSE %.6f", cfg.hi_mode, report.mae, report.rmse)
        return report
    if baseline is not None:
        raise ConfigurationError(f"unknown baseline {baseline!r}")
    model = _load_forecaster(cfg, out, test.inputs.shape[2])
    denoiser = _load_denoiser(cfg, out) if cfg.enable_denoise else None
    inputs = _recover(cfg, test, denoiser)
    pred = model.predict(inputs, test.day_of_week, test.time_of_day)
    report = _report(cfg, pred, test, prep.normalizer)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "per_horizon.csv")
    _write_predictions(out, "predictions", pred, prep.normalizer, cfg)
    log.info("test: MAE %.6f RMSE %.6f MAPE %s", report.mae, report.rmse, report.mape_pct)
    return report


SWEEP_FIELDS = ["p", "missing_entries", "mae_recovery_off", "mae_recovery_on", "mae_mean_impute",
                "entry_mae_recovered", "entry_mae_mean_impute", "config_hash"]


def cmd_sweep_missing(cfg: RunConfig, out: Path) -> list:
    """Forecast MAE against missing ratio with recovery off, on, and mean imputation."""
    for p in cfg.missing_grid:
        if not 0.0 <= p <= 1.0:
            raise ConfigurationError(f"missing_grid value {p} outside [0, 1]")
    prep = cmd_prepare(cfg, out)
    test, norm = prep.test, prep.normalizer
    model = _load_forecaster(cfg, out, test.inputs.shape[2])
    denoiser = _load_denoiser(cfg, out)

    def forecast_mae(inputs):
        pred = model.predict(inputs, test.day_of_week, test.time_of_day)
        return mae(norm.inverse(test.targets), norm.inverse(pred))

    rows = []
    for p in cfg.missing_grid:
        bad = _corrupt(cfg, test, p)
        missing = ~bad.mask
        recovered = _recover(cfg, bad, denoiser)
        imputed = mean_impute(bad.inputs, bad.mask)
        row = {"p": float(p), "missing_entries": int(missing.sum()),
               "mae_recovery_off": forecast_mae(bad.inputs),
               "mae_recovery_on": forecast_mae(recovered),
               "mae_mean_impute": forecast_mae(imputed),
               "entry_mae_recovered": "", "entry_mae_mean_impute": "",
               "config_hash": cfg.train_hash()}
        if missing.any():
            truth = norm.inverse(test.inputs)
            row["entry_mae_recovered"] = mae(truth[missing], norm.inverse(recovered)[missing])
            row["entry_mae_mean_impute"] = mae(truth[missing], norm.inverse(imputed)[missing])
        log.info("p=%g: off %.6f on %.6f mean %.6f", p, row["mae_recovery_off"],
                 row["mae_recovery_on"], row["mae_mean_impute"])
        rows.append(row)
    _write_csv(out / "sweep.csv", rows, SWEEP_FIELDS)
    return rows


ABLATION_ROWS = (("embedding + head", False, False), ("+ denoising block", True, False),
                 ("+ stllm blocks", False, True), ("full model", True, True))


def cmd_ablate(cfg: RunConfig, out: Path) -> list:
    """Train and evaluate the four (enable_denoise, enable_llm_block) combinations."""
    rows = []
    for label, denoise, llm in ABLATION_ROWS:
        sub = cfg.with_overrides(enable_denoise=denoise, enable_llm_block=llm)
        name = f"denoise{int(denoise)}_llm{int(llm)}"
        d = out / "ablation" / name
        d.mkdir(parents=True, exist_ok=True)
        log.info("ablation %s (%s)", name, label)
        if denoise:
            cmd_train_denoiser(sub, d)
        cmd_train(sub, d)
        rep = cmd_eval(sub, d)
        rows.append({"variant": label, "enable_denoise": denoise, "enable_llm_block": llm,
                     "mae": rep.mae, "rmse": rep.rmse,
                     "mape_pct": "" if rep.mape_pct is None else rep.mape_pct,
                     "config_hash": sub.train_hash()})
    _write_csv(out / "ablation.csv", rows,
               ["variant", "enable_denoise", "enable_llm_block", "mae", "rmse", "mape_pct",
                "config_hash"])
    return rows


def cmd_gradcheck(cfg: RunConfig, out: Path, parity: bool = True) -> gradcheck.GradCheckReport:
    report = gradcheck.run_all(cfg.seed, parity=parity)
    lines = report.lines()
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        log.info(line)
    if report.failures:
        log.error("gradient check failed for: %s", ", ".join(report.failures))
    return report


# ---------------------------------------------------------------------- main

COMMANDS = ("prepare", "train-denoiser", "train", "eval", "sweep-missing", "ablate", "gradcheck")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stllmdf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("runs/default"), help="artifact directory")
        if name == "eval":
            p.add_argument("--baseline", choices=["hi"], help="evaluate a baseline instead")
        if name == "gradcheck":
            p.add_argument("--no-parity", action="store_true",
                           help="skip the 17-layer / 32-head block check")
    return parser


def _attach_log(out: Path) -> list:
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    file_h = logging.FileHandler(out / "run.log", mode="a")
    err_h = logging.StreamHandler(sys.stderr)
    root = logging.getLogger("stllmdf")
    root.setLevel(logging.INFO)
    for h in (file_h, err_h):
        h.setFormatter(fmt)
        root.addHandler(h)
    return [file_h, err_h]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    handlers = _attach_log(out)
    try:
        cfg = load_config(args.config, seed=args.seed)
        log.info("command %s, config hash %s, seed %d", args.command, cfg.hash(), cfg.seed)
        if args.command == "prepare":
            cmd_prepare(cfg, out)
        elif args.command == "train-denoiser":
            cmd_train_denoiser(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "eval":
            report = cmd_eval(cfg, out, args.baseline)
            print(json.dumps({"mae": report.mae, "rmse": report.rmse, "mape_pct": report.mape_pct}))
        elif args.command == "sweep-missing":
            for row in cmd_sweep_missing(cfg, out):
                print(f"p={row['p']:<6g} off={row['mae_recovery_off']:.6f} "
                      f"on={row['mae_recovery_on']:.6f} mean={row['mae_mean_impute']:.6f}")
        elif args.command == "ablate":
            for row in cmd_ablate(cfg, out):
                print(f"{row['variant']:<18} MAE {row['mae']:.4f} RMSE {row['rmse']:.4f}")
        elif args.command == "gradcheck":
            report = cmd_gradcheck(cfg, out, parity=not args.no_parity)
            print("\n".join(report.lines()))
            if report.failures:
                print("failing checks: " + ", ".join(report.failures))
                return EXIT_FAIL
        return EXIT_OK
    except ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        root = logging.getLogger("stllmdf")
        for h in handlers:
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
