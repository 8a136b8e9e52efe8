"""Command-line experiment harness: gen-data, train, calibrate, evaluate, detect.

Every subcommand reads one JSON config (sections ``data``, ``train``,
``calibrate``, ``evaluate`` and a top-level ``seed``).  All randomness comes
from that seed through fixed sub-seed streams.  Exit codes: 0 success,
2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from avucal import metrics
from avucal.bayeslayers import BnnModel, load_checkpoint, save_checkpoint
from avucal.diffcore import NumericalError
from avucal.posthoc import fit_temperature
from avucal.shiftlab import (INTENSITIES, SHIFT_KINDS, Dataset, ShiftSpec, apply_shift, make_dataset,
                             make_ood, save_descriptor)
from avucal.trainer import TrainConfig, TrainingDiverged, sub_seed, train, write_history_csv
from avucal.uncertainty import mc_logits, mc_predict

log = logging.getLogger("avucal")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# fixed sub-seed streams split off the config seed
STREAM_DATA, STREAM_SHIFT, STREAM_OOD, STREAM_INIT, STREAM_TRAIN, STREAM_CALIB, STREAM_EVAL = range(7)

AGGREGATE_COLUMNS = ("method", "shift", "intensity", "acc", "ece", "uce", "nll", "brier", "avu_auc")
HIST_COLUMNS = ("bin_left", "bin_right", "density_in", "density_shift")

_DATA_KEYS = {"generator", "n", "noise", "K", "d", "spread", "center_scale", "fractions", "shifts", "ood",
              "ood_radius_factor"}
_CALIB_KEYS = {"objective", "lr", "max_iter", "tol", "mc"}
_EVAL_KEYS = {"mc", "n_bins", "shifts", "t_grid_points"}
_TOP_KEYS = {"seed", "data", "train", "calibrate", "evaluate"}


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, d: dict, allowed: set) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def load_config(path: Optional[str]) -> dict:
    """Parse and validate a config file; ``None`` gives an all-defaults config."""
    if path is None:
        cfg: dict = {}
    else:
        try:
            cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("config", cfg, _TOP_KEYS)
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    out = {"seed": seed}
    for name, allowed in (("data", _DATA_KEYS), ("calibrate", _CALIB_KEYS), ("evaluate", _EVAL_KEYS)):
        section = cfg.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name} must be an object")
        _reject_unknown(name, section, allowed)
        out[name] = dict(section)
    train_section = cfg.get("train", {})
    if not isinstance(train_section, dict):
        raise ConfigError("section train must be an object")
    if "seed" in train_section:
        raise ConfigError("train.seed is not allowed; use the top-level seed")
    try:
        out["train"] = TrainConfig.from_dict({**train_section, "seed": sub_seed(seed, STREAM_TRAIN)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return out


def _shift_kinds(value) -> List[str]:
    if value in (None, "all"):
        return list(SHIFT_KINDS)
    kinds = value.split(",") if isinstance(value, str) else list(value)
    kinds = [k.strip() for k in kinds if k.strip()]
    bad = [k for k in kinds if k not in SHIFT_KINDS]
    if bad:
        raise ConfigError(f"unknown shift kinds {bad}; expected a subset of {SHIFT_KINDS}")
    return kinds


# ------------------------------------------------------------------ data directory helpers

def _load_split(data_dir: Path, split: str) -> Dataset:
    desc_path = data_dir / "descriptor.json"
    desc = json.loads(desc_path.read_text(encoding="utf-8")) if desc_path.exists() else {}
    return Dataset.load(data_dir / f"{split}.csv", desc)


def _load_csv_or_dir(path: str, split: str = "test") -> Dataset:
    p = Path(path)
    return _load_split(p, split) if p.is_dir() else Dataset.load(p)


def _shifted_test(data_dir: Path, test: Dataset, kind: str, intensity: int, seed: int) -> Dataset:
    f = data_dir / "shift" / f"{kind}-{intensity}.csv"
    if f.exists():
        return Dataset.load(f, test.descriptor)
    shift_seed = int(test.descriptor.get("shift_seed", sub_seed(seed, STREAM_SHIFT)))
    return apply_shift(test, ShiftSpec(kind, intensity, shift_seed))


# ------------------------------------------------------------------ subcommands

def cmd_gen_data(args, cfg) -> int:
    data_cfg = dict(cfg["data"])
    shifts = _shift_kinds(data_cfg.pop("shifts", "all"))
    want_ood = bool(data_cfg.pop("ood", True))
    radius = float(data_cfg.pop("ood_radius_factor", 5.0))
    data_cfg.setdefault("generator", "two_moons")
    data_cfg.setdefault("n", 1000)
    if "fractions" in data_cfg:
        data_cfg["fractions"] = tuple(data_cfg["fractions"])
    data_cfg["seed"] = sub_seed(cfg["seed"], STREAM_DATA)
    try:
        ds = make_dataset(data_cfg)
    except TypeError as exc:
        raise ConfigError(f"bad data section: {exc}") from exc
    shift_seed = sub_seed(cfg["seed"], STREAM_SHIFT)
    ds.descriptor["shift_seed"] = shift_seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        ds.subset(split).save(out / f"{split}.csv")
    save_descriptor(ds, out / "descriptor.json")
    test = ds.subset("test")
    if shifts:
        (out / "shift").mkdir(exist_ok=True)
    for kind in shifts:
        for i in INTENSITIES:
            apply_shift(test, ShiftSpec(kind, i, shift_seed)).save(out / "shift" / f"{kind}-{i}.csv")
    if want_ood:
        make_ood(ds, sub_seed(cfg["seed"], STREAM_OOD), radius_factor=radius).save(out / "ood.csv")
    log.info("wrote dataset to %s", out)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    data_dir = Path(args.data)
    train_set = _load_split(data_dir, "train")
    tc: TrainConfig = cfg["train"]
    k = train_set.class_count
    model = BnnModel.create([train_set.n_features, *tc.hidden, k], seed=sub_seed(cfg["seed"], STREAM_INIT))
    result = train(model, train_set, tc)
    save_checkpoint(result.model, args.out)
    history_path = args.history or str(Path(args.out).with_suffix("")) + ".history.csv"
    write_history_csv(result.history, history_path)
    last = result.history[-1] if result.history else {}
    log.info("trained %s: final %s", tc.method, last)
    return EXIT_OK


def _mc_count(model: BnnModel, requested: Optional[int]) -> int:
    if model.deterministic:
        return 1
    return int(requested) if requested else 32


def cmd_calibrate(args, cfg) -> int:
    model = load_checkpoint(args.ckpt)
    val = _load_split(Path(args.data), "val")
    cal = cfg["calibrate"]
    objective = args.objective or cal.get("objective", "nll")
    T = _mc_count(model, args.mc or cal.get("mc"))
    logits = mc_logits(model, val.features, T, sub_seed(cfg["seed"], STREAM_CALIB))
    fit = fit_temperature(logits, val.labels, objective=objective, lr=cal.get("lr", 0.005),
                          max_iter=cal.get("max_iter", 500), tol=cal.get("tol", 1e-7))
    Path(args.out).write_text(fit.to_json(), encoding="utf-8")
    if args.apply:
        model.temperature = fit.temperature
        save_checkpoint(model, args.ckpt)
    log.info("temperature %.6f (%s)", fit.temperature, objective)
    return EXIT_OK


def spearman_table(rows: Sequence[dict], columns=("ece", "uce", "avu_auc")) -> Dict[str, Dict[str, float]]:
    """Rank correlation of each metric with shift intensity, per method.

    The metric is first averaged over shift kinds at each intensity (0 is the
    unshifted test set), then correlated with the intensity index.
    """
    table: Dict[str, Dict[str, float]] = {}
    for method in sorted({r["method"] for r in rows}):
        mine = [r for r in rows if r["method"] == method]
        levels = sorted({int(r["intensity"]) for r in mine})
        table[method] = {}
        for col in columns:
            means = [np.mean([float(r[col]) for r in mine if int(r["intensity"]) == lv]) for lv in levels]
            table[method][col] = metrics.spearman_rho(levels, means) if len(levels) > 1 else float("nan")
    return table


def cmd_evaluate(args, cfg) -> int:
    model = load_checkpoint(args.ckpt)
    data_dir = Path(args.data)
    test = _load_split(data_dir, "test")
    ev = cfg["evaluate"]
    kinds = _shift_kinds(args.shifts if args.shifts is not None else ev.get("shifts", "all"))
    T = _mc_count(model, args.mc or ev.get("mc"))
    n_bins = int(ev.get("n_bins", metrics.DEFAULT_BINS))
    t_grid = np.linspace(0.0, 1.0, int(ev.get("t_grid_points", 21)))
    mc_seed = sub_seed(cfg["seed"], STREAM_EVAL)
    method = args.method or model.method or ("vanilla" if model.deterministic else "svi")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    base = mc_predict(model, test.features, T, mc_seed)
    sets = [("none", 0, test)]
    sets += [(kind, i, _shifted_test(data_dir, test, kind, i, cfg["seed"])) for kind in kinds for i in INTENSITIES]
    rows = []
    for kind, intensity, ds in sets:
        pred = base if intensity == 0 else mc_predict(model, ds.features, T, mc_seed)
        report = metrics.evaluate_predictions(pred.mean_probs, ds.labels, u_th=model.u_th, n_bins=n_bins,
                                              t_grid=t_grid,
                                              reference_uncertainty=None if intensity == 0 else base.entropy)
        report.meta = {"method": method, "shift": kind, "intensity": intensity, "mc": T,
                       "temperature": model.temperature}
        name = "test.json" if intensity == 0 else f"{kind}-{intensity}.json"
        (out / name).write_text(report.to_json(indent=2), encoding="utf-8")
        rows.append({"method": method, "shift": kind, "intensity": intensity, "acc": report.accuracy,
                     "ece": report.ece, "uce": report.uce, "nll": report.nll, "brier": report.brier,
                     "avu_auc": report.avu_auc})

    with open(out / "aggregate.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for r in rows:
            w.writerow([r["method"], r["shift"], r["intensity"]] + [repr(float(r[c])) for c in AGGREGATE_COLUMNS[3:]])
    rho = spearman_table(rows)
    (out / "spearman.json").write_text(json.dumps(rho, indent=2, sort_keys=True), encoding="utf-8")
    log.info("spearman rho: %s", rho)
    return EXIT_OK


def cmd_detect(args, cfg) -> int:
    model = load_checkpoint(args.ckpt)
    in_set = _load_csv_or_dir(args.in_data)
    other = _load_csv_or_dir(args.shift_data or args.ood_data)
    T = _mc_count(model, args.mc or cfg["evaluate"].get("mc"))
    mc_seed = sub_seed(cfg["seed"], STREAM_EVAL)
    u_in = mc_predict(model, in_set.features, T, mc_seed).entropy
    u_out = mc_predict(model, other.features, T, mc_seed).entropy
    result = {
        "auroc": metrics.auroc(u_out, u_in),
        "aupr_in": metrics.aupr(u_out, u_in, positive="in"),
        "aupr_out": metrics.aupr(u_out, u_in, positive="out"),
        "detection_accuracy": metrics.detection_accuracy(u_out, u_in),
        "wasserstein": metrics.wasserstein1(u_in, u_out),
        "kind": "ood" if args.ood_data else "shift",
        "mc": T,
    }
    Path(args.out).write_text(json.dumps(result, indent=2), encoding="utf-8")
    edges, d_in, d_out = metrics.entropy_histogram(u_in, u_out, upper=float(np.log(model.class_count)))
    hist_path = args.hist or str(Path(args.out).with_suffix("")) + ".hist.csv"
    with open(hist_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HIST_COLUMNS)
        for lo, hi, a, b in zip(edges[:-1], edges[1:], d_in, d_out):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(a)), repr(float(b))])
    log.info("detection: %s", result)
    return EXIT_OK


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avucal", description="Uncertainty-calibrated Bayesian MLP experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate train/val/test, shifted and OOD CSVs")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint + history CSV")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history", help="history CSV path (default: <out>.history.csv)")

    c = sub.add_parser("calibrate", help="fit a temperature on the validation split")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--objective", choices=("nll", "avuc", "au-avuc"))
    c.add_argument("--out", required=True)
    c.add_argument("--apply", action="store_true", help="store the temperature in the checkpoint")
    c.add_argument("--config")
    c.add_argument("--mc", type=int)

    e = sub.add_parser("evaluate", help="calibration reports across shift kinds and intensities")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--shifts", help="'all' or a comma-separated list of shift kinds")
    e.add_argument("--mc", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--method", help="method label for the aggregate CSV")

    d = sub.add_parser("detect", help="shift / OOD detection from predictive entropy")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in-data", required=True)
    grp = d.add_mutually_exclusive_group(required=True)
    grp.add_argument("--shift-data")
    grp.add_argument("--ood-data")
    d.add_argument("--out", required=True)
    d.add_argument("--hist", help="entropy histogram CSV path (default: <out>.hist.csv)")
    d.add_argument("--mc", type=int)
    d.add_argument("--config")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "calibrate": cmd_calibrate,
            "evaluate": cmd_evaluate, "detect": cmd_detect}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None))
        if args.command == "calibrate" and args.objective is None and "objective" not in cfg["calibrate"]:
            args.objective = "nll"
        return COMMANDS[args.command](args, cfg)
    except (TrainingDiverged, NumericalError, FloatingPointError) as exc:
        print(f"avucal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"avucal: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
