"""Command-line workbench: ``imu2emg {synth,train,eval,sweep,ablate,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
Every output file is written atomically (temp file + rename) and contains no
wall-clock information, so reruns with the same config and seed are
byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import calibration_sweep, evaluate_params
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import OUT_ENV, RunConfig
from .dataset import (
    MUSCLES,
    DataError,
    LosoFold,
    Manifest,
    fold_datasets,
    make_loso_folds,
    normalize_subject,
    write_text_atomic,
)
from .dsp import MinMaxStats
from .metrics import CYCLE_CSV_FIELDS, METRICS, aggregate, cycle_rows, cycles_from_rows
from .model import param_count
from .synthetic import SYNTH_MODES, population_styles, synthesize_trial, trial_to_csv_text
from .tensor import ConfigError
from .train import fit

log = logging.getLogger("imu2emg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

SWEEP_FIELDS = (
    "fold", "ratio", "seed", "n_calibration", "n_eval", "pre_loss", "post_loss", "eval_mse",
    *(f"{m}_mean" for m in METRICS),
)
ABLATION_FIELDS = (
    "fold", "gated_params", "nongated_params", "param_diff_pct",
    "r_gated", "r_nongated", "r_delta_pct",
    "r2_gated", "r2_nongated", "r2_delta_pct",
    "nrmse_gated", "nrmse_nongated", "nrmse_delta_pct",
    "gated_best_epoch", "nongated_best_epoch",
    "gated_data_order", "nongated_data_order", "same_data_order",
)
REPORT_INPUTS = ("sweep_cycles.csv", "eval_cycles.csv")


# ----------------------------------------------------------------- small helpers


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _csv_text(fields, rows, delimiter=",") -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), delimiter=delimiter, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in fields})
    return buf.getvalue()


def _json_clean(obj):
    """Replace non-finite floats with None so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    return obj


def _json_text(obj) -> str:
    return json.dumps(_json_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _ratio_key(r: float) -> str:
    return repr(float(r))


def _rel_delta_pct(new: float, base: float) -> float:
    """Percent change of ``new`` relative to ``base``."""
    if base == 0 or not math.isfinite(base) or not math.isfinite(new):
        return float("nan")
    return 100.0 * (new - base) / abs(base)


def _select_folds(cfg: RunConfig, manifest: Manifest, selector: str) -> list[LosoFold]:
    folds = make_loso_folds(sorted(manifest.subjects))
    if selector == "all":
        return folds
    chosen = [f for f in folds if f.test_subject == selector]
    if not chosen:
        raise ConfigError(f"fold {selector!r} not in manifest subjects {sorted(manifest.subjects)}")
    return chosen


def _load_config(args) -> RunConfig:
    """Load the config file and apply command-line overrides, without validating."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, jobs=args.jobs, out_dir=args.out)


def _process_all(cfg: RunConfig) -> tuple[Manifest, dict]:
    manifest = Manifest.load(cfg.manifest)
    settings = cfg.pipeline()
    procs = {sid: manifest.process(sid, settings) for sid in sorted(manifest.subjects)}
    return manifest, procs


def _run_parallel(fn, jobs_args, jobs: int) -> list:
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(*a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in jobs_args]
        return [f.result() for f in futures]


def _stats_dict(stats) -> dict:
    return {"inputs": stats[0].to_dict(), "targets": stats[1].to_dict()}


def _stats_from_dict(d) -> tuple[MinMaxStats, MinMaxStats]:
    return MinMaxStats.from_dict(d["inputs"]), MinMaxStats.from_dict(d["targets"])


# ----------------------------------------------------------------- synth


def cmd_synth(n_subjects: int, cycles: int, seed: int, out_dir) -> Path:
    """Write a synthetic population as trial CSVs plus ``manifest.json``.

    Each subject gets one trial per synthetic mode; ``cycles`` strides are
    spread over the modes in order.
    """
    if n_subjects < 2:
        raise ConfigError(f"synth needs at least 2 subjects, got {n_subjects}")
    if cycles < len(SYNTH_MODES):
        raise ConfigError(f"synth needs at least {len(SYNTH_MODES)} cycles per subject, got {cycles}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    styles = population_styles(n_subjects, seed)
    subjects = {}
    for k, style in enumerate(styles):
        sid = f"S{k + 1:02d}"
        gen = np.random.default_rng([seed, k, 7])
        trials = []
        for m, mode in enumerate(SYNTH_MODES):
            n = cycles // len(SYNTH_MODES) + (1 if m < cycles % len(SYNTH_MODES) else 0)
            trial = synthesize_trial(style, mode, n, gen)
            rel = f"{sid}/{mode}_01.csv"
            write_text_atomic(out / rel, trial_to_csv_text(trial))
            trials.append((rel, mode))
        subjects[sid] = trials
    write_text_atomic(out / "styles.json", _json_text({f"S{k + 1:02d}": s.to_dict() for k, s in enumerate(styles)}))
    manifest_path = out / "manifest.json"
    Manifest(out, subjects).dump(manifest_path)
    return manifest_path


# ----------------------------------------------------------------- train


def _train_fold(cfg: RunConfig, procs: dict, fold: LosoFold, model_cfg=None) -> dict:
    model_cfg = model_cfg or cfg.model
    train_sets, test, stats = fold_datasets(procs, fold)
    params, tlog = fit(fold, train_sets, model_cfg, cfg.train)
    return {"fold": fold.test_subject, "params": params, "log": tlog, "stats": stats, "model_cfg": model_cfg}


def cmd_train(cfg: RunConfig, fold_selector: str = "all") -> list[Path]:
    """LOSO training; one directory per held-out subject under ``<out>/folds``."""
    manifest, procs = _process_all(cfg)
    folds = _select_folds(cfg, manifest, fold_selector)
    out = Path(cfg.out_dir)
    write_text_atomic(out / "run_config.json", cfg.to_json())
    results = _run_parallel(_train_fold, [(cfg, procs, f) for f in folds], cfg.jobs)
    dirs = []
    for res in results:
        d = out / "folds" / res["fold"]
        write_text_atomic(d / "train_log.csv", res["log"].to_csv(timing=cfg.train.record_timing))
        write_text_atomic(d / "norm_stats.json", _json_text(_stats_dict(res["stats"])))
        write_text_atomic(d / "run_config.json", cfg.to_json())
        save_checkpoint(res["params"], res["model_cfg"], d / "best.ckpt")
        dirs.append(d)
        log.info("fold %s: best epoch %d val %.6g", res["fold"], res["log"].best_epoch + 1, res["log"].best_val_loss)
    return dirs


def _load_fold(cfg: RunConfig, procs: dict, fold: LosoFold):
    d = Path(cfg.out_dir) / "folds" / fold.test_subject
    ckpt = d / "best.ckpt"
    if not ckpt.is_file():
        raise DataError(
            f"fold {fold.test_subject}: missing checkpoint {ckpt}; run `imu2emg train --fold {fold.test_subject}` first"
        )
    try:
        params, model_cfg = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise DataError(f"fold {fold.test_subject}: {ckpt}: {exc}") from None
    stats_path = d / "norm_stats.json"
    if not stats_path.is_file():
        raise DataError(f"fold {fold.test_subject}: missing {stats_path}")
    stats = _stats_from_dict(json.loads(stats_path.read_text(encoding="utf-8")))
    test = normalize_subject(procs[fold.test_subject], *stats)
    return params, model_cfg, test


# ----------------------------------------------------------------- eval


def cmd_eval(cfg: RunConfig, fold_selector: str = "all") -> Path:
    """Zero-shot metrics of trained folds on their held-out subjects."""
    manifest, procs = _process_all(cfg)
    folds = _select_folds(cfg, manifest, fold_selector)
    loaded = [(f, *_load_fold(cfg, procs, f)) for f in folds]
    rows, all_cycles = [], []
    for fold, params, model_cfg, test in loaded:
        _, cycles, _ = evaluate_params(params, model_cfg, test.segments, MUSCLES)
        all_cycles += cycles
        rows += [dict(r, fold=fold.test_subject) for r in cycle_rows(cycles, MUSCLES)]
    out = Path(cfg.out_dir)
    write_text_atomic(out / "eval_cycles.csv", _csv_text(("fold", *CYCLE_CSV_FIELDS), rows))
    path = out / "eval_report.json"
    write_text_atomic(path, _json_text(aggregate(all_cycles, MUSCLES).to_dict()))
    return path


# ----------------------------------------------------------------- sweep


def _sweep_fold(cfg: RunConfig, procs: dict, fold: LosoFold):
    params, model_cfg, test = _load_fold(cfg, procs, fold)
    return fold.test_subject, calibration_sweep(
        params, test, model_cfg, cfg.sweep.ratios, cfg.sweep.policy, cfg.sweep.seeds, cfg.adapt, MUSCLES
    )


def cmd_sweep(cfg: RunConfig, fold_selector: str = "all") -> Path:
    """Calibration sweep per fold -> ``sweep.csv`` and per-cycle ``sweep_cycles.csv``.

    Rows: folds x |{0} U ratios| x seeds (the zero-shot row is always present).
    """
    manifest, procs = _process_all(cfg)
    folds = _select_folds(cfg, manifest, fold_selector)
    for f in folds:  # fail fast, naming the fold, before any adaptation runs
        ckpt = Path(cfg.out_dir) / "folds" / f.test_subject / "best.ckpt"
        if not ckpt.is_file():
            raise DataError(f"fold {f.test_subject}: missing checkpoint {ckpt}; train this fold first")
    results = _run_parallel(_sweep_fold, [(cfg, procs, f) for f in folds], cfg.jobs)
    rows, cyc_rows = [], []
    for sid, sweep_rows in results:
        for r in sweep_rows:
            row = {
                "fold": sid, "ratio": r.ratio, "seed": r.seed, "n_calibration": r.n_calibration,
                "n_eval": r.n_eval, "pre_loss": r.pre_loss, "post_loss": r.post_loss, "eval_mse": r.eval_mse,
            }
            row.update({f"{m}_mean": r.report.overall[m][0] for m in METRICS})
            rows.append(row)
            base = {"fold": sid, "ratio": repr(r.ratio), "seed": r.seed}
            cyc_rows += [dict(c, **base) for c in cycle_rows(r.cycles, MUSCLES)]
    out = Path(cfg.out_dir)
    write_text_atomic(out / "sweep_cycles.csv", _csv_text(("fold", "ratio", "seed", *CYCLE_CSV_FIELDS), cyc_rows))
    path = out / "sweep.csv"
    write_text_atomic(path, _csv_text(SWEEP_FIELDS, rows))
    return path


# ----------------------------------------------------------------- ablate


def cmd_ablate(cfg: RunConfig, fold_selector: str = "all") -> Path:
    """Train GEGLU and parameter-matched GELU variants with identical seeds and data order."""
    gated_cfg = cfg.model
    plain_cfg = cfg.model.nongated()
    n_gated, n_plain = param_count(gated_cfg), param_count(plain_cfg)
    manifest, procs = _process_all(cfg)
    folds = _select_folds(cfg, manifest, fold_selector)
    jobs = [(cfg, procs, f, mc) for f in folds for mc in (gated_cfg, plain_cfg)]
    results = _run_parallel(_train_fold, jobs, cfg.jobs)
    rows = []
    for fold, gated, plain in zip(folds, results[0::2], results[1::2]):
        _, test, _ = fold_datasets(procs, fold)
        rep_g = evaluate_params(gated["params"], gated_cfg, test.segments, MUSCLES)[2].overall
        rep_p = evaluate_params(plain["params"], plain_cfg, test.segments, MUSCLES)[2].overall
        row = {
            "fold": fold.test_subject, "gated_params": n_gated, "nongated_params": n_plain,
            "param_diff_pct": 100.0 * (n_plain - n_gated) / n_gated,
            "gated_best_epoch": gated["log"].best_epoch + 1, "nongated_best_epoch": plain["log"].best_epoch + 1,
            "gated_data_order": gated["log"].data_order_digest[:16],
            "nongated_data_order": plain["log"].data_order_digest[:16],
        }
        row["same_data_order"] = int(gated["log"].data_order_digest == plain["log"].data_order_digest)
        for m in ("r", "r2", "nrmse"):
            g, p = rep_g[m][0], rep_p[m][0]
            row.update({f"{m}_gated": g, f"{m}_nongated": p, f"{m}_delta_pct": _rel_delta_pct(g, p)})
        rows.append(row)
    summary = {"fold": "mean", "gated_params": n_gated, "nongated_params": n_plain,
               "param_diff_pct": rows[0]["param_diff_pct"], "gated_best_epoch": "", "nongated_best_epoch": "",
               "gated_data_order": "", "nongated_data_order": "",
               "same_data_order": int(all(r["same_data_order"] for r in rows))}
    for m in ("r", "r2", "nrmse"):
        g = float(np.mean([r[f"{m}_gated"] for r in rows]))
        p = float(np.mean([r[f"{m}_nongated"] for r in rows]))
        summary.update({f"{m}_gated": g, f"{m}_nongated": p, f"{m}_delta_pct": _rel_delta_pct(g, p)})
    out = Path(cfg.out_dir)
    write_text_atomic(out / "run_config.json", cfg.to_json())
    path = out / "ablation.csv"
    write_text_atomic(path, _csv_text(ABLATION_FIELDS, rows + [summary]))
    direction = {m: ("gated_better" if (summary[f"{m}_delta_pct"] < 0) == (m == "nrmse") else "nongated_better")
                 for m in ("r", "r2", "nrmse")}
    write_text_atomic(out / "ablation_summary.json", _json_text({
        "gated_params": n_gated, "nongated_params": n_plain, "direction": direction,
        "mean_delta_pct": {m: summary[f"{m}_delta_pct"] for m in ("r", "r2", "nrmse")},
    }))
    return path


# ----------------------------------------------------------------- report


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(run_dir) -> Path:
    """Aggregate per-cycle outputs of a run directory into JSON + plot-ready TSVs.

    Reads ``sweep_cycles.csv`` (preferred) or ``eval_cycles.csv``. Seeds are
    pooled at the cycle level, so every ratio yields one report whose sd is
    across subjects.
    """
    run = Path(run_dir)
    present = [n for n in REPORT_INPUTS if (run / n).is_file()]
    if not present:
        raise DataError(
            f"{run}: nothing to report; expected one of: "
            + ", ".join(str(run / n) for n in REPORT_INPUTS)
            + " (produced by `imu2emg sweep` / `imu2emg eval`)"
        )
    source = present[0]
    rows = _read_csv(run / source)
    if not rows:
        raise DataError(f"{run / source}: no rows")
    by_ratio: dict[float, list] = {}
    for row in rows:
        by_ratio.setdefault(float(row.get("ratio", 0.0)), []).append(row)
    reports = {r: aggregate(cycles_from_rows(rs, MUSCLES), MUSCLES) for r, rs in sorted(by_ratio.items())}

    curve = []
    for ratio, rep in reports.items():
        n_subj = len(rep.per_subject)
        seeds = len({row.get("seed", "0") for row in by_ratio[ratio]})
        for mode, vals in [("all", rep.overall), *sorted(rep.per_mode.items())]:
            row = {"mode": mode, "ratio": ratio, "n_subjects": n_subj, "n_seeds": seeds}
            for m in METRICS:
                row[f"{m}_mean"], row[f"{m}_sd"] = vals[m]
            curve.append(row)
    curve_fields = ("mode", "ratio", "n_subjects", "n_seeds", *(f"{m}_{s}" for m in METRICS for s in ("mean", "sd")))
    bars = []
    for ratio, rep in reports.items():
        for mus in MUSCLES:
            row = {"ratio": ratio, "muscle": mus}
            for m in METRICS:
                row[f"{m}_mean"], row[f"{m}_sd"] = rep.per_muscle[m][mus]
            bars.append(row)
    bar_fields = ("ratio", "muscle", *(f"{m}_{s}" for m in METRICS for s in ("mean", "sd")))
    write_text_atomic(run / "ratio_curves.tsv", _csv_text(curve_fields, curve, "\t"))
    write_text_atomic(run / "muscle_bars.tsv", _csv_text(bar_fields, bars, "\t"))
    path = run / "report.json"
    doc = {"schema_version": 1, "source": source,
           "by_ratio": {_ratio_key(r): rep.to_dict() for r, rep in reports.items()}}
    write_text_atomic(path, _json_text(doc))
    return path


# ----------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imu2emg", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None, help="run seed (overrides the config)")
        p.add_argument("--jobs", type=int, default=None, help="parallel fold workers")
        p.add_argument("--out", default=None, help=f"output directory (else ${OUT_ENV}, else the config)")
        if config:
            p.add_argument("--config", default=None, help="RunConfig JSON file")
            p.add_argument("--fold", default="all", help="'all' or a held-out subject id")

    p = sub.add_parser("synth", help="write a synthetic population in the trial-CSV schema")
    common(p, config=False)
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--cycles", type=int, default=40, help="strides per subject")
    for name, helptext in (
        ("train", "leave-one-subject-out training"),
        ("eval", "zero-shot evaluation of trained folds"),
        ("sweep", "few-shot calibration sweep over trained folds"),
        ("ablate", "gated vs parameter-matched non-gated feed-forward"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p)
        if name == "sweep":
            p.add_argument("--ratios", default=None, help="comma-separated calibration ratios")
            p.add_argument("--seeds", default=None, help="comma-separated adaptation seeds")
    p = sub.add_parser("report", help="aggregate a run directory into JSON + TSV plot data")
    p.add_argument("run_dir", nargs="?", default=None, help=f"run directory (default ${OUT_ENV})")
    return parser


def _parse_list(text: str, kind, what: str):
    try:
        return tuple(kind(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"--{what}: cannot parse {text!r}") from None


def _dispatch(args) -> Path | list[Path]:
    if args.command == "synth":
        out = args.out or os.environ.get(OUT_ENV)
        if not out:
            raise ConfigError("synth needs --out (or $IMU2EMG_OUT)")
        return cmd_synth(args.subjects, args.cycles, 0 if args.seed is None else args.seed, out)
    if args.command == "report":
        run_dir = args.run_dir or os.environ.get(OUT_ENV)
        if not run_dir:
            raise ConfigError("report needs a run directory (argument or $IMU2EMG_OUT)")
        return cmd_report(run_dir)
    cfg = _load_config(args)
    if args.command == "sweep" and (args.ratios or args.seeds):
        sw = cfg.sweep
        if args.ratios:
            sw = replace(sw, ratios=_parse_list(args.ratios, float, "ratios"))
        if args.seeds:
            sw = replace(sw, seeds=_parse_list(args.seeds, int, "seeds"))
        cfg = replace(cfg, sweep=sw)
    cfg.validate(need_manifest=True)
    fn = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate}[args.command]
    return fn(cfg, args.fold)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        result = _dispatch(args)
    except ConfigError as exc:
        print(f"imu2emg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"imu2emg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort classification for the exit code
        log.debug("runtime failure", exc_info=True)
        print(f"imu2emg: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in result if isinstance(result, list) else [result]:
        print(p)
    return EXIT_OK
