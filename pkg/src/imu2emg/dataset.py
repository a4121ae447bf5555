"""Trial ingestion, LOSO folds, train/validation splits and calibration subsets."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import MinMaxStats, PipelineSettings, RawStream
from .tensor import ConfigError

IMU_SEGMENTS = ("foot", "shank", "thigh", "trunk")
IMU_CHANNELS = tuple(
    f"{seg}_{kind}_{axis}" for seg in IMU_SEGMENTS for kind in ("accel", "gyro") for axis in "xyz"
)
MUSCLES = (
    "gastrocnemius_medialis",
    "tibialis_anterior",
    "soleus",
    "vastus_medialis",
    "vastus_lateralis",
    "rectus_femoris",
    "biceps_femoris",
    "semitendinosus",
    "gracilis",
    "gluteus_medius",
)
IGNORED_COLUMNS = ("right_external_oblique",)
MODES = ("treadmill", "levelground", "stair_ascent", "stair_descent", "ramp_ascent", "ramp_descent")
CALIBRATION_RATIOS = (0.005, 0.01, 0.02, 0.05, 0.10)


class DataError(ValueError):
    """Input data is missing or malformed."""


class LeakageError(AssertionError):
    """A held-out subject's cycle reached a training or validation batch."""


@dataclass
class MovementSegment:
    inputs: np.ndarray  # [101, 24]
    targets: np.ndarray  # [101, 10]
    subject_id: str
    mode: str
    cycle_index: int
    trial: str = ""

    @property
    def uid(self) -> str:
        return f"{self.subject_id}/{self.trial}/{self.cycle_index}"


@dataclass
class SubjectDataset:
    subject_id: str
    segments: list[MovementSegment]
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.segments:
            raise DataError(f"subject {self.subject_id} has no segments")
        for s in self.segments:
            if s.subject_id != self.subject_id:
                raise DataError(f"segment {s.uid} does not belong to subject {self.subject_id}")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def modes(self) -> list[str]:
        return sorted({s.mode for s in self.segments})


def stack_inputs(segments) -> np.ndarray:
    return np.stack([s.inputs for s in segments])


def stack_targets(segments) -> np.ndarray:
    return np.stack([s.targets for s in segments])


def round_half_up(x) -> int:
    return int(Decimal(str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


# ----------------------------------------------------------------- LOSO


@dataclass(frozen=True)
class LosoFold:
    test_subject: str
    train_subjects: tuple[str, ...]
    val_fraction: float = 0.20

    def __post_init__(self):
        if self.test_subject in self.train_subjects:
            raise ConfigError(f"test subject {self.test_subject} also listed for training")


def make_loso_folds(subjects, val_fraction: float = 0.20) -> list[LosoFold]:
    """One fold per subject, holding that subject out."""
    ids = [s.subject_id if isinstance(s, SubjectDataset) else str(s) for s in subjects]
    if len(ids) < 2:
        raise ConfigError(f"LOSO needs at least 2 subjects, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate subject ids")
    return [LosoFold(t, tuple(i for i in ids if i != t), val_fraction) for t in ids]


def assert_no_leakage(segments, test_subject: str) -> None:
    bad = [s.uid for s in segments if s.subject_id == test_subject]
    if bad:
        raise LeakageError(f"{len(bad)} held-out cycles in batch, e.g. {bad[0]}")


def train_val_split(fold: LosoFold, segments, rng: np.random.Generator):
    """Seeded segment-level partition of the training pool."""
    segments = list(segments)
    allowed = set(fold.train_subjects)
    stray = [s.uid for s in segments if s.subject_id not in allowed]
    if stray:
        raise LeakageError(f"segments outside the fold's training subjects: {stray[:3]}")
    n = len(segments)
    n_val = round_half_up(fold.val_fraction * n)
    order = rng.permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(segments) if i not in val_idx]
    val = [s for i, s in enumerate(segments) if i in val_idx]
    return train, val


# ----------------------------------------------------------------- calibration


@dataclass
class CalibrationSelection:
    ratio: float
    selected_cycle_ids: list[str]
    remaining_eval_cycle_ids: list[str]
    selected: list[MovementSegment] = field(repr=False, default_factory=list)
    remaining: list[MovementSegment] = field(repr=False, default_factory=list)


def calibration_count(ratio: float, total: int) -> int:
    return max(1, round_half_up(Decimal(str(ratio)) * total))


def select_calibration(test_segments, ratio: float, policy: str = "first", rng=None) -> CalibrationSelection:
    """Split a held-out subject's cycles into calibration and evaluation sets.

    ``first`` takes the earliest cycles in recording order; ``seeded_random``
    samples without replacement from ``rng``.
    """
    segs = list(test_segments)
    if not segs:
        raise DataError("no test cycles to calibrate on")
    if not any(math.isclose(ratio, r) for r in CALIBRATION_RATIOS):
        raise ConfigError(f"calibration ratio {ratio} not in {CALIBRATION_RATIOS}")
    k = calibration_count(ratio, len(segs))
    if policy == "first":
        chosen = set(range(k))
    elif policy == "seeded_random":
        if rng is None:
            raise ConfigError("seeded_random calibration needs an rng")
        chosen = set(rng.choice(len(segs), size=k, replace=False).tolist())
    else:
        raise ConfigError(f"unknown calibration policy {policy!r}")
    sel = [s for i, s in enumerate(segs) if i in chosen]
    rem = [s for i, s in enumerate(segs) if i not in chosen]
    return CalibrationSelection(ratio, [s.uid for s in sel], [s.uid for s in rem], sel, rem)


# ----------------------------------------------------------------- CSV ingestion


@dataclass
class TrialData:
    imu: RawStream
    emg: RawStream
    heel_strikes: np.ndarray
    mode: str
    name: str


def _parse_float(text: str, path, line: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: column {column!r} has non-numeric value {text!r}") from None


def read_trial_csv(path, mode: str | None = None) -> TrialData:
    """Parse one trial file.

    Rows are on the EMG clock. IMU cells are blank on rows without an IMU
    sample, so the IMU rate is recovered from the rows that carry one.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    col = {name: i for i, name in enumerate(header)}
    missing = [c for c in ("time_s", "heel_strike", *IMU_CHANNELS, *MUSCLES) if c not in col]
    if missing:
        raise DataError(f"{path}:1: missing columns {missing}")
    if len(rows) < 2:
        raise DataError(f"{path}: fewer than 2 data rows")
    width = len(header)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}:{i + 2}: expected {width} fields, got {len(row)}")

    def numeric(name, allow_blank=False):
        j = col[name]
        out = np.empty(len(rows))
        for i, row in enumerate(rows):
            cell = row[j].strip()
            if cell == "" and allow_blank:
                out[i] = np.nan
            else:
                out[i] = _parse_float(cell, path, i + 2, name)
        return out

    t = numeric("time_s")
    dt = np.diff(t)
    if np.any(dt <= 0):
        bad = int(np.argmax(dt <= 0))
        raise DataError(f"{path}:{bad + 3}: time_s not strictly increasing")
    emg_rate = 1.0 / float(np.median(dt))
    if np.max(np.abs(dt * emg_rate - 1.0)) > 0.01:
        raise DataError(f"{path}: irregular time_s sampling")

    imu_cols = np.stack([numeric(c, allow_blank=True) for c in IMU_CHANNELS], axis=1)
    present = ~np.isnan(imu_cols)
    row_has = present.any(axis=1)
    partial = row_has & ~present.all(axis=1)
    if np.any(partial):
        raise DataError(f"{path}:{int(np.argmax(partial)) + 2}: IMU row has blank cells")
    imu_rows = np.flatnonzero(row_has)
    if imu_rows.size < 2:
        raise DataError(f"{path}: fewer than 2 IMU samples")
    imu_dt = np.diff(t[imu_rows])
    imu_rate = 1.0 / float(np.median(imu_dt))
    if np.max(np.abs(imu_dt * imu_rate - 1.0)) > 0.01:
        raise DataError(f"{path}: IMU samples are not uniformly spaced (rate mismatch)")

    emg = np.stack([numeric(m) for m in MUSCLES], axis=1)
    hs_flag = numeric("heel_strike")
    strikes = t[hs_flag > 0.5]
    name = path.stem
    if mode is None:
        mode = name.rsplit("_", 1)[0] if "_" in name else name
    if mode not in MODES:
        raise DataError(f"{path}: unknown locomotion mode {mode!r}")
    return TrialData(
        imu=RawStream(list(IMU_CHANNELS), round(imu_rate, 6), imu_cols[imu_rows], float(t[imu_rows[0]])),
        emg=RawStream(list(MUSCLES), round(emg_rate, 6), emg, float(t[0])),
        heel_strikes=strikes,
        mode=mode,
        name=name,
    )


@dataclass
class ProcessedSubject:
    """Cycles of one subject after the pipeline, before min-max scaling."""

    subject_id: str
    inputs: list[np.ndarray]
    targets: list[np.ndarray]
    modes: list[str]
    trials: list[str]
    cycle_index: list[int]
    discarded: int = 0

    def stats(self) -> tuple[MinMaxStats, MinMaxStats]:
        return MinMaxStats.from_arrays(self.inputs), MinMaxStats.from_arrays(self.targets)


def _trial_files(path: Path) -> list[tuple[Path, str | None]]:
    return [(p, None) for p in sorted(path.glob("*.csv"))]


def process_subject(path, trials=None, settings: PipelineSettings = PipelineSettings(), subject_id=None) -> ProcessedSubject:
    """Run every trial of a subject through the signal pipeline."""
    path = Path(path)
    if trials is None:
        if not path.is_dir():
            raise DataError(f"{path}: not a directory")
        trials = _trial_files(path)
    if not trials:
        raise DataError(f"{path}: no trials found")
    sid = subject_id or path.name
    out = ProcessedSubject(sid, [], [], [], [], [])
    for trial_path, mode in trials:
        td = read_trial_csv(trial_path, mode)
        pt = dsp.process_trial(td.imu, td.emg, td.heel_strikes, settings)
        out.inputs += pt.inputs
        out.targets += pt.targets
        out.modes += [td.mode] * len(pt.inputs)
        out.trials += [td.name] * len(pt.inputs)
        out.cycle_index += pt.cycle_index
        out.discarded += pt.discarded
    if not out.inputs:
        raise DataError(f"{path}: no complete cycles found")
    return out


def normalize_subject(
    proc: ProcessedSubject, input_stats: MinMaxStats | None = None, target_stats: MinMaxStats | None = None
) -> SubjectDataset:
    """Min-max scale a processed subject; own statistics when none are given."""
    own_in, own_out = proc.stats()
    input_stats = input_stats or own_in
    target_stats = target_stats or own_out
    segs = [
        MovementSegment(
            dsp.minmax_normalize(x, input_stats),
            dsp.minmax_normalize(y, target_stats),
            proc.subject_id,
            mode,
            idx,
            trial,
        )
        for x, y, mode, trial, idx in zip(proc.inputs, proc.targets, proc.modes, proc.trials, proc.cycle_index)
    ]
    return SubjectDataset(proc.subject_id, segs)


def load_subject(path, stats: tuple[MinMaxStats, MinMaxStats] | None = None, settings=PipelineSettings()) -> SubjectDataset:
    """Load every ``<mode>_<trial>.csv`` in a subject directory."""
    proc = process_subject(path, settings=settings)
    return normalize_subject(proc, *(stats or (None, None)))


def pool_stats(procs) -> tuple[MinMaxStats, MinMaxStats]:
    """Per-channel min/max over a pool of processed subjects."""
    procs = list(procs)
    return (
        MinMaxStats.from_arrays([x for p in procs for x in p.inputs]),
        MinMaxStats.from_arrays([y for p in procs for y in p.targets]),
    )


# ----------------------------------------------------------------- manifest


@dataclass
class Manifest:
    """Subjects -> trial files -> mode tags. Paths are relative to ``root``."""

    root: Path
    subjects: dict[str, list[tuple[str, str]]]

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"{path}: manifest not found") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        subjects = {}
        for sid, entry in doc.get("subjects", {}).items():
            subjects[sid] = [(t["path"], t["mode"]) for t in entry["trials"]]
        if not subjects:
            raise DataError(f"{path}: manifest lists no subjects")
        return cls(path.parent, subjects)

    def dump(self, path) -> None:
        doc = {
            "version": 1,
            "subjects": {
                sid: {"trials": [{"path": p, "mode": m} for p, m in trials]}
                for sid, trials in self.subjects.items()
            },
        }
        write_text_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def process(self, sid: str, settings=PipelineSettings()) -> ProcessedSubject:
        trials = [(self.root / p, m) for p, m in self.subjects[sid]]
        return process_subject(self.root / sid, trials, settings, subject_id=sid)


def fold_datasets(
    procs: dict[str, ProcessedSubject], fold: LosoFold
) -> tuple[list[SubjectDataset], SubjectDataset, tuple[MinMaxStats, MinMaxStats]]:
    """Scale every subject with statistics from the fold's training pool only."""
    stats = pool_stats(procs[s] for s in fold.train_subjects)
    train = [normalize_subject(procs[s], *stats) for s in fold.train_subjects]
    test = normalize_subject(procs[fold.test_subject], *stats)
    return train, test, stats


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
