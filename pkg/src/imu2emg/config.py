"""Run configuration: one JSON document describing a complete experiment."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .adapt import AdaptConfig
from .dataset import CALIBRATION_RATIOS
from .dsp import EnvelopeSettings, PipelineSettings
from .model import ModelConfig
from .tensor import ConfigError
from .train import TrainConfig

CONFIG_VERSION = 1
OUT_ENV = "IMU2EMG_OUT"


@dataclass(frozen=True)
class SweepSettings:
    ratios: tuple[float, ...] = CALIBRATION_RATIOS
    seeds: tuple[int, ...] = (0,)
    policy: str = "first"


@dataclass(frozen=True)
class RunConfig:
    manifest: str = ""
    out_dir: str = "runs/default"
    seed: int = 0
    jobs: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    median_window: int = 5
    min_cycle_s: float = 0.4

    # ------------------------------------------------------------ (de)serialization

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "manifest": self.manifest,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "jobs": self.jobs,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "adapt": self.adapt.to_dict(),
            "sweep": {"ratios": list(self.sweep.ratios), "seeds": list(self.sweep.seeds), "policy": self.sweep.policy},
            "dsp": {"median_window": self.median_window, "min_cycle_s": self.min_cycle_s},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        errs = []
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            errs.append(f"config version {version} unsupported (expected {CONFIG_VERSION})")
        known = {"version", "manifest", "out_dir", "seed", "jobs", "model", "train", "adapt", "sweep", "dsp"}
        unknown = set(d) - known
        if unknown:
            errs.append(f"unknown top-level keys: {sorted(unknown)}")
        parts = {}
        for key, klass in (("model", ModelConfig), ("train", TrainConfig), ("adapt", AdaptConfig)):
            try:
                parts[key] = klass.from_dict(d.get(key, {}))
            except (ConfigError, TypeError) as exc:
                errs.append(str(exc))
        sw = d.get("sweep", {})
        dsp = d.get("dsp", {})
        if errs:
            raise ConfigError("; ".join(errs))
        return cls(
            manifest=str(d.get("manifest", "")),
            out_dir=str(d.get("out_dir", "runs/default")),
            seed=int(d.get("seed", 0)),
            jobs=int(d.get("jobs", 1)),
            model=parts["model"],
            train=parts["train"],
            adapt=parts["adapt"],
            sweep=SweepSettings(
                tuple(float(r) for r in sw.get("ratios", CALIBRATION_RATIOS)),
                tuple(int(s) for s in sw.get("seeds", (0,))),
                str(sw.get("policy", "first")),
            ),
            median_window=int(dsp.get("median_window", 5)),
            min_cycle_s=float(dsp.get("min_cycle_s", 0.4)),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(doc)

    def with_overrides(self, seed=None, jobs=None, out_dir=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if jobs is not None:
            cfg = replace(cfg, jobs=int(jobs))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=str(out_dir))
        elif os.environ.get(OUT_ENV):
            cfg = replace(cfg, out_dir=os.environ[OUT_ENV])
        # the run seed drives training
        return replace(cfg, train=replace(cfg.train, seed=cfg.seed))

    # ------------------------------------------------------------ validation

    def errors(self, need_manifest: bool = True) -> list[str]:
        errs = self.model.errors() + self.train.errors() + self.adapt.errors()
        if need_manifest:
            if not self.manifest:
                errs.append("manifest path is required")
            elif not Path(self.manifest).is_file():
                errs.append(f"manifest {self.manifest} does not exist")
        if self.jobs < 1:
            errs.append(f"jobs must be >= 1, got {self.jobs}")
        if self.median_window < 1 or self.median_window % 2 == 0:
            errs.append(f"dsp.median_window must be odd and >= 1, got {self.median_window}")
        if self.min_cycle_s < 0:
            errs.append(f"dsp.min_cycle_s must be >= 0, got {self.min_cycle_s}")
        for r in self.sweep.ratios:
            if r != 0 and not any(math.isclose(r, a) for a in CALIBRATION_RATIOS):
                errs.append(f"sweep ratio {r} not in {list(CALIBRATION_RATIOS)} (or 0)")
        if not self.sweep.seeds:
            errs.append("sweep.seeds must not be empty")
        if self.sweep.policy not in ("first", "seeded_random"):
            errs.append(f"sweep.policy must be 'first' or 'seeded_random', got {self.sweep.policy!r}")
        if self.model.seq_len != 101:
            errs.append(f"model.seq_len must be 101 for cycle data, got {self.model.seq_len}")
        return errs

    def validate(self, need_manifest: bool = True) -> "RunConfig":
        errs = self.errors(need_manifest)
        if errs:
            raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(errs))
        return self

    def pipeline(self) -> PipelineSettings:
        return PipelineSettings(
            median_window=self.median_window, min_cycle_s=self.min_cycle_s, envelope=EnvelopeSettings()
        )
