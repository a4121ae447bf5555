"""Synthetic multi-subject IMU/EMG population.

A fixed "world" (drawn once from a constant seed) defines how each inertial
channel depends on gait phase and locomotion mode, and where each muscle
bursts. Subjects differ by a style vector: per-muscle amplitude gain in
[0.6, 1.4], an EMG phase shift in [-10, 10] % of the cycle, and a noise
level. The target for a cycle is a deterministic function of (style, phase,
mode), so the exact noise-free envelope is always available as an oracle.

Two outputs share that ground truth: ready-made normalized cycles
(:func:`generate_synthetic_population`) and raw 1000 Hz trial recordings in
the CSV schema (:func:`synthesize_trial`) that go through the full signal
pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import IMU_CHANNELS, MUSCLES, MovementSegment, SubjectDataset
from .dsp import CYCLE_LENGTH
from .tensor import ConfigError

SYNTH_MODES = ("levelground", "treadmill", "stair_ascent", "ramp_ascent")
N_HARMONICS = 4
_WORLD_SEED = 20240611


@dataclass(frozen=True)
class World:
    imu_amp: np.ndarray  # [modes, channels, harmonics]
    imu_phase: np.ndarray  # [channels, harmonics]
    burst_center: np.ndarray  # [muscles, 2]
    burst_width: np.ndarray  # [muscles, 2]
    burst_weight: np.ndarray  # [muscles, 2]
    mode_gain: np.ndarray  # [modes, muscles]
    cycle_seconds: np.ndarray  # [modes]


def _make_world() -> World:
    g = np.random.default_rng(_WORLD_SEED)
    n_modes, n_ch, n_mus = len(SYNTH_MODES), len(IMU_CHANNELS), len(MUSCLES)
    base = g.uniform(0.2, 1.0, size=(n_ch, N_HARMONICS)) / np.arange(1, N_HARMONICS + 1)
    # each mode reweights the harmonic content of every channel
    tilt = g.uniform(0.4, 1.6, size=(n_modes, 1, N_HARMONICS))
    imu_amp = base[None] * tilt * g.uniform(0.8, 1.2, size=(n_modes, n_ch, 1))
    return World(
        imu_amp=imu_amp,
        imu_phase=g.uniform(0, 2 * np.pi, size=(n_ch, N_HARMONICS)),
        burst_center=g.uniform(0, 1, size=(n_mus, 2)),
        burst_width=g.uniform(0.15, 0.35, size=(n_mus, 2)),
        burst_weight=np.column_stack([np.ones(n_mus), g.uniform(0.2, 0.7, size=n_mus)]),
        mode_gain=g.uniform(0.75, 1.0, size=(n_modes, n_mus)),
        cycle_seconds=np.array([1.1, 1.0, 1.25, 1.15]),
    )


WORLD = _make_world()


@dataclass(frozen=True)
class SubjectStyle:
    amplitude: np.ndarray  # [muscles], in [0.6, 1.4]
    phase_shift: float  # cycle fraction, in [-0.1, 0.1]
    noise: float
    imu_gain: np.ndarray  # [channels]

    @classmethod
    def draw(cls, gen: np.random.Generator) -> "SubjectStyle":
        return cls(
            amplitude=gen.uniform(0.6, 1.4, size=len(MUSCLES)),
            phase_shift=float(gen.uniform(-0.1, 0.1)),
            noise=float(gen.uniform(0.005, 0.02)),
            imu_gain=gen.uniform(0.9, 1.1, size=len(IMU_CHANNELS)),
        )

    def scaled(self, factor: float) -> "SubjectStyle":
        return SubjectStyle(self.amplitude * factor, self.phase_shift, self.noise, self.imu_gain)

    def to_dict(self) -> dict:
        return {
            "amplitude": self.amplitude.tolist(),
            "phase_shift": self.phase_shift,
            "noise": self.noise,
            "imu_gain": self.imu_gain.tolist(),
        }


def imu_signal(phase: np.ndarray, mode: int, style: SubjectStyle) -> np.ndarray:
    """Noise-free inertial channels ``[len(phase), 24]`` in roughly [-1, 1]."""
    h = np.arange(1, N_HARMONICS + 1)
    ang = 2 * np.pi * phase[:, None, None] * h[None, None, :] + WORLD.imu_phase[None]
    raw = (WORLD.imu_amp[mode][None] * np.sin(ang)).sum(axis=-1)
    norm = WORLD.imu_amp[mode].sum(axis=-1)
    return raw / norm * style.imu_gain


def emg_activation(phase: np.ndarray, mode: int, style: SubjectStyle) -> np.ndarray:
    """Ground-truth envelope ``[len(phase), 10]``: rectified-sine bursts, clipped to [0, 1]."""
    p = (phase[:, None, None] + style.phase_shift - WORLD.burst_center[None]) % 1.0
    inside = p < WORLD.burst_width[None]
    bursts = np.where(inside, np.sin(np.pi * np.minimum(p / WORLD.burst_width[None], 1.0)), 0.0)
    act = (bursts * WORLD.burst_weight[None]).sum(axis=-1)
    act = 0.05 + 0.6 * act * WORLD.mode_gain[mode][None] * style.amplitude[None]
    return np.clip(act, 0.0, 1.0)


def _cycle_phase(gen: np.random.Generator) -> np.ndarray:
    u = np.linspace(0.0, 1.0, CYCLE_LENGTH)
    warp = gen.uniform(-0.03, 0.03)
    return u + warp * np.sin(2 * np.pi * u)


def synth_cycle(style: SubjectStyle, mode: int, gen: np.random.Generator):
    """One normalized cycle: (inputs [101, 24], targets [101, 10], clean targets)."""
    phase = _cycle_phase(gen)
    x = 0.5 + 0.45 * imu_signal(phase, mode, style)
    x = x + gen.normal(0.0, style.noise, size=x.shape)
    clean = emg_activation(phase, mode, style)
    y = clean + gen.normal(0.0, style.noise * 0.5, size=clean.shape)
    return np.clip(x, 0.0, 1.0), np.clip(y, 0.0, 1.0), clean


def synth_subject(
    subject_id: str, style: SubjectStyle, cycles: int, gen: np.random.Generator, modes=SYNTH_MODES
) -> SubjectDataset:
    segs = []
    for i in range(cycles):
        m = i * len(modes) // cycles
        mode_idx = SYNTH_MODES.index(modes[m])
        x, y, _ = synth_cycle(style, mode_idx, gen)
        segs.append(MovementSegment(x, y, subject_id, modes[m], i, trial=f"{modes[m]}_01"))
    return SubjectDataset(subject_id, segs, style={"style": style})


def generate_synthetic_population(n_subjects: int, cycles_per_subject: int, rng) -> list[SubjectDataset]:
    """Population of ``n_subjects`` with ``cycles_per_subject`` cycles each.

    Cycles are split into contiguous blocks over the four synthetic modes, in
    recording order. ``rng`` is a ``numpy.random.Generator`` or an int seed.
    """
    if n_subjects < 2:
        raise ConfigError(f"need at least 2 subjects, got {n_subjects}")
    if cycles_per_subject < 1:
        raise ConfigError(f"need at least 1 cycle per subject, got {cycles_per_subject}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = []
    for k in range(n_subjects):
        style = SubjectStyle.draw(gen)
        out.append(synth_subject(f"S{k + 1:02d}", style, cycles_per_subject, gen))
    return out


# ----------------------------------------------------------------- raw recordings


@dataclass
class RawTrial:
    time_s: np.ndarray
    imu: np.ndarray  # [n_imu, 24] at imu_rate
    emg: np.ndarray  # [n_emg, 10] at emg_rate
    heel_strike_rows: np.ndarray
    mode: str
    emg_rate: float
    imu_rate: float


def synthesize_trial(
    style: SubjectStyle, mode: str, cycles: int, gen: np.random.Generator, emg_rate=1000.0, imu_rate=200.0
) -> RawTrial:
    """Continuous recording of ``cycles`` strides at sensor rates.

    EMG is Gaussian noise amplitude-modulated by the activation envelope; IMU
    channels are in physical-looking units (offset + gain).
    """
    mode_idx = SYNTH_MODES.index(mode)
    base = WORLD.cycle_seconds[mode_idx]
    durations = base * gen.uniform(0.95, 1.05, size=cycles)
    step = int(round(emg_rate / imu_rate))
    # heel strikes on IMU sample instants so both clocks see the same boundaries
    edges = np.concatenate([[0.0], np.cumsum(np.round(durations * imu_rate) / imu_rate)])
    n = int(round(edges[-1] * emg_rate)) + 1
    t = np.arange(n) / emg_rate
    cyc = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, cycles - 1)
    phase = (t - edges[cyc]) / (edges[cyc + 1] - edges[cyc])
    act = emg_activation(phase, mode_idx, style)
    emg = act * gen.normal(0.0, 1.0, size=act.shape) * 0.2
    emg += 0.4 * np.sin(2 * np.pi * 0.3 * t)[:, None] * 0.1  # slow drift, removed by band-pass
    imu_idx = np.arange(0, n, step)
    imu = imu_signal(phase[imu_idx], mode_idx, style)
    imu = imu + gen.normal(0.0, style.noise, size=imu.shape)
    scale = np.where(np.array(["accel" in c for c in IMU_CHANNELS]), 9.81, 3.0)
    imu = imu * scale + 0.1 * scale
    hs_rows = np.round(edges * emg_rate).astype(int)
    return RawTrial(t, imu, emg, hs_rows, mode, emg_rate, imu_rate)


def trial_to_csv_text(trial: RawTrial) -> str:
    """Render a raw trial in the trial-CSV schema (IMU cells blank between IMU samples)."""
    header = ["time_s", *IMU_CHANNELS, *MUSCLES, "heel_strike"]
    step = int(round(trial.emg_rate / trial.imu_rate))
    hs = np.zeros(len(trial.time_s), dtype=int)
    hs[trial.heel_strike_rows] = 1
    blank = "," * (len(IMU_CHANNELS) - 1)
    lines = [",".join(header)]
    for i, t in enumerate(trial.time_s):
        imu = ",".join(f"{v:.6g}" for v in trial.imu[i // step]) if i % step == 0 else blank
        emg = ",".join(f"{v:.6g}" for v in trial.emg[i])
        lines.append(f"{t:.3f},{imu},{emg},{hs[i]}")
    return "\n".join(lines) + "\n"


def population_styles(n_subjects: int, seed: int) -> list[SubjectStyle]:
    gen = np.random.default_rng(seed)
    return [SubjectStyle.draw(gen) for _ in range(n_subjects)]


def per_muscle_mean(subject: SubjectDataset) -> np.ndarray:
    return np.mean([s.targets.mean(axis=0) for s in subject.segments], axis=0)


__all__ = [
    "SYNTH_MODES",
    "SubjectStyle",
    "WORLD",
    "emg_activation",
    "generate_synthetic_population",
    "imu_signal",
    "per_muscle_mean",
    "synth_subject",
    "synthesize_trial",
    "trial_to_csv_text",
]
