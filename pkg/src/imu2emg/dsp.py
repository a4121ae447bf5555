"""Signal processing for inertial and myoelectric streams.

Processing order is fixed: band-pass -> rectify -> low-pass (EMG only),
resample EMG onto the IMU clock, cut cycles at heel strikes, time-normalize
each cycle to 101 samples, median filter, then min-max scale.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

CYCLE_LENGTH = 101


class DesignError(ValueError):
    """Filter specification cannot be realized."""


class SignalLengthError(ValueError):
    """Signal too short for the requested operation."""


class ContractError(ValueError):
    """Caller violated an input precondition."""


@dataclass
class RawStream:
    channel_names: list[str]
    sample_rate_hz: float
    samples: np.ndarray  # [N, channels]
    start_time_s: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        if self.sample_rate_hz <= 0:
            raise ContractError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.samples.shape[0] < 2:
            raise SignalLengthError("a stream needs at least 2 samples")
        if self.samples.shape[1] != len(self.channel_names):
            raise ContractError(
                f"{self.samples.shape[1]} sample columns but {len(self.channel_names)} channel names"
            )

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return (self.n_samples - 1) / self.sample_rate_hz

    @property
    def times(self) -> np.ndarray:
        return self.start_time_s + np.arange(self.n_samples) / self.sample_rate_hz

    def with_samples(self, samples: np.ndarray) -> "RawStream":
        return RawStream(list(self.channel_names), self.sample_rate_hz, samples, self.start_time_s)


# ----------------------------------------------------------------- filter design


@dataclass
class BiquadCascade:
    """Second-order sections, rows ``(b0, b1, b2, 1, a1, a2)``."""

    sos: np.ndarray
    order: int

    def __post_init__(self):
        self.sos = np.ascontiguousarray(self.sos, dtype=np.float64)
        if self.sos.ndim != 2 or self.sos.shape[1] != 6:
            raise DesignError(f"sos must be [n, 6], got {self.sos.shape}")
        if not self.is_stable():
            raise DesignError("biquad cascade has a pole on or outside the unit circle")

    @property
    def n_sections(self) -> int:
        return self.sos.shape[0]

    def poles(self) -> np.ndarray:
        out = []
        for _, _, _, a0, a1, a2 in self.sos:
            out.extend(np.roots([a0, a1, a2]) if a2 != 0 else np.roots([a0, a1]))
        return np.asarray(out)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def frequency_response(self, freqs_hz, sample_rate_hz: float) -> np.ndarray:
        """Complex response H(e^{jw}) at the given frequencies."""
        z = np.exp(1j * 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / sample_rate_hz)
        h = np.ones_like(z)
        for b0, b1, b2, a0, a1, a2 in self.sos:
            h *= (b0 * z**2 + b1 * z + b2) / (a0 * z**2 + a1 * z + a2)
        return h


def _prototype_poles(order: int) -> np.ndarray:
    k = np.arange(1, order + 1)
    return np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))


def _pair_sections(poles: np.ndarray, zeros: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Group conjugate pole pairs (upper half-plane first) with real zeros."""
    upper = sorted((p for p in poles if p.imag > 1e-12), key=lambda p: abs(p))
    real = sorted((p for p in poles if abs(p.imag) <= 1e-12), key=lambda p: abs(p))
    zeros = list(np.sort_complex(zeros))
    sections = []
    for p in upper:
        zs = [zeros.pop(0), zeros.pop(-1)] if len(zeros) >= 2 else zeros[:]
        sections.append((np.array([p, np.conj(p)]), np.array(zs)))
    while real:
        ps = [real.pop(0)]
        if real:
            ps.append(real.pop(0))
        n = len(ps)
        zs = [zeros.pop(0) for _ in range(min(n, len(zeros)))]
        sections.append((np.array(ps), np.array(zs)))
    return sections


def design_butterworth(order: int, kind: str, cutoff_hz, sample_rate_hz: float) -> BiquadCascade:
    """Digital Butterworth filter as a biquad cascade.

    The analog prototype is frequency-transformed at pre-warped edges and
    mapped with the bilinear transform, so the response is -3.01 dB exactly at
    each cutoff. ``order`` is the prototype order; a band-pass therefore has
    ``2 * order`` poles.
    """
    if order < 1:
        raise DesignError(f"filter order must be >= 1, got {order}")
    fs = float(sample_rate_hz)
    nyq = fs / 2.0
    edges = np.atleast_1d(np.asarray(cutoff_hz, dtype=np.float64))
    if kind == "lowpass":
        if edges.size != 1:
            raise DesignError("lowpass takes a single cutoff")
    elif kind == "bandpass":
        if edges.size != 2 or not edges[0] < edges[1]:
            raise DesignError("bandpass takes (low, high) cutoffs with low < high")
    else:
        raise DesignError(f"unknown filter kind {kind!r}")
    if np.any(edges <= 0) or np.any(edges >= nyq):
        raise DesignError(f"cutoffs {edges.tolist()} Hz must lie strictly inside (0, {nyq}) Hz")

    warped = 2.0 * fs * np.tan(np.pi * edges / fs)
    proto = _prototype_poles(order)
    if kind == "lowpass":
        s_poles = warped[0] * proto
        s_zero_count_origin = 0
    else:
        w0 = math.sqrt(warped[0] * warped[1])
        bw = warped[1] - warped[0]
        half = proto * bw / 2.0
        disc = np.sqrt(half**2 - w0**2 + 0j)
        s_poles = np.concatenate([half + disc, half - disc])
        s_zero_count_origin = order

    z_poles = (2.0 * fs + s_poles) / (2.0 * fs - s_poles)
    # analog zeros at infinity map to z = -1, zeros at s = 0 map to z = +1
    n_inf = len(s_poles) - s_zero_count_origin
    z_zeros = np.concatenate([np.full(s_zero_count_origin, 1.0 + 0j), np.full(n_inf, -1.0 + 0j)])

    rows = []
    for ps, zs in _pair_sections(z_poles, z_zeros):
        a = np.real(np.poly(ps))
        b = np.real(np.poly(zs)) if len(zs) else np.array([1.0])
        a = np.pad(a, (0, 3 - len(a)))
        b = np.pad(b, (0, 3 - len(b)))
        rows.append(np.concatenate([b, a]))
    sos = np.array(rows)

    n_poles = len(s_poles)
    # unit gain at DC (lowpass) or at the digital image of the analog centre
    ref_hz = 0.0 if kind == "lowpass" else (fs / np.pi) * math.atan(math.sqrt(warped[0] * warped[1]) / (2.0 * fs))
    sos[0, :3] /= abs(BiquadCascade(sos, n_poles).frequency_response([ref_hz], fs)[0])
    return BiquadCascade(sos, n_poles)


# ----------------------------------------------------------------- filtering


def _sos_steady_state(sos: np.ndarray) -> np.ndarray:
    """Per-section TDF-II state for a unit step at steady state."""
    zi = np.zeros((sos.shape[0], 2))
    scale = 1.0
    for s, (b0, b1, b2, _, a1, a2) in enumerate(sos):
        dc = (b0 + b1 + b2) / (1.0 + a1 + a2)
        # steady state y = dc * u with u the section input level
        u = scale
        y = dc * u
        z1 = b2 * u - a2 * y
        z0 = b1 * u - a1 * y + z1
        zi[s] = (z0, z1)
        scale = y
    return zi


def filtfilt(filt: BiquadCascade, x) -> np.ndarray:
    """Zero-phase forward-backward filtering along axis 0.

    Odd-reflection padding of ``3 * order`` samples is added at both ends and
    each pass starts from the steady-state response to its first sample.
    The effective magnitude response is ``|H|**2``.
    """
    arr = np.asarray(x, dtype=np.float64)
    one_d = arr.ndim == 1
    if one_d:
        arr = arr[:, None]
    padlen = 3 * filt.order
    n = arr.shape[0]
    if n <= padlen:
        raise SignalLengthError(f"filtfilt needs more than {padlen} samples, got {n}")
    head = 2.0 * arr[0] - arr[padlen:0:-1]
    tail = 2.0 * arr[-1] - arr[-2 : -padlen - 2 : -1]
    ext = np.ascontiguousarray(np.concatenate([head, arr, tail]))
    zi0 = _sos_steady_state(filt.sos)
    zi = np.ascontiguousarray(zi0[:, None, :] * ext[0][None, :, None])
    y = kernels.sosfilt(filt.sos, ext, zi)
    y = np.ascontiguousarray(y[::-1])
    zi = np.ascontiguousarray(zi0[:, None, :] * y[0][None, :, None])
    y = kernels.sosfilt(filt.sos, y, zi)[::-1]
    out = np.ascontiguousarray(y[padlen : padlen + n])
    return out[:, 0] if one_d else out


@dataclass(frozen=True)
class EnvelopeSettings:
    band_hz: tuple[float, float] = (20.0, 450.0)
    lowpass_hz: float = 8.0
    order: int = 4


def emg_envelope(raw: RawStream, settings: EnvelopeSettings = EnvelopeSettings()) -> RawStream:
    """Band-pass, full-wave rectify, low-pass.

    The low-pass output may carry a small negative ripple; it is not clipped.
    """
    fs = raw.sample_rate_hz
    bp = design_butterworth(settings.order, "bandpass", settings.band_hz, fs)
    lp = design_butterworth(settings.order, "lowpass", settings.lowpass_hz, fs)
    rect = np.abs(filtfilt(bp, raw.samples))
    return raw.with_samples(filtfilt(lp, rect))


def resample_linear(x: RawStream, target_hz: float) -> RawStream:
    """Linearly interpolate every channel onto a uniform ``target_hz`` grid.

    The grid starts at the stream start and covers the same interval; the last
    grid point lands on the final sample when the duration allows it.
    """
    if target_hz <= 0:
        raise ContractError(f"target rate must be positive, got {target_hz}")
    if target_hz == x.sample_rate_hz:
        return x.with_samples(x.samples.copy())
    src_t = np.arange(x.n_samples) / x.sample_rate_hz
    n_out = int(math.floor(x.duration_s * target_hz + 1e-9)) + 1
    dst_t = np.arange(n_out) / target_hz
    out = np.empty((n_out, x.samples.shape[1]))
    for c in range(x.samples.shape[1]):
        out[:, c] = np.interp(dst_t, src_t, x.samples[:, c])
    return RawStream(list(x.channel_names), float(target_hz), out, x.start_time_s)


# ----------------------------------------------------------------- segmentation


@dataclass
class RawSegment:
    """One heel-strike-to-heel-strike window before normalization."""

    inputs: np.ndarray
    targets: np.ndarray
    start_s: float
    cycle_index: int


@dataclass
class SegmentationResult:
    segments: list[RawSegment]
    discarded: int = 0


def segment_cycles(
    imu: RawStream,
    emg_env: RawStream,
    heel_strikes,
    min_duration_s: float = 0.4,
) -> SegmentationResult:
    """Cut aligned IMU / EMG-envelope windows ``[hs_i, hs_{i+1})``."""
    if imu.sample_rate_hz != emg_env.sample_rate_hz:
        raise ContractError(
            f"streams must share a rate, got {imu.sample_rate_hz} and {emg_env.sample_rate_hz} Hz"
        )
    hs = np.asarray(heel_strikes, dtype=np.float64)
    if hs.size and np.any(np.diff(hs) <= 0):
        raise ContractError("heel strikes must be strictly increasing")
    fs = imu.sample_rate_hz
    t0 = max(imu.start_time_s, emg_env.start_time_s)
    t1 = min(imu.start_time_s + imu.duration_s, emg_env.start_time_s + emg_env.duration_s)
    tol = 0.5 / fs
    if hs.size and (hs[0] < t0 - tol or hs[-1] > t1 + tol):
        raise ContractError(f"heel strikes outside the common stream span [{t0}, {t1}] s")
    min_len = int(round(min_duration_s * fs))
    segments: list[RawSegment] = []
    discarded = 0
    for i in range(len(hs) - 1):
        a_imu = int(round((hs[i] - imu.start_time_s) * fs))
        b_imu = int(round((hs[i + 1] - imu.start_time_s) * fs))
        a_emg = int(round((hs[i] - emg_env.start_time_s) * fs))
        length = b_imu - a_imu
        if length < max(min_len, 2):
            discarded += 1
            continue
        # the closing strike is exclusive unless it sits on the final sample
        if b_imu >= imu.n_samples or a_emg + length > emg_env.n_samples:
            length = min(imu.n_samples - a_imu, emg_env.n_samples - a_emg)
        segments.append(
            RawSegment(
                imu.samples[a_imu : a_imu + length].copy(),
                emg_env.samples[a_emg : a_emg + length].copy(),
                float(hs[i]),
                len(segments) + discarded,
            )
        )
    if discarded:
        log.info("discarded %d cycles shorter than %.3f s", discarded, min_duration_s)
    return SegmentationResult(segments, discarded)


def time_normalize(samples, n_points: int = CYCLE_LENGTH) -> np.ndarray:
    """Resample ``[L, C]`` onto ``n_points`` uniform positions over ``[0, L-1]``."""
    arr = np.asarray(samples, dtype=np.float64)
    one_d = arr.ndim == 1
    if one_d:
        arr = arr[:, None]
    length = arr.shape[0]
    if length < 2:
        raise SignalLengthError(f"time normalization needs at least 2 samples, got {length}")
    pos = np.linspace(0.0, length - 1, n_points)
    src = np.arange(length, dtype=np.float64)
    out = np.empty((n_points, arr.shape[1]))
    for c in range(arr.shape[1]):
        out[:, c] = np.interp(pos, src, arr[:, c])
    out[0] = arr[0]
    out[-1] = arr[-1]
    return out[:, 0] if one_d else out


def median_filter(x, window: int = 5) -> np.ndarray:
    """Sliding median per column with edge-replication padding."""
    if window < 1 or window % 2 == 0:
        raise ContractError(f"median window must be odd and >= 1, got {window}")
    arr = np.asarray(x, dtype=np.float64)
    one_d = arr.ndim == 1
    if one_d:
        arr = arr[:, None]
    if window == 1:
        out = arr.copy()
    else:
        half = window // 2
        padded = np.pad(arr, ((half, half), (0, 0)), mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0)
        out = np.median(win, axis=-1)
    return out[:, 0] if one_d else out


# ----------------------------------------------------------------- normalization


@dataclass
class MinMaxStats:
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def from_arrays(cls, arrays) -> "MinMaxStats":
        stacked = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
        return cls(stacked.min(axis=0), stacked.max(axis=0))

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxStats":
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


def minmax_normalize(x, stats: MinMaxStats | None = None, clip: bool = True) -> np.ndarray:
    """Scale columns to [0, 1]; constant columns map to 0."""
    arr = np.asarray(x, dtype=np.float64)
    if stats is None:
        stats = MinMaxStats.from_arrays([arr])
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (arr - stats.minimum) / safe, 0.0)
    return np.clip(out, 0.0, 1.0) if clip else out


# ----------------------------------------------------------------- full pipeline


@dataclass(frozen=True)
class PipelineSettings:
    imu_rate_hz: float = 200.0
    median_window: int = 5
    min_cycle_s: float = 0.4
    envelope: EnvelopeSettings = field(default_factory=EnvelopeSettings)


@dataclass
class ProcessedTrial:
    """Time-normalized, median-filtered cycles prior to min-max scaling."""

    inputs: list[np.ndarray]
    targets: list[np.ndarray]
    cycle_index: list[int]
    discarded: int


def process_trial(
    imu: RawStream,
    emg: RawStream,
    heel_strikes,
    settings: PipelineSettings = PipelineSettings(),
) -> ProcessedTrial:
    """Everything up to (not including) min-max normalization."""
    env = emg_envelope(emg, settings.envelope)
    env = resample_linear(env, settings.imu_rate_hz)
    if imu.sample_rate_hz != settings.imu_rate_hz:
        imu = resample_linear(imu, settings.imu_rate_hz)
    seg = segment_cycles(imu, env, heel_strikes, settings.min_cycle_s)
    ins, outs, idx = [], [], []
    for s in seg.segments:
        ins.append(median_filter(time_normalize(s.inputs), settings.median_window))
        outs.append(median_filter(time_normalize(s.targets), settings.median_window))
        idx.append(s.cycle_index)
    return ProcessedTrial(ins, outs, idx, seg.discarded)
