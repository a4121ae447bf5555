"""Compare the compiled and pure-Python second-order-section filter kernels.

Run with ``python benchmarks/bench_kernels.py``. Both backends are fed the
same Butterworth band-pass and random multichannel signal; the script checks
they agree and reports the median wall time of each.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from imu2emg import _fallback
from imu2emg.dsp import design_butterworth

try:
    from imu2emg import _kernels
except ImportError:  # extension not built
    _kernels = None


def _time(fn, repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def run(n_samples: int = 60_000, channels: int = 10, repeats: int = 5) -> dict:
    filt = design_butterworth(4, "bandpass", (20.0, 450.0), 1000.0)
    sos = np.ascontiguousarray(filt.sos, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((n_samples, channels))

    def call(mod):
        zi = np.zeros((sos.shape[0], channels, 2))
        return mod.sosfilt(sos, x, zi)

    results = {"fallback": _time(lambda: call(_fallback), repeats)}
    if _kernels is not None:
        results["compiled"] = _time(lambda: call(_kernels), repeats)
        np.testing.assert_allclose(call(_kernels), call(_fallback), rtol=1e-12, atol=1e-12)
    return results


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--samples", type=int, default=60_000)
    ap.add_argument("--channels", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    res = run(args.samples, args.channels, args.repeats)
    print(f"sosfilt, {args.samples} samples x {args.channels} channels (median of {args.repeats})")
    for name, secs in res.items():
        print(f"  {name:9s} {secs * 1e3:9.2f} ms")
    if "compiled" in res:
        print(f"  speed-up  {res['fallback'] / res['compiled']:9.1f}x")
    else:
        print("  compiled extension not built; install with `pip install -e . --no-build-isolation`")


if __name__ == "__main__":
    main()
