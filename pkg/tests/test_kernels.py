"""Backend selection: compiled filter kernel with a pure-Python fallback."""
import os
import subprocess
import sys

import numpy as np
import pytest

from imu2emg import _fallback, kernels
from imu2emg.dsp import design_butterworth


def backend_in_subprocess(env_value):
    env = dict(os.environ)
    env.pop("IMU2EMG_PURE_PYTHON", None)
    if env_value is not None:
        env["IMU2EMG_PURE_PYTHON"] = env_value
    out = subprocess.run(
        [sys.executable, "-c", "from imu2emg import kernels; print(kernels.BACKEND)"],
        capture_output=True, text=True, env=env, check=True,
    )
    return out.stdout.strip()


def test_env_var_forces_fallback():
    assert backend_in_subprocess("1") == "python"


def test_default_backend_is_reported():
    assert backend_in_subprocess(None) in ("compiled", "python")


@pytest.mark.skipif(kernels.BACKEND != "compiled", reason="extension not built")
def test_compiled_matches_fallback_and_state_carries_over():
    sos = np.ascontiguousarray(design_butterworth(4, "lowpass", 8.0, 200.0).sos)
    x = np.random.default_rng(0).normal(size=(400, 3))
    zi_a = np.zeros((sos.shape[0], 3, 2))
    zi_b = zi_a.copy()
    # filtering in two chunks with carried state equals one pass
    first = kernels.sosfilt(sos, np.ascontiguousarray(x[:150]), zi_a)
    second = kernels.sosfilt(sos, np.ascontiguousarray(x[150:]), zi_a)
    whole = _fallback.sosfilt(sos, x, zi_b)
    np.testing.assert_allclose(np.vstack([first, second]), whole, atol=1e-12)
    np.testing.assert_allclose(zi_a, zi_b, atol=1e-12)
