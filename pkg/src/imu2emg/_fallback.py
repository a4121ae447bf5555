"""Pure-Python twin of ``_kernels``; used when the extension is not built."""
import numpy as np


def sosfilt(sos: np.ndarray, x: np.ndarray, zi: np.ndarray) -> np.ndarray:
    """Filter every column of ``x`` through the cascade ``sos``.

    Same contract as the compiled kernel: ``x`` is ``[n_samples, n_channels]``,
    ``zi`` is ``[n_sections, n_channels, 2]`` and is updated in place. The
    recursion runs over time with channels vectorized.
    """
    y = np.array(x, dtype=np.float64, copy=True)
    n = y.shape[0]
    for s in range(sos.shape[0]):
        b0, b1, b2, _, a1, a2 = (float(v) for v in sos[s])
        z0 = zi[s, :, 0].copy()
        z1 = zi[s, :, 1].copy()
        for i in range(n):
            xi = y[i]
            yi = b0 * xi + z0
            z0 = b1 * xi - a1 * yi + z1
            z1 = b2 * xi - a2 * yi
            y[i] = yi
        zi[s, :, 0] = z0
        zi[s, :, 1] = z1
    return y
