"""Shared fixtures and the finite-difference gradient oracle."""
from __future__ import annotations

import numpy as np
import pytest

from imu2emg import tensor as tn
from imu2emg.model import ModelConfig, forward, init_params
from imu2emg.tensor import RngState, Tensor


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is (near) zero from producing
    0/0; such entries are judged on absolute error instead.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_grads(build, inputs: list[Tensor], h: float = 1e-6) -> float:
    """Backprop ``build()`` and compare every input gradient to finite differences."""
    loss = build()
    tn.backward(loss, inputs)
    analytic = [t.grad.copy() for t in inputs]
    worst = 0.0
    with tn.no_grad():
        for t, a in zip(inputs, analytic):
            num = numeric_grad(lambda: float(build().data), t.data, h)
            worst = max(worst, rel_error(a, num))
    return worst


TINY = ModelConfig(
    input_dim=3, d_model=8, n_layers=1, n_heads=2, conv_kernel=3, ffn_hidden=8,
    output_dim=2, dropout_rate=0.0, groupnorm_groups=2, seq_len=7,
)
DESK = ModelConfig(d_model=32, n_layers=2, n_heads=4, ffn_hidden=64, groupnorm_groups=4)


def model_fd_error(config: ModelConfig, seed: int = 0) -> tuple[float, dict[str, float]]:
    """Finite-difference check of every parameter of ``config`` at float64."""
    params = init_params(config, RngState(seed), dtype=np.float64)
    gen = np.random.default_rng(seed + 1)
    x = gen.normal(size=(2, config.seq_len, config.input_dim))
    y = gen.normal(size=(2, config.seq_len, config.output_dim))

    def build():
        return tn.mse_loss(forward(params, x, config), y)

    tn.backward(build(), list(params))
    per = {}
    with tn.no_grad():
        for name, p in params.items():
            a = p.grad.copy()
            num = numeric_grad(lambda: float(build().data), p.data)
            per[name] = rel_error(a, num)
    return max(per.values()), per


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def trained():
    """A desk-scale model trained on three synthetic subjects (about 10 s)."""
    from imu2emg.dataset import LosoFold
    from imu2emg.synthetic import generate_synthetic_population
    from imu2emg.train import TrainConfig, fit

    pop = generate_synthetic_population(3, 100, 0)
    fold = LosoFold("unseen", tuple(s.subject_id for s in pop))
    theta0, _ = fit(fold, pop, DESK, TrainConfig(max_epochs=15, patience=10, batch_size=32))
    return theta0, pop


# ----------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n}. {title}: {detail}")
