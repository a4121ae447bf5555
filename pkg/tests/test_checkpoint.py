"""Binary checkpoints: byte-stable round trips and corruption detection."""
import numpy as np
import pytest

from imu2emg.checkpoint import (
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from imu2emg.model import forward, init_params
from imu2emg.tensor import RngState

from conftest import DESK


@pytest.fixture(scope="module")
def params():
    return init_params(DESK, RngState(42))


@pytest.fixture
def blob(params):
    return encode_checkpoint(params, DESK)


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, params, tmp_path):
        save_checkpoint(params, DESK, tmp_path / "a.ckpt")
        loaded, cfg = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(loaded, cfg, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_config_and_params_restored(self, params, blob):
        loaded, cfg = decode_checkpoint(blob)
        assert cfg == DESK
        assert loaded.bit_equal(params)

    def test_forward_bit_identical(self, params, blob):
        loaded, cfg = decode_checkpoint(blob)
        x = np.random.default_rng(0).random((2, 101, 24)).astype(np.float32)
        assert forward(params, x, DESK).data.tobytes() == forward(loaded, x, cfg).data.tobytes()

    def test_no_temp_files_left(self, params, tmp_path):
        save_checkpoint(params, DESK, tmp_path / "best.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["best.ckpt"]


class TestCorruption:
    def test_bad_magic(self, blob):
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXXXXXX" + blob[8:])

    def test_flipped_payload_byte(self, blob):
        bad = bytearray(blob)
        bad[len(bad) // 2] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            decode_checkpoint(bytes(bad))

    @pytest.mark.parametrize("keep", [4, 20, 1000])
    def test_truncated(self, blob, keep):
        with pytest.raises(CheckpointError):
            decode_checkpoint(blob[:keep])
