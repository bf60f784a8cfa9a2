import json
import struct

import numpy as np
import pytest

from ammobilenet.checkpoint import (MAGIC, PREFIX, checkpoint_nbytes, describe, from_bytes,
                                    load_checkpoint, read_header, round_to_float32,
                                    save_checkpoint, to_bytes)
from ammobilenet.errors import CheckpointFormatError, CheckpointIntegrityError
from ammobilenet.layers import ModelConfig, build_mobilenet1d, count_parameters
from ammobilenet.tensor import Tensor

from conftest import SEED


@pytest.fixture(params=["softmax", "am_softmax"])
def toy(request):
    return build_mobilenet1d(ModelConfig.preset("toy", num_classes=3, loss=request.param), SEED)


def trained_like(model, rng):
    """Run a few train-mode passes so the BN running statistics move off their init."""
    for _ in range(3):
        model.forward(Tensor(rng.normal(size=(4, 1, model.config.window_samples))), mode="train")
    return model


def test_roundtrip_is_bit_exact_at_float32(tmp_path, toy, rng):
    trained_like(toy, rng)
    save_checkpoint(toy, tmp_path / "m.amn", label_map={"a": 0, "b": 1, "c": 2})
    loaded = load_checkpoint(tmp_path / "m.amn")
    reference = round_to_float32(toy)
    x = Tensor(rng.normal(size=(5, 1, 64)))
    assert loaded.forward(x).data.tobytes() == reference.forward(x).data.tobytes()
    for name, b in reference.buffers.items():
        np.testing.assert_array_equal(loaded.buffers[name].data, b.data)
    assert loaded.label_map == {"a": 0, "b": 1, "c": 2}
    assert loaded.config == toy.config


def test_resave_is_byte_identical(tmp_path, toy):
    save_checkpoint(toy, tmp_path / "a.amn")
    save_checkpoint(load_checkpoint(tmp_path / "a.amn"), tmp_path / "b.amn")
    assert (tmp_path / "a.amn").read_bytes() == (tmp_path / "b.amn").read_bytes()


def test_size_is_header_plus_four_bytes_per_parameter(tmp_path, toy):
    written = save_checkpoint(toy, tmp_path / "m.amn")
    blob = (tmp_path / "m.amn").read_bytes()
    _, header_end = read_header(blob)
    assert written == len(blob) == checkpoint_nbytes(toy)
    assert len(blob) == header_end + 4 * count_parameters(toy)
    d = describe(tmp_path / "m.amn")
    assert d["params_total"] == count_parameters(toy)
    assert d["payload_bytes"] == 4 * d["params_total"]


def test_no_temporary_file_left(tmp_path, toy):
    save_checkpoint(toy, tmp_path / "m.amn")
    assert [p.name for p in tmp_path.iterdir()] == ["m.amn"]


def test_default_model_size():
    model = build_mobilenet1d(ModelConfig(num_classes=462), SEED)
    nbytes = checkpoint_nbytes(model)
    assert nbytes <= 12.5e6
    # The header holds config, directory, and the BN running statistics.
    assert nbytes - 4 * count_parameters(model) < 300_000


def test_bad_magic(toy):
    blob = bytearray(to_bytes(toy))
    blob[:4] = b"NOPE"
    with pytest.raises(CheckpointFormatError, match="magic"):
        from_bytes(bytes(blob))


def test_bad_version(toy):
    blob = bytearray(to_bytes(toy))
    struct.pack_into("<I", blob, 4, 99)
    with pytest.raises(CheckpointFormatError, match="version"):
        from_bytes(bytes(blob))


@pytest.mark.parametrize("cut", [1, 4, 100])
def test_truncated_payload(toy, cut):
    with pytest.raises(CheckpointIntegrityError):
        from_bytes(to_bytes(toy)[:-cut])


def test_truncated_header(toy):
    blob = to_bytes(toy)
    with pytest.raises(CheckpointIntegrityError):
        from_bytes(blob[:PREFIX.size + 10])
    with pytest.raises(CheckpointFormatError):
        from_bytes(MAGIC)


def test_config_shape_mismatch(toy):
    """A header whose config disagrees with the stored tensors is rejected."""
    other = build_mobilenet1d(ModelConfig.preset("toy", num_classes=5, loss=toy.config.loss), SEED)
    good = to_bytes(toy)
    _, end = read_header(good)
    header, _ = read_header(to_bytes(other))
    header["tensors"] = read_header(good)[0]["tensors"]
    hb = json.dumps(header).encode()
    blob = PREFIX.pack(MAGIC, 1, len(hb)) + hb + good[end:]
    with pytest.raises(CheckpointIntegrityError):
        from_bytes(blob)


def test_round_to_float32_is_idempotent(toy):
    once = [p.data.copy() for p in round_to_float32(toy).params.values()]
    twice = [p.data for p in round_to_float32(toy).params.values()]
    for a, b in zip(once, twice):
        np.testing.assert_array_equal(a, b)
