import numpy as np
import pytest

from orthopeft.checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from orthopeft.errors import FormatError
from orthopeft.model import load_model

from conftest import tiny_model


def test_round_trip_bit_exact(tmp_path):
    model = tiny_model("lora", dtype=np.float32)
    model.backbone.set_frozen(True)
    for p in model.parameters():
        p.data[...] = np.random.default_rng(p.size).standard_normal(p.shape)
    path = tmp_path / "m.bin"
    save_checkpoint(path, model.named_parameters(), {"note": "x"})
    meta, params = load_checkpoint(path)
    assert meta == {"note": "x"}
    for name, p in model.named_parameters():
        arr, trainable = params[name]
        assert arr.dtype == p.data.dtype and arr.tobytes() == p.data.tobytes()
        assert trainable == p.trainable
    other = tiny_model("lora", seed=1, dtype=np.float32)
    restore_parameters(other.named_parameters(), params)
    for (_, a), (_, b) in zip(model.named_parameters(), other.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes() and a.trainable == b.trainable


def test_saving_is_deterministic(tmp_path):
    model = tiny_model()
    save_checkpoint(tmp_path / "a", model.named_parameters(), {"k": 1})
    save_checkpoint(tmp_path / "b", model.named_parameters(), {"k": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOTACKPT" + bytes(32))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_blob_names_parameter(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.bin"
    save_checkpoint(path, model.named_parameters())
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(FormatError, match="truncated at parameter"):
        load_checkpoint(path)


def test_restore_mismatches(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.bin"
    save_checkpoint(path, model.named_parameters())
    _, params = load_checkpoint(path)
    bigger = tiny_model(rank=2)
    with pytest.raises(FormatError, match="shape mismatch"):
        restore_parameters(bigger.named_parameters(), params)
    params.pop("uncertainty.log_var")
    with pytest.raises(FormatError, match="no parameter"):
        restore_parameters(model.named_parameters(), params)
    restore_parameters(model.named_parameters(), params, strict=False)


def test_load_model_needs_meta(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.bin"
    save_checkpoint(path, model.named_parameters())
    with pytest.raises(FormatError, match="model config"):
        load_model(path)
