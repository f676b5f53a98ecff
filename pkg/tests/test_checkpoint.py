"""Tests for TMDC checkpoints and the JSON helpers."""

import json

import pytest
import torch

from src.checkpoint import (
    file_hash, load_checkpoint, model_from_checkpoint, parameters_hash,
    run_id, save_checkpoint, write_json_atomic,
)
from src.models import DiscriminativeModel, adapter_info
from src.tensor_core import RngStream
from src.tm_trainer import attach_lora


def test_round_trip_is_bit_identical(random_denoiser, tmp_path):
    """Every parameter survives save -> load unchanged."""
    path = tmp_path / "model.tmdc"
    digest = save_checkpoint(path, random_denoiser, metadata={"step": 3})
    assert digest == file_hash(path)

    ckpt = load_checkpoint(path)
    assert ckpt.kind == "denoiser"
    assert ckpt.metadata == {"step": 3}
    restored = model_from_checkpoint(path)
    for name, value in random_denoiser.state_dict().items():
        assert torch.equal(restored.state_dict()[name], value), name

    x = RngStream(0).normal((3, 4))
    t, y = torch.tensor([0, 5, 9]), torch.tensor([2, 1, 0])
    assert torch.equal(restored(x, t, y), random_denoiser(x, t, y))


def test_adapter_form_round_trip(random_denoiser, tmp_path):
    adapted = attach_lora(random_denoiser, rank=2, alpha=4.0, seed=1)
    save_checkpoint(tmp_path / "lora.tmdc", adapted)
    restored = model_from_checkpoint(tmp_path / "lora.tmdc")
    assert adapter_info(restored) == {"rank": 2, "alpha": 4.0}
    assert parameters_hash(restored, include_adapters=True) == parameters_hash(adapted, include_adapters=True)


def test_same_model_same_bytes(tmp_path):
    a = save_checkpoint(tmp_path / "a.tmdc", DiscriminativeModel(4, 3, (8,), seed=2))
    b = save_checkpoint(tmp_path / "b.tmdc", DiscriminativeModel(4, 3, (8,), seed=2))
    assert a == b


def test_rejects_foreign_files(tmp_path):
    path = tmp_path / "bad.tmdc"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(b"TM")
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_parameters_hash_ignores_adapters(random_denoiser):
    adapted = attach_lora(random_denoiser, rank=2, alpha=4.0)
    assert parameters_hash(adapted) == parameters_hash(random_denoiser)
    with torch.no_grad():
        adapted.output.lora_B.add_(1.0)
    assert parameters_hash(adapted) == parameters_hash(random_denoiser)
    assert parameters_hash(adapted, include_adapters=True) != \
        parameters_hash(attach_lora(random_denoiser, rank=2, alpha=4.0), include_adapters=True)


def test_json_helpers(tmp_path):
    path = write_json_atomic(tmp_path / "sub" / "x.json", {"b": 1, "a": [1.5, None]})
    assert json.loads(path.read_text()) == {"a": [1.5, None], "b": 1}
    assert not (tmp_path / "sub" / "x.json.tmp").exists()
    assert run_id({"a": 1, "b": 2}) == run_id({"b": 2, "a": 1})
    assert run_id({"a": 1}) != run_id({"a": 2})
