from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from crobo.checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from crobo.errors import InputError
from crobo.model import ModelConfig, build_model
from crobo.trainer import init_opt_state


def test_round_trip_parameters(tmp_path, desk_model):
    save_checkpoint(tmp_path / "ck", desk_model, step=17, epoch=2)
    loaded, step, epoch, opt = load_checkpoint(tmp_path / "ck")
    assert (step, epoch, opt) == (17, 2, None)
    for (na, pa), (nb, pb) in zip(desk_model.named_parameters(), loaded.named_parameters()):
        assert na == nb and torch.equal(pa, pb)


def test_round_trip_optimizer_state(tmp_path, desk_model):
    opt = init_opt_state(dict(desk_model.named_parameters()))
    opt["step"] = 5
    for t in opt["exp_avg"].values():
        t.normal_(generator=torch.Generator().manual_seed(0))
    save_checkpoint(tmp_path / "ck", desk_model, step=50, epoch=5, opt_state=opt)
    _, _, _, loaded_opt = load_checkpoint(tmp_path / "ck")
    assert loaded_opt["step"] == 5
    for name in opt["exp_avg"]:
        assert torch.equal(loaded_opt["exp_avg"][name], opt["exp_avg"][name])
        assert torch.equal(loaded_opt["exp_avg_sq"][name], opt["exp_avg_sq"][name])


def test_manifest_layout(tmp_path, desk_model):
    save_checkpoint(tmp_path / "ck", desk_model, step=1)
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["format"] == "crobo-checkpoint-v1"
    assert manifest["step"] == 1
    offsets = [e["offset"] for e in manifest["tensors"]]
    sizes = [e["nbytes"] for e in manifest["tensors"]]
    assert offsets == sorted(offsets)
    assert offsets[-1] + sizes[-1] == (tmp_path / "ck" / "params.bin").stat().st_size
    total = sum(int(np.prod(e["shape"])) for e in manifest["tensors"])
    assert total == sum(p.numel() for p in desk_model.parameters())


def test_bytes_are_little_endian_float32(tmp_path):
    model = build_model(ModelConfig.micro(seed=1))
    save_checkpoint(tmp_path / "ck", model, step=0)
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    raw = (tmp_path / "ck" / "params.bin").read_bytes()
    entry = next(e for e in manifest["tensors"] if e["name"] == "cls_token")
    arr = np.frombuffer(raw, dtype="<f4", count=8, offset=entry["offset"])
    assert np.allclose(arr, model.cls_token.detach().numpy())


def test_missing_manifest_rejected(tmp_path):
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "nothing")


def test_hash_tracks_content(tmp_path, desk_model):
    save_checkpoint(tmp_path / "a", desk_model, step=0)
    save_checkpoint(tmp_path / "b", desk_model, step=99)  # same params, different step
    assert checkpoint_hash(tmp_path / "a") == checkpoint_hash(tmp_path / "b")
    other = build_model(ModelConfig(seed=123))
    save_checkpoint(tmp_path / "c", other, step=0)
    assert checkpoint_hash(tmp_path / "a") != checkpoint_hash(tmp_path / "c")
