import json

import numpy as np
import pytest
import torch

from tpnet.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from tpnet.errors import DatasetIOError
from tpnet.trainer import TrainConfig, train

from helpers import segments, tiny_data, tiny_model, tiny_tpn


def test_round_trip_and_format(tmp_path):
    model = tiny_model(tiny_tpn())
    save_checkpoint(tmp_path / "ck", model, epoch=3, history=[{"epoch": 0}])
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    blob = (tmp_path / "ck" / "weights.bin").read_bytes()
    total = sum(int(np.prod(e["shape"])) for e in manifest["tensors"])
    assert len(blob) == 4 * total
    first = manifest["tensors"][0]
    ref = model.state_dict()[first["name"]].flatten()[:3].float().numpy()
    assert np.array_equal(np.frombuffer(blob[:12], "<f4"), ref)
    loaded, payload = load_checkpoint(tmp_path / "ck")
    assert payload["epoch"] == 3 and payload["history"] == [{"epoch": 0}]
    assert payload["optimizer"] is None
    a, b = model.state_dict(), loaded.state_dict()
    assert all(torch.equal(a[k], b[k]) and a[k].dtype == b[k].dtype for k in a)


def test_resume_matches_uninterrupted(tmp_path):
    data, val = tiny_data()
    cfg = TrainConfig(lr=0.05, epochs=3, milestones=(2,), batch_size=4, seed=1)
    full = tiny_model(tiny_tpn())
    _, h_full = train(full, data, cfg, segments(), val)

    part = tiny_model(tiny_tpn())
    opt, h1 = train(part, data, TrainConfig(**{**cfg.to_dict(), "epochs": 1, "milestones": []}),
                    segments(), val)
    save_checkpoint(tmp_path / "ck", part, opt, epoch=1, history=h1)
    resumed, payload = load_checkpoint(tmp_path / "ck")
    _, h2 = train(resumed, data, cfg, segments(), val, start_epoch=payload["epoch"],
                  optimizer_state=payload["optimizer"])
    assert payload["history"] + h2 == h_full
    a, b = full.state_dict(), resumed.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_errors(tmp_path):
    with pytest.raises(DatasetIOError, match="not found"):
        load_checkpoint(tmp_path / "missing")
    save_checkpoint(tmp_path / "ck", tiny_model())
    blob = tmp_path / "ck" / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DatasetIOError, match="weights.bin"):
        read_checkpoint(tmp_path / "ck")
    (tmp_path / "ck" / "manifest.json").write_text("{")
    with pytest.raises(DatasetIOError, match="manifest"):
        read_checkpoint(tmp_path / "ck")
