"""Checkpoints as a directory holding ``manifest.json`` and ``weights.bin``.

The manifest lists every tensor (name, shape, original dtype) in blob order
together with the model config, epoch, training history and optimizer
hyper-parameters. The blob is all tensors flattened to little-endian float32
and concatenated in manifest order. Momentum buffers are stored as extra
tensors named ``optimizer/<parameter name>``.
"""

import json
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetIOError
from .model import Recognizer

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
OPT_PREFIX = "optimizer/"


def _momentum_buffers(model, optimizer):
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            buf = optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                out[OPT_PREFIX + names[id(p)]] = buf
    return out


def save_checkpoint(path, model: Recognizer, optimizer=None, epoch: int = 0, history=None):
    """Write into directory ``path``; both files are replaced atomically."""
    path = Path(path)
    tensors = dict(model.state_dict())
    opt_hparams = None
    if optimizer is not None:
        tensors.update(_momentum_buffers(model, optimizer))
        opt_hparams = [{k: v for k, v in g.items() if k != "params"} for g in optimizer.param_groups]
    entries, chunks = [], []
    for name, t in tensors.items():
        t = t.detach().cpu()
        entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")})
        chunks.append(t.to(torch.float32).numpy().astype("<f4").ravel())
    manifest = {
        "format": FORMAT_VERSION,
        "model": model.config_dict(),
        "tensors": entries,
        "epoch": int(epoch),
        "trained": bool(model.trained),
        "history": list(history or []),
        "optimizer": opt_hparams,
    }
    path.mkdir(parents=True, exist_ok=True)
    blob = np.concatenate(chunks).tobytes() if chunks else b""
    for fname, data in ((BLOB, blob),
                        (MANIFEST, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())):
        tmp = path / (fname + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(path / fname)


def read_checkpoint(path):
    """Return ``(manifest, {name: tensor})`` with tensors cast back to their recorded dtypes."""
    path = Path(path)
    if not (path / MANIFEST).is_file() or not (path / BLOB).is_file():
        raise DatasetIOError(path, "checkpoint not found (expected manifest.json and weights.bin)")
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetIOError(path / MANIFEST, f"corrupt manifest ({exc.msg})") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise DatasetIOError(path, f"unsupported checkpoint format {manifest.get('format')!r}")
    flat = np.frombuffer((path / BLOB).read_bytes(), dtype="<f4")
    expected = sum(int(np.prod(e["shape"])) for e in manifest["tensors"])
    if flat.size != expected:
        raise DatasetIOError(path / BLOB, f"holds {flat.size} values, manifest lists {expected}")
    tensors, offset = {}, 0
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"]))
        t = torch.from_numpy(flat[offset:offset + n].copy()).reshape(e["shape"])
        tensors[e["name"]] = t.to(getattr(torch, e["dtype"]))
        offset += n
    return manifest, tensors


def load_checkpoint(path):
    """Return ``(model, payload)``.

    ``payload`` carries ``epoch``, ``history`` and ``optimizer`` (a state dict
    for ``torch.optim.SGD`` over ``model.parameters()``, or None).
    """
    manifest, tensors = read_checkpoint(path)
    model = Recognizer.from_config_dict(manifest["model"])
    state = {k: v for k, v in tensors.items() if not k.startswith(OPT_PREFIX)}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise DatasetIOError(path, f"weights do not match the model config ({exc})") from exc
    model.trained = manifest.get("trained", True)
    opt_state = None
    if manifest.get("optimizer") is not None:
        names = [n for n, _ in model.named_parameters()]
        state = {i: {"momentum_buffer": tensors[OPT_PREFIX + n]}
                 for i, n in enumerate(names) if OPT_PREFIX + n in tensors}
        groups = [dict(g, params=list(range(len(names)))) for g in manifest["optimizer"]]
        opt_state = {"state": state, "param_groups": groups}
    payload = {"epoch": manifest["epoch"], "history": manifest["history"], "optimizer": opt_state,
               "model": manifest["model"]}
    return model, payload
