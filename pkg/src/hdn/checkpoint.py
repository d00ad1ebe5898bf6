"""Single-file checkpoint container (numpy ``.npz``; no pickled objects).

Layout: ``format_version``; ``config`` (JSON text); ``w/<name>`` state arrays
as little-endian float32 (integer buffers as int64); ``opt/<k>`` optimizer
state; ``train_state`` (JSON); ``noise_model`` (JSON).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .config import HdnConfig
from .model import LadderVAE, build_model
from .noise_models import NoiseModel, noise_model_from_dict

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _text(s: str) -> np.ndarray:
    return np.array(s)


def _optimizer_arrays(optimizer) -> tuple[dict, dict]:
    state = optimizer.state_dict()
    arrays = {}
    meta = {"param_groups": state["param_groups"], "state": {}}
    for pid, pstate in state["state"].items():
        keys = []
        for key, value in pstate.items():
            if torch.is_tensor(value):
                arrays[f"opt/{pid}/{key}"] = value.detach().cpu().numpy()
                keys.append(key)
            else:
                meta["state"].setdefault(str(pid), {})[key] = value
        meta["state"].setdefault(str(pid), {})["__tensors__"] = keys
    return arrays, meta


def _restore_optimizer(optimizer, data, meta) -> None:
    state = {}
    for pid, pmeta in meta["state"].items():
        entry = {k: v for k, v in pmeta.items() if k != "__tensors__"}
        for key in pmeta["__tensors__"]:
            entry[key] = torch.from_numpy(np.array(data[f"opt/{pid}/{key}"]))
        state[int(pid)] = entry
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(path, model: LadderVAE, optimizer=None, noise_model: NoiseModel | None = None,
                    train_state: dict | None = None) -> Path:
    path = Path(path)
    arrays = {
        "format_version": np.array(FORMAT_VERSION, dtype="<i8"),
        "config": _text(model.config.to_json()),
    }
    for name, tensor in model.state_dict().items():
        value = tensor.detach().cpu().numpy()
        dtype = "<i8" if np.issubdtype(value.dtype, np.integer) else "<f4"
        arrays[f"w/{name}"] = value.astype(dtype)
    opt_meta = None
    if optimizer is not None:
        opt_arrays, opt_meta = _optimizer_arrays(optimizer)
        arrays.update(opt_arrays)
    arrays["optimizer_meta"] = _text(json.dumps(opt_meta))
    arrays["train_state"] = _text(json.dumps(train_state or {}))
    arrays["noise_model"] = _text(json.dumps(noise_model.to_dict() if noise_model else None))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


class Checkpoint:
    def __init__(self, model, noise_model, train_state, data, optimizer_meta):
        self.model = model
        self.noise_model = noise_model
        self.train_state = train_state
        self._data = data
        self._optimizer_meta = optimizer_meta

    def restore_optimizer(self, optimizer) -> bool:
        if self._optimizer_meta is None:
            return False
        _restore_optimizer(optimizer, self._data, self._optimizer_meta)
        return True


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        data = {k: npz[k] for k in npz.files}
    version = int(data.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} does not match supported version {FORMAT_VERSION}")
    config = HdnConfig.from_dict(json.loads(str(data["config"])))
    model = build_model(config)
    state = {k[2:]: torch.from_numpy(np.array(v)) for k, v in data.items() if k.startswith("w/")}
    model.load_state_dict(state)
    nm = json.loads(str(data["noise_model"]))
    noise_model = noise_model_from_dict(nm) if nm else None
    return Checkpoint(model, noise_model, json.loads(str(data["train_state"])), data,
                      json.loads(str(data["optimizer_meta"])))


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
