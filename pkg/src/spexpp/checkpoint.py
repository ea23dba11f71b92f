"""Model checkpoints as ``.npz`` archives.

Layout (all entries are numpy arrays; no pickled objects):

* ``format``          uint8 UTF-8 bytes of ``"spexpp-checkpoint/1"``
* ``config``          uint8 UTF-8 bytes of the ModelConfig as JSON
* ``param/<name>``    little-endian float32 array, one per entry of the
                      model's ``state_dict()`` (e.g. ``param/encoder.convs.0.weight``,
                      ``param/extractors.1.stacks.0.2.depthwise.weight``,
                      ``param/fusion.0``), shape as in the module
* ``meta``            optional uint8 UTF-8 JSON with free-form metadata
"""

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .multistage import SpExPlusPlus
from .network import ModelConfig

FORMAT = "spexpp-checkpoint/1"


class CheckpointError(ValueError):
    def __init__(self, path, key, reason):
        self.key = key
        super().__init__(f"{path}: checkpoint entry {key!r}: {reason}")


def _text(value: str) -> np.ndarray:
    return np.frombuffer(value.encode("utf-8"), dtype=np.uint8)


def save_checkpoint(model: SpExPlusPlus, path, meta: dict = None) -> None:
    arrays = {"format": _text(FORMAT), "config": _text(model.config.to_json())}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy().astype("<f4")
    if meta:
        arrays["meta"] = _text(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        if "meta" not in data.files:
            return {}
        return json.loads(data["meta"].tobytes().decode("utf-8"))


def load_checkpoint(path, dtype=torch.float32) -> SpExPlusPlus:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(path, "<archive>", f"unreadable ({exc})") from exc
    with data:
        for key in ("format", "config"):
            if key not in data.files:
                raise CheckpointError(path, key, "missing")
        fmt = data["format"].tobytes().decode("utf-8")
        if fmt != FORMAT:
            raise CheckpointError(path, "format", f"unsupported version {fmt!r}")
        try:
            config = ModelConfig.from_dict(json.loads(data["config"].tobytes().decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise CheckpointError(path, "config", str(exc)) from exc
        model = SpExPlusPlus(config)
        state = {}
        for name, ref in model.state_dict().items():
            key = f"param/{name}"
            if key not in data.files:
                raise CheckpointError(path, key, "missing")
            try:
                arr = data[key]
            except (ValueError, zipfile.BadZipFile, OSError) as exc:
                raise CheckpointError(path, key, f"unreadable ({exc})") from exc
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(path, key, f"shape {arr.shape} != expected {tuple(ref.shape)}")
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(path, key, "non-finite values")
            state[name] = torch.from_numpy(arr.astype(np.float32))
        extra = [k for k in data.files
                 if k.startswith("param/") and k[len("param/"):] not in state]
        if extra:
            raise CheckpointError(path, extra[0], "unexpected parameter")
    model.load_state_dict(state)
    return model.to(dtype)
