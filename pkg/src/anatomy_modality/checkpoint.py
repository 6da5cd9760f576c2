"""Single-file checkpoint container.

Layout::

    b"AMCKPT\\n"                      magic
    uint64 little-endian            manifest length in bytes
    manifest (UTF-8 text)           sections of key=value lines
    payload                         raw little-endian float32 tensors

The manifest has ``format_version=1`` on its first line, then ``[config]``
(model configuration), ``[state]`` (training state and anything else the
writer recorded) and ``[tensors]`` with one ``name offset shape`` line per
tensor, ``offset`` counted in bytes from the start of the payload and
``shape`` comma-separated (empty for scalars).
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .factor_model import FactorModel, ModelConfig

MAGIC = b"AMCKPT\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    state: dict[str, str] = field(default_factory=dict)

    def build_model(self) -> FactorModel:
        model = FactorModel(self.config)
        if any(k.startswith("lvv_regressor.") for k in self.tensors):
            model.add_lvv_regressor()
        own = model.state_dict()
        missing = set(own) - set(self.tensors)
        if missing:
            raise ValueError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        loaded = {}
        for k, ref in own.items():
            arr = self.tensors[k]
            if tuple(arr.shape) != tuple(ref.shape):
                raise ValueError(f"tensor {k}: shape {arr.shape} != model {tuple(ref.shape)}")
            loaded[k] = torch.from_numpy(arr.copy()).to(ref.dtype)
        model.load_state_dict(loaded)
        model.eval()
        return model


def checkpoint_from_model(model: FactorModel, state: dict | None = None) -> Checkpoint:
    tensors = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in model.state_dict().items()}
    return Checkpoint(model.cfg, tensors, {k: str(v) for k, v in (state or {}).items()})


def _manifest(ckpt: Checkpoint) -> tuple[str, list[np.ndarray]]:
    lines = [f"format_version={FORMAT_VERSION}", "[config]"]
    lines += [f"{k}={v}" for k, v in ckpt.config.to_dict().items()]
    lines.append("[state]")
    for k, v in ckpt.state.items():
        if "\n" in str(v) or "=" in str(k):
            raise ValueError(f"state entry {k!r} cannot be stored as a single key=value line")
        lines.append(f"{k}={v}")
    lines.append("[tensors]")
    payloads, offset = [], 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        lines.append(f"{name} {offset} {','.join(map(str, arr.shape))}")
        payloads.append(arr)
        offset += arr.nbytes
    return "\n".join(lines) + "\n", payloads


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a reader never sees a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text, payloads = _manifest(ckpt)
    head = text.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for arr in payloads:
                fh.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    text = data[pos : pos + n].decode("utf-8")
    payload = memoryview(data)[pos + n :]

    lines = text.splitlines()
    if not lines or lines[0] != f"format_version={FORMAT_VERSION}":
        raise ValueError(f"{path}: unsupported checkpoint format ({lines[:1]})")
    section, config, state, tensors = None, {}, {}, {}
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
        elif section == "config":
            k, v = line.split("=", 1)
            config[k] = v
        elif section == "state":
            k, v = line.split("=", 1)
            state[k] = v
        elif section == "tensors":
            name, off, shape = (line.split(" ") + [""])[:3]
            dims = tuple(int(d) for d in shape.split(",") if d)
            count = int(np.prod(dims)) if dims else 1
            start = int(off)
            arr = np.frombuffer(payload[start : start + 4 * count], dtype="<f4").reshape(dims)
            tensors[name] = arr.astype(np.float32)
    return Checkpoint(ModelConfig.from_dict(config), tensors, state)


def save_model(path, model: FactorModel, state: dict | None = None) -> None:
    save_checkpoint(path, checkpoint_from_model(model, state))


def load_model(path) -> tuple[FactorModel, dict[str, str]]:
    ckpt = load_checkpoint(path)
    return ckpt.build_model(), ckpt.state
