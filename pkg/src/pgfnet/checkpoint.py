"""Single-file checkpoints.

Layout: ``b"PGF1"`` | uint32 LE header length | UTF-8 JSON header | raw
little-endian float64 arrays in header order. The header carries the full
ModelConfig, the init seed, and ``[name, shape]`` for every parameter.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .config import from_dict
from .model import ModelConfig, PGFNet, init_params

MAGIC = b"PGF1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: PGFNet, path, extra: dict | None = None) -> None:
    names = list(model.params)
    header = {"config": asdict(model.config), "seed": model.seed,
              "params": [[n, list(model.params[n].shape)] for n in names], "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[PGFNet, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8:8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable header ({err})") from None
    config = from_dict(ModelConfig, header["config"])
    params = init_params(config, header["seed"])
    offset = 8 + n
    listed = [name for name, _ in header["params"]]
    if listed != list(params):
        raise CheckpointError(f"{path}: parameter list does not match its config")
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at {name}")
        params[name].data = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return PGFNet(config, header["seed"], params), header.get("extra", {})
