"""DCK1 checkpoints for MLP denoisers.

Layout: the magic bytes b"DCK1", a little-endian u32 header length, a UTF-8
JSON header, then the raw little-endian f32 payload of every tensor in header
order. The header carries the format version, the tensor table, the network
architecture, the exact betas of its schedule and a snapshot of the run config.
"""

import json
import struct

import numpy as np
import torch
from agentlogger import log

from diffclassifier.commands.config import load_config
from diffclassifier.denoisers import MlpDenoiser
from diffclassifier.diffusion import schedule_from_betas
from diffclassifier.errors import CheckpointError, ConfigurationError

MAGIC = b"DCK1"
VERSION = 1
HEADER_LENGTH = struct.Struct("<I")


def save_checkpoint(net, config, path):
    state = net.state_dict()
    arrays = {name: tensor.detach().cpu().to(torch.float32).numpy().astype("<f4") for name, tensor in state.items()}
    header = {
        "version": VERSION,
        "tensors": [{"name": name, "shape": list(array.shape), "dtype": "f32"} for name, array in arrays.items()],
        "architecture": net.architecture(),
        "schedule": {"kind": net.sched.kind.value, "beta": net.sched.beta.tolist()},
        "config": config.to_dict() if hasattr(config, "to_dict") else config,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(HEADER_LENGTH.pack(len(blob)))
        handle.write(blob)
        for array in arrays.values():
            handle.write(array.tobytes())
    log(f"Saved checkpoint with {len(arrays)} tensors to {path}", type="info")


def _read_header(raw):
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic", offset=0)
    offset = len(MAGIC)
    if len(raw) < offset + HEADER_LENGTH.size:
        raise CheckpointError("truncated payload: header length missing", offset=offset)
    (length,) = HEADER_LENGTH.unpack_from(raw, offset)
    offset += HEADER_LENGTH.size
    if len(raw) < offset + length:
        raise CheckpointError("truncated payload: header cut short", offset=len(raw))
    try:
        header = json.loads(raw[offset: offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"corrupt header: {error}", offset=offset)
    if header.get("version") != VERSION:
        raise CheckpointError(f"version mismatch: file has {header.get('version')!r}, expected {VERSION}")
    return header, offset + length


def load_checkpoint(path):
    """Returns (net, config). config is the embedded RunConfig, or None when the file has no snapshot."""
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as error:
        raise ConfigurationError("denoiser.checkpoint", f"cannot read {path}: {error}")

    header, offset = _read_header(raw)
    sched = schedule_from_betas(header["schedule"]["beta"], header["schedule"]["kind"])
    net = MlpDenoiser(sched=sched, **header["architecture"])

    state = {}
    for entry in header["tensors"]:
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r} for {entry['name']}", offset=offset)
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"truncated payload in tensor {entry['name']}", offset=offset)
        array = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        state[entry["name"]] = torch.from_numpy(array.astype(np.float32))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after the last tensor", offset=offset)

    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as error:
        raise CheckpointError(f"tensor table does not match the architecture: {error}")
    net.eval()

    config = header.get("config")
    log(f"Loaded checkpoint {path}", type="info")
    return net, (load_config(config) if config is not None else None)
