"""Single-file checkpoint container.

Layout, byte-exact:

    offset 0   8 bytes   magic b"MAVNCKPT"
    offset 8   4 bytes   header length H, unsigned 32-bit little-endian
    offset 12  H bytes   UTF-8 JSON header
    offset 12+H          tensor payload, raw little-endian bytes

Header fields: format_version (int), method (str), seed (int), config
(full config snapshot as nested dicts), extra (free-form JSON), tensors
(list of {name, dtype, shape, offset, nbytes}; offset is relative to the
payload start; dtype is a numpy little-endian typestring like "<f8";
data is C-order). Tensors are laid out in list order with no padding.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"MAVNCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    method: str
    seed: int
    config: dict
    tensors: "dict[str, np.ndarray]"
    extra: dict


def save_checkpoint(path, tensors, config_dict, seed, method, extra=None):
    """Write named arrays plus run metadata; returns bytes written."""
    table = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        shape = list(arr.shape)   # before ascontiguousarray 0-d promotion
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        arr = arr.astype(dt, copy=False)
        raw = arr.tobytes()
        table.append({"name": str(name), "dtype": dt.str,
                      "shape": shape, "offset": offset,
                      "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "method": str(method),
              "seed": int(seed), "config": config_dict,
              "extra": extra or {}, "tensors": table}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)
    return len(MAGIC) + 4 + len(hbytes) + offset


def _read_header(f):
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
    raw_len = f.read(4)
    if len(raw_len) != 4:
        raise CheckpointError("truncated header length field")
    (hlen,) = struct.unpack("<I", raw_len)
    try:
        header = json.loads(f.read(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from e
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    return header


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        header = _read_header(f)
        payload = f.read()
    tensors = {}
    for ent in header["tensors"]:
        start, n = ent["offset"], ent["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"tensor {ent['name']!r} overruns payload")
        arr = np.frombuffer(payload[start:start + n], dtype=ent["dtype"])
        tensors[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return Checkpoint(method=header["method"], seed=header["seed"],
                      config=header["config"], tensors=tensors,
                      extra=header.get("extra", {}))


def inspect_checkpoint(path) -> str:
    """Human-readable summary used by the CLI."""
    with open(path, "rb") as f:
        header = _read_header(f)
    lines = [f"method: {header['method']}", f"seed: {header['seed']}",
             f"format_version: {header['format_version']}"]
    for k, v in sorted(header.get("extra", {}).items()):
        lines.append(f"extra.{k}: {v}")
    total = 0
    for ent in header["tensors"]:
        shape = "x".join(str(s) for s in ent["shape"]) or "scalar"
        lines.append(f"tensor {ent['name']}: {ent['dtype']} {shape} "
                     f"({ent['nbytes']} bytes)")
        total += ent["nbytes"]
    lines.append(f"{len(header['tensors'])} tensors, {total} payload bytes")
    return "\n".join(lines)
