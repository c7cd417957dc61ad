"""Binary checkpoint: magic + version + JSON header + raw parameter payload.

Payload is the little-endian float32 concatenation of all parameters (and,
for batch norm, the running-statistic buffers) in the net's fixed
traversal order recorded in the header.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .space import ArchSpace
from .supernet import Supernet

MAGIC = b"FSNC"
VERSION = 1


def save_checkpoint(net, path):
    header = {
        "space": net.space.to_json_dict(),
        "norm": net.norm,
        "eps": net.eps,
        "params": [
            {"name": name, "shape": list(net.params[name].shape)}
            for name in net.param_order
        ],
        "buffers": [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in sorted(net.buffers.items())
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for name in net.param_order:
            fh.write(np.ascontiguousarray(net.params[name], dtype="<f4").tobytes())
        for name, _ in sorted(net.buffers.items()):
            fh.write(np.ascontiguousarray(net.buffers[name], dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a supernet checkpoint (magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        space = ArchSpace.from_json_dict(header["space"])
        params = {}
        order = []
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"truncated payload at parameter {meta['name']}")
            params[meta["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            order.append(meta["name"])
        buffers = {}
        for meta in header["buffers"]:
            shape = tuple(meta["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"truncated payload at buffer {meta['name']}")
            buffers[meta["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return Supernet(space, params, buffers, order, norm=header["norm"],
                    dtype=np.float32, eps=header["eps"])


def checkpoint_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
