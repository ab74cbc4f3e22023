"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SFDC"                 magic
    uint32                  format version (1)
    uint32                  header length H
    H bytes                 UTF-8 JSON header: config echo, optimizer scalars,
                            schedule, step, metrics
    uint32                  tensor count T
    T records               uint16 name length, UTF-8 name, uint8 ndim,
                            ndim x uint32 dims, float32 values (row-major)

Tensor names are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from sfd.exceptions import ConfigError

MAGIC = b"SFDC"
VERSION = 1


@dataclass
class Checkpoint:
    header: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return self.header.get("config", {})

    @classmethod
    def from_model(cls, model, header: dict, optimizer=None) -> "Checkpoint":
        params = {n: p.detach().cpu().numpy().astype(np.float32).copy()
                  for n, p in model.state_dict().items()}
        ckpt = cls(dict(header), params)
        if optimizer is not None:
            ckpt.header["optimizer"] = optimizer.state.hyper()
            ckpt.exp_avg = {n: t.cpu().numpy().astype(np.float32).copy()
                            for n, t in optimizer.state.exp_avg.items()}
            ckpt.exp_avg_sq = {n: t.cpu().numpy().astype(np.float32).copy()
                               for n, t in optimizer.state.exp_avg_sq.items()}
        return ckpt

    def subset(self, prefix: str) -> dict:
        return {n: a for n, a in self.params.items() if n.startswith(prefix)}

    def load_into(self, model, prefix: str | None = None, strict: bool = True) -> None:
        """Copy parameters into ``model`` after checking names and shapes."""
        target = model.state_dict()
        names = [n for n in target if prefix is None or n.startswith(prefix)]
        missing = [n for n in names if n not in self.params]
        if missing and strict:
            raise ConfigError(f"checkpoint lacks tensors: {missing[:5]}")
        for name in names:
            if name not in self.params:
                continue
            arr = self.params[name]
            if tuple(arr.shape) != tuple(target[name].shape):
                raise ConfigError(
                    f"shape mismatch for {name}: checkpoint {arr.shape}, "
                    f"model {tuple(target[name].shape)}")
        with torch.no_grad():
            for name in names:
                if name in self.params:
                    target[name].copy_(torch.from_numpy(self.params[name]))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        header = json.dumps(self.header, sort_keys=True).encode("utf-8")
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(header)))
        buf.write(header)
        records = [(f"param/{n}", a) for n, a in self.params.items()]
        records += [(f"adam_m/{n}", a) for n, a in self.exp_avg.items()]
        records += [(f"adam_v/{n}", a) for n, a in self.exp_avg_sq.items()]
        buf.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        view = memoryview(raw)
        if bytes(view[:4]) != MAGIC:
            raise ConfigError("not an SFD checkpoint")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        offset = 12
        header = json.loads(bytes(view[offset: offset + hlen]).decode("utf-8"))
        offset += hlen
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        ckpt = cls(header)
        groups = {"param": ckpt.params, "adam_m": ckpt.exp_avg, "adam_v": ckpt.exp_avg_sq}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = bytes(view[offset: offset + nlen]).decode("utf-8")
            offset += nlen
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape)
            offset += 4 * size
            group, _, tensor_name = name.partition("/")
            if group not in groups:
                raise ConfigError(f"unknown tensor group in {name!r}")
            groups[group][tensor_name] = arr.astype(np.float32)
        if offset != len(raw):
            raise ConfigError("trailing bytes after checkpoint tensor table")
        return ckpt

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
