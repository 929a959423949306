"""Binary checkpoint and raw-tensor file format.

Layout (all integers little-endian u32)::

    b"CVRN" | version | header_len | header (UTF-8 JSON)
    repeated until EOF:
        name_len | name (UTF-8) | rank | extent_0 ... extent_{rank-1} | float32 payload

The header of a checkpoint carries the model config, the init seed and the
optimizer step; optimizer moments, when saved, are ordinary records named
``adam.m/<param>`` and ``adam.v/<param>``.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import CVRNet, ModelConfig

MAGIC = b"CVRN"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint."""


@dataclass
class ImportReport:
    imported: list[str] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"imported {len(self.imported)} entries"]
        lines += [f"rejected {n}: {why}" for n, why in self.rejected]
        if self.missing:
            lines.append(f"{len(self.missing)} model entries absent from checkpoint")
        return "\n".join(lines)


def _encode(header: dict, records: list[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(MAGIC + _U32.pack(VERSION) + _U32.pack(len(hdr)) + hdr)
    for name, arr in records:
        nb = name.encode("utf-8")
        buf.write(_U32.pack(len(nb)) + nb + _U32.pack(arr.ndim))
        buf.write(b"".join(_U32.pack(d) for d in arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def _decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated file: needed {n} bytes at offset {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def u32():
        return _U32.unpack(take(4))[0]

    if take(4) != MAGIC:
        raise CheckpointError("bad magic bytes, not a CVRN file")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {VERSION})")
    try:
        header = json.loads(take(u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    records: dict[str, np.ndarray] = {}
    while pos < len(data):
        name = take(u32()).decode("utf-8")
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        if name in records:
            raise CheckpointError(f"duplicate record {name!r}")
        records[name] = arr.astype(np.float32)
    return header, records


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: CVRNet, optimizer=None) -> bytes:
    header = {"model": json.loads(model.config.to_json()), "seed": model.seed,
              "optimizer_step": None if optimizer is None else optimizer.step}
    records = list(model.params.items())
    if optimizer is not None:
        for name in optimizer.m:
            records.append((f"adam.m/{name}", optimizer.m[name]))
            records.append((f"adam.v/{name}", optimizer.v[name]))
    return _encode(header, records)


def save_checkpoint(model: CVRNet, path, optimizer=None) -> None:
    atomic_write(path, checkpoint_bytes(model, optimizer))


def read_checkpoint(source) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint from a path or raw bytes into (header, records)."""
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    header, records = _decode(bytes(data))
    if "model" not in header:
        raise CheckpointError("header has no model config")
    return header, records


def load_checkpoint(source, dtype=None) -> CVRNet:
    """Rebuild the model stored in a checkpoint (path or bytes)."""
    header, records = read_checkpoint(source)
    cfg = header["model"]
    if dtype is not None:
        cfg = {**cfg, "dtype": dtype}
    model = CVRNet(ModelConfig.from_json(json.dumps(cfg)), seed=header.get("seed") or 0)
    _assign(model, records, partial=False)
    return model


def load_into(model: CVRNet, source, partial: bool = False) -> ImportReport:
    """Copy checkpoint parameters into an existing model.

    Strict mode raises on the first missing or mis-shaped entry, leaving the
    model untouched. Partial mode imports every name- and shape-matching entry
    and reports the rest (the transfer-learning path).
    """
    _, records = read_checkpoint(source)
    return _assign(model, records, partial)


def _assign(model: CVRNet, records: dict[str, np.ndarray], partial: bool) -> ImportReport:
    report = ImportReport()
    plan = []
    params = model.params
    for name, value in params.items():
        if name not in records:
            if not partial:
                raise CheckpointError(f"first mismatching entry: {name} missing from checkpoint")
            report.missing.append(name)
            continue
        src = records[name]
        if src.shape != value.shape:
            msg = f"shape {src.shape} in checkpoint vs {value.shape} in model"
            if not partial:
                raise CheckpointError(f"first mismatching entry: {name}: {msg}")
            report.rejected.append((name, msg))
            continue
        plan.append((name, src))
    extra = [n for n in records if n not in params and not n.startswith("adam.")]
    if extra and not partial:
        raise CheckpointError(f"first mismatching entry: {extra[0]} not present in model")
    report.rejected += [(n, "not present in model") for n in extra]
    for name, src in plan:
        params[name] = src
        report.imported.append(name)
    return report


def optimizer_state(source) -> tuple[int | None, dict, dict]:
    """(step, first moments, second moments) stored in a checkpoint."""
    header, records = read_checkpoint(source)
    m = {n[len("adam.m/"):]: v for n, v in records.items() if n.startswith("adam.m/")}
    v = {n[len("adam.v/"):]: a for n, a in records.items() if n.startswith("adam.v/")}
    return header.get("optimizer_step"), m, v


def write_tensor_file(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Raw-tensor sidecar in the checkpoint chunk layout (e.g. a pre-converted image)."""
    atomic_write(path, _encode({"kind": "tensor", **(meta or {})}, list(arrays.items())))


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    return _decode(Path(path).read_bytes())
