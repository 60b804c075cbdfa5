"""Binary container: a text manifest followed by raw little-endian payloads.

Layout::

    STREAMVIT-CONTAINER
    version 1
    meta <key> <value...>
    tensor <name> <dtype> <dims|-> <offset> <nbytes>
    ...
    end <payload bytes>
    <payload>

Tensors are stored in manifest order with contiguous offsets. Parsing is
all-or-nothing: any inconsistency raises :class:`CheckpointError` before
anything is handed back to the caller.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = "STREAMVIT-CONTAINER"
VERSION = 1

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i32": np.dtype("<i4"), "i64": np.dtype("<i8")}
_DTYPE_NAMES = {v: k for k, v in DTYPES.items()}


def _dtype_name(arr: np.ndarray) -> str:
    try:
        return _DTYPE_NAMES[arr.dtype.newbyteorder("<")]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {arr.dtype}") from None


def _check_token(text: str, what: str) -> None:
    if not text or any(ch.isspace() for ch in text):
        raise CheckpointError(f"{what} {text!r} must be non-empty and contain no whitespace")


def encode_container(meta: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> bytes:
    lines = [MAGIC, f"version {VERSION}"]
    for key, value in meta.items():
        _check_token(key, "meta key")
        value = str(value)
        if "\n" in value or "\r" in value:
            raise CheckpointError(f"meta value for {key!r} contains a newline")
        lines.append(f"meta {key} {value}")
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        _check_token(name, "tensor name")
        arr = np.asarray(arr)
        dname = _dtype_name(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dname]).tobytes()
        dims = "x".join(str(n) for n in arr.shape) if arr.ndim else "-"
        lines.append(f"tensor {name} {dname} {dims} {offset} {len(raw)}")
        payloads.append(raw)
        offset += len(raw)
    lines.append(f"end {offset}")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(payloads)


def write_container(path: str | Path, meta: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> None:
    data = encode_container(meta, tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def decode_container(data: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    meta: dict[str, str] = {}
    entries: list[tuple[str, np.dtype, tuple[int, ...], int, int, int]] = []
    pos = 0
    lineno = 0
    payload_size = None
    while payload_size is None:
        nl = data.find(b"\n", pos)
        lineno += 1
        if nl < 0:
            raise CheckpointError("manifest ended without an 'end' line", lineno)
        try:
            line = data[pos:nl].decode("ascii")
        except UnicodeDecodeError:
            raise CheckpointError("manifest is not ASCII text", lineno) from None
        pos = nl + 1
        if lineno == 1:
            if line != MAGIC:
                raise CheckpointError(f"bad magic {line[:40]!r}", lineno)
            continue
        kind, _, rest = line.partition(" ")
        if lineno == 2:
            if kind != "version" or rest != str(VERSION):
                raise CheckpointError(f"unsupported container version line {line!r}", lineno)
            continue
        if kind == "meta":
            key, sep, value = rest.partition(" ")
            if not key or not sep:
                raise CheckpointError(f"malformed meta line {line!r}", lineno)
            if key in meta:
                raise CheckpointError(f"duplicate meta key {key!r}", lineno)
            meta[key] = value
        elif kind == "tensor":
            parts = rest.split(" ")
            if len(parts) != 5:
                raise CheckpointError(f"malformed tensor line {line!r}", lineno)
            name, dname, dims, off, nbytes = parts
            if dname not in DTYPES:
                raise CheckpointError(f"unknown dtype {dname!r}", lineno)
            try:
                shape = () if dims == "-" else tuple(int(n) for n in dims.split("x"))
                off_i, nbytes_i = int(off), int(nbytes)
            except ValueError:
                raise CheckpointError(f"non-integer field in {line!r}", lineno) from None
            if any(n <= 0 for n in shape):
                raise CheckpointError(f"non-positive extent in {dims!r}", lineno)
            expected_off = entries[-1][3] + entries[-1][4] if entries else 0
            if off_i != expected_off:
                raise CheckpointError(f"offset {off_i} != expected {expected_off}", lineno)
            if nbytes_i != math.prod(shape) * DTYPES[dname].itemsize:
                raise CheckpointError(f"byte count {nbytes_i} disagrees with shape {shape}", lineno)
            if any(e[0] == name for e in entries):
                raise CheckpointError(f"duplicate tensor {name!r}", lineno)
            entries.append((name, DTYPES[dname], shape, off_i, nbytes_i, lineno))
        elif kind == "end":
            try:
                payload_size = int(rest)
            except ValueError:
                raise CheckpointError(f"malformed end line {line!r}", lineno) from None
        else:
            raise CheckpointError(f"unknown manifest record {kind!r}", lineno)
    expected = entries[-1][3] + entries[-1][4] if entries else 0
    if payload_size != expected:
        raise CheckpointError(f"declared payload {payload_size} != sum of tensors {expected}", lineno)
    body = data[pos:]
    if len(body) != payload_size:
        raise CheckpointError(f"payload has {len(body)} bytes, manifest declares {payload_size}", lineno)
    tensors = {}
    for name, dtype, shape, off, nbytes, _ in entries:
        arr = np.frombuffer(body, dtype=dtype, count=math.prod(shape), offset=off).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return meta, tensors


def read_container(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e.strerror}") from None
    return decode_container(data)
