"""Checkpoint container.

Layout: one line of UTF-8 JSON (the header, terminated by ``\\n``) followed by
raw little-endian float64 blocks, concatenated in the order listed under
``header["blocks"]``. Each block entry carries ``name`` and ``shape``.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import IngestionError

MAGIC = "surgekit-checkpoint"
VERSION = 1


def write_checkpoint(path, header: dict, blocks: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["magic"] = MAGIC
    header["version"] = VERSION
    header["blocks"] = [{"name": name, "shape": list(arr.shape)} for name, arr in blocks]
    head = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(head)
            for _, arr in blocks:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n")
    if end < 0:
        raise IngestionError(f"{path}: checkpoint header is not newline-terminated", offset=0)
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{path}: malformed checkpoint header: {exc}", offset=0) from exc
    if header.get("magic") != MAGIC:
        raise IngestionError(f"{path}: not a surgekit checkpoint", offset=0)
    if header.get("version") != VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {header.get('version')}", offset=0)
    offset = end + 1
    blocks = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise IngestionError(f"{path}: truncated block {entry['name']!r}", offset=offset)
        blocks[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise IngestionError(f"{path}: {len(raw) - offset} trailing bytes after last block", offset=offset)
    return header, blocks
