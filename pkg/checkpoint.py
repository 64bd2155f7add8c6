#!/usr/bin/env python3
"""
Checkpoint Files

Layout (all integers little-endian):
    b"DCPK"                       magic
    u32 version                   FORMAT_VERSION
    u32 length + UTF-8 text       run config snapshot
    u32 tensor count
    per tensor:
        u32 length + UTF-8 name
        u32 rank, rank x u64 dims
        float32 payload (little-endian, C order)
    u32 CRC32 of every preceding byte
"""

import logging
import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from models import ModelParams, build_model
from run_config import RunConfig, parse_config, serialize_config

MAGIC = b"DCPK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


def encode_tensor_table(table: Dict[str, np.ndarray], config_text: str = "") -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    text = config_text.encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(table))]
    for name, array in table.items():
        raw_name = name.encode("utf-8")
        array = np.ascontiguousarray(array, dtype="<f4")
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", array.ndim)]
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"invalid UTF-8 in checkpoint: {e}") from None


def decode_tensor_table(data: bytes) -> Tuple[Dict[str, np.ndarray], str]:
    """Checks run in order: magic, version, structure (truncation), CRC."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    reader = _Reader(data)
    reader.take(4)
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    config_text = reader.text()
    table = {}
    for _ in range(reader.u32()):
        name = reader.text()
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}Q", reader.take(8 * rank))
        count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        payload = reader.take(4 * count)
        table[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    body_end = reader.pos
    stored = struct.unpack("<I", reader.take(4))[0]
    if reader.pos != len(data):
        raise CheckpointError(f"{len(data) - reader.pos} trailing bytes after checksum")
    if zlib.crc32(data[:body_end]) & 0xFFFFFFFF != stored:
        raise ChecksumError("checkpoint CRC32 mismatch")
    return table, config_text


def write_atomic(path: Union[str, Path], payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_checkpoint(model: ModelParams, config: Union[RunConfig, str, None], path: Union[str, Path]) -> None:
    if isinstance(config, RunConfig):
        config = serialize_config(config)
    write_atomic(path, encode_tensor_table(model.named_tensors(), config or ""))
    logging.info(f"Saved checkpoint {path} ({model.parameter_count():,} parameters)")


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, RunConfig]:
    """Rebuild the model from the stored config, then restore every tensor."""
    data = Path(path).read_bytes()
    table, config_text = decode_tensor_table(data)
    cfg = parse_config(config_text)
    model = build_model(cfg.model, cfg.norm, seed=cfg.train.seed)
    try:
        model.load_named_tensors(table)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} does not match its config: {e}") from None
    return model, cfg


def load_tensor_table(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], str]:
    return decode_tensor_table(Path(path).read_bytes())
