"""Flat little-endian binary container for encoder weights and prompt banks.

Layout (all integers little-endian)::

    b"DCPW"                  magic
    u32                      format version (1)
    4 bytes                  section tag: b"ENCW" (encoders) or b"PRMB" (prompt bank)
    u32 + utf-8 JSON         header: config fields, sorted keys
    u32                      number of arrays
    per array, in name order:
        u16 + utf-8          name
        u32                  ndim
        u32 * ndim           shape
        f64 * prod(shape)    row-major data

The byte stream is a pure function of the contents, so identical weights
always produce identical files.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .encoders import DualEncoder, EncoderConfig, EncoderParams
from .prompts import PromptBank, PromptConfig

MAGIC = b"DCPW"
VERSION = 1
ENCODER_TAG = b"ENCW"
BANK_TAG = b"PRMB"


class ContainerError(ValueError):
    """Malformed or mismatched weight file."""


def pack(tag: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(tag) != 4:
        raise ValueError("section tag must be 4 bytes")
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), tag, struct.pack("<I", len(head)), head,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<I", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    return b"".join(parts)


def unpack(blob: bytes) -> tuple[bytes, dict, dict[str, np.ndarray]]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise ContainerError("truncated container")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise ContainerError("not a DCPW container (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    tag = take(4)
    (n,) = struct.unpack("<I", take(4))
    header = json.loads(take(n).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise ContainerError("trailing bytes after last array")
    return tag, header, arrays


def _write(path, blob: bytes) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def _read(path, want_tag: bytes):
    tag, header, arrays = unpack(Path(path).read_bytes())
    if tag != want_tag:
        raise ContainerError(f"{path}: section {tag!r}, expected {want_tag!r}")
    return header, arrays


def encoders_to_bytes(enc: DualEncoder) -> bytes:
    header = {"vision": asdict(enc.vision.config), "text": asdict(enc.text.config)}
    arrays = {f"vision.{k}": v for k, v in enc.vision.arrays.items()}
    arrays.update({f"text.{k}": v for k, v in enc.text.arrays.items()})
    return pack(ENCODER_TAG, header, arrays)


def save_encoders(enc: DualEncoder, path) -> Path:
    return _write(path, encoders_to_bytes(enc))


def load_encoders(path) -> DualEncoder:
    header, arrays = _read(path, ENCODER_TAG)
    parts = []
    for side in ("vision", "text"):
        cfg = EncoderConfig(**header[side])
        prefix = side + "."
        parts.append(EncoderParams(cfg, {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}))
    return DualEncoder(*parts)


def save_bank(bank: PromptBank, path) -> Path:
    header = {"method": bank.method, "config": asdict(bank.config), "d_text": bank.d_text,
              "d_vision": bank.d_vision}
    return _write(path, pack(BANK_TAG, header, bank.arrays))


def load_bank(path) -> PromptBank:
    header, arrays = _read(path, BANK_TAG)
    return PromptBank(header["method"], PromptConfig(**header["config"]), header["d_text"], header["d_vision"],
                      arrays)
