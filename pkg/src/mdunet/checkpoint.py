"""Binary checkpoint format for named tensors and frozen masks.

Layout (all integers little-endian):

    magic   8 bytes  "MDUCKPT1"
    version u16      currently 1
    count   u32      number of tensor records, sorted by name
    record  repeated:
        name_len u16, name UTF-8 bytes
        rank u8, dims rank x u64
        flags u8 (bit 0: frozen mask present)
        values as float32, C order
        mask bitset, ceil(n/8) bytes, LSB-first (only when flagged)
    crc     u32      CRC-32 of everything between the magic and the CRC

Round trips are bit-exact; a mask that is entirely False is canonically
omitted and restored as all-False.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"MDUCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or mismatched checkpoints."""


def encode_checkpoint(tensors: dict[str, np.ndarray],
                      masks: dict[str, np.ndarray] | None = None) -> bytes:
    masks = masks or {}
    parts = [struct.pack("<HI", VERSION, len(tensors))]
    for name in sorted(tensors):
        values = np.ascontiguousarray(tensors[name], dtype=np.float32)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]!r}...")
        mask = masks.get(name)
        if mask is not None and not np.any(mask):
            mask = None
        if mask is not None and np.asarray(mask).shape != values.shape:
            raise CheckpointError(f"{name}: mask shape differs from values")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        parts.append(struct.pack("<B", 1 if mask is not None else 0))
        parts.append(values.astype("<f4").tobytes())
        if mask is not None:
            bits = np.asarray(mask, dtype=bool).ravel()
            parts.append(np.packbits(bits, bitorder="little").tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray],
                                            dict[str, np.ndarray | None]]:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    if len(data) < len(MAGIC) + 4:
        raise CheckpointError("truncated checkpoint")
    payload, crc_stored = data[len(MAGIC):-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(payload) != crc_stored:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray | None] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        (flags,) = struct.unpack("<B", take(1))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        mask = None
        if flags & 1:
            raw = np.frombuffer(take((n + 7) // 8), dtype=np.uint8)
            mask = np.unpackbits(raw, count=n, bitorder="little").astype(bool).reshape(dims)
        tensors[name] = values
        masks[name] = mask
    if pos != len(payload):
        raise CheckpointError("trailing bytes after last tensor record")
    return tensors, masks


def save_checkpoint(path: str, tensors, masks=None):
    with open(path, "wb") as f:
        f.write(encode_checkpoint(tensors, masks))


def load_checkpoint(path: str):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def graph_state(graph) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Everything a model needs persisted: parameters (with their frozen
    masks) plus normalization running statistics."""
    tensors = {name: p.values for name, p in graph.parameters.items()}
    tensors.update(graph.buffers)
    masks = {name: p.frozen_mask for name, p in graph.parameters.items()}
    return tensors, masks


def save_graph(path: str, graph):
    tensors, masks = graph_state(graph)
    save_checkpoint(path, tensors, masks)


def load_into_graph(path: str, graph):
    """Restore a checkpoint into a graph built from the same config."""
    tensors, masks = load_checkpoint(path)
    expected = set(graph.parameters) | set(graph.buffers)
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CheckpointError(
            f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}"
        )
    for name, p in graph.parameters.items():
        if tensors[name].shape != p.values.shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {tensors[name].shape} != model {p.values.shape}"
            )
        p.values = tensors[name].copy()
        mask = masks.get(name)
        p.frozen_mask = (
            mask.copy() if mask is not None
            else np.zeros(p.values.shape, dtype=bool)
        )
        p.grad = None
    for name in graph.buffers:
        if tensors[name].shape != graph.buffers[name].shape:
            raise CheckpointError(f"{name}: buffer shape mismatch")
        graph.buffers[name] = tensors[name].copy()
