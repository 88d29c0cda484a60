"""Binary checkpoints: params, RNG position, counters, config echo.

Layout, all integers little-endian int32 unless noted: the magic
"S2SDM001"; the config echo as length-prefixed UTF-8; a counter block
(count, then per entry a length-prefixed name and an int64 value); the
RNG state (int64 seed, path length, int64 path entries, int64 call
count); then a store block (store count, then per store a
length-prefixed label, an entry count, and per entry a length-prefixed
name, a rank, the shape, and the float64 little-endian data).

Loading an altered magic fails rather than guessing at compatibility,
and save/load round-trips bit-identically: the float payload is copied
raw, never reformatted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, UsageError
from .numcore import ParamStore, RngStream

MAGIC = b"S2SDM001"


@dataclass(frozen=True)
class Checkpoint:
    config_text: str
    counters: dict
    rng_state: tuple
    stores: dict  # label -> ParamStore

    def rng(self) -> RngStream:
        return RngStream.from_state(self.rng_state)


def _pack_str(text: str) -> bytes:
    data = text.encode("utf-8")
    return struct.pack("<i", len(data)) + data


def _pack_store(label: str, store: ParamStore) -> bytes:
    parts = [_pack_str(label), struct.pack("<i", len(store))]
    for name, arr in store.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        parts.append(_pack_str(name))
        parts.append(struct.pack("<i", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}i", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, config_text: str, counters: dict,
                    rng_state: tuple, stores: dict) -> None:
    seed, rng_path, calls = rng_state
    blob = [MAGIC, _pack_str(config_text), struct.pack("<i", len(counters))]
    for name, value in counters.items():
        blob.append(_pack_str(name))
        blob.append(struct.pack("<q", int(value)))
    blob.append(struct.pack("<q", int(seed)))
    blob.append(struct.pack("<i", len(rng_path)))
    blob.append(struct.pack(f"<{len(rng_path)}q", *rng_path))
    blob.append(struct.pack("<q", int(calls)))
    blob.append(struct.pack("<i", len(stores)))
    for label, store in stores.items():
        blob.append(_pack_store(label, store))
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Reader:
    def __init__(self, data: bytes, path) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"{self.path}: checkpoint truncated")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def i32(self) -> int:
        return struct.unpack("<i", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def text(self) -> str:
        n = self.i32()
        if n < 0:
            raise ParseError(f"{self.path}: negative length field")
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            reader = _Reader(fh.read(), path)
    except OSError as err:
        raise UsageError(f"cannot read checkpoint {path}: {err}") from err
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise ParseError(
            f"{path}: format marker {magic!r} does not match {MAGIC!r}"
        )
    config_text = reader.text()
    counters = {}
    for _ in range(reader.i32()):
        name = reader.text()
        counters[name] = reader.i64()
    seed = reader.i64()
    rng_path = tuple(reader.i64() for _ in range(reader.i32()))
    calls = reader.i64()
    stores = {}
    for _ in range(reader.i32()):
        label = reader.text()
        entries = []
        for _ in range(reader.i32()):
            name = reader.text()
            rank = reader.i32()
            if rank < 0:
                raise ParseError(f"{path}: negative rank for {name!r}")
            shape = struct.unpack(f"<{rank}i", reader.take(4 * rank))
            n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(reader.take(8 * n_items), dtype="<f8")
            entries.append((name, arr.reshape(shape).copy()))
        stores[label] = ParamStore(entries)
    if reader.pos != len(reader.data):
        raise ParseError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return Checkpoint(config_text, counters, (seed, rng_path, calls), stores)
