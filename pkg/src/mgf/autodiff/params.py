"""Flat parameter vectors with a named segment table, plus their binary format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mgf.errors import ParseError, StructureError

MAGIC = b"MGPV"


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """All learnable parameters of one network, stored contiguously."""

    def __init__(self, segments: tuple[Segment, ...], values: np.ndarray):
        total = sum(s.size for s in segments)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (total,):
            raise StructureError(f"segment table covers {total} values, got array of shape {values.shape}")
        offset = 0
        for seg in segments:
            if seg.offset != offset:
                raise StructureError(f"segment {seg.name!r} starts at {seg.offset}, expected {offset}")
            offset += seg.size
        self.segments = tuple(segments)
        self.values = values

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> ParamVector:
        segments, offset = [], 0
        for name, arr in arrays.items():
            seg = Segment(name, tuple(int(n) for n in np.shape(arr)), offset)
            segments.append(seg)
            offset += seg.size
        flat = np.concatenate([np.ravel(a) for a in arrays.values()]) if arrays else np.zeros(0)
        return cls(tuple(segments), flat.astype(np.float64))

    @classmethod
    def zeros_like(cls, other: ParamVector) -> ParamVector:
        return cls(other.segments, np.zeros_like(other.values))

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        for seg in self.segments:
            if seg.name == name:
                return self.values[seg.offset : seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(name)

    def arrays(self) -> dict[str, np.ndarray]:
        """Reshaped views into ``values``, keyed by segment name."""
        return {s.name: self.values[s.offset : s.offset + s.size].reshape(s.shape) for s in self.segments}

    def same_structure(self, other: ParamVector) -> bool:
        return self.segments == other.segments

    def check_structure(self, other: ParamVector) -> None:
        if not self.same_structure(other):
            mine = [(s.name, s.shape) for s in self.segments]
            theirs = [(s.name, s.shape) for s in other.segments]
            raise StructureError(f"segment tables differ: {mine} vs {theirs}")

    def checksum(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.same_structure(other) and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"ParamVector({len(self.segments)} segments, {len(self)} values)"

    # -- serialization -------------------------------------------------
    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<I", len(self.segments))]
        for seg in self.segments:
            name = seg.name.encode("utf-8")
            out.append(struct.pack("<H", len(name)))
            out.append(name)
            out.append(struct.pack("<B", len(seg.shape)))
            out.append(struct.pack(f"<{len(seg.shape)}I", *seg.shape))
        out.append(self.values.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> ParamVector:
        if buf[:4] != MAGIC:
            raise ParseError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
        pos = 4

        def take(fmt: str):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(buf):
                raise ParseError("truncated parameter file", pos)
            vals = struct.unpack_from(fmt, buf, pos)
            pos += size
            return vals

        (count,) = take("<I")
        segments, offset = [], 0
        for _ in range(count):
            (nlen,) = take("<H")
            if pos + nlen > len(buf):
                raise ParseError("truncated segment name", pos)
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = take("<B")
            shape = take(f"<{rank}I") if rank else ()
            seg = Segment(name, tuple(shape), offset)
            segments.append(seg)
            offset += seg.size
        need = offset * 8
        if len(buf) - pos != need:
            raise ParseError(f"expected {need} value bytes, found {len(buf) - pos}", pos)
        values = np.frombuffer(buf, dtype="<f8", count=offset, offset=pos).astype(np.float64)
        return cls(tuple(segments), values)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> ParamVector:
        return cls.from_bytes(Path(path).read_bytes())


def param_clone(p: ParamVector) -> ParamVector:
    return ParamVector(p.segments, p.values.copy())


def param_axpy(dst: ParamVector, a: float, src: ParamVector) -> None:
    """dst <- dst + a * src, in place."""
    dst.check_structure(src)
    dst.values += a * src.values


def param_sub(a: ParamVector, b: ParamVector) -> ParamVector:
    a.check_structure(b)
    return ParamVector(a.segments, a.values - b.values)
