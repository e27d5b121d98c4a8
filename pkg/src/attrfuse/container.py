"""Binary tensor container.

Layout::

    ATTRFUSE-TC v1\\n
    count <n>\\n
    <name> <f32|f64> <d0>x<d1>...\\n      (one line per tensor, "scalar" for 0-d)
    end\\n
    <zero padding to a 64-byte boundary>
    <tensor 0, little-endian row-major><padding to 64 bytes>
    <tensor 1> ...

Tensors appear in the payload in header order, each starting on a 64-byte
boundary measured from the start of the file.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = "ATTRFUSE-TC v1"
ALIGN = 64
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise FormatError(f"unsupported dtype {arr.dtype}; containers hold f32/f64 only")


def _pad(n: int) -> int:
    return (-n) % ALIGN


def _shape_text(shape) -> str:
    return "x".join(str(s) for s in shape) if len(shape) else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "scalar":
        return ()
    try:
        shape = tuple(int(s) for s in text.split("x"))
    except ValueError as exc:
        raise FormatError(f"bad shape {text!r}") from exc
    if any(s < 1 for s in shape):
        raise FormatError(f"shape entries must be positive: {text!r}")
    return shape


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * DTYPES[self.dtype].itemsize


def write_container(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    arrays = {}
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise FormatError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        arrays[name] = np.asarray(arr, dtype=DTYPES[tag], order="C")

    lines = [MAGIC, f"count {len(arrays)}"]
    lines += [f"{n} {_dtype_tag(a)} {_shape_text(a.shape)}" for n, a in arrays.items()]
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\0" * _pad(len(header)))
        for arr in arrays.values():
            data = arr.tobytes(order="C")
            fh.write(data)
            fh.write(b"\0" * _pad(len(data)))


class TensorContainer:
    """Read-only view over a container file; tensors are read on first access."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.entries: dict[str, TensorEntry] = {}
        self._cache: dict[str, np.ndarray] = {}
        self._read_header()

    def _read_header(self) -> None:
        try:
            fh = open(self.path, "rb")
        except FileNotFoundError as exc:
            raise IntegrityError(f"container {self.path} does not exist") from exc
        with fh:
            magic = fh.readline().decode("utf-8", errors="replace").rstrip("\n")
            if magic != MAGIC:
                raise FormatError(f"{self.path}: bad magic {magic!r}")
            count_line = fh.readline().decode("utf-8").split()
            if len(count_line) != 2 or count_line[0] != "count":
                raise FormatError(f"{self.path}: missing count line")
            n = int(count_line[1])
            specs = []
            for _ in range(n):
                parts = fh.readline().decode("utf-8").split()
                if len(parts) != 3 or parts[1] not in DTYPES:
                    raise FormatError(f"{self.path}: malformed header entry {parts}")
                specs.append((parts[0], parts[1], _parse_shape(parts[2])))
            if fh.readline().decode("utf-8").rstrip("\n") != "end":
                raise FormatError(f"{self.path}: header not terminated")
            offset = fh.tell()
        offset += _pad(offset)
        for name, tag, shape in specs:
            if name in self.entries:
                raise FormatError(f"{self.path}: duplicate tensor {name!r}")
            entry = TensorEntry(name, tag, shape, offset)
            self.entries[name] = entry
            offset += entry.nbytes + _pad(entry.nbytes)
        size = self.path.stat().st_size
        if size != offset:
            raise FormatError(f"{self.path}: payload is {size} bytes, header implies {offset}")

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self._cache:
            try:
                e = self.entries[name]
            except KeyError:
                raise IntegrityError(f"{self.path}: no tensor named {name!r}") from None
            with open(self.path, "rb") as fh:
                fh.seek(e.offset)
                raw = fh.read(e.nbytes)
            arr = np.frombuffer(raw, dtype=DTYPES[e.dtype]).reshape(e.shape)
            arr.setflags(write=False)
            self._cache[name] = arr
        return self._cache[name]

    def read_all(self) -> dict[str, np.ndarray]:
        return {n: self[n] for n in self.entries}


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return TensorContainer(path).read_all()
