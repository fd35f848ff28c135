"""Binary .sits dataset format.

Little-endian layout:

    magic   4 bytes  b"SITS"
    version u8       0x01
    header  u32 x 4  N, T, F, K
    record (repeated N times):
        parcel_id      i64
        label_present  u8   (1 visible, 0 hidden or absent)
        label          u16  (0xFFFF when no label exists at all)
        features       f32[T * F], row-major over (T, F)

A JSON sidecar `<stem>.labels.json` maps class index to class name. Reading
falls back to default names when the sidecar is missing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import Dataset, StatSeries

MAGIC = b"SITS"
VERSION = 1
NO_LABEL_SENTINEL = 0xFFFF

_HEADER = struct.Struct("<4sBIIII")
_RECORD_HEAD = struct.Struct("<qBH")


class SitsFormatError(ValueError):
    """Raised when a .sits file violates the format contract."""

    def __init__(self, message: str, offset: int | None = None, record_index: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        if record_index is not None:
            message = f"{message} (record index {record_index})"
        super().__init__(message)
        self.offset = offset
        self.record_index = record_index


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.stem + ".labels.json")


def write_sits(ds: Dataset, path: str | Path) -> None:
    """Write a Dataset to `path` and its class names to the labels sidecar."""
    path = Path(path)
    if ds.K > NO_LABEL_SENTINEL:
        raise ValueError(f"class count {ds.K} exceeds format limit {NO_LABEL_SENTINEL}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(ds.records), ds.T, ds.F, ds.K))
        for rec in ds.records:
            label = NO_LABEL_SENTINEL if rec.label is None else rec.label
            fh.write(_RECORD_HEAD.pack(rec.parcel_id, int(rec.label_present), label))
            fh.write(rec.features.astype("<f4").tobytes(order="C"))
    _sidecar_path(path).write_text(
        json.dumps({str(k): name for k, name in enumerate(ds.class_names)}, indent=2)
    )


def read_sits(path: str | Path) -> Dataset:
    """Read a Dataset from `path`, restoring labels and visibility flags bit-exactly."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise SitsFormatError("file truncated inside header", offset=len(blob))
    magic, version, n, t, f, k = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise SitsFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise SitsFormatError(f"unsupported version {version}, expected {VERSION}", offset=4)

    record_size = _RECORD_HEAD.size + 4 * t * f
    records = []
    offset = _HEADER.size
    for i in range(n):
        if offset + record_size > len(blob):
            raise SitsFormatError(
                "file truncated mid-record", offset=len(blob), record_index=i
            )
        parcel_id, label_present, label = _RECORD_HEAD.unpack_from(blob, offset)
        feats = np.frombuffer(
            blob, dtype="<f4", count=t * f, offset=offset + _RECORD_HEAD.size
        ).reshape(t, f)
        records.append(
            StatSeries(
                parcel_id=parcel_id,
                features=feats.copy(),
                label=None if label == NO_LABEL_SENTINEL else int(label),
                label_present=bool(label_present),
            )
        )
        offset += record_size
    if offset != len(blob):
        raise SitsFormatError(
            f"{len(blob) - offset} trailing bytes after last record", offset=offset
        )

    sidecar = _sidecar_path(path)
    class_names = []
    if sidecar.exists():
        mapping = json.loads(sidecar.read_text())
        class_names = [mapping[str(i)] for i in range(k)]
    return Dataset(records, T=t, F=f, K=k, class_names=class_names)
