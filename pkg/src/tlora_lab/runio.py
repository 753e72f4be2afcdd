"""Run-directory persistence: flat float64 weight files, manifests, metrics CSV.

Weight files are raw little-endian float64 with a JSON layout mapping each
tensor name to its shape, byte offset and CRC32, so corruption is reported
with the offset of the first damaged tensor.
"""

from __future__ import annotations

import csv
import io
import json
import os
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IntegrityError, LabIOError

DTYPE = np.dtype("<f8")
INCOMPLETE = ".incomplete"


def write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def read_json(path: Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise LabIOError(f"missing file: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise LabIOError(f"cannot read {path}: {exc}") from exc


def save_flat(path: Path, tensors: Mapping[str, np.ndarray]) -> dict:
    """Write tensors back to back; return the layout."""
    layout = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        layout[name] = {"shape": list(np.shape(arr)), "offset": offset, "crc32": zlib.crc32(raw)}
        chunks.append(raw)
        offset += len(raw)
    Path(path).write_bytes(b"".join(chunks))
    return layout


def load_flat(path: Path, layout: Mapping[str, dict]) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise LabIOError(f"missing weights file: {path}") from exc
    out = {}
    for name, entry in layout.items():
        shape = tuple(entry["shape"])
        off = int(entry["offset"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize
        chunk = raw[off : off + nbytes]
        if len(chunk) != nbytes:
            raise IntegrityError(f"{path}: truncated at offset {off + len(chunk)} while reading {name!r} (needs {off + nbytes} bytes)")
        if zlib.crc32(chunk) != entry["crc32"]:
            raise IntegrityError(f"{path}: checksum mismatch for {name!r} at offset {off}")
        out[name] = np.frombuffer(chunk, dtype=DTYPE).reshape(shape).copy()
    return out


def fmt(x) -> str:
    """Round-trippable, platform-stable float formatting for CSV cells."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (int, float, np.floating, np.integer)) else v for v in row])
    return buf.getvalue()


def read_csv(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise LabIOError(f"missing file: {path}") from exc
    if not rows:
        raise LabIOError(f"empty CSV: {path}")
    header = rows[0]
    return header, [dict(zip(header, r)) for r in rows[1:]]
