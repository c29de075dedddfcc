"""On-disk formats: datasets, checkpoints, CSV tables, JSON documents and manifests.

Dataset file (``.gwds``), little-endian::

    b"GWDS1\\n" | uint32 D | uint32 T | uint32 n_sequences
    then per sequence: float64 inputs (T, D) row-major | float64 targets (T) | uint8 mask (T)

Checkpoint file (``.gwck``)::

    b"GWCK1\\n" | uint32 header_len | UTF-8 JSON header | float64 payload

The header lists the cell kind, ``D``, ``H`` and every tensor as
``[name, shape]`` in payload order; each tensor is stored row-major.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .cells import CellKind, CellParams, param_shapes
from .training import Dataset, ModelParams

DATASET_MAGIC = b"GWDS1\n"
CHECKPOINT_MAGIC = b"GWCK1\n"
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """File does not follow the expected layout."""


def write_dataset(path, data: Dataset) -> None:
    n, T, D = data.inputs.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", D, T, n))
        for i in range(n):
            fh.write(np.ascontiguousarray(data.inputs[i], dtype=_F64).tobytes())
            fh.write(np.ascontiguousarray(data.targets[i], dtype=_F64).tobytes())
            fh.write(data.mask[i].astype(np.uint8).tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(DATASET_MAGIC):
        raise FormatError(f"{path}: not a dataset file")
    off = len(DATASET_MAGIC)
    D, T, n = struct.unpack_from("<III", raw, off)
    off += 12
    block = 8 * T * D + 8 * T + T
    if len(raw) != off + n * block:
        raise FormatError(f"{path}: expected {n} blocks of {block} bytes")
    rec = np.dtype([("x", _F64, (T, D)), ("y", _F64, (T,)), ("m", np.uint8, (T,))])
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=off)
    return Dataset(arr["x"].astype(float), arr["y"].astype(float), arr["m"].astype(bool))


def write_checkpoint(path, model: ModelParams) -> None:
    cell = model.cell
    names = list(param_shapes(cell.kind, cell.D, cell.H))
    entries = [[k, list(cell[k].shape)] for k in names]
    entries += [["w_out", [cell.H]], ["b_out", []]]
    header = json.dumps({"kind": cell.kind.to_dict(), "D": cell.D, "H": cell.H,
                         "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for k in names:
            fh.write(np.ascontiguousarray(cell[k], dtype=_F64).tobytes())
        fh.write(np.ascontiguousarray(model.w_out, dtype=_F64).tobytes())
        fh.write(np.array([model.b_out], dtype=_F64).tobytes())


def read_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off:off + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    off += hlen
    payload = np.frombuffer(raw, dtype=_F64, offset=off)
    arrays = {}
    pos = 0
    for name, shape in header["tensors"]:
        size = math.prod(shape)
        if pos + size > payload.size:
            raise FormatError(f"{path}: truncated payload at {name}")
        arrays[name] = payload[pos:pos + size].reshape(shape).copy()
        pos += size
    if pos != payload.size:
        raise FormatError(f"{path}: {payload.size - pos} trailing values")
    w_out = arrays.pop("w_out")
    b_out = float(arrays.pop("b_out"))
    cell = CellParams(CellKind.parse(header["kind"]), header["D"], header["H"], arrays)
    return ModelParams(cell, w_out, b_out)


def fmt(x) -> str:
    """Lossless text form: integers verbatim, floats with 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".17g")
    return str(x)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # non-finite values are spelled as strings to keep the document strict JSON
        return x if math.isfinite(x) else fmt(x)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def as_float(v) -> float:
    """Inverse of the string spelling used for non-finite JSON numbers."""
    return float(v)


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, files: dict[str, Path], extra: dict | None = None) -> None:
    root = Path(path).parent
    entries = {name: {"file": str(Path(p).relative_to(root)), "sha256": sha256(p)}
               for name, p in sorted(files.items())}
    doc = {"files": entries}
    if extra:
        doc.update(extra)
    write_json(path, doc)
