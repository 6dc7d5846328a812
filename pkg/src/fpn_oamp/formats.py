"""Binary dataset and checkpoint files, plus operator archives.

Dataset layout (little-endian)::

    magic "FPNDSET\\0" | u32 version | u32 manifest length | manifest JSON (utf-8)
    | 32-byte operator digest | u64 sample count
    | count records of float32[h_dim] h, float32[y_dim] y, float32 snr_db

Checkpoint layout::

    magic "FPNCKPT\\0" | u32 version | u32 header length | header JSON
    | float32 tensors in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import ArrayGeometry
from .measurement import MeasurementOperator, PilotConfig, build_operator, dft_dictionary
from .nle import NleParameters, param_shapes
from .training import Dataset

DATASET_MAGIC = b"FPNDSET\0"
CHECKPOINT_MAGIC = b"FPNCKPT\0"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _read_header(f, magic: bytes, path) -> dict:
    got = f.read(len(magic))
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}")
    version, length = struct.unpack("<II", f.read(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    return json.loads(f.read(length).decode("utf-8"))


def _write_header(f, magic: bytes, header: dict) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    f.write(magic)
    f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    f.write(blob)


def save_dataset(path: str | Path, ds: Dataset) -> None:
    manifest = dict(ds.manifest)
    manifest.update(geometry=ds.geometry.to_dict(), split=ds.split,
                    h_dim=int(ds.h.shape[1]), y_dim=int(ds.y.shape[1]))
    records = np.hstack([ds.h, ds.y, ds.snr_db[:, None]]).astype("<f4")
    with open(path, "wb") as f:
        _write_header(f, DATASET_MAGIC, manifest)
        f.write(bytes.fromhex(ds.operator_digest))
        f.write(struct.pack("<Q", len(ds)))
        f.write(records.tobytes())


def load_dataset(path: str | Path) -> Dataset:
    with open(path, "rb") as f:
        manifest = _read_header(f, DATASET_MAGIC, path)
        digest = f.read(32).hex()
        (count,) = struct.unpack("<Q", f.read(8))
        h_dim, y_dim = manifest["h_dim"], manifest["y_dim"]
        width = h_dim + y_dim + 1
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != count * width:
        raise FormatError(f"{path}: expected {count} records of {width} floats, found {data.size} floats")
    rec = data.reshape(count, width).astype(float)
    return Dataset(ArrayGeometry(**manifest["geometry"]), digest, rec[:, :h_dim],
                   rec[:, h_dim:h_dim + y_dim], rec[:, -1], manifest["split"], manifest)


def save_checkpoint(path: str | Path, theta: NleParameters, geometry: ArrayGeometry,
                    extra: dict | None = None) -> None:
    names = list(param_shapes(theta.S, theta.C, theta.B))
    header = {"C": theta.C, "B": theta.B, "S": theta.S, "side": theta.side, "version": theta.version,
              "geometry": geometry.to_dict(),
              "tensors": [[n, list(theta.tensors[n].shape)] for n in names], "extra": extra or {}}
    with open(path, "wb") as f:
        _write_header(f, CHECKPOINT_MAGIC, header)
        for n in names:
            f.write(np.ascontiguousarray(theta.tensors[n], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, geometry: ArrayGeometry | None = None) -> NleParameters:
    """Read a checkpoint; with ``geometry`` given, refuse one built for a different array."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        header = _read_header(f, CHECKPOINT_MAGIC, path)
        blob = np.frombuffer(f.read(), dtype="<f4")
    if geometry is not None and (header["S"] != geometry.S or header["side"] != geometry.side):
        raise FormatError(f"{path}: checkpoint is for S={header['S']}, side={header['side']}, "
                          f"not S={geometry.S}, side={geometry.side}")
    expected = param_shapes(header["S"], header["C"], header["B"])
    tensors, offset = {}, 0
    for name, shape in header["tensors"]:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise FormatError(f"{path}: tensor {name} has shape {shape}, expected {expected.get(name)}")
        size = int(np.prod(shape, dtype=int))
        if offset + size > blob.size:
            raise FormatError(f"{path}: truncated tensor data")
        tensors[name] = blob[offset:offset + size].astype(float).reshape(shape)
        offset += size
    if offset != blob.size:
        raise FormatError(f"{path}: {blob.size - offset} trailing floats")
    theta = NleParameters(header["S"], header["side"], header["C"], header["B"], tensors, header["version"])
    theta.validate()
    return theta


def save_operator(path: str | Path, op: MeasurementOperator) -> None:
    meta = {"geometry": op.geometry.to_dict(), "Q": op.pilot.Q, "resolution": op.pilot.resolution,
            "digest": op.digest()}
    with open(path, "wb") as f:
        np.savez(f, combiners=op.combiners, meta=np.array(json.dumps(meta)))


def load_operator(path: str | Path) -> MeasurementOperator:
    """Rebuild the operator from its stored combiners and check the stored digest."""
    with np.load(path) as z:
        combiners = z["combiners"]
        meta = json.loads(str(z["meta"]))
    geometry = ArrayGeometry(**meta["geometry"])
    op = build_operator(combiners, dft_dictionary(geometry), geometry,
                        PilotConfig(meta["Q"], meta["resolution"]))
    if op.digest() != meta["digest"]:
        raise FormatError(f"{path}: rebuilt operator does not match its stored digest")
    return op
