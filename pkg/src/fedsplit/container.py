"""Binary model container.

Layout: 4-byte magic ``FSPM``, uint16 format version, uint32 header length,
a UTF-8 JSON header, then every array as raw little-endian float64 in the
order listed in the header. All integers are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from fedsplit.cnmf import CnmfHyperparams, CnmfModel
from fedsplit.errors import FedSplitError
from fedsplit.federation import FederatedClientModel, GlobalModel

MAGIC = b"FSPM"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class ContainerError(FedSplitError):
    pass


def _pack(kind: str, arrays: dict, meta: dict) -> bytes:
    specs = [[name, list(np.shape(a))] for name, a in arrays.items()]
    header = json.dumps({"kind": kind, "arrays": specs, "meta": meta}, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + body


def _unpack(blob: bytes) -> tuple[str, dict, dict]:
    if len(blob) < _PREFIX.size:
        raise ContainerError("truncated container")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError("not a model container")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = _PREFIX.size
    header = json.loads(blob[start : start + hlen].decode())
    offset = start + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ContainerError(f"truncated array {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
        offset = end
    if offset != len(blob):
        raise ContainerError("trailing bytes after arrays")
    return header["kind"], arrays, header["meta"]


def dumps(model, extra: dict | None = None) -> bytes:
    """Serialise a model; ``extra`` (JSON-able) is stored verbatim in the header."""
    return _dumps(model, extra or {})


def _dumps(model, extra: dict) -> bytes:
    if isinstance(model, CnmfModel):
        arrays = {"W": model.W, "H": model.H, "b_W": model.b_W, "b_H": model.b_H}
        meta = {"mu": model.mu, "hyperparams": model.hyperparams.to_dict(), "n_iter": model.n_iter, "extra": extra}
        return _pack("cnmf", arrays, meta)
    if isinstance(model, GlobalModel):
        arrays = {"W_global": model.W_global, "H_global": model.H_global, "b_H_global": model.b_H_global}
        meta = {
            "mu_global": model.mu_global,
            "group_ids": list(model.group_ids),
            "slice_widths": [s.shape[1] for s in model.slices],
            "relative_error": model.relative_error,
            "extra": extra,
        }
        return _pack("global", arrays, meta)
    if isinstance(model, FederatedClientModel):
        arrays = {"W_star": model.W_star, "b_W": model.b_W, "W_global": model.W_global, "b_H_global": model.b_H_global}
        return _pack("federated", arrays, {"group_id": model.group_id, "mu_global": model.mu_global, "extra": extra})
    raise TypeError(f"cannot serialise {type(model).__name__}")


def read_extra(blob: bytes) -> dict:
    return _unpack(blob)[2].get("extra", {})


def loads(blob: bytes):
    kind, a, meta = _unpack(blob)
    if kind == "cnmf":
        hp = CnmfHyperparams(**meta["hyperparams"])
        return CnmfModel(a["W"], a["H"], a["b_W"], a["b_H"], meta["mu"], hp, meta["n_iter"])
    if kind == "global":
        offsets = np.cumsum([0, *meta["slice_widths"]])
        H = a["H_global"]
        slices = [H[:, offsets[i] : offsets[i + 1]] for i in range(len(meta["slice_widths"]))]
        return GlobalModel(a["W_global"], H, slices, a["b_H_global"], meta["mu_global"], meta["group_ids"], relative_error=meta["relative_error"])
    if kind == "federated":
        return FederatedClientModel(meta["group_id"], a["W_star"], a["b_W"], a["W_global"], a["b_H_global"], meta["mu_global"])
    raise ContainerError(f"unknown model kind {kind!r}")


def save(model, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, extra))


def load(path):
    return loads(Path(path).read_bytes())
