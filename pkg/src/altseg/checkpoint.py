"""Weight checkpoint files.

One binary layout serves both the single-branch checkpoint and the
combined reduced-branch-plus-fusion checkpoint (little-endian, magic
``ARWT``): u8 version (1), u32 JSON config length, config bytes, u16 layer
count, then per layer u8 rank, u32 extents, f64 payload. The config JSON
carries the architecture description plus a ``params`` list fixing the
layer order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .tensor import FileFormatError, Tensor

_MAGIC = b"ARWT"
_VERSION = 1


def write_bundle(path, config, arrays):
    """Write named float64 arrays with a JSON config; ``config['params']``
    lists the names in payload order."""
    blob = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BI", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<H", len(config["params"])))
        for name in config["params"]:
            # asarray, not ascontiguousarray: the latter would promote 0-d
            # scalars to shape (1,) and lose the stored rank
            arr = np.asarray(arrays[name], dtype=np.float64)
            fh.write(struct.pack("<B", arr.ndim))
            for s in arr.shape:
                fh.write(struct.pack("<I", s))
            fh.write(arr.astype("<f8").tobytes())


def read_bundle(path):
    """Read (config, {name: array}) back; malformed files raise
    FileFormatError naming the failing byte offset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FileFormatError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    if len(blob) < 9:
        raise FileFormatError(f"{path}: truncated header at byte {len(blob)}")
    version, jlen = struct.unpack_from("<BI", blob, 4)
    if version != _VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    off = 9
    if off + jlen > len(blob):
        raise FileFormatError(f"{path}: truncated config at byte {off}")
    try:
        config = json.loads(blob[off:off + jlen])
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: config is not valid JSON ({exc})") from exc
    off += jlen
    names = config.get("params")
    if not isinstance(names, list):
        raise FileFormatError(f"{path}: config lacks a params list")
    if off + 2 > len(blob):
        raise FileFormatError(f"{path}: truncated layer count at byte {off}")
    (count,) = struct.unpack_from("<H", blob, off)
    off += 2
    if count != len(names):
        raise FileFormatError(
            f"{path}: layer count {count} does not match config list {len(names)}"
        )
    arrays = {}
    for name in names:
        if off + 1 > len(blob):
            raise FileFormatError(f"{path}: truncated layer {name} at byte {off}")
        rank = blob[off]
        off += 1
        shape = []
        for _ in range(rank):
            if off + 4 > len(blob):
                raise FileFormatError(f"{path}: truncated extents of {name} at byte {off}")
            shape.append(struct.unpack_from("<I", blob, off)[0])
            off += 4
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(blob):
            raise FileFormatError(f"{path}: truncated payload of {name} at byte {off}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n,
                                     offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(blob):
        raise FileFormatError(f"{path}: {len(blob) - off} trailing bytes at byte {off}")
    return config, arrays


def _fill(model, arrays, prefix, path):
    for name, tensor in model.params.items():
        arr = arrays[prefix + name]
        if arr.shape != tensor.data.shape:
            raise FileFormatError(
                f"{path}: layer {prefix}{name} shape {arr.shape} does not match "
                f"{tensor.data.shape}"
            )
        model.params[name] = Tensor(arr, requires_grad=True)


def save_pipeline(path, lr_model, fusion_model):
    """Store the reduced branch and the fusion encoders as one bundle."""
    config = {
        "backbone": asdict(lr_model.config),
        "fusion": asdict(fusion_model.config),
        "params": ([f"bk.{n}" for n in lr_model.params]
                   + [f"fu.{n}" for n in fusion_model.params]),
    }
    arrays = {f"bk.{n}": t.data for n, t in lr_model.params.items()}
    arrays.update({f"fu.{n}": t.data for n, t in fusion_model.params.items()})
    write_bundle(path, config, arrays)


def load_pipeline(path):
    """Load (reduced-branch Backbone, Fusion) from one bundle."""
    from .backbone import Backbone, BackboneConfig
    from .fusion import Fusion, FusionConfig

    config, arrays = read_bundle(path)
    if "backbone" not in config or "fusion" not in config:
        raise FileFormatError(f"{path}: bundle lacks backbone/fusion sections")
    try:
        model = Backbone(BackboneConfig(**config["backbone"]))
        fusion = Fusion(FusionConfig(**config["fusion"]))
    except (TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: bad config ({exc})") from exc
    want = set(f"bk.{n}" for n in model.params) | set(f"fu.{n}" for n in fusion.params)
    if want != set(config["params"]):
        raise FileFormatError(f"{path}: parameter list does not match the architecture")
    _fill(model, arrays, "bk.", path)
    _fill(fusion, arrays, "fu.", path)
    return model, fusion
