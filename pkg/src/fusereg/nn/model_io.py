"""Model serialization: magic "RFNN", u32 version, length-prefixed JSON
spec block, then raw little-endian tensors in manifest order.

The JSON block carries the NetworkSpec, the parameter dtype, and a tensor
manifest (name, shape) so a load can verify sizes before touching the
payload. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .network import Network, NetworkSpec

__all__ = ["save_model", "load_model", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"RFNN"
FORMAT_VERSION = 1

_DTYPES = {"f32": "<f4", "f64": "<f8"}


def save_model(net: Network, path: str) -> None:
    dtype_name = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}[net.dtype]
    manifest = [[name, list(arr.shape)] for name, arr in net.named_params()]
    header = {
        "dtype": dtype_name,
        "spec": net.spec.to_json_dict(),
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        le = _DTYPES[dtype_name]
        for _, arr in net.named_params():
            f.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def load_model(path: str) -> Network:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a model file: bad magic {magic!r}")
        raw = f.read(8)
        if len(raw) < 8:
            raise ValueError("truncated model header")
        version, blob_len = struct.unpack("<II", raw)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        blob = f.read(blob_len)
        if len(blob) < blob_len:
            raise ValueError("truncated spec block")
        header = json.loads(blob.decode("utf-8"))
        dtype_name = header["dtype"]
        if dtype_name not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {dtype_name!r}")
        np_dtype = np.float32 if dtype_name == "f32" else np.float64
        spec = NetworkSpec.from_json_dict(header["spec"])
        net = Network(spec, dtype=np_dtype)
        slots = dict(net.named_params())
        manifest = header["tensors"]
        names = [m[0] for m in manifest]
        if sorted(names) != sorted(slots.keys()):
            raise ValueError("tensor manifest does not match the network spec")
        le = _DTYPES[dtype_name]
        for name, shape in manifest:
            want = tuple(shape)
            slot = slots[name]
            if slot.shape != want:
                raise ValueError(f"tensor {name} shape {want} does not match spec {slot.shape}")
            count = int(np.prod(want)) if want else 1
            data = np.fromfile(f, dtype=le, count=count)
            if data.size != count:
                raise ValueError(f"truncated tensor payload at {name}")
            slot[...] = data.reshape(want)
        if f.read(1):
            raise ValueError("trailing bytes after tensor payload")
    return net
