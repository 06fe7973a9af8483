"""Binary network container (``.qnet``).

Layout, all integers little-endian::

    offset 0   8 bytes   magic  b"QCFSNET\\0"
    offset 8   uint32    format version (currently 1)
    offset 12  uint32    header length H in bytes
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          tensor blob: concatenated little-endian float32 arrays

The JSON header carries ``input_shape``, ``class_count``, free-form
``metadata`` and the ordered ``layers`` list.  Each layer records ``name``,
``kind``, ``inputs``, its scalar parameters, and a ``tensors`` map from
tensor name to ``{"shape": [...], "offset": byte offset into the blob}``.
Scalars such as lambda and theta are stored as JSON doubles, so they round
trip exactly.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .graph import (
    QCFS,
    Concat,
    DetectHead,
    IFNeuron,
    Layer,
    LeakyReLU,
    NetworkGraph,
    Pool,
    Upsample,
)
from .qcfs import QCFSParams
from .tensor_ops import BatchNormSpec, ConvSpec

__all__ = ["MAGIC", "VERSION", "ContainerError", "save_network", "load_network", "dumps", "loads"]

MAGIC = b"QCFSNET\x00"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class ContainerError(ValueError):
    pass


def _layer_record(layer: Layer, blob: bytearray):
    rec = {"name": layer.name, "kind": layer.kind, "inputs": list(layer.inputs), "tensors": {}}

    def put(key, arr):
        data = np.ascontiguousarray(arr, dtype=_LE_F32)
        rec["tensors"][key] = {"shape": list(data.shape), "offset": len(blob)}
        blob.extend(data.tobytes())

    p = layer.params
    if layer.kind == "conv":
        rec.update(stride=p.stride, padding=p.padding)
        put("weights", p.weights)
        put("bias", p.bias)
    elif layer.kind == "batchnorm":
        rec.update(eps=p.eps, momentum=p.momentum)
        for key in ("gamma", "beta", "running_mean", "running_var"):
            put(key, getattr(p, key))
    elif layer.kind == "activation":
        if isinstance(p, LeakyReLU):
            rec.update(activation="leaky_relu", slope=p.slope)
        elif isinstance(p, QCFS):
            rec.update(activation="qcfs", lam=p.params.lam, L=p.params.L, phi=p.params.phi)
        else:
            rec.update(activation="if_neuron", theta=p.theta)
    elif layer.kind in ("avgpool", "maxpool"):
        rec.update(k=p.k, s=p.s)
    elif layer.kind == "upsample-nearest":
        rec.update(factor=p.factor)
    elif layer.kind == "detect-head":
        rec.update(class_count=p.class_count, stride=p.stride, head_stride=p.conv.stride, padding=p.conv.padding)
        put("weights", p.conv.weights)
        put("bias", p.conv.bias)
        put("anchors", p.anchors)
    return rec


def dumps(net: NetworkGraph, metadata: dict | None = None) -> bytes:
    blob = bytearray()
    layers = [_layer_record(l, blob) for l in net.layers]
    header = {
        "format": "qcfs-yolo-network",
        "version": VERSION,
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "metadata": metadata or {},
        "layers": layers,
        "blob_bytes": len(blob),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + bytes(blob)


def _tensor(rec, key, blob):
    meta = rec["tensors"][key]
    count = int(np.prod(meta["shape"])) if meta["shape"] else 1
    start = meta["offset"]
    end = start + count * 4
    if end > len(blob):
        raise ContainerError(f"tensor {rec['name']}.{key} runs past the end of the blob")
    return np.frombuffer(blob[start:end], dtype=_LE_F32).reshape(meta["shape"]).astype(np.float32)


def _build_layer(rec, blob) -> Layer:
    kind = rec["kind"]
    if kind == "conv":
        params = ConvSpec(_tensor(rec, "weights", blob), _tensor(rec, "bias", blob), rec["stride"], rec["padding"])
    elif kind == "batchnorm":
        params = BatchNormSpec(*(_tensor(rec, k, blob) for k in ("gamma", "beta", "running_mean", "running_var")),
                               eps=rec["eps"], momentum=rec["momentum"])
    elif kind == "activation":
        act = rec["activation"]
        if act == "leaky_relu":
            params = LeakyReLU(rec["slope"])
        elif act == "qcfs":
            params = QCFS(QCFSParams(rec["lam"], rec["L"], rec["phi"]))
        elif act == "if_neuron":
            params = IFNeuron(rec["theta"])
        else:
            raise ContainerError(f"unknown activation {act!r}")
    elif kind in ("avgpool", "maxpool"):
        params = Pool(rec["k"], rec["s"])
    elif kind == "upsample-nearest":
        params = Upsample(rec["factor"])
    elif kind == "concat":
        params = Concat()
    elif kind == "detect-head":
        conv = ConvSpec(_tensor(rec, "weights", blob), _tensor(rec, "bias", blob), rec["head_stride"], rec["padding"])
        params = DetectHead(conv, _tensor(rec, "anchors", blob), rec["class_count"], rec["stride"])
    else:
        raise ContainerError(f"unknown layer kind {kind!r}")
    return Layer(rec["name"], kind, params, tuple(rec["inputs"]))


def loads(data: bytes):
    """Parse container bytes into ``(NetworkGraph, metadata)``."""
    if len(data) < 16 or data[:8] != MAGIC:
        raise ContainerError("not a network container (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from None
    blob = data[16 + hlen:]
    if len(blob) != header.get("blob_bytes", len(blob)):
        raise ContainerError("tensor blob length does not match header")
    layers = [_build_layer(rec, blob) for rec in header["layers"]]
    return NetworkGraph(layers, header["input_shape"], header["class_count"]), header.get("metadata", {})


def save_network(net: NetworkGraph, path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(net, metadata))


def load_network(path):
    """Read a container file; returns ``(NetworkGraph, metadata)``."""
    return loads(Path(path).read_bytes())
