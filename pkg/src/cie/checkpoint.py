"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"CIECKPT\\n"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header (sorted keys, compact)
    20+H    N     tensor payload, N = header["payload_nbytes"]

The header holds ``kind`` ("model" or "train_state"), the model config,
the control bounds, free-form ``meta`` (seed, config hash, ...) and a tensor
manifest: one ``{name, dtype, shape, offset, nbytes}`` entry per tensor, with
offsets relative to the payload start. Tensors are stored row-major
(C order) in their native dtype. Optimizer state for resumable training is
stored in the same container under names ``opt.<param index>.<field>``.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np
import torch

from .control import ControlBounds
from .errors import CheckpointError, ShapeMismatchError, TruncatedFileError, VersionMismatchError
from .model import ControlTransformer, ModelConfig

MAGIC = b"CIECKPT\n"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def _to_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    t = t.detach().contiguous().cpu()
    name = str(t.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {t.dtype}")
    return name, t.numpy().astype(np.dtype(name).newbyteorder("<"), copy=False).tobytes(order="C")


def pack(kind: str, tensors: dict, header_extra: dict) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, t in tensors.items():
        dtype, raw = _to_bytes(t)
        manifest.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = dict(header_extra, kind=kind, tensors=manifest, payload_nbytes=offset)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def unpack(data: bytes) -> tuple[dict, dict]:
    if len(data) < _PREFIX.size:
        raise TruncatedFileError(f"checkpoint is {len(data)} bytes, shorter than its fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {VERSION}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise TruncatedFileError(f"header length {hlen} runs past end of file ({len(data)} bytes)")
    try:
        header = json.loads(data[start: start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    base = start + hlen
    if base + header.get("payload_nbytes", 0) > len(data):
        raise TruncatedFileError(f"payload needs {header['payload_nbytes']} bytes, file has {len(data) - base}")
    if base + header["payload_nbytes"] < len(data):
        raise CheckpointError("trailing bytes after payload")
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        raw = data[base + entry["offset"]: base + entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype)
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise ShapeMismatchError(f"tensor {entry['name']}: {arr.size} values for shape {entry['shape']}")
        tensors[entry["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("="), copy=True).reshape(entry["shape"]))
    return header, tensors


def save_checkpoint(model: ControlTransformer, config: ModelConfig, bounds: ControlBounds, meta: Optional[dict] = None) -> bytes:
    tensors = {k: v for k, v in model.state_dict().items()}
    return pack("model", tensors, {"config": config.to_dict(), "bounds": bounds.to_dict(), "meta": meta or {}})


def _check_shapes(model: ControlTransformer, tensors: dict):
    expected = model.state_dict()
    missing = set(expected) - set(tensors)
    extra = {k for k in set(tensors) - set(expected) if not k.startswith("opt.")}
    if missing or extra:
        raise ShapeMismatchError(f"tensor names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
    for name, ref in expected.items():
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise ShapeMismatchError(f"{name}: checkpoint shape {tuple(tensors[name].shape)} != model {tuple(ref.shape)}")


def load_checkpoint(data: bytes, config: Optional[ModelConfig] = None):
    """Returns ``(model, config, bounds, meta)``.

    If ``config`` is given, the stored tensors must fit a model built from it.
    """
    header, tensors = unpack(data)
    stored = ModelConfig.from_dict(header["config"])
    cfg = config or stored
    model = ControlTransformer(cfg)
    _check_shapes(model, tensors)
    dtype = next(iter(tensors.values())).dtype if tensors else torch.float32
    model.to(dtype)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("opt.")})
    bounds = ControlBounds(**header["bounds"])
    return model, cfg, bounds, header.get("meta", {})


def save_train_state(model, config, bounds, epoch: int, step: int, optimizer_state: dict, meta: Optional[dict] = None) -> bytes:
    tensors = dict(model.state_dict())
    per_param = {}
    for idx, st in optimizer_state["state"].items():
        fields_ = {}
        for key, val in st.items():
            if torch.is_tensor(val):
                tensors[f"opt.{idx}.{key}"] = val
            else:
                fields_[key] = val
        per_param[str(idx)] = fields_
    groups = [{k: v for k, v in g.items()} for g in optimizer_state["param_groups"]]
    for g in groups:
        if "betas" in g:
            g["betas"] = list(g["betas"])
    header = {
        "config": config.to_dict(), "bounds": bounds.to_dict(), "meta": meta or {},
        "epoch": epoch, "step": step, "param_groups": groups, "opt_scalars": per_param,
        "opt_keys": sorted(str(k) for k in optimizer_state["state"]),
    }
    return pack("train_state", tensors, header)


def load_train_state(data: bytes):
    """Returns ``(model, config, bounds, meta, epoch, step, optimizer_state)``."""
    header, tensors = unpack(data)
    if header.get("kind") != "train_state":
        raise CheckpointError("not a training-state file")
    model, cfg, bounds, meta = load_checkpoint(data)
    state = {}
    for key in header["opt_keys"]:
        st = dict(header["opt_scalars"].get(key, {}))
        prefix = f"opt.{key}."
        for name, t in tensors.items():
            if name.startswith(prefix):
                st[name[len(prefix):]] = t
        state[int(key)] = st
    groups = header["param_groups"]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    return model, cfg, bounds, meta, header["epoch"], header["step"], {"state": state, "param_groups": groups}
