"""Binary checkpoint format for :class:`~spikingdd.network.NetworkModel`.

Layout (little-endian)::

    b"SDD1"  u32 version  u32 C  u32 H  u32 W  u32 n_layers
    per layer: u8 kind (0 pool, 1 flatten, 2 dense), then
        pool:    u32 kernel
        dense:   u32 in  u32 out  f64 dropout_p  u8 mode (0 single, 1 cuba)
                 f64 threshold  f64 voltage_decay  f64 current_decay
                 f64 tau_grad  f64 scale_grad
    f32 weight matrices, row-major (out x in), in dense-layer order
    u32 CRC-32 of every preceding byte

Weights are stored as float32. Models whose weights are already float32
(the trainer keeps them that way) round-trip exactly.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptArtifactError
from .network import DENSE, FLATTEN, POOL, LayerSpec, NetworkModel
from .neuron import CUBA, SINGLE, LifParams

MAGIC = b"SDD1"
VERSION = 1
_KINDS = {POOL: 0, FLATTEN: 1, DENSE: 2}
_MODES = {SINGLE: 0, CUBA: 1}
_HEAD = struct.Struct("<4sIIIII")
_POOL = struct.Struct("<I")
_DENSE = struct.Struct("<IIdB5d")
_CRC = struct.Struct("<I")


def to_bytes(model: NetworkModel) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, *model.input_geometry, len(model.layers))]
    for spec in model.layers:
        parts.append(bytes([_KINDS[spec.kind]]))
        if spec.kind == POOL:
            parts.append(_POOL.pack(spec.kernel))
        elif spec.kind == DENSE:
            n = spec.neuron
            parts.append(
                _DENSE.pack(
                    spec.in_units, spec.out_units, spec.dropout_p, _MODES[n.mode],
                    n.threshold, n.voltage_decay, n.current_decay, n.tau_grad, n.scale_grad,
                )
            )
    for W in model.weights:
        parts.append(np.ascontiguousarray(W, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def from_bytes(raw: bytes) -> NetworkModel:
    if len(raw) < _HEAD.size + _CRC.size or raw[:4] != MAGIC:
        raise CorruptArtifactError("not a checkpoint (bad magic)")
    body, (crc,) = raw[: -_CRC.size], _CRC.unpack(raw[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise CorruptArtifactError("checkpoint CRC mismatch")
    try:
        _, version, c, h, w, n_layers = _HEAD.unpack_from(body)
        if version != VERSION:
            raise CorruptArtifactError(f"unsupported checkpoint version {version}")
        off = _HEAD.size
        kinds = {v: k for k, v in _KINDS.items()}
        modes = {v: k for k, v in _MODES.items()}
        layers = []
        for _ in range(n_layers):
            kind = kinds[body[off]]
            off += 1
            if kind == POOL:
                (k,) = _POOL.unpack_from(body, off)
                off += _POOL.size
                layers.append(LayerSpec.pool(k))
            elif kind == FLATTEN:
                layers.append(LayerSpec.flatten())
            else:
                n_in, n_out, p, mode, *vals = _DENSE.unpack_from(body, off)
                off += _DENSE.size
                neuron = LifParams(*vals, mode=modes[mode])
                layers.append(LayerSpec.dense(n_in, n_out, neuron, p))
        weights = []
        for spec in layers:
            if spec.kind == DENSE:
                n = spec.in_units * spec.out_units
                W = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(spec.out_units, spec.in_units)
                weights.append(W.astype(np.float32))
                off += 4 * n
        if off != len(body):
            raise CorruptArtifactError(f"{len(body) - off} trailing bytes in checkpoint")
        return NetworkModel((c, h, w), layers, weights)
    except CorruptArtifactError:
        raise
    except (struct.error, KeyError, IndexError, ValueError) as exc:
        raise CorruptArtifactError(f"malformed checkpoint: {exc}") from exc


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(model: NetworkModel, path) -> None:
    atomic_write_bytes(path, to_bytes(model))


def load_checkpoint(path) -> NetworkModel:
    return from_bytes(Path(path).read_bytes())
