"""Binary client checkpoints and the store that keeps them.

Layout, all little-endian::

    "FLCK" | version u32 (=1) | client_id u32 | round u32 | epoch u32
    | batch_index u64 | sim_time f64 | rng_state 32 bytes | layer_count u32
    | per layer: fan_out u32, fan_in u32, weights f64[fan_out*fan_in] (row-major),
      bias f64[fan_out], bn flag u8, [gamma, beta, mean, var] f64[4*fan_out] if flag
    | adam_t u64 | len u64, m f64[len] | len u64, v f64[len] | crc32 u32

The CRC covers every byte before it. ``rng_state`` is the training stream
position at the start of ``epoch``; ``batch_index`` is the last completed batch.
"""

from __future__ import annotations

import logging
import os
import re
import struct
import tempfile
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointNotFound, IntegrityError
from .nn import AdamState, Layer, ModelParameters

log = logging.getLogger(__name__)

MAGIC = b"FLCK"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQd32sI")
_LAYER = struct.Struct("<II")
_NAME = re.compile(r"^ckpt_(\d+)_(\d+)_(\d+)_(\d+)\.bin$")
_F8 = np.dtype("<f8")


@dataclass
class Checkpoint:
    client_id: int
    round: int
    epoch: int
    batch_index: int
    sim_time: float
    rng_state: bytes
    params: ModelParameters
    adam: AdamState

    @property
    def filename(self):
        return f"ckpt_{self.client_id}_{self.round}_{self.epoch}_{self.batch_index}.bin"


def encode(ckpt):
    if len(ckpt.rng_state) != 32:
        raise ValueError("rng_state must be exactly 32 bytes")
    parts = [
        _HEADER.pack(
            MAGIC, VERSION, ckpt.client_id, ckpt.round, ckpt.epoch, ckpt.batch_index,
            ckpt.sim_time, bytes(ckpt.rng_state), len(ckpt.params.layers),
        )
    ]
    for layer in ckpt.params.layers:
        parts.append(_LAYER.pack(layer.fan_out, layer.fan_in))
        parts.append(np.ascontiguousarray(layer.weights, dtype=_F8).tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype=_F8).tobytes())
        parts.append(struct.pack("<B", 1 if layer.has_bn else 0))
        if layer.has_bn:
            for arr in (layer.bn_gamma, layer.bn_beta, layer.bn_mean, layer.bn_var):
                parts.append(np.ascontiguousarray(arr, dtype=_F8).tobytes())
    parts.append(struct.pack("<Q", ckpt.adam.t))
    for arr in (ckpt.adam.m, ckpt.adam.v):
        parts.append(struct.pack("<Q", arr.size))
        parts.append(np.ascontiguousarray(arr, dtype=_F8).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise IntegrityError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def reals(self, n):
        return np.frombuffer(self.take(8 * n), dtype=_F8).astype(np.float64)


def decode(raw):
    raw = bytes(raw)
    if len(raw) < _HEADER.size + 4:
        raise IntegrityError("checkpoint is truncated")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise IntegrityError("checkpoint CRC mismatch")
    r = _Reader(raw[:-4])
    magic, version, client_id, rnd, epoch, batch, sim_time, rng_state, n_layers = r.unpack(
        _HEADER.format
    )
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}")
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        fan_out, fan_in = r.unpack("<II")
        layer = Layer(r.reals(fan_out * fan_in).reshape(fan_out, fan_in), r.reals(fan_out))
        (flag,) = r.unpack("<B")
        if flag:
            layer.bn_gamma = r.reals(fan_out)
            layer.bn_beta = r.reals(fan_out)
            layer.bn_mean = r.reals(fan_out)
            layer.bn_var = r.reals(fan_out)
        layers.append(layer)
    (t,) = r.unpack("<Q")
    (n_m,) = r.unpack("<Q")
    m = r.reals(n_m)
    (n_v,) = r.unpack("<Q")
    v = r.reals(n_v)
    if r.pos != len(r.raw):
        raise IntegrityError("trailing bytes after checkpoint payload")
    return Checkpoint(client_id, rnd, epoch, batch, sim_time, rng_state,
                      ModelParameters(layers), AdamState(m, v, t))


def _sort_key(name):
    match = _NAME.match(name)
    return tuple(int(g) for g in match.groups()[1:]) if match else (-1,)


class CheckpointStore:
    """Per-client checkpoint files, newest ``keep`` retained.

    With ``directory=None`` the encoded bytes are kept in memory instead of on
    disk; the byte format is the same either way.
    """

    def __init__(self, directory=None, keep=2):
        self.directory = Path(directory) if directory is not None else None
        self.keep = keep
        self._memory = {}
        self._locks = {}
        self._guard = threading.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def _lock(self, client_id):
        with self._guard:
            return self._locks.setdefault(client_id, threading.Lock())

    def names(self, client_id):
        if self.directory is None:
            names = list(self._memory.get(client_id, {}))
        else:
            prefix = f"ckpt_{client_id}_"
            names = [p.name for p in self.directory.glob(prefix + "*.bin") if _NAME.match(p.name)]
        return sorted(names, key=_sort_key)

    def _read_raw(self, client_id, name):
        if self.directory is None:
            return self._memory[client_id][name]
        return (self.directory / name).read_bytes()

    def _remove(self, client_id, name):
        if self.directory is None:
            del self._memory[client_id][name]
        else:
            (self.directory / name).unlink(missing_ok=True)

    def write(self, ckpt):
        raw = encode(ckpt)
        name = ckpt.filename
        with self._lock(ckpt.client_id):
            if self.directory is None:
                self._memory.setdefault(ckpt.client_id, {})[name] = raw
            else:
                fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".tmp_", suffix=".bin")
                try:
                    with os.fdopen(fd, "wb") as fh:
                        fh.write(raw)
                    os.replace(tmp, self.directory / name)
                except BaseException:
                    Path(tmp).unlink(missing_ok=True)
                    raise
            for old in self.names(ckpt.client_id)[:-self.keep]:
                self._remove(ckpt.client_id, old)
        return name

    def read_latest(self, client_id):
        with self._lock(client_id):
            for name in reversed(self.names(client_id)):
                try:
                    return decode(self._read_raw(client_id, name))
                except IntegrityError as exc:
                    log.warning("skipping checkpoint %s: %s", name, exc)
        raise CheckpointNotFound(f"no valid checkpoint for client {client_id}")

    def clear(self):
        if self.directory is None:
            self._memory.clear()
            return
        for p in self.directory.glob("ckpt_*.bin"):
            p.unlink(missing_ok=True)


def write_checkpoint(state, store):
    return store.write(state)


def read_checkpoint(store, client_id):
    return store.read_latest(client_id)
