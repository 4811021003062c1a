"""Deterministic random streams.

Every stochastic choice in a simulation draws from a PCG64 generator keyed by
a 64-bit hash of (master seed, purpose tags...). Streams only ever produce
doubles (``Generator.random``), which keeps the full generator position in
the 32 bytes of PCG64 state + increment and makes checkpointing it exact.
"""

import hashlib
import struct

import numpy as np

_MASK128 = (1 << 128) - 1


def hash64(*keys):
    """Stable 64-bit hash of a tuple of ints and strings."""
    h = hashlib.blake2b(digest_size=8)
    for key in keys:
        if isinstance(key, str):
            raw = key.encode()
            h.update(b"s" + struct.pack("<I", len(raw)) + raw)
        else:
            h.update(b"i" + int(key).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def stream(*keys):
    return np.random.Generator(np.random.PCG64(hash64(*keys)))


def from_stream_id(stream_id):
    return np.random.Generator(np.random.PCG64(stream_id))


def pack_state(rng):
    """Serialize a PCG64 generator position to 32 little-endian bytes."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise TypeError("only PCG64 streams can be packed")
    if st["has_uint32"]:
        raise ValueError("generator holds a buffered 32-bit half-word and cannot be packed")
    inner = st["state"]
    return (inner["state"] & _MASK128).to_bytes(16, "little") + (
        inner["inc"] & _MASK128
    ).to_bytes(16, "little")


def unpack_state(raw):
    if len(raw) != 32:
        raise ValueError(f"expected 32 bytes of generator state, got {len(raw)}")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": int.from_bytes(raw[:16], "little"),
            "inc": int.from_bytes(raw[16:], "little"),
        },
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bg)
