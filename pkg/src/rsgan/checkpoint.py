"""Binary checkpoint of a trained generator/discriminator pair.

Layout (little-endian): magic ``RSGN``, u32 version, u32 ``m, n, d, h``,
then row-major float64 arrays ``W_in, b_hidden, U_node, W_out, b_out, H,
P, Q`` and finally a u32 length followed by UTF-8 ``key=value`` lines.
A BPR checkpoint has ``h = 0`` and carries no generator arrays at all.
"""

import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .discriminator import DiscriminatorParams
from .errors import FormatError
from .generator import PARAM_ORDER, GeneratorParams

MAGIC = b"RSGN"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_LEN = struct.Struct("<I")


@dataclass
class Checkpoint:
    discriminator: DiscriminatorParams
    generator: Optional[GeneratorParams] = None
    config: Dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    @property
    def dims(self):
        h = self.generator.h if self.generator is not None else 0
        return self.discriminator.P.shape[0], self.discriminator.Q.shape[0], self.discriminator.d, h

    @property
    def master_seed(self) -> Optional[int]:
        value = self.config.get("master_seed")
        return int(value) if value is not None else None


def _shapes(m, n, d, h):
    gen = {"W_in": (m, h), "b_hidden": (h,), "U_node": (m, h), "W_out": (h, m), "b_out": (m,), "H": (m, n)}
    return gen, {"P": (m, d), "Q": (n, d)}


def _encode_config(config: Dict[str, str]) -> bytes:
    lines = []
    for key, value in config.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"config entry {key!r} cannot be serialized")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    m, n, d, h = ckpt.dims
    gen_shapes, disc_shapes = _shapes(m, n, d, h)
    parts = [_HEADER.pack(MAGIC, VERSION, m, n, d, h)]
    if ckpt.generator is not None:
        if ckpt.generator.m != m or ckpt.generator.n != n:
            raise ValueError("generator and discriminator disagree on m or n")
        for name in PARAM_ORDER:
            arr = getattr(ckpt.generator, name)
            assert arr.shape == gen_shapes[name], name
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for name in ("P", "Q"):
        arr = getattr(ckpt.discriminator, name)
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = _encode_config(ckpt.config)
    parts += [_LEN.pack(len(blob)), blob]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, m, n, d, h = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    gen_shapes, disc_shapes = _shapes(m, n, d, h)
    offset = _HEADER.size

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated checkpoint body")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset = end
        return arr.astype(np.float64)

    gen_arrays = {name: take(gen_shapes[name]) for name in PARAM_ORDER} if h > 0 else None
    P, Q = take(disc_shapes["P"]), take(disc_shapes["Q"])
    if offset + _LEN.size > len(data):
        raise FormatError(f"{path}: truncated config block")
    (length,) = _LEN.unpack_from(data, offset)
    offset += _LEN.size
    if offset + length != len(data):
        raise FormatError(f"{path}: config block length mismatch")
    try:
        text = data[offset:].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: config block is not UTF-8") from exc
    config = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed config line {line!r}")
        config[key] = value
    lam = float(config.get("lam", 0.001))
    disc = DiscriminatorParams(P, Q, lam)
    gen = None
    if gen_arrays is not None:
        gen = GeneratorParams(**gen_arrays, tau=float(config.get("tau", 0.2)),
                              q_corrupt=float(config.get("q_corrupt", 0.2)))
    return Checkpoint(disc, gen, config, version)
