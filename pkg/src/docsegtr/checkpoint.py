"""Binary checkpoints.

Layout (all integers unsigned 32-bit little-endian)::

    b"DSGT" | version | entry count | entries...

and each entry is ``name length | UTF-8 name | ndim | dims... | float32 LE data``.
Model parameters use their dotted names; optimiser state is stored under
``opt.iter`` and ``opt.velocity.<parameter name>``. Entry order is preserved,
so load followed by save reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, FormatError
from .nn import Module
from .training import OptimizerState

MAGIC = b"DSGT"
VERSION = 1
OPT_PREFIX = "opt."
VELOCITY_PREFIX = "opt.velocity."


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        a = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes(order="C"))
    return b"".join(out)


def loads(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    def fail(msg):
        raise FormatError(f"{source}: {msg}")

    if buf[:4] != MAGIC:
        fail("not a DSGT checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            fail("truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        fail(f"unsupported checkpoint version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            fail("truncated checkpoint")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            fail("entry name is not valid UTF-8")
        pos += nlen
        if name in entries:
            fail(f"duplicate entry {name!r}")
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I")
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if pos + size > len(buf):
            fail(f"truncated data for {name!r}")
        entries[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
        pos += size
    if pos != len(buf):
        fail(f"{len(buf) - pos} trailing bytes")
    return entries


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> dict[str, np.ndarray]:
    p = Path(path)
    try:
        buf = p.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {p}: {exc}") from None
    return loads(buf, str(p))


def collect(model: Module, opt: OptimizerState | None = None) -> dict[str, np.ndarray]:
    """Model parameters followed by optimiser state, in a stable order."""
    entries = {name: p.data for name, p in model.named_parameters()}
    if opt is not None:
        entries["opt.iter"] = np.array([opt.iter], dtype=np.float64)
        for name, _ in model.named_parameters():
            if name in opt.velocity:
                entries[VELOCITY_PREFIX + name] = opt.velocity[name]
    return entries


def restore(model: Module, entries: Mapping[str, np.ndarray], opt: OptimizerState | None = None) -> None:
    """Copy ``entries`` into ``model`` (and ``opt``); names and shapes must match exactly."""
    params = dict(model.named_parameters())
    stored = [k for k in entries if not k.startswith(OPT_PREFIX)]
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise ConfigError("checkpoint does not match the architecture; "
                          f"missing: {', '.join(missing) or '-'}; extra: {', '.join(extra) or '-'}")
    bad = [f"{k} {entries[k].shape} vs {params[k].shape}" for k in stored if entries[k].shape != params[k].shape]
    if bad:
        raise ConfigError("checkpoint shape mismatch: " + "; ".join(bad))
    for k in stored:
        params[k].data = entries[k].astype(np.float64)
        params[k].grad = None
    if opt is not None:
        opt.iter = int(entries["opt.iter"][0]) if "opt.iter" in entries else 0
        opt.velocity = {k[len(VELOCITY_PREFIX):]: v.astype(np.float64)
                        for k, v in entries.items() if k.startswith(VELOCITY_PREFIX)}
        unknown = sorted(set(opt.velocity) - set(params))
        if unknown:
            raise ConfigError(f"optimiser state for unknown parameters: {', '.join(unknown)}")
