"""Binary dataset (APTDS) and checkpoint (APTCK) formats.

Both are little-endian throughout, versioned, and written atomically
(temporary file in the target directory, then ``os.replace``).

APTDS layout::

    "APTDS1" | u16 version
    u32 n_samples | u8 dim | u8 d_a | u8 d_z
    u8 n_scalars | n_scalars x (u16 len, utf-8 name)
    per sample:
      u8 mode (0 static, 1 adaptive) | u16 n_times | f32 times[n_times]
      static:   u32 n | f32 coords[n*dim] | f32 features[n*d_a]
                f32 scalars[n_scalars] | f32 fields[n_times*n*d_z]
      adaptive: f32 scalars[n_scalars]
                n_times x (u32 n | f32 coords | f32 features | f32 fields[n*d_z])
      u32 len | utf-8 "key=value" lines

APTCK layout::

    "APTCK1" | u16 version
    u32 len | utf-8 JSON config echo
    u32 len | utf-8 JSON normalization stats keyed by dataset id
    u32 len | utf-8 JSON run state (step counter, epoch, ...)
    u32 n_params | entries
    u32 n_opt    | entries (optimizer buffers)
    u32 crc32 of everything before it

    entry: u16 len | utf-8 name | u8 dtype (0 f32, 1 f64) | u8 rank
           | u32 shape[rank] | payload
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import os
from pathlib import Path
import struct
import tempfile
import zlib

import numpy as np

from .errors import (
    ChecksumError,
    CountMismatchError,
    MagicError,
    SchemaError,
    TruncationError,
    VersionError,
)
from .geometry import PointCloudSample

DS_MAGIC = b"APTDS1"
DS_VERSION = 1
CK_MAGIC = b"APTCK1"
CK_VERSION = 1
_F4 = np.dtype("<f4")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def atomic_write(path, payload):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Writer:
    def __init__(self):
        self.parts = []

    def pack(self, fmt, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def text(self, s, width="H"):
        b = s.encode("utf-8")
        self.pack(width, len(b))
        self.parts.append(b)

    def floats(self, a, dtype=_F4):
        self.parts.append(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def bytes(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncationError(f"file ends inside {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what, width="H"):
        (n,) = self.unpack(width, what + " length")
        return self.take(n, what).decode("utf-8")

    def floats(self, count, what, dtype=_F4):
        return np.frombuffer(self.take(count * dtype.itemsize, what), dtype=dtype).astype(float)


# -- datasets -------------------------------------------------------------

@dataclass
class AptdsFile:
    samples: list
    dim: int
    d_a: int
    d_z: int
    scalar_names: tuple = ()
    version: int = DS_VERSION


def _metadata_text(meta):
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in v:
            raise SchemaError(f"metadata entry {k!r} cannot be encoded as a key=value line")
        lines.append(f"{k}={v}")
    return "\n".join(lines)


def write_dataset(path, samples, scalar_names=None, dim=None, d_a=None, d_z=None):
    """Write samples to ``path``; the header schema defaults to the first sample's."""
    samples = list(samples)
    if samples:
        first = samples[0]
        dim = first.dim if dim is None else dim
        d_a = first.d_a if d_a is None else d_a
        d_z = first.d_z if d_z is None else d_z
        scalar_names = tuple(sorted(first.scalars)) if scalar_names is None else tuple(scalar_names)
    if None in (dim, d_a, d_z):
        raise SchemaError("an empty dataset needs explicit dim, d_a and d_z")
    scalar_names = tuple(scalar_names or ())
    w = _Writer()
    w.parts.append(DS_MAGIC)
    w.pack("H", DS_VERSION)
    w.pack("IBBB", len(samples), dim, d_a, d_z)
    w.pack("B", len(scalar_names))
    for name in scalar_names:
        w.text(name)
    for i, s in enumerate(samples):
        if (s.dim, s.d_a, s.d_z) != (dim, d_a, d_z) or set(s.scalars) != set(scalar_names):
            raise SchemaError(
                f"sample {i} schema (dim={s.dim}, d_a={s.d_a}, d_z={s.d_z}, scalars={sorted(s.scalars)}) "
                f"differs from header (dim={dim}, d_a={d_a}, d_z={d_z}, scalars={list(scalar_names)})"
            )
        w.pack("BH", 0 if s.mesh_mode == "static" else 1, s.n_times)
        w.floats(s.times)
        sc = [s.scalars[k] for k in scalar_names]
        if s.mesh_mode == "static":
            w.pack("I", s.coords.shape[0])
            w.floats(s.coords)
            w.floats(s.features)
            w.floats(sc)
            w.floats(s.fields)
        else:
            w.floats(sc)
            for c, f, z in zip(s.coords, s.features, s.fields):
                w.pack("I", c.shape[0])
                w.floats(c)
                w.floats(f)
                w.floats(z)
        w.text(_metadata_text(s.metadata), "I")
    atomic_write(path, w.bytes())


def _check_header(r, magic, version, kind):
    got = r.buf[:len(magic)]
    if got != magic:
        raise MagicError(f"not an {kind} file: magic {got!r}, expected {magic!r}", 0)
    r.pos = len(magic)
    (v,) = r.unpack("H", "version")
    if v != version:
        raise VersionError(f"unsupported {kind} version {v} (this reader knows {version})", len(magic))


def read_dataset(path):
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    _check_header(r, DS_MAGIC, DS_VERSION, "APTDS")
    n_samples, dim, d_a, d_z = r.unpack("IBBB", "header")
    (n_sc,) = r.unpack("B", "scalar count")
    names = tuple(r.text("scalar name") for _ in range(n_sc))
    samples = []
    for i in range(n_samples):
        start = r.pos
        mode, n_times = r.unpack("BH", f"sample {i} header")
        if mode not in (0, 1):
            raise CountMismatchError(f"sample {i}: mesh mode {mode} is neither 0 nor 1", start)
        times = r.floats(n_times, f"sample {i} times")
        if mode == 0:
            (n,) = r.unpack("I", f"sample {i} node count")
            coords = r.floats(n * dim, f"sample {i} coords").reshape(n, dim)
            feats = r.floats(n * d_a, f"sample {i} features").reshape(n, d_a)
            sc = r.floats(n_sc, f"sample {i} scalars")
            fields = r.floats(n_times * n * d_z, f"sample {i} fields").reshape(n_times, n, d_z)
        else:
            sc = r.floats(n_sc, f"sample {i} scalars")
            coords, feats, fields = [], [], []
            for k in range(n_times):
                (n,) = r.unpack("I", f"sample {i} snapshot {k} node count")
                coords.append(r.floats(n * dim, f"sample {i} snapshot {k} coords").reshape(n, dim))
                feats.append(r.floats(n * d_a, f"sample {i} snapshot {k} features").reshape(n, d_a))
                fields.append(r.floats(n * d_z, f"sample {i} snapshot {k} fields").reshape(n, d_z))
        text = r.text(f"sample {i} metadata", "I")
        meta = dict(line.split("=", 1) for line in text.split("\n") if line)
        samples.append(PointCloudSample(coords, feats, times, fields, dict(zip(names, sc)),
                                        "static" if mode == 0 else "adaptive", meta))
    if r.pos != len(buf):
        raise CountMismatchError(
            f"header declares {n_samples} samples but {len(buf) - r.pos} bytes follow the last one", r.pos
        )
    return AptdsFile(samples, dim, d_a, d_z, names)


# -- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    params: dict
    stats: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)


def _write_entries(w, entries):
    w.pack("I", len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float64)
        w.text(name)
        w.pack("BB", _TAGS[arr.dtype], arr.ndim)
        w.pack(f"{arr.ndim}I", *arr.shape)
        w.floats(arr, _DTYPES[_TAGS[arr.dtype]])


def _read_entries(r, what):
    (n,) = r.unpack("I", f"{what} count")
    out = {}
    for _ in range(n):
        name = r.text(f"{what} name")
        tag, rank = r.unpack("BB", f"{what} {name} header")
        if tag not in _DTYPES:
            raise CountMismatchError(f"{what} {name}: unknown dtype tag {tag}", r.pos - 2)
        shape = r.unpack(f"{rank}I", f"{what} {name} shape")
        dt = _DTYPES[tag]
        count = int(np.prod(shape, dtype=np.int64))
        raw = r.take(count * dt.itemsize, f"{what} {name} payload")
        out[name] = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(shape)
    return out


def _json(obj):
    return json.dumps(obj, sort_keys=True, default=_jsonable)


def _jsonable(x):
    if hasattr(x, "to_dict"):
        return x.to_dict()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def save_checkpoint(path, model, stats=None, config=None, state=None, optimizer=None):
    """Write ``model``'s parameters with a config echo and per-dataset stats.

    ``optimizer`` is a mapping of named buffers (see ``Optimizer.state_dict``).
    """
    cfg = dict(config or {})
    cfg.setdefault("model", model.cfg.to_dict())
    w = _Writer()
    w.parts.append(CK_MAGIC)
    w.pack("H", CK_VERSION)
    w.text(_json(cfg), "I")
    w.text(_json(stats or {}), "I")
    w.text(_json(state or {}), "I")
    _write_entries(w, model.state_dict())
    _write_entries(w, dict(optimizer or {}))
    body = w.bytes()
    atomic_write(path, body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path):
    buf = Path(path).read_bytes()
    if len(buf) < len(CK_MAGIC) + 6:
        raise TruncationError("checkpoint too short", len(buf))
    r = _Reader(buf[:-4])
    _check_header(r, CK_MAGIC, CK_VERSION, "APTCK")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise ChecksumError("checkpoint checksum mismatch; the file is corrupted", len(buf) - 4)
    config = json.loads(r.text("config", "I"))
    stats = json.loads(r.text("stats", "I"))
    state = json.loads(r.text("state", "I"))
    params = _read_entries(r, "parameter")
    opt = _read_entries(r, "optimizer buffer")
    if r.pos != len(r.buf):
        raise CountMismatchError("trailing bytes after the optimizer section", r.pos)
    return Checkpoint(config, params, stats, state, opt)


def load_checkpoint(path, model=None):
    """Read a checkpoint and, if given, load its parameters into ``model``.

    Without a model one is built from the echoed config. A skeleton whose
    parameter names or shapes differ raises ``SchemaError`` listing the
    differences.
    """
    from .model import APT, ModelConfig

    ck = read_checkpoint(path)
    if model is None:
        model = APT(ModelConfig.from_dict(ck.config["model"]))
    own = {k: v.shape for k, v in model.state_dict().items()}
    found = {k: v.shape for k, v in ck.params.items()}
    if own != found:
        diff = [f"missing in checkpoint: {k}" for k in sorted(set(own) - set(found))]
        diff += [f"unexpected in checkpoint: {k}" for k in sorted(set(found) - set(own))]
        diff += [f"{k}: model {own[k]} vs checkpoint {found[k]}" for k in sorted(set(own) & set(found)) if own[k] != found[k]]
        raise SchemaError("checkpoint does not match the model: " + "; ".join(diff))
    model.load_state_dict(ck.params)
    return model, ck
