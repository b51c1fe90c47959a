"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"AUPT"                 magic
    u32                     format version (1)
    u32 + bytes             metadata, UTF-8 JSON with sorted keys
    u32                     number of parameter entries
    entry*                  parameter tensors
    u32                     number of optimizer entries (0 when absent)
    entry*                  optimizer moment tensors, named "m/<param>" and "v/<param>"

    entry := u16 name length, UTF-8 name, u8 ndim, u32 * ndim dims,
             float32 payload (little-endian, row-major)

The file must be consumed exactly; trailing bytes are a format error.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .network import VGG13
from .optim import AdamState

MAGIC = b"AUPT"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class CheckpointData:
    metadata: dict
    tensors: dict
    optimizer: dict = field(default_factory=dict)
    # byte span (start, end) of every entry, keyed by name, for audits
    spans: dict = field(default_factory=dict)


def _entry_bytes(name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype=_F32)
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def encode_checkpoint(tensors, metadata=None, optimizer=None):
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(meta)), meta]
    parts.append(struct.pack("<I", len(tensors)))
    parts.extend(_entry_bytes(n, a) for n, a in tensors.items())
    optimizer = optimizer or {}
    parts.append(struct.pack("<I", len(optimizer)))
    parts.extend(_entry_bytes(n, a) for n, a in optimizer.items())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def entry(self):
        start = self.pos
        (n,) = self.unpack("<H", "entry name length")
        try:
            name = self.take(n, "entry name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", start) from None
        (ndim,) = self.unpack("<B", f"ndim of {name!r}")
        dims = self.unpack(f"<{ndim}I", f"dims of {name!r}")
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = self.take(count * 4, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=_F32).reshape(dims).astype(np.float32)
        return name, arr, (start, self.pos)


def decode_checkpoint(buf):
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}", meta_at) from None
    data = CheckpointData(metadata=metadata, tensors={})
    for section in (data.tensors, data.optimizer):
        (count,) = r.unpack("<I", "entry count")
        for _ in range(count):
            at = r.pos
            name, arr, span = r.entry()
            if name in section:
                raise FormatError(f"duplicate entry {name!r}", at)
            section[name] = arr
            data.spans[name if section is data.tensors else f"optimizer:{name}"] = span
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} unexpected trailing bytes", r.pos)
    return data


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def _atomic_write(path, payload):
    tmp = f"{path}.tmp-{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def save_checkpoint(net, path, metadata=None, optimizer_state=None):
    """Write ``net`` (and optionally an :class:`AdamState`) to ``path``.

    ``metadata`` is merged over the network's own metadata; the architecture
    keys needed to rebuild the network are always recorded.
    """
    meta = dict(net.metadata)
    meta.update(metadata or {})
    meta["architecture"] = net.architecture()
    opt = {}
    if optimizer_state is not None:
        s = optimizer_state
        meta["optimizer"] = {
            "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "step_count": s.step_count,
        }
        for name in net.parameters:
            if name in s.m:
                opt[f"m/{name}"] = s.m[name]
                opt[f"v/{name}"] = s.v[name]
    tensors = {n: t.data for n, t in net.parameters.items()}
    _atomic_write(path, encode_checkpoint(tensors, meta, opt))


def load_checkpoint(path, with_optimizer=False):
    """Rebuild the network stored at ``path``.

    Returns the network, or ``(network, AdamState | None)`` when
    ``with_optimizer`` is set. No network is returned if decoding fails.
    """
    data = read_checkpoint(path)
    arch = data.metadata.get("architecture")
    if not isinstance(arch, dict):
        raise FormatError("metadata lacks the architecture record")
    try:
        net = VGG13(arch["in_channels"], arch["num_outputs"], seed=0, width_multiplier=arch["width_multiplier"],
                    init=arch.get("init", "he_uniform"), dropout_scale=arch.get("dropout_scale", 1.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid architecture record: {exc}") from None
    try:
        net.load_state_dict(data.tensors)
    except ValueError as exc:
        raise FormatError(f"tensor entries do not match the architecture: {exc}") from None
    net.metadata = {k: v for k, v in data.metadata.items() if k not in ("architecture", "optimizer")}
    if not with_optimizer:
        return net
    state = None
    if "optimizer" in data.metadata:
        o = data.metadata["optimizer"]
        state = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step_count=o["step_count"])
        for key, arr in data.optimizer.items():
            kind, name = key.split("/", 1)
            (state.m if kind == "m" else state.v)[name] = arr
    return net, state
