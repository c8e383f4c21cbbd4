"""Self-describing binary checkpoints.

File layout: magic ``CMCK``, a little-endian uint32 format version, the
config digest as a length-prefixed ascii string, a uint32 array count,
then named float64 arrays (uint16 name length + utf-8 name, uint8 ndim,
uint32 dims, raw little-endian data).  Serialization order is canonical,
so a load -> save round trip is byte-identical.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from ..geometry import GeometryParams
from ..neural import OptimState

MAGIC = b"CMCK"
VERSION = 1


@dataclass
class Checkpoint:
    """Encoder weights, geometry, optimizer state and the loss log."""

    config_digest: str
    step: int
    theta: list  # [(W, b), ...]
    out_scale: float
    params: GeometryParams
    opt: OptimState
    loss_history: np.ndarray
    nonconv_history: np.ndarray
    extras: dict = field(default_factory=dict)  # named auxiliary arrays


def _array_items(ckpt):
    """Canonically ordered (name, float64 array) pairs."""
    meta = np.array([float(ckpt.step), ckpt.opt.lr, ckpt.opt.lr_geometry,
                     float(ckpt.opt.step), ckpt.out_scale,
                     float(len(ckpt.theta))])
    items = [("meta", meta),
             ("loss_history", np.asarray(ckpt.loss_history, dtype=float)),
             ("nonconv_history", np.asarray(ckpt.nonconv_history, dtype=float))]
    for layer, (W, b) in enumerate(ckpt.theta):
        items.append(("layer%d.W" % layer, W))
        items.append(("layer%d.b" % layer, b))
    items.append(("geometry.radii", ckpt.params.radii))
    items.append(("geometry.corners", ckpt.params.corners))
    if ckpt.params.color is not None:
        items.append(("geometry.color", ckpt.params.color))
    for name in sorted(ckpt.extras):
        items.append(("extra." + name, ckpt.extras[name]))
    return items


def checkpoint_bytes(ckpt):
    digest = ckpt.config_digest.encode("ascii")
    items = _array_items(ckpt)
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<H", len(digest)), digest,
             struct.pack("<I", len(items))]
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt, path):
    blob = checkpoint_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(blob)
    return path


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ValueError("truncated checkpoint at byte %d" % self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(blob, expect_digest=None):
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ValueError("unsupported checkpoint version %d (expected %d)"
                         % (version, VERSION))
    (dlen,) = r.unpack("<H")
    digest = r.take(dlen).decode("ascii")
    if expect_digest is not None and digest != expect_digest:
        raise ValueError(
            "config digest mismatch: checkpoint has %s, config is %s"
            % (digest, expect_digest))
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack("<%dI" % ndim)
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8")
        arrays[name] = data.reshape(shape).copy()
    if r.pos != len(blob):
        raise ValueError("trailing bytes after checkpoint payload")

    meta = arrays.pop("meta")
    n_layers = int(meta[5])
    theta = []
    for layer in range(n_layers):
        theta.append((arrays.pop("layer%d.W" % layer),
                      arrays.pop("layer%d.b" % layer)))
    params = GeometryParams(arrays.pop("geometry.radii"),
                            arrays.pop("geometry.corners"),
                            arrays.pop("geometry.color", None))
    opt = OptimState(lr=float(meta[1]), lr_geometry=float(meta[2]),
                     step=int(meta[3]))
    extras = {name[len("extra."):]: arr for name, arr in arrays.items()
              if name.startswith("extra.")}
    leftover = set(arrays) - {"loss_history", "nonconv_history"} - {
        "extra." + k for k in extras}
    if leftover:
        raise ValueError("unknown checkpoint arrays %s" % (sorted(leftover),))
    return Checkpoint(config_digest=digest, step=int(meta[0]), theta=theta,
                      out_scale=float(meta[4]), params=params, opt=opt,
                      loss_history=arrays["loss_history"],
                      nonconv_history=arrays["nonconv_history"],
                      extras=extras)


def load_checkpoint(path, expect_digest=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    return checkpoint_from_bytes(blob, expect_digest)
