"""Binary containers for volumes and network checkpoints, plus raw import.

Volume files hold one multi-channel float32 image or one uint8 label map.
Checkpoint files hold the architecture description followed by every named
parameter and running statistic; loading one rebuilds the network and
restores each tensor bit-exactly.  All payloads are little-endian C-order.
"""

import struct

import numpy as np

from .config import ARCH_KEYS, KEY_PARSERS, format_value
from .network import ArchSpec, NetworkState

VOLUME_MAGIC = b"VSEG"
CHECKPOINT_MAGIC = b"VNET"
FORMAT_VERSION = 1

DTYPE_IMAGE = 0  # float32, (channels, depth, height, width)
DTYPE_LABELS = 1  # uint8, (depth, height, width)

_VOLUME_HEADER = struct.Struct("<4sHHH3I")  # magic, version, dtype, channels, extents
_CHECKPOINT_HEADER = struct.Struct("<4sH")  # magic, version
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

_TENSOR_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TENSOR_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


# -- volume files ----------------------------------------------------------


def write_volume(path, array):
    """Write an image (float (C, D, H, W)) or label map (integer (D, H, W))."""
    array = np.asarray(array)
    if array.ndim == 4 and np.issubdtype(array.dtype, np.floating):
        code = DTYPE_IMAGE
        channels = array.shape[0]
        extents = array.shape[1:]
        payload = np.ascontiguousarray(array, dtype="<f4")
    elif array.ndim == 3 and np.issubdtype(array.dtype, np.integer):
        if array.size and (array.min() < 0 or array.max() > 255):
            raise ValueError("label values must fit in uint8")
        code = DTYPE_LABELS
        channels = 1
        extents = array.shape
        payload = np.ascontiguousarray(array, dtype=np.uint8)
    else:
        raise ValueError(
            "expected a float (channels, depth, height, width) image or an "
            f"integer (depth, height, width) label map, got {array.dtype} "
            f"with shape {array.shape}"
        )
    if channels < 1:
        raise ValueError("image must have at least one channel")
    header = _VOLUME_HEADER.pack(
        VOLUME_MAGIC, FORMAT_VERSION, code, channels, *extents
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_volume(path):
    """Read a volume file back into a float32 image or uint8 label map."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _VOLUME_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, code, channels, d, h, w = _VOLUME_HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if code not in (DTYPE_IMAGE, DTYPE_LABELS):
        raise ValueError(f"{path}: unknown dtype code {code}")
    if code == DTYPE_LABELS and channels != 1:
        raise ValueError(f"{path}: label map must have one channel, got {channels}")
    itemsize = 4 if code == DTYPE_IMAGE else 1
    expected = channels * d * h * w * itemsize
    payload = data[_VOLUME_HEADER.size:]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected}"
        )
    if code == DTYPE_IMAGE:
        return (
            np.frombuffer(payload, dtype="<f4")
            .reshape(channels, d, h, w)
            .astype(np.float32)
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w).copy()


# -- checkpoint files ------------------------------------------------------


def _spec_block(spec):
    lines = [f"{key} = {format_value(getattr(spec, key))}" for key in ARCH_KEYS]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_spec_block(blob):
    kwargs = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in ARCH_KEYS:
            raise ValueError(f"checkpoint: unknown architecture key {key!r}")
        kwargs[key] = KEY_PARSERS[key](raw)
    missing = [key for key in ARCH_KEYS if key not in kwargs]
    if missing:
        raise ValueError(f"checkpoint: missing architecture keys {missing}")
    return ArchSpec(**kwargs)


def save_checkpoint(path, net):
    """Write the architecture plus every parameter and running statistic."""
    tensors = {**net.named_parameters(), **net.named_stats()}
    dtypes = {np.dtype(t.dtype) for t in tensors.values()}
    if not dtypes <= set(_TENSOR_CODES):
        raise ValueError(f"unsupported tensor dtypes {dtypes - set(_TENSOR_CODES)}")
    if len(dtypes) != 1:
        raise ValueError(f"mixed tensor dtypes {dtypes}")
    spec_blob = _spec_block(net.spec)
    parts = [
        _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, FORMAT_VERSION),
        _U32.pack(len(spec_blob)),
        spec_blob,
        _U32.pack(len(tensors)),
    ]
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        parts.append(_U16.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U8.pack(_TENSOR_CODES[np.dtype(tensor.dtype)]))
        parts.append(_U8.pack(tensor.ndim))
        parts.extend(_U32.pack(n) for n in tensor.shape)
        parts.append(np.ascontiguousarray(tensor).astype(tensor.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    """Sequential reader with truncation checks."""

    def __init__(self, data, label):
        self.data = data
        self.label = label
        self.pos = 0

    def take(self, count):
        if self.pos + count > len(self.data):
            raise ValueError(f"{self.label}: truncated file")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt):
        return fmt.unpack(self.take(fmt.size))

    def done(self):
        if self.pos != len(self.data):
            raise ValueError(
                f"{self.label}: {len(self.data) - self.pos} trailing bytes"
            )


def load_checkpoint(path):
    """Rebuild the network a checkpoint describes and restore its tensors."""
    with open(path, "rb") as fh:
        cursor = _Cursor(fh.read(), str(path))
    magic, version = cursor.unpack(_CHECKPOINT_HEADER)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    (spec_len,) = cursor.unpack(_U32)
    spec = _parse_spec_block(cursor.take(spec_len))
    (count,) = cursor.unpack(_U32)
    loaded = {}
    dtypes = set()
    for _ in range(count):
        (name_len,) = cursor.unpack(_U16)
        name = cursor.take(name_len).decode("utf-8")
        (dtype_code,) = cursor.unpack(_U8)
        if dtype_code not in _TENSOR_DTYPES:
            raise ValueError(f"{path}: unknown tensor dtype code {dtype_code}")
        dtype = _TENSOR_DTYPES[dtype_code]
        (rank,) = cursor.unpack(_U8)
        shape = tuple(cursor.unpack(_U32)[0] for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensor = np.frombuffer(cursor.take(size), dtype=dtype).reshape(shape)
        if name in loaded:
            raise ValueError(f"{path}: duplicate tensor {name!r}")
        loaded[name] = tensor
        dtypes.add(dtype)
    cursor.done()
    if len(dtypes) != 1:
        raise ValueError(f"{path}: mixed tensor dtypes {dtypes}")
    net = NetworkState.build(spec, seed=0, dtype=dtypes.pop().type)
    expected = {**net.named_parameters(), **net.named_stats()}
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise ValueError(f"{path}: tensor names differ (missing {missing}, extra {extra})")
    for name, target in expected.items():
        if loaded[name].shape != target.shape:
            raise ValueError(
                f"{path}: tensor {name!r} has shape {loaded[name].shape}, "
                f"expected {target.shape}"
            )
        target[...] = loaded[name]
    return net


# -- raw import ------------------------------------------------------------

_SIDECAR_KEYS = ("dtype", "channels", "extents")


def import_raw(raw_path, sidecar_path):
    """Read a bare little-endian array described by a key = value sidecar.

    The sidecar needs ``dtype`` (float32 or uint8) and ``extents`` (three
    comma-separated sizes); float32 images may add ``channels`` (default 1).
    """
    fields = {}
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(
                    f"{sidecar_path} line {lineno}: expected key = value"
                )
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _SIDECAR_KEYS:
                raise ValueError(f"{sidecar_path} line {lineno}: unknown key {key!r}")
            if key in fields:
                raise ValueError(f"{sidecar_path} line {lineno}: duplicate key {key!r}")
            fields[key] = raw
    for key in ("dtype", "extents"):
        if key not in fields:
            raise ValueError(f"{sidecar_path}: missing key {key!r}")
    extents = tuple(int(v.strip()) for v in fields["extents"].split(","))
    if len(extents) != 3 or any(n < 1 for n in extents):
        raise ValueError(f"{sidecar_path}: extents must be three positive sizes")
    channels = int(fields.get("channels", "1"))
    if channels < 1:
        raise ValueError(f"{sidecar_path}: channels must be >= 1")
    with open(raw_path, "rb") as fh:
        data = fh.read()
    kind = fields["dtype"]
    if kind == "float32":
        expected = channels * int(np.prod(extents)) * 4
        if len(data) != expected:
            raise ValueError(
                f"{raw_path}: holds {len(data)} bytes, expected {expected}"
            )
        return (
            np.frombuffer(data, dtype="<f4")
            .reshape((channels,) + extents)
            .astype(np.float32)
        )
    if kind == "uint8":
        if channels != 1:
            raise ValueError(f"{sidecar_path}: uint8 label maps are single-channel")
        expected = int(np.prod(extents))
        if len(data) != expected:
            raise ValueError(
                f"{raw_path}: holds {len(data)} bytes, expected {expected}"
            )
        return np.frombuffer(data, dtype=np.uint8).reshape(extents).copy()
    raise ValueError(f"{sidecar_path}: dtype must be float32 or uint8, got {kind!r}")
