"""Single-file checkpoint container.

Layout: 4-byte magic ``GHCK``, little-endian uint32 header length, a UTF-8 JSON
header, then the concatenated raw blobs. The header carries ``format_version``,
a ``kind`` tag, a JSON config snapshot, and one entry per blob with its key
(module path), dtype, shape and byte offset. Tensor blobs are stored as raw
little-endian arrays (float32 for parameters), so save -> load round-trips are
bit-exact. Writes go through a temp file and ``os.replace`` so a checkpoint is
never observed half-written.
"""

import json
import os
import tempfile

import numpy as np
import torch

from .errors import CheckpointError, CheckpointVersionError

MAGIC = b"GHCK"
FORMAT_VERSION = 1

# numpy dtype strings are already explicit about endianness ("<f4" etc.)
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<u1", "<u2"}

_TORCH_TO_NUMPY = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "<u1",
    torch.bool: "<u1",
}


def _to_blob(tensor):
    t = tensor.detach().cpu().contiguous()
    dtype = _TORCH_TO_NUMPY.get(t.dtype)
    if dtype is None:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    arr = t.numpy().astype(np.dtype(dtype), copy=False)
    return dtype, list(t.shape), arr.tobytes(), t.dtype is torch.bool


def save_container(path, kind, config, tensors, extra=None):
    """Write a checkpoint container.

    tensors: mapping key -> torch.Tensor. config/extra must be JSON-serializable.
    """
    entries = []
    payload = bytearray()
    for key, tensor in tensors.items():
        dtype, shape, raw, was_bool = _to_blob(tensor)
        entries.append(
            {
                "key": key,
                "dtype": dtype,
                "shape": shape,
                "offset": len(payload),
                "nbytes": len(raw),
                "bool": was_bool,
            }
        )
        payload.extend(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "extra": extra or {},
        "blobs": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(np.uint32(len(header_bytes)).astype("<u4").tobytes())
            f.write(header_bytes)
            f.write(bytes(payload))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path, expect_kind=None):
    """Read a container; returns (header dict, tensors dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint container")
        (header_len,) = np.frombuffer(f.read(4), dtype="<u4")
        header = json.loads(f.read(int(header_len)).decode("utf-8"))
        payload = f.read()
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise CheckpointError(
            f"{path}: checkpoint kind {header.get('kind')!r}, expected {expect_kind!r}"
        )
    tensors = {}
    for entry in header["blobs"]:
        if entry["dtype"] not in _ALLOWED_DTYPES:
            raise CheckpointError(f"{path}: unknown blob dtype {entry['dtype']}")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        t = torch.from_numpy(arr.copy())
        if entry.get("bool"):
            t = t.to(torch.bool)
        tensors[entry["key"]] = t
    return header, tensors


def state_dict_tensors(module, prefix=""):
    """state_dict as a plain key -> tensor mapping (parameters and buffers)."""
    return {prefix + k: v for k, v in module.state_dict().items()}


def checksum_of(module):
    """SHA-256 over the module's state_dict bytes (parameters and buffers)."""
    import hashlib

    digest = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        digest.update(key.encode())
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def load_state_into(module, tensors, prefix=""):
    state = {}
    for key, value in tensors.items():
        if key.startswith(prefix):
            state[key[len(prefix) :]] = value
    module.load_state_dict(state, strict=True)
