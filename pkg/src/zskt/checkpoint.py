"""Binary checkpoint format for networks and raw tensor dumps.

Layout (all integers little-endian):

    magic   4 bytes  b"ZSKT"
    version u32      format version, currently 1
    digest  u32      FNV-1a hash of the spec text below
    slen    u32      spec text length
    spec    slen bytes of UTF-8 (NetSpec.canonical(), or a free-form tag
                     for raw tensor dumps)
    count   u32      record count
    records count times:
        nlen  u32, name nlen bytes UTF-8
        dtype u8  (0 = float32, 1 = float64)
        rank  u32, dims rank x u32
        data  raw little-endian values

Records default to float64 so save/load round trips are bit-identical. The
digest ties a checkpoint to the architecture it was written for; loading
into a different spec raises DigestMismatchError instead of silently
misassigning parameters.
"""

import struct

import numpy as np

from .errors import (BadMagicError, DigestMismatchError, TruncatedFileError,
                     VersionMismatchError)
from .nets import build_network, parse_netspec

MAGIC = b"ZSKT"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def fnv1a32(data):
    """32-bit FNV-1a over bytes."""
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def spec_digest(spec):
    return fnv1a32(spec.canonical().encode("utf-8"))


def save_tensors(path, records, spec_text=""):
    """Write named arrays in checkpoint format under a free-form spec tag."""
    spec_bytes = spec_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, fnv1a32(spec_bytes), len(spec_bytes)))
        fh.write(spec_bytes)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            arr = np.asarray(arr)
            if arr.dtype not in TAG_FOR:
                arr = arr.astype(np.float64)
            nbytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nbytes)))
            fh.write(nbytes)
            fh.write(struct.pack("<BI", TAG_FOR[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: expected {n} more bytes, got {len(buf)}")
    return buf


def load_tensors(path):
    """Read checkpoint-format tensors; returns (spec_text, ordered records)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != MAGIC:
            raise BadMagicError(f"{path}: not a ZSKT checkpoint")
        version, digest, slen = struct.unpack("<III", _read_exact(fh, 12, path))
        if version != VERSION:
            raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
        spec_bytes = _read_exact(fh, slen, path)
        if fnv1a32(spec_bytes) != digest:
            raise DigestMismatchError(f"{path}: spec digest 0x{digest:08x} does not "
                                      f"match the embedded spec text")
        count = struct.unpack("<I", _read_exact(fh, 4, path))[0]
        records = []
        for _ in range(count):
            nlen = struct.unpack("<I", _read_exact(fh, 4, path))[0]
            name = _read_exact(fh, nlen, path).decode("utf-8")
            tag, rank = struct.unpack("<BI", _read_exact(fh, 5, path))
            if tag not in DTYPE_TAGS:
                raise TruncatedFileError(f"{path}: unknown dtype tag {tag} in '{name}'")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path))
            dtype = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims)) * dtype.itemsize if rank else dtype.itemsize
            raw = _read_exact(fh, nbytes, path)
            records.append((name, np.frombuffer(raw, dtype=dtype).reshape(dims).copy()))
        if fh.read(1):
            raise TruncatedFileError(f"{path}: trailing bytes after declared records")
    return spec_bytes.decode("utf-8"), records


def save_checkpoint(net, path):
    """Persist a network: spec text plus parameters and running buffers."""
    save_tensors(path, net.state(), spec_text=net.spec.canonical())


def load_checkpoint(path, expect_spec=None, seed=0):
    """Rebuild a network from a checkpoint.

    expect_spec, when given, must digest-match the stored spec; mismatch is a
    DigestMismatchError. The seed only affects transient init values, which
    are overwritten by the stored state.
    """
    spec_text, records = load_tensors(path)
    if expect_spec is not None and expect_spec.canonical() != spec_text:
        raise DigestMismatchError(
            f"{path}: checkpoint spec digest 0x{fnv1a32(spec_text.encode()):08x} "
            f"!= expected 0x{spec_digest(expect_spec):08x}")
    spec = parse_netspec(spec_text)
    net = build_network(spec, seed)
    net.load_state(dict(records))
    return net
