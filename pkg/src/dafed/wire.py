"""Binary encoding for round messages and checkpoints.

Message layout: version byte, round u32, payload-kind byte, section count,
then per section a tag byte, an entry count, and entries encoded as
(name length u16, name bytes, rank u8, dims u32 each, float64 little-endian
data). Everything is little-endian and iterated in sorted-name order, so the
same content always serializes to the same bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .optim import ParamStore

WIRE_VERSION = 1
KIND_BROADCAST = 0
KIND_UPLOAD = 1

SECTION_PARAMS = 0
SECTION_GRADS = 1
SECTION_SCALARS = 2

CKPT_MAGIC = b"FCFEDCK1"


class WireError(ValueError):
    pass


def _encode_entries(entries: dict[str, np.ndarray]) -> bytes:
    chunks = [struct.pack("<I", len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        little = arr if arr.dtype.byteorder in ("<", "=", "|") else arr.astype("<f8")
        chunks.append(little.tobytes(order="C"))
    return b"".join(chunks)


def _decode_entries(buf: bytes, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off) if rank else ()
        off += 4 * rank
        n_vals = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n_vals, offset=off).reshape(dims)
        off += 8 * n_vals
        entries[name] = arr.astype(np.float64)  # own, writable copy
    return entries, off


@dataclass
class Message:
    round_idx: int
    kind: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    scalars: dict[str, float] = field(default_factory=dict)


def encode_message(msg: Message) -> bytes:
    sections = []
    if msg.params:
        sections.append((SECTION_PARAMS, msg.params))
    if msg.grads:
        sections.append((SECTION_GRADS, msg.grads))
    if msg.scalars:
        sections.append((SECTION_SCALARS, {k: np.asarray(v, dtype=np.float64)
                                           for k, v in msg.scalars.items()}))
    out = [struct.pack("<BIBB", WIRE_VERSION, msg.round_idx, msg.kind, len(sections))]
    for tag, entries in sections:
        out.append(struct.pack("<B", tag))
        out.append(_encode_entries(entries))
    return b"".join(out)


def decode_message(buf: bytes) -> Message:
    if len(buf) < 7:
        raise WireError("message truncated")
    version, round_idx, kind, n_sections = struct.unpack_from("<BIBB", buf, 0)
    if version != WIRE_VERSION:
        raise WireError(f"unsupported wire version {version}")
    off = 7
    msg = Message(round_idx=round_idx, kind=kind)
    for _ in range(n_sections):
        (tag,) = struct.unpack_from("<B", buf, off)
        off += 1
        entries, off = _decode_entries(buf, off)
        if tag == SECTION_PARAMS:
            msg.params = entries
        elif tag == SECTION_GRADS:
            msg.grads = entries
        elif tag == SECTION_SCALARS:
            msg.scalars = {k: float(v.reshape(())) for k, v in entries.items()}
        else:
            raise WireError(f"unknown section tag {tag}")
    return msg


def store_to_arrays(store: ParamStore) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in store.items()}


def arrays_to_store(arrays: dict[str, np.ndarray]) -> ParamStore:
    store = ParamStore()
    for name in sorted(arrays):
        store.add(name, arrays[name].copy())
    return store


def optimizer_digest(opt) -> bytes:
    """SHA-256 over the optimizer's moments and step count."""
    h = hashlib.sha256()
    h.update(struct.pack("<I", opt.step))
    for name in opt.names:
        h.update(name.encode("utf-8"))
        if name in opt.m:
            h.update(np.ascontiguousarray(opt.m[name]).tobytes())
            h.update(np.ascontiguousarray(opt.v[name]).tobytes())
    return h.digest()


def save_checkpoint(path, theta: ParamStore, round_idx: int, config_digest: bytes,
                    site_digests: dict[str, bytes]):
    """Header, config digest, round, per-site optimizer digests, parameters."""
    if len(config_digest) != 32:
        raise WireError("config digest must be 32 bytes")
    chunks = [CKPT_MAGIC, config_digest, struct.pack("<I", round_idx),
              struct.pack("<I", len(site_digests))]
    for site_id in sorted(site_digests):
        raw = site_id.encode("utf-8")
        digest = site_digests[site_id]
        if len(digest) != 32:
            raise WireError(f"optimizer digest for {site_id} must be 32 bytes")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(digest)
    chunks.append(_encode_entries(store_to_arrays(theta)))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[ParamStore, int, bytes, dict[str, bytes]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise WireError(f"{path}: not a checkpoint file")
    config_digest = buf[8:40]
    (round_idx,) = struct.unpack_from("<I", buf, 40)
    (n_sites,) = struct.unpack_from("<I", buf, 44)
    off = 48
    site_digests = {}
    for _ in range(n_sites):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        site_id = buf[off:off + nlen].decode("utf-8")
        off += nlen
        site_digests[site_id] = buf[off:off + 32]
        off += 32
    arrays, _ = _decode_entries(buf, off)
    return arrays_to_store(arrays), round_idx, config_digest, site_digests
