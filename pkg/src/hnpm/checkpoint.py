"""Binary checkpoint format.

Layout, little-endian throughout::

    b"HNPM" | u32 version | u64 meta_len | meta (sorted-key JSON, utf-8)
    u32 n_tensors
    n_tensors * (u32 name_len | name | u32 ndim | ndim * u64 dim | f64 data)
    8-byte blake2b digest of every preceding byte

The digest is checked before anything else is parsed, so truncation and
bit flips both surface as :class:`IntegrityError`.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import IntegrityError, VersionError
from .model import ParamSet

MAGIC = b"HNPM"
VERSION = 1
DIGEST_SIZE = 8


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


def encode_checkpoint(meta: dict, tensors: dict, version: int = VERSION) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<IQ", version, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _digest(body)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint ends mid-record")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes):
    """Return ``(meta, tensors)``; raise on checksum, magic or version problems."""
    if len(data) < len(MAGIC) + 12 + DIGEST_SIZE:
        raise IntegrityError(f"checkpoint truncated ({len(data)} bytes)")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if _digest(body) != digest:
        raise IntegrityError("checkpoint checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise IntegrityError("not an hnpm checkpoint")
    version, meta_len = r.unpack("<IQ")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise IntegrityError("trailing bytes after tensor table")
    return meta, tensors


def _paramset(tensors: dict, prefix: str, names: list, trainable: bool) -> ParamSet:
    return ParamSet((n, Tensor(tensors[f"{prefix}/{n}"], trainable=trainable)) for n in names)


def save_checkpoint(ckpt, path) -> None:
    tensors = {}
    for prefix, ps in (("teacher", ckpt.teacher), ("student", ckpt.student)):
        for name, t in ps.items():
            tensors[f"{prefix}/{name}"] = t.values
    names = ckpt.teacher.names()
    for prefix, opt in (("opt", ckpt.opt), ("student_opt", ckpt.student_opt)):
        if opt is None:
            continue
        for name, m, v in zip(names, opt.m, opt.v):
            tensors[f"{prefix}.m/{name}"] = m
            tensors[f"{prefix}.v/{name}"] = v
    meta = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "names": names,
        "opt_step": ckpt.opt.step,
        "student_opt_step": None if ckpt.student_opt is None else ckpt.student_opt.step,
        "rng_state": ckpt.rng_state,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(meta, tensors))
    tmp.replace(path)


def load_checkpoint(path):
    from .trainer import Checkpoint, OptimizerState, TrainConfig

    meta, tensors = decode_checkpoint(Path(path).read_bytes())
    names = meta["names"]
    try:
        teacher = _paramset(tensors, "teacher", names, True)
        student = _paramset(tensors, "student", names, False)

        def opt(prefix, step):
            if step is None:
                return None
            return OptimizerState([tensors[f"{prefix}.m/{n}"] for n in names], [tensors[f"{prefix}.v/{n}"] for n in names], step)

        return Checkpoint(
            teacher=teacher,
            student=student,
            opt=opt("opt", meta["opt_step"]),
            config=TrainConfig.from_dict(meta["config"]),
            epoch=meta["epoch"],
            rng_state=meta["rng_state"],
            student_opt=opt("student_opt", meta["student_opt_step"]),
        )
    except KeyError as exc:
        raise IntegrityError(f"checkpoint is missing entry {exc}") from None
