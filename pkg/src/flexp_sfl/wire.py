"""Binary frames exchanged between clients and the server.

Frame layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"FPSF"
    4       1     version (u8)
    5       1     tag (u8)
    6       4     client_id (u32)
    10      8     step_id (u64)
    18      8     payload_len in bytes (u64)
    26      1     ndim (u8)
    27      4*n   dims (u32 each)
    ...           payload, element_size bytes per element (f4 or f8)

Every frame carries exactly one tensor. Parameter frames carry the flattened
concatenation of the sender's blocks (see :func:`flatten_params`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np

from .engine import BlockParams
from .errors import DecodeError, InputError

MAGIC = b"FPSF"
VERSION = 1
_FIXED = struct.Struct("<4sBBIQQB")
FIXED_HEADER_BYTES = _FIXED.size  # 27
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class Tag(IntEnum):
    ACT_UP = 1
    ACT_DOWN = 2
    GRAD_UP = 3
    GRAD_DOWN = 4
    ALIGN_PROBE = 5
    ALIGN_ACK = 6
    PARAM_UP = 7
    PARAM_DOWN = 8


PARAM_TAGS = frozenset({Tag.PARAM_UP, Tag.PARAM_DOWN})


class SessionKey(NamedTuple):
    client_id: int
    step_id: int


@dataclass(frozen=True, eq=False)
class Message:
    """One wire frame. The payload is cast to wire precision on construction."""

    tag: Tag
    client_id: int
    step_id: int
    payload: np.ndarray
    element_size: int = 4

    def __post_init__(self):
        if self.element_size not in _DTYPES:
            raise InputError(f"element_size must be 4 or 8, got {self.element_size}")
        arr = np.asarray(self.payload, dtype=np.float64)
        if self.element_size == 4:
            arr = arr.astype(np.float32).astype(np.float64)
        elif arr is self.payload:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "payload", arr)
        object.__setattr__(self, "tag", Tag(self.tag))

    @property
    def key(self) -> SessionKey:
        return SessionKey(self.client_id, self.step_id)

    @property
    def byte_size(self) -> int:
        return message_size(self)

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return (
            self.tag == other.tag
            and self.client_id == other.client_id
            and self.step_id == other.step_id
            # an empty tensor has no element width on the wire
            and (self.element_size == other.element_size or self.payload.size == 0)
            and self.payload.shape == other.payload.shape
            and self.payload.tobytes() == other.payload.tobytes()
        )

    __hash__ = None


def header_bytes(ndim: int) -> int:
    return FIXED_HEADER_BYTES + 4 * ndim


def message_size(msg: Message) -> int:
    """Encoded length of ``msg`` without encoding it."""
    return header_bytes(msg.payload.ndim) + msg.payload.size * msg.element_size


def encode_message(msg: Message) -> bytes:
    p = msg.payload
    body = p.astype(_DTYPES[msg.element_size]).tobytes(order="C")
    head = _FIXED.pack(MAGIC, VERSION, int(msg.tag), msg.client_id, msg.step_id, len(body), p.ndim)
    dims = struct.pack(f"<{p.ndim}I", *p.shape)
    return head + dims + body


def decode_message(data: bytes) -> Message:
    if len(data) < _FIXED.size:
        raise DecodeError(f"truncated header: need {_FIXED.size} bytes, got {len(data)}", len(data))
    magic, version, tag, client_id, step_id, payload_len, ndim = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 4)
    try:
        tag = Tag(tag)
    except ValueError:
        raise DecodeError(f"unknown tag {tag}", 5) from None
    off = _FIXED.size
    if len(data) < off + 4 * ndim:
        raise DecodeError(
            f"truncated dims: expected {off + 4 * ndim} bytes, got {len(data)}", len(data)
        )
    shape = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if n == 0:
        element_size = 4
        if payload_len != 0:
            raise DecodeError(f"payload_len {payload_len} for an empty tensor", 18)
    elif payload_len % n or payload_len // n not in _DTYPES:
        raise DecodeError(f"payload_len {payload_len} inconsistent with {n} elements", 18)
    else:
        element_size = payload_len // n
    expected = off + payload_len
    if len(data) != expected:
        raise DecodeError(f"frame length mismatch: expected {expected} bytes, got {len(data)}", off)
    payload = np.frombuffer(data, dtype=_DTYPES[element_size], count=n, offset=off)
    return Message(tag, client_id, step_id, payload.astype(np.float64).reshape(shape), element_size)


def flatten_params(blocks: Sequence[BlockParams]) -> np.ndarray:
    """Concatenate every parameter of ``blocks`` in declaration order."""
    parts = [p.ravel() for b in blocks for p in b.params.values()]
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten_params(vec: np.ndarray, template: Sequence[BlockParams]) -> list[BlockParams]:
    need = sum(b.param_count() for b in template)
    if need != len(vec):
        raise InputError(f"parameter vector has {len(vec)} elements, template needs {need}")
    out, off = [], 0
    for b in template:
        params = {}
        for name, p in b.params.items():
            params[name] = np.asarray(vec[off:off + p.size], dtype=np.float64).reshape(p.shape).copy()
            off += p.size
        out.append(b.replace(params))
    return out
