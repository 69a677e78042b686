"""Round messages and their binary codec.

The uplink and downlink messages defined here are the only data that
crosses the client/server boundary.  The codec is a little-endian,
length-prefixed binary format; decoding uses ``np.frombuffer`` over the
immutable message bytes, so every decoded array is read-only and the two
sides can never share mutable state through a message.

Wire layout (all integers little-endian):

    message   := magic "FQ" | version u8 | type u8 | body
    uplink    := user_id i64 | num i64 | loss f64 | nflags u8 | flag*
                 | arr(user_emb) | arr(item_ids) | arr(item_grads)
                 | arr(grad_W) | arr(grad_a) | extra u8
                 | [arr(grad_W_item) | arr(grad_a_item)]
    downlink  := user_id i64 | round i64
                 | arr(neighbor_ids) | arr(neighbor_scores) | arr(neighbor_emb)
                 | shared
    shared    := leaky f64 | extra u8 | arr(W) | arr(a)
                 | [arr(W_item) | arr(a_item)] | arr(item_table)
    arr       := dtype u8 ('d'|'q') | ndim u8 | dim i64 * ndim | raw bytes
    flag      := len u16 | utf-8 bytes

A downlink may be transported as (header, shared) byte parts so the large
shared section is encoded once per cohort; the wire message is defined as
their concatenation and decodes identically either way.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError
from .model import AttentionParams

MAGIC = b"FQ"
VERSION = 1
TYPE_UPLINK = 1
TYPE_DOWNLINK = 2

_DTYPE_CODES = {np.dtype(np.float64): ord("d"), np.dtype(np.int64): ord("q")}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class UplinkMessage:
    """Client -> server: embedding value, perturbed gradients, weights."""

    user_id: int
    user_embedding: np.ndarray      # (d,)
    item_ids: np.ndarray            # (m,) int64
    item_grads: np.ndarray          # (m, d)
    grad_W: np.ndarray
    grad_a: np.ndarray
    num_interactions: int
    loss: float
    grad_W_item: np.ndarray | None = None
    grad_a_item: np.ndarray | None = None
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class DownlinkMessage:
    """Server -> client: neighbors plus the current global snapshot."""

    user_id: int
    round_idx: int
    neighbor_ids: np.ndarray        # (k,) int64
    neighbor_scores: np.ndarray     # (k,)
    neighbor_emb: np.ndarray        # (k, d)
    item_table: np.ndarray          # (n_items, d)
    params: AttentionParams
    item_params: AttentionParams | None = None


def _pack_array(parts: list, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise DataFormatError(f"unsupported dtype {arr.dtype} in message")
    parts.append(struct.pack("<BB", code, arr.ndim))
    parts.append(struct.pack(f"<{arr.ndim}q", *arr.shape) if arr.ndim else b"")
    parts.append(arr.tobytes())


def _read_array(buf: memoryview, off: int) -> tuple[np.ndarray, int]:
    code, ndim = struct.unpack_from("<BB", buf, off)
    off += 2
    shape = struct.unpack_from(f"<{ndim}q", buf, off)
    off += 8 * ndim
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise DataFormatError(f"unknown dtype code {code} in message")
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
    off += count * dtype.itemsize
    return arr, off


def _header(msg_type: int) -> bytes:
    return MAGIC + struct.pack("<BB", VERSION, msg_type)


def _check_header(buf: memoryview, expected_type: int) -> int:
    if bytes(buf[:2]) != MAGIC:
        raise DataFormatError("bad message magic")
    version, msg_type = struct.unpack_from("<BB", buf, 2)
    if version != VERSION:
        raise DataFormatError(f"unsupported message version {version}")
    if msg_type != expected_type:
        raise DataFormatError(f"expected message type {expected_type}, got {msg_type}")
    return 4


def encode_uplink(msg: UplinkMessage) -> bytes:
    parts: list[bytes] = [_header(TYPE_UPLINK)]
    parts.append(struct.pack("<qqdB", msg.user_id, msg.num_interactions,
                             msg.loss, len(msg.flags)))
    for flag in msg.flags:
        raw = flag.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    _pack_array(parts, msg.user_embedding)
    _pack_array(parts, msg.item_ids.astype(np.int64, copy=False))
    _pack_array(parts, msg.item_grads)
    _pack_array(parts, msg.grad_W)
    _pack_array(parts, msg.grad_a)
    extra = msg.grad_W_item is not None
    parts.append(struct.pack("<B", int(extra)))
    if extra:
        _pack_array(parts, msg.grad_W_item)
        _pack_array(parts, msg.grad_a_item)
    return b"".join(parts)


def decode_uplink(payload: bytes) -> UplinkMessage:
    buf = memoryview(payload)
    off = _check_header(buf, TYPE_UPLINK)
    user_id, num, loss, nflags = struct.unpack_from("<qqdB", buf, off)
    off += 25
    flags = []
    for _ in range(nflags):
        (flen,) = struct.unpack_from("<H", buf, off)
        off += 2
        flags.append(bytes(buf[off:off + flen]).decode("utf-8"))
        off += flen
    user_emb, off = _read_array(buf, off)
    item_ids, off = _read_array(buf, off)
    item_grads, off = _read_array(buf, off)
    grad_W, off = _read_array(buf, off)
    grad_a, off = _read_array(buf, off)
    (extra,) = struct.unpack_from("<B", buf, off)
    off += 1
    grad_W_item = grad_a_item = None
    if extra:
        grad_W_item, off = _read_array(buf, off)
        grad_a_item, off = _read_array(buf, off)
    return UplinkMessage(
        user_id=user_id, user_embedding=user_emb, item_ids=item_ids,
        item_grads=item_grads, grad_W=grad_W, grad_a=grad_a,
        num_interactions=num, loss=loss,
        grad_W_item=grad_W_item, grad_a_item=grad_a_item, flags=tuple(flags))


def encode_shared_snapshot(item_table: np.ndarray, params: AttentionParams,
                           item_params: AttentionParams | None = None) -> bytes:
    """Encode the per-round global section shared by every downlink."""
    parts: list[bytes] = [struct.pack("<dB", params.leaky_slope,
                                      int(item_params is not None))]
    _pack_array(parts, params.W)
    _pack_array(parts, params.a)
    if item_params is not None:
        _pack_array(parts, item_params.W)
        _pack_array(parts, item_params.a)
    _pack_array(parts, item_table)
    return b"".join(parts)


def encode_downlink_header(user_id: int, round_idx: int, neighbor_ids: np.ndarray,
                           neighbor_scores: np.ndarray,
                           neighbor_emb: np.ndarray) -> bytes:
    parts: list[bytes] = [_header(TYPE_DOWNLINK)]
    parts.append(struct.pack("<qq", user_id, round_idx))
    _pack_array(parts, neighbor_ids.astype(np.int64, copy=False))
    _pack_array(parts, np.asarray(neighbor_scores, dtype=np.float64))
    _pack_array(parts, np.asarray(neighbor_emb, dtype=np.float64))
    return b"".join(parts)


def encode_downlink(msg: DownlinkMessage) -> bytes:
    header = encode_downlink_header(msg.user_id, msg.round_idx, msg.neighbor_ids,
                                    msg.neighbor_scores, msg.neighbor_emb)
    shared = encode_shared_snapshot(msg.item_table, msg.params, msg.item_params)
    return header + shared


def decode_downlink(payload) -> DownlinkMessage:
    """Decode a downlink from bytes or from a sequence of byte parts."""
    if not isinstance(payload, (bytes, bytearray, memoryview)):
        payload = b"".join(payload)
    buf = memoryview(payload)
    off = _check_header(buf, TYPE_DOWNLINK)
    user_id, round_idx = struct.unpack_from("<qq", buf, off)
    off += 16
    neighbor_ids, off = _read_array(buf, off)
    neighbor_scores, off = _read_array(buf, off)
    neighbor_emb, off = _read_array(buf, off)
    leaky, extra = struct.unpack_from("<dB", buf, off)
    off += 9
    W, off = _read_array(buf, off)
    a, off = _read_array(buf, off)
    item_params = None
    if extra:
        Wi, off = _read_array(buf, off)
        ai, off = _read_array(buf, off)
        item_params = AttentionParams(W=Wi, a=ai, leaky_slope=leaky)
    item_table, off = _read_array(buf, off)
    return DownlinkMessage(
        user_id=user_id, round_idx=round_idx, neighbor_ids=neighbor_ids,
        neighbor_scores=neighbor_scores, neighbor_emb=neighbor_emb,
        item_table=item_table,
        params=AttentionParams(W=W, a=a, leaky_slope=leaky),
        item_params=item_params)
