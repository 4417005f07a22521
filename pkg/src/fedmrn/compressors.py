"""Uplink codecs and their byte-exact payload format.

Wire layout (little-endian)::

    offset  size  field
    0       1     codec id
    1       1     format version
    2       8     d (uint64, length of the decoded vector)
    10      8     seed (uint64; 0 for codecs without shared randomness)
    18      2     scalar count n (uint16)
    20      8n    scalars (float64)
    20+8n   ...   body

Bit-packed bodies are LSB-first within each byte. Bodies per codec:

* ``none``: d float32 values (the dense fp32 baseline)
* ``mrn_binary`` / ``mrn_signed``: ceil(d/8) mask bytes, no scalars
* ``sign_stochastic``: ceil(d/8) sign bytes, scalars (alpha,)
* ``topk``: k records of (uint32 index, float64 value), indices ascending
* ``terngrad``: ceil(2d/8) bytes of 2-bit codes (0: zero, 1: +s, 2: -s), scalars (s,)
* ``drive``: ceil(p/8) sign bytes where p is d rounded up to a power of two,
  scalars (alpha, rotation flag)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .masking import MaskVector
from .noise import NoiseSpec, generate_noise
from .rng import MASK64, RngState, rng_two_point, rng_unit

FORMAT_VERSION = 1
_HEADER = struct.Struct("<BBQQH")
HEADER_BYTES = _HEADER.size
_TOPK_RECORD = np.dtype([("index", "<u4"), ("value", "<f8")])
TOPK_RECORD_BYTES = _TOPK_RECORD.itemsize  # 12
DRIVE_STREAM = 0x4452495645  # "DRIVE"
DEFAULT_TOPK_RATIO = 0.03


class CodecId(IntEnum):
    none = 0
    mrn_binary = 1
    mrn_signed = 2
    sign_stochastic = 3
    topk = 4
    terngrad = 5
    drive = 6

    @classmethod
    def parse(cls, name: str | CodecId) -> CodecId:
        if isinstance(name, CodecId):
            return name
        try:
            return cls[name]
        except KeyError:
            raise ValueError(f"unknown codec {name!r}; choose from {[c.name for c in cls]}") from None

    @property
    def is_mrn(self) -> bool:
        return self in (CodecId.mrn_binary, CodecId.mrn_signed)

    @property
    def mask_mode(self) -> str:
        if not self.is_mrn:
            raise ValueError(f"{self.name} is not a mask codec")
        return "binary" if self is CodecId.mrn_binary else "signed"


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class Payload:
    codec: CodecId
    dim: int
    seed: int = 0
    scalars: tuple[float, ...] = ()
    body: bytes = b""

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(int(self.codec), FORMAT_VERSION, self.dim, self.seed & MASK64,
                            len(self.scalars))
        return head + struct.pack(f"<{len(self.scalars)}d", *self.scalars) + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> Payload:
        if len(data) < HEADER_BYTES:
            raise DecodeError(f"payload of {len(data)} bytes is shorter than the header")
        codec_id, version, dim, seed, n_scalars = _HEADER.unpack_from(data)
        try:
            codec = CodecId(codec_id)
        except ValueError:
            raise DecodeError(f"unknown codec id {codec_id}") from None
        if version != FORMAT_VERSION:
            raise DecodeError(f"unsupported format version {version}")
        end = HEADER_BYTES + 8 * n_scalars
        if len(data) < end:
            raise DecodeError("payload truncated inside the scalar block")
        scalars = struct.unpack_from(f"<{n_scalars}d", data, HEADER_BYTES)
        payload = cls(codec, dim, seed, tuple(scalars), bytes(data[end:]))
        payload.validate()
        return payload

    def validate(self) -> None:
        want_scalars = {
            CodecId.none: 0, CodecId.mrn_binary: 0, CodecId.mrn_signed: 0,
            CodecId.sign_stochastic: 1, CodecId.topk: 0, CodecId.terngrad: 1, CodecId.drive: 2,
        }[self.codec]
        if self.dim < 1:
            raise DecodeError("dimension must be positive")
        if len(self.scalars) != want_scalars:
            raise DecodeError(f"{self.codec.name} expects {want_scalars} scalars, got {len(self.scalars)}")
        if self.codec is CodecId.topk:
            if len(self.body) % TOPK_RECORD_BYTES:
                raise DecodeError("top-k body is not a whole number of records")
            k = len(self.body) // TOPK_RECORD_BYTES
            if not 1 <= k <= self.dim:
                raise DecodeError(f"top-k record count {k} outside [1, {self.dim}]")
            return
        want = expected_body_bytes(self.codec, self.dim)
        if len(self.body) != want:
            raise DecodeError(f"{self.codec.name} body has {len(self.body)} bytes, expected {want}")


def padded_dim(d: int) -> int:
    return 1 << max(0, (d - 1).bit_length())


def expected_body_bytes(codec: CodecId, d: int, k: int | None = None) -> int:
    codec = CodecId.parse(codec)
    if codec is CodecId.none:
        return 4 * d
    if codec in (CodecId.mrn_binary, CodecId.mrn_signed, CodecId.sign_stochastic):
        return math.ceil(d / 8)
    if codec is CodecId.terngrad:
        return math.ceil(2 * d / 8)
    if codec is CodecId.drive:
        return math.ceil(padded_dim(d) / 8)
    if k is None:
        raise ValueError("top-k size needs k")
    return TOPK_RECORD_BYTES * k


def payload_bytes(p: Payload) -> int:
    """Serialized size of ``p`` in bytes."""
    return HEADER_BYTES + 8 * len(p.scalars) + len(p.body)


def dense_fp32_bytes(d: int) -> int:
    """Body size of an uncompressed fp32 update."""
    return 4 * d


def pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=bool), bitorder="little").tobytes()


def unpack_bits(body: bytes, n: int) -> np.ndarray:
    raw = np.frombuffer(body, dtype=np.uint8)
    return np.unpackbits(raw, count=n, bitorder="little").astype(bool)


# dense


def encode_dense(x: np.ndarray) -> Payload:
    return Payload(CodecId.none, x.size, body=np.asarray(x, dtype="<f4").tobytes())


# masked random noise


def encode_mask(mask: MaskVector, seed: int) -> Payload:
    codec = CodecId.mrn_binary if mask.mode == "binary" else CodecId.mrn_signed
    return Payload(codec, len(mask), seed & MASK64, (), pack_bits(mask.bits))


def decode_mask(p: Payload) -> MaskVector:
    if not p.codec.is_mrn:
        raise DecodeError(f"{p.codec.name} payload carries no mask")
    p.validate()
    return MaskVector(unpack_bits(p.body, p.dim), p.codec.mask_mode)


def decode_to_update(p: Payload, noise_spec: NoiseSpec) -> np.ndarray:
    """Regenerate the noise from the payload seed and apply the transmitted mask."""
    mask = decode_mask(p)
    return mask.apply(generate_noise(noise_spec, p.seed, p.dim))


# stochastic sign


def compress_sign(x: np.ndarray, rng: RngState) -> Payload:
    """Two-point stochastic binarisation to +-alpha with alpha = mean |x|.

    Unbiased for every coordinate with |x_i| <= alpha.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot compress an empty vector")
    alpha = float(np.mean(np.abs(x)))
    if alpha == 0.0:
        bits = np.zeros(x.size, dtype=bool)
    else:
        p = np.clip((x + alpha) / (2.0 * alpha), 0.0, 1.0)
        bits = rng_unit(rng, x.size) < p
    return Payload(CodecId.sign_stochastic, x.size, 0, (alpha,), pack_bits(bits))


def _decode_sign(p: Payload) -> np.ndarray:
    return p.scalars[0] * (2.0 * unpack_bits(p.body, p.dim) - 1.0)


# top-k


def topk_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest |x_i|, ties to the lower index, returned ascending."""
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k <= x.size:
        raise ValueError(f"k={k} outside [1, {x.size}]")
    order = np.lexsort((np.arange(x.size), -np.abs(x)))
    return np.sort(order[:k])


def compress_topk(x: np.ndarray, k: int) -> Payload:
    x = np.asarray(x, dtype=np.float64)
    idx = topk_indices(x, k)
    rec = np.empty(k, dtype=_TOPK_RECORD)
    rec["index"] = idx
    rec["value"] = x[idx]
    return Payload(CodecId.topk, x.size, body=rec.tobytes())


def _decode_topk(p: Payload) -> np.ndarray:
    rec = np.frombuffer(p.body, dtype=_TOPK_RECORD)
    if np.any(rec["index"] >= p.dim):
        raise DecodeError("top-k index out of range")
    out = np.zeros(p.dim)
    out[rec["index"].astype(np.int64)] = rec["value"]
    return out


def topk_count(d: int, ratio: float = DEFAULT_TOPK_RATIO) -> int:
    return min(d, max(1, math.ceil(d * ratio)))


# TernGrad


def compress_terngrad(x: np.ndarray, rng: RngState) -> Payload:
    """Ternarise to {-s, 0, s} with s = max |x|; keeps x_i with probability |x_i|/s."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot compress an empty vector")
    s = float(np.max(np.abs(x)))
    codes = np.zeros(x.size, dtype=np.uint8)
    if s > 0:
        keep = rng_unit(rng, x.size) < np.abs(x) / s
        codes[keep & (x > 0)] = 1
        codes[keep & (x < 0)] = 2
    bits = np.empty(2 * x.size, dtype=bool)
    bits[0::2] = codes & 1
    bits[1::2] = codes >> 1
    return Payload(CodecId.terngrad, x.size, 0, (s,), pack_bits(bits))


def _decode_terngrad(p: Payload) -> np.ndarray:
    bits = unpack_bits(p.body, 2 * p.dim)
    codes = bits[0::2].astype(np.uint8) | (bits[1::2].astype(np.uint8) << 1)
    if np.any(codes == 3):
        raise DecodeError("invalid ternary code 3")
    out = np.zeros(p.dim)
    out[codes == 1] = p.scalars[0]
    out[codes == 2] = -p.scalars[0]
    return out


# DRIVE


def fwht(v: np.ndarray) -> np.ndarray:
    """Unnormalised fast Walsh-Hadamard transform (Sylvester ordering)."""
    v = np.array(v, dtype=np.float64)
    n = v.size
    if n & (n - 1):
        raise ValueError("length must be a power of two")
    h = 1
    while h < n:
        v = v.reshape(-1, 2, h)
        a, b = v[:, 0, :], v[:, 1, :]
        v = np.stack([a + b, a - b], axis=1)
        h *= 2
    return v.reshape(n)


def _rotation_signs(seed: int, n: int) -> np.ndarray:
    return rng_two_point(RngState(seed & MASK64, DRIVE_STREAM), n, 1.0)


def rotate(x: np.ndarray, seed: int) -> np.ndarray:
    """Randomised Hadamard rotation H D x / sqrt(n); len(x) must be a power of two."""
    x = np.asarray(x, dtype=np.float64)
    return fwht(_rotation_signs(seed, x.size) * x) / math.sqrt(x.size)


def unrotate(y: np.ndarray, seed: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return _rotation_signs(seed, y.size) * fwht(y) / math.sqrt(y.size)


def compress_drive(x: np.ndarray, seed: int, rotate_input: bool = True) -> Payload:
    """Rotated 1-bit quantisation with the least-squares scale alpha = ||Rx||_1 / p.

    ``rotate_input=False`` uses R = I (test hook); the flag travels as the
    second scalar so the decoder follows it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot compress an empty vector")
    n = padded_dim(x.size)
    xp = np.zeros(n)
    xp[: x.size] = x
    y = rotate(xp, seed) if rotate_input else xp
    alpha = float(np.abs(y).sum() / n)
    return Payload(CodecId.drive, x.size, seed & MASK64, (alpha, 1.0 if rotate_input else 0.0),
                   pack_bits(y >= 0))


def _decode_drive(p: Payload) -> np.ndarray:
    n = padded_dim(p.dim)
    alpha, flag = p.scalars
    signs = 2.0 * unpack_bits(p.body, n) - 1.0
    y = alpha * signs
    xp = unrotate(y, p.seed) if flag else y
    return xp[: p.dim]


# dispatch


def decompress(p: Payload, noise_spec: NoiseSpec | None = None) -> np.ndarray:
    """Decode any payload to a dense float64 update."""
    p.validate()
    if p.codec is CodecId.none:
        return np.frombuffer(p.body, dtype="<f4").astype(np.float64)
    if p.codec.is_mrn:
        if noise_spec is None:
            raise ValueError("mask payloads need the shared noise spec to decode")
        return decode_to_update(p, noise_spec)
    if p.codec is CodecId.sign_stochastic:
        return _decode_sign(p)
    if p.codec is CodecId.topk:
        return _decode_topk(p)
    if p.codec is CodecId.terngrad:
        return _decode_terngrad(p)
    return _decode_drive(p)


def compress_update(x: np.ndarray, codec: CodecId, seed: int,
                    topk_ratio: float = DEFAULT_TOPK_RATIO) -> Payload:
    """Post-training compression of a dense update; ``seed`` feeds the codec's randomness."""
    codec = CodecId.parse(codec)
    if codec is CodecId.none:
        return encode_dense(x)
    if codec is CodecId.sign_stochastic:
        return compress_sign(x, RngState(seed & MASK64))
    if codec is CodecId.topk:
        return compress_topk(x, topk_count(np.size(x), topk_ratio))
    if codec is CodecId.terngrad:
        return compress_terngrad(x, RngState(seed & MASK64))
    if codec is CodecId.drive:
        return compress_drive(x, seed)
    raise ValueError(f"{codec.name} is not a post-training codec")
