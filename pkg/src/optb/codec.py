"""Positional packing of several 8-bit images into one container plane.

Pixel ``p`` of image ``i`` becomes digit ``i`` of the container value at ``p``
in base 256 (or base 128 for the offset mode, where the dropped low bit of
every pixel lives in a separate parity plane). Decoding peels digits off with
repeated mod/div; in base 256 that is simply a byte view of the limbs.

Integer containers are held as little-endian 64-bit limbs with shape
``(H, W, C, words)``; this is also exactly the on-disk payload layout.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"OPTB"
VERSION = 1
_HEADER = struct.Struct("<4sHBB3I")
FLOAT64_EXACT_LIMIT = 2**53
FLOAT64_MAX_IMAGES = 16


class CodecError(Exception):
    pass


class CapacityError(CodecError):
    pass


class CorruptionError(CodecError):
    pass


class FormatError(CodecError):
    pass


class ModeKind(enum.Enum):
    EXACT_INT = "exact"
    FLOAT64_FAITHFUL = "float"
    LOSSLESS_OFFSET = "lossless"


@dataclass(frozen=True)
class CodecMode:
    kind: ModeKind
    container_bits: int = 64

    def __post_init__(self):
        if self.kind is ModeKind.FLOAT64_FAITHFUL:
            if self.container_bits != 64:
                raise ValueError("Float64Faithful always uses a 64-bit container")
        elif self.container_bits not in (64, 128):
            raise ValueError(f"container_bits must be 64 or 128, got {self.container_bits}")

    @classmethod
    def exact_int(cls, bits: int = 64) -> "CodecMode":
        return cls(ModeKind.EXACT_INT, bits)

    @classmethod
    def float64_faithful(cls) -> "CodecMode":
        return cls(ModeKind.FLOAT64_FAITHFUL, 64)

    @classmethod
    def lossless_offset(cls, bits: int = 64) -> "CodecMode":
        return cls(ModeKind.LOSSLESS_OFFSET, bits)

    @property
    def base(self) -> int:
        return 128 if self.kind is ModeKind.LOSSLESS_OFFSET else 256

    @property
    def digit_bits(self) -> int:
        return 7 if self.kind is ModeKind.LOSSLESS_OFFSET else 8

    @property
    def capacity(self) -> int:
        """Largest image count that round-trips exactly."""
        if self.kind is ModeKind.FLOAT64_FAITHFUL:
            n = 0
            while 256 ** (n + 1) - 1 <= FLOAT64_EXACT_LIMIT:
                n += 1
            return n
        return self.container_bits // self.digit_bits

    @property
    def max_images(self) -> int:
        """Hard limit accepted by encode (the float mode tolerates lossy overfill)."""
        if self.kind is ModeKind.FLOAT64_FAITHFUL:
            return FLOAT64_MAX_IMAGES
        return self.capacity

    @property
    def words(self) -> int:
        return self.container_bits // 64

    @property
    def container_bytes(self) -> int:
        return self.container_bits // 8

    @property
    def has_offsets(self) -> bool:
        return self.kind is ModeKind.LOSSLESS_OFFSET

    @property
    def tag(self) -> int:
        return _TAGS[self]

    @classmethod
    def from_tag(cls, tag: int) -> "CodecMode":
        for mode, t in _TAGS.items():
            if t == tag:
                return mode
        raise FormatError(f"unknown mode tag {tag}")

    @property
    def name(self) -> str:
        if self.kind is ModeKind.FLOAT64_FAITHFUL:
            return "float64"
        return f"{self.kind.value}{self.container_bits}"

    @classmethod
    def parse(cls, text: str) -> "CodecMode":
        for mode in _TAGS:
            if mode.name == text.strip().lower():
                return mode
        names = ", ".join(m.name for m in _TAGS)
        raise ValueError(f"unknown codec mode {text!r} (choose from {names})")

    def __str__(self) -> str:
        return self.name


_TAGS = {
    CodecMode(ModeKind.EXACT_INT, 64): 0,
    CodecMode(ModeKind.EXACT_INT, 128): 1,
    CodecMode(ModeKind.FLOAT64_FAITHFUL, 64): 2,
    CodecMode(ModeKind.LOSSLESS_OFFSET, 64): 3,
    CodecMode(ModeKind.LOSSLESS_OFFSET, 128): 4,
}
MODES = tuple(_TAGS)


@dataclass(frozen=True, eq=False)
class EncodedBatch:
    mode: CodecMode
    shape: tuple[int, int, int]
    n_images: int
    container: np.ndarray
    offsets: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]

    @property
    def channels(self) -> int:
        return self.shape[2]

    @property
    def pixels(self) -> int:
        return math.prod(self.shape)

    @property
    def lossy(self) -> bool:
        return self.n_images > self.mode.capacity

    @property
    def container_nbytes(self) -> int:
        return self.pixels * self.mode.container_bytes

    @property
    def offsets_nbytes(self) -> int:
        if not self.mode.has_offsets:
            return 0
        return -(-self.pixels * self.n_images // 8)

    @property
    def nbytes(self) -> int:
        return self.container_nbytes + self.offsets_nbytes

    @property
    def raw_nbytes(self) -> int:
        return self.pixels * self.n_images

    def values(self) -> np.ndarray:
        """Container values as Python integers (object array of shape H×W×C)."""
        if self.mode.kind is ModeKind.FLOAT64_FAITHFUL:
            flat = [int(v) for v in self.container.ravel()]
        else:
            limbs = self.container.reshape(-1, self.mode.words)
            flat = [sum(int(w) << (64 * k) for k, w in enumerate(row)) for row in limbs]
        return np.array(flat, dtype=object).reshape(self.shape)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncodedBatch):
            return NotImplemented
        same_offsets = (self.offsets is None and other.offsets is None) or (
            self.offsets is not None
            and other.offsets is not None
            and np.array_equal(self.offsets, other.offsets)
        )
        return (
            self.mode == other.mode
            and self.shape == other.shape
            and self.n_images == other.n_images
            and self.container.dtype == other.container.dtype
            and np.array_equal(self.container, other.container)
            and same_offsets
        )


def _stack(images: Sequence[np.ndarray]) -> np.ndarray:
    if len(images) == 0:
        raise CodecError("need at least one image")
    if isinstance(images, np.ndarray) and images.dtype == np.uint8 and images.ndim == 4:
        return images
    arrays = [np.asarray(img) for img in images]
    shape = arrays[0].shape
    if len(shape) != 3:
        raise CodecError(f"images must be H×W×C, got shape {shape}")
    for k, a in enumerate(arrays):
        if a.shape != shape:
            raise CodecError(f"image {k} has shape {a.shape}, expected {shape}")
    stacked = np.stack(arrays)
    if stacked.dtype != np.uint8:
        if not np.issubdtype(stacked.dtype, np.integer):
            raise CodecError(f"pixels must be integers, got {stacked.dtype}")
        if stacked.min() < 0 or stacked.max() > 255:
            raise CodecError("pixel values must lie in [0, 255]")
        stacked = stacked.astype(np.uint8)
    return stacked


def encode(images: Sequence[np.ndarray] | np.ndarray, mode: CodecMode) -> EncodedBatch:
    """Pack ``N`` same-shaped H×W×C uint8 images into one container plane."""
    stacked = _stack(images)
    n = stacked.shape[0]
    shape = tuple(int(s) for s in stacked.shape[1:])
    if n > mode.max_images:
        raise CapacityError(
            f"{n} images exceed the {mode.name} limit of {mode.max_images}"
        )

    if mode.kind is ModeKind.FLOAT64_FAITHFUL:
        acc = np.zeros(shape, dtype=np.float64)
        for i in range(n):
            acc = acc + stacked[i].astype(np.float64) * float(256**i)
        return EncodedBatch(mode, shape, n, acc)

    if mode.kind is ModeKind.EXACT_INT:
        # inverse of the byte view in decode: image i is byte i of the container
        planes = np.zeros(shape + (mode.container_bytes,), dtype=np.uint8)
        planes[..., :n] = np.moveaxis(stacked, 0, -1)
        limbs = planes.view("<u8").astype(np.uint64, copy=False)
        return EncodedBatch(mode, shape, n, limbs)

    offsets = None
    digits = stacked.astype(np.uint64)
    if mode.has_offsets:
        offsets = np.moveaxis(stacked & 1, 0, -1).astype(bool)
        digits = digits >> np.uint64(1)

    k = mode.digit_bits
    limbs = np.zeros(shape + (mode.words,), dtype=np.uint64)
    for i in range(n):
        word, shift = divmod(i * k, 64)
        # digits occupy disjoint bit ranges, so the sum never carries
        limbs[..., word] += digits[i] << np.uint64(shift)
        if shift + k > 64:
            limbs[..., word + 1] += digits[i] >> np.uint64(64 - shift)
    return EncodedBatch(mode, shape, n, limbs, offsets)


def _decode_digits(enc: EncodedBatch, check: bool) -> np.ndarray:
    n = enc.n_images
    out = np.empty((n,) + enc.shape, dtype=np.uint8)

    if enc.mode.kind is ModeKind.FLOAT64_FAITHFUL:
        acc = enc.container.astype(np.float64, copy=True)
        for i in range(n):
            out[i] = np.mod(acc, 256.0)
            acc = np.floor(acc / 256.0)
        if check and np.any(acc != 0):
            raise CorruptionError(f"container value exceeds 256^{n}")
        return out

    if enc.mode.kind is ModeKind.EXACT_INT:
        # base-256 digits of little-endian limbs are just their bytes
        digits = enc.container.astype("<u8", copy=False).view(np.uint8).reshape(enc.shape + (-1,))
        if check and np.any(digits[..., n:]):
            raise CorruptionError(f"container value exceeds 256^{n}")
        return np.ascontiguousarray(np.moveaxis(digits[..., :n], -1, 0))

    k = np.uint64(enc.mode.digit_bits)
    back = np.uint64(64 - enc.mode.digit_bits)
    mask = np.uint64(enc.mode.base - 1)
    acc = enc.container.copy()
    words = enc.mode.words
    for i in range(n):
        out[i] = acc[..., 0] & mask
        # integer division by the base: multi-limb right shift
        for w in range(words):
            acc[..., w] >>= k
            if w + 1 < words:
                acc[..., w] |= acc[..., w + 1] << back
    if check and np.any(acc != 0):
        raise CorruptionError(f"container value exceeds {enc.mode.base}^{n}")
    return out


def decode(enc: EncodedBatch) -> np.ndarray:
    """Recover the packed images as an ``(N, H, W, C)`` uint8 array."""
    digits = _decode_digits(enc, check=True)
    if enc.mode.has_offsets:
        if enc.offsets is None:
            raise CorruptionError("offset plane missing")
        parity = np.moveaxis(enc.offsets, -1, 0).astype(np.uint8)
        return digits * np.uint8(2) + parity
    return digits


def roundtrip_error(images: Sequence[np.ndarray] | np.ndarray, mode: CodecMode) -> np.ndarray:
    """Per-image max absolute pixel error of an encode/decode round trip."""
    original = _stack(images).astype(np.int16)
    enc = encode(images, mode)
    digits = _decode_digits(enc, check=False).astype(np.int16)
    if mode.has_offsets:
        digits = digits * 2 + np.moveaxis(enc.offsets, -1, 0)
    err = np.abs(digits - original).reshape(len(original), -1)
    return err.max(axis=1)


def to_bytes(enc: EncodedBatch) -> bytes:
    h, w, c = enc.shape
    parts = [_HEADER.pack(MAGIC, VERSION, enc.mode.tag, enc.n_images, h, w, c)]
    if enc.mode.kind is ModeKind.FLOAT64_FAITHFUL:
        parts.append(enc.container.astype("<f8").tobytes())
    else:
        parts.append(enc.container.astype("<u8").tobytes())
    if enc.mode.has_offsets:
        # image-major, then pixel-major; LSB-first within each byte
        planes = np.moveaxis(enc.offsets, -1, 0).reshape(-1).astype(np.uint8)
        parts.append(np.packbits(planes, bitorder="little").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> EncodedBatch:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, tag, n, h, w, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    mode = CodecMode.from_tag(tag)
    if not 1 <= n <= mode.max_images:
        raise FormatError(f"image count {n} invalid for {mode.name}")
    if min(h, w, c) < 1:
        raise FormatError("zero extent in header")
    shape = (h, w, c)
    pixels = h * w * c
    offset = _HEADER.size
    payload = pixels * mode.container_bytes
    offset_bytes = -(-pixels * n // 8) if mode.has_offsets else 0
    if len(buf) != offset + payload + offset_bytes:
        raise FormatError(
            f"expected {offset + payload + offset_bytes} bytes, got {len(buf)}"
        )
    if mode.kind is ModeKind.FLOAT64_FAITHFUL:
        container = np.frombuffer(buf, "<f8", pixels, offset).astype(np.float64).reshape(shape)
    else:
        container = (
            np.frombuffer(buf, "<u8", pixels * mode.words, offset)
            .astype(np.uint64)
            .reshape(shape + (mode.words,))
        )
    offsets = None
    if mode.has_offsets:
        packed = np.frombuffer(buf, np.uint8, offset_bytes, offset + payload)
        bits = np.unpackbits(packed, count=pixels * n, bitorder="little")
        offsets = np.moveaxis(bits.reshape((n,) + shape), 0, -1).astype(bool)
    return EncodedBatch(mode, shape, n, container, offsets)


def write(enc: EncodedBatch, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(to_bytes(enc))
    except OSError as exc:
        raise CodecError(f"cannot write {path}: {exc}") from exc
    return path


def read(path: str | Path) -> EncodedBatch:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CodecError(f"cannot read {path}: {exc}") from exc
    try:
        return from_bytes(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
