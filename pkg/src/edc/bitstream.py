"""Latent quantization, adaptive entropy coding, and the wire container.

Container layout (little-endian):
  magic "EDC1" (4B), version u8, flags u8, H u16, W u16, C u8, f u8,
  h u16, w u16, step f32, entropy-model id u8, payload length u32,
  payload, crc32 u32.
Optional side-channel segments (e.g. the loss mask) follow the crc32
verbatim; they are framed by their producers.
"""

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptStreamError, ShapeError

MAGIC = b"EDC1"
VERSION = 1
MODEL_ADAPTIVE_AC = 1
FLAG_HAS_MASK = 0x01

_HEADER = struct.Struct("<4sBBHHBBHHfBI")

# Coder state width. Totals must stay below MIN_RANGE; the adaptive
# models halve their counts long before that.
_STATE_BITS = 32
_FULL = 1 << _STATE_BITS
_MASK = _FULL - 1
_TOP = _FULL >> 1
_SECOND = _FULL >> 2
_MAX_TOTAL = 1 << 24


@dataclass
class QuantizedLatent:
    """Integer symbol tensor plus the uniform quantizer step."""

    symbols: np.ndarray  # (C, h, w) int64
    step: float

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols)
        if self.symbols.ndim != 3:
            raise ShapeError(f"symbols must be (C, h, w), got {self.symbols.shape}")
        if not np.issubdtype(self.symbols.dtype, np.integer):
            raise ValueError("symbols must be an integer array")
        if self.step <= 0:
            raise ValueError(f"step must be positive, got {self.step}")
        # the container stores the step as f32; snap it here so the
        # transmitted step is bit-identical to the one used
        self.step = float(np.float32(self.step))


def quantize(z, step):
    """Uniform scalar quantization with round-half-to-even.

    The step is snapped to wire precision (float32) before use, keeping
    the quantize/transmit/dequantize chain bit-exact.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    step = float(np.float32(step))
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ShapeError(f"latent must be (C, h, w), got {z.shape}")
    symbols = np.rint(z / step).astype(np.int64)
    return QuantizedLatent(symbols=symbols, step=step)


def dequantize(q):
    """Reconstruct the latent as symbols * step."""
    return q.symbols.astype(np.float64) * q.step


class _BitWriter:
    def __init__(self):
        self.buf = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, bit):
        self.acc = (self.acc << 1) | bit
        self.nbits += 1
        if self.nbits == 8:
            self.buf.append(self.acc)
            self.acc = 0
            self.nbits = 0

    def getvalue(self):
        if self.nbits:
            return bytes(self.buf) + bytes([self.acc << (8 - self.nbits)])
        return bytes(self.buf)


class _BitReader:
    """Reads bits big-endian first; past the end yields zeros."""

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def read(self):
        byte_i, bit_i = self.pos >> 3, self.pos & 7
        self.pos += 1
        if byte_i >= len(self.data):
            return 0
        return (self.data[byte_i] >> (7 - bit_i)) & 1


class _Fenwick:
    """Fenwick tree over symbol counts: O(log A) prefix sums, point
    updates, and prefix search. Counts stay >= 1 for every symbol."""

    def __init__(self, n):
        self.n = n
        self.size = 1
        while self.size < n:
            self.size <<= 1
        self.counts = [1] * n
        self.total = n
        self._build()

    def _build(self):
        tree = [0] * (self.size + 1)
        for i, c in enumerate(self.counts):
            tree[i + 1] = c
        for i in range(1, self.size + 1):
            j = i + (i & -i)
            if j <= self.size:
                tree[j] += tree[i]
        self.tree = tree

    def prefix(self, i):
        s = 0
        while i > 0:
            s += self.tree[i]
            i &= i - 1
        return s

    def add_one(self, sym):
        self.counts[sym] += 1
        self.total += 1
        i = sym + 1
        while i <= self.size:
            self.tree[i] += 1
            i += i & -i
        if self.total >= _MAX_TOTAL:
            self._halve()

    def _halve(self):
        self.counts = [(c + 1) // 2 for c in self.counts]
        self.total = sum(self.counts)
        self._build()

    def find(self, value):
        # Largest s with prefix(s) <= value; valid for value < total.
        pos = 0
        rem = value
        mask = self.size
        while mask:
            nxt = pos + mask
            if nxt <= self.size and self.tree[nxt] <= rem:
                pos = nxt
                rem -= self.tree[nxt]
            mask >>= 1
        return pos


class _Encoder:
    def __init__(self, out):
        self.out = out
        self.low = 0
        self.high = _MASK
        self.pending = 0

    def encode(self, lo, hi, total):
        span = self.high - self.low + 1
        self.high = self.low + hi * span // total - 1
        self.low = self.low + lo * span // total
        while ((self.low ^ self.high) & _TOP) == 0:
            bit = self.low >> (_STATE_BITS - 1)
            self.out.write(bit)
            for _ in range(self.pending):
                self.out.write(bit ^ 1)
            self.pending = 0
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) & _MASK) | 1
        while (self.low & ~self.high & _SECOND) != 0:
            self.pending += 1
            self.low = (self.low << 1) & (_MASK >> 1)
            self.high = ((self.high << 1) & (_MASK >> 1)) | _TOP | 1

    def finish(self):
        self.out.write(1)


class _Decoder:
    def __init__(self, inp):
        self.inp = inp
        self.low = 0
        self.high = _MASK
        self.code = 0
        for _ in range(_STATE_BITS):
            self.code = (self.code << 1) | inp.read()

    def decode(self, model):
        span = self.high - self.low + 1
        total = model.total
        value = ((self.code - self.low + 1) * total - 1) // span
        if not 0 <= value < total:
            raise CorruptStreamError("arithmetic decoder state out of range")
        sym = model.find(value)
        if sym >= model.n:
            raise CorruptStreamError("decoded symbol outside alphabet")
        lo = model.prefix(sym)
        hi = lo + model.counts[sym]
        self.high = self.low + hi * span // total - 1
        self.low = self.low + lo * span // total
        while ((self.low ^ self.high) & _TOP) == 0:
            self.code = ((self.code << 1) & _MASK) | self.inp.read()
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) & _MASK) | 1
        while (self.low & ~self.high & _SECOND) != 0:
            self.code = (self.code & _TOP) | ((self.code << 1) & (_MASK >> 1)) | self.inp.read()
            self.low = (self.low << 1) & (_MASK >> 1)
            self.high = ((self.high << 1) & (_MASK >> 1)) | _TOP | 1
        return sym


def entropy_encode(q):
    """Losslessly encode a symbol tensor with per-channel adaptive
    arithmetic coding.

    Symbols are offset to non-negative using the tensor minimum; the
    offset and alphabet size lead the payload. Each channel adapts its
    own frequency table, initialized flat (add-one counts), so no table
    is transmitted. Symbol magnitudes must be below 2**15.
    """
    syms = q.symbols
    if syms.size == 0:
        raise ShapeError("cannot encode an empty symbol tensor")
    lo_v = int(syms.min())
    hi_v = int(syms.max())
    if max(abs(lo_v), abs(hi_v)) >= 1 << 15:
        raise ValueError(f"symbol magnitude {max(abs(lo_v), abs(hi_v))} out of range (< 2**15)")
    alphabet = hi_v - lo_v + 1
    header = struct.pack("<hH", lo_v, alphabet)

    writer = _BitWriter()
    enc = _Encoder(writer)
    for c in range(syms.shape[0]):
        model = _Fenwick(alphabet)
        for s in (syms[c].ravel() - lo_v).tolist():
            base = model.prefix(s)
            enc.encode(base, base + model.counts[s], model.total)
            model.add_one(s)
    enc.finish()
    return header + writer.getvalue()


def entropy_decode(payload, shape, step):
    """Invert :func:`entropy_encode` given the (C, h, w) shape from the
    container header."""
    c_n, h, w = shape
    if len(payload) < 4:
        raise CorruptStreamError("payload truncated: missing entropy model header")
    lo_v, alphabet = struct.unpack("<hH", payload[:4])
    if alphabet < 1:
        raise CorruptStreamError("invalid alphabet size")
    reader = _BitReader(payload[4:])
    dec = _Decoder(reader)
    out = np.empty((c_n, h, w), dtype=np.int64)
    for c in range(c_n):
        model = _Fenwick(alphabet)
        flat = out[c].reshape(-1)
        for i in range(h * w):
            s = dec.decode(model)
            model.add_one(s)
            flat[i] = s + lo_v
    return QuantizedLatent(symbols=out, step=step)


@dataclass
class Bitstream:
    """Parsed container. ``extra`` holds trailing side-channel segments."""

    height: int
    width: int
    channels: int
    factor: int
    lat_h: int
    lat_w: int
    step: float
    payload: bytes
    model_id: int = MODEL_ADAPTIVE_AC
    version: int = VERSION
    flags: int = 0
    extra: bytes = field(default=b"", repr=False)

    def to_bytes(self):
        header = _HEADER.pack(
            MAGIC, self.version, self.flags, self.height, self.width,
            self.channels, self.factor, self.lat_h, self.lat_w,
            np.float32(self.step), self.model_id, len(self.payload),
        )
        crc = zlib.crc32(self.payload) & 0xFFFFFFFF
        return header + self.payload + struct.pack("<I", crc) + self.extra

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _HEADER.size + 4:
            raise CorruptStreamError("stream shorter than header")
        (magic, version, flags, height, width, channels, factor,
         lat_h, lat_w, step, model_id, plen) = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported version {version}")
        if factor == 0 or lat_h * factor != height or lat_w * factor != width:
            raise CorruptStreamError("header dimensions inconsistent with factor")
        end = _HEADER.size + plen
        if len(data) < end + 4:
            raise CorruptStreamError("payload truncated")
        payload = data[_HEADER.size : end]
        (crc,) = struct.unpack_from("<I", data, end)
        if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
            raise CorruptStreamError("payload CRC mismatch")
        return cls(
            height=height, width=width, channels=channels, factor=factor,
            lat_h=lat_h, lat_w=lat_w, step=float(step), payload=payload,
            model_id=model_id, version=version, flags=flags,
            extra=bytes(data[end + 4 :]),
        )


def pack(q, image_size, factor):
    """Frame a quantized latent for transmission."""
    c_n, h, w = q.symbols.shape
    height, width = image_size
    if h * factor != height or w * factor != width:
        raise ShapeError(
            f"latent {h}x{w} with factor {factor} does not match image {height}x{width}"
        )
    if not (height < 1 << 16 and width < 1 << 16 and c_n < 256 and factor < 256):
        raise ShapeError("dimensions exceed container field widths")
    return Bitstream(
        height=height, width=width, channels=c_n, factor=factor,
        lat_h=h, lat_w=w, step=q.step, payload=entropy_encode(q),
    )


def unpack(bs):
    """Recover the quantized latent and header metadata from a container."""
    if bs.model_id != MODEL_ADAPTIVE_AC:
        raise CorruptStreamError(f"unknown entropy model id {bs.model_id}")
    q = entropy_decode(bs.payload, (bs.channels, bs.lat_h, bs.lat_w), bs.step)
    meta = {
        "height": bs.height, "width": bs.width, "channels": bs.channels,
        "factor": bs.factor, "lat_h": bs.lat_h, "lat_w": bs.lat_w,
        "step": bs.step, "flags": bs.flags,
    }
    return q, meta


def bits_per_pixel(bs):
    """Total container bits (side channels included) per source pixel."""
    return 8.0 * len(bs.to_bytes()) / (bs.height * bs.width)
