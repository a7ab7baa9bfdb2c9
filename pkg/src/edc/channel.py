"""Transmission impairment simulation: latent-grid erasures and the
mask side-channel segment appended to the wire container.

A loss mask is an (h, w) uint8 array over the latent grid where 1 means
the cell was received and 0 means it was lost in transit. The sender
knows the mask and ships it losslessly (run-length coded) alongside the
payload so the receiver can run concealment instead of re-requesting.
"""

import struct
import zlib

import numpy as np

from .bitstream import FLAG_HAS_MASK, Bitstream, QuantizedLatent
from .errors import CorruptStreamError, ShapeError

MASK_TAG = 0x4D


def random_loss_mask(h, w, n_regions, max_frac=0.125, rng=None, area_mode=False):
    """Erase ``n_regions`` random axis-aligned rectangles from an h x w grid.

    In the default per-side mode each rectangle side is uniform in
    [1, ceil(dim * max_frac)]. In ``area_mode`` the height is uniform in
    [1, h] and the width is capped so the rectangle area stays within
    ceil(h * w * max_frac). Rectangles may overlap. Returns a uint8 mask
    with 1 = received, 0 = lost.
    """
    if h < 1 or w < 1:
        raise ValueError(f"degenerate grid {h}x{w}")
    if n_regions < 1:
        raise ValueError(f"n_regions must be >= 1, got {n_regions}")
    if not 0 < max_frac <= 1:
        raise ValueError(f"max_frac must be in (0, 1], got {max_frac}")
    rng = np.random.default_rng() if rng is None else rng
    mask = np.ones((h, w), dtype=np.uint8)
    for _ in range(n_regions):
        if area_mode:
            max_area = int(np.ceil(h * w * max_frac))
            rh = int(rng.integers(1, h + 1))
            rw = int(rng.integers(1, min(w, max(1, max_area // rh)) + 1))
        else:
            rh = int(rng.integers(1, int(np.ceil(h * max_frac)) + 1))
            rw = int(rng.integers(1, int(np.ceil(w * max_frac)) + 1))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        mask[top : top + rh, left : left + rw] = 0
    return mask


def apply_loss(q, mask):
    """Zero the symbols of lost latent cells across all channels.

    Received cells are never altered; the mask itself is the side
    information that travels with the stream.
    """
    mask = np.asarray(mask)
    if mask.shape != q.symbols.shape[1:]:
        raise ShapeError(f"mask {mask.shape} does not match latent grid {q.symbols.shape[1:]}")
    symbols = np.where(mask[None, :, :] == 0, 0, q.symbols)
    return QuantizedLatent(symbols=symbols, step=q.step)


def _rle_encode(mask):
    flat = (np.asarray(mask).ravel() > 0).astype(np.uint8)
    out = bytearray([int(flat[0])])
    boundaries = np.flatnonzero(np.diff(flat))
    runs = np.diff(np.concatenate(([0], boundaries + 1, [flat.size])))
    for run in runs.tolist():
        while run > 0xFFFF:
            out += struct.pack("<H", 0xFFFF)
            out += struct.pack("<H", 0)  # zero-length run of the other value
            run -= 0xFFFF
        out += struct.pack("<H", run)
    return bytes(out)


def _rle_decode(payload, shape):
    if len(payload) < 3 or (len(payload) - 1) % 2 != 0:
        raise CorruptStreamError("malformed mask run-length payload")
    value = payload[0]
    if value not in (0, 1):
        raise CorruptStreamError("mask payload must start with 0 or 1")
    runs = struct.unpack(f"<{(len(payload) - 1) // 2}H", payload[1:])
    total = shape[0] * shape[1]
    flat = np.empty(total, dtype=np.uint8)
    pos = 0
    for run in runs:
        if pos + run > total:
            raise CorruptStreamError("mask run-length overruns the latent grid")
        flat[pos : pos + run] = value
        pos += run
        value ^= 1
    if pos != total:
        raise CorruptStreamError("mask run-length does not cover the latent grid")
    return flat.reshape(shape)


def encode_mask_segment(mask):
    """Frame a loss mask as a side-channel segment: tag, length, RLE
    payload, crc32."""
    payload = _rle_encode(mask)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return struct.pack("<BI", MASK_TAG, len(payload)) + payload + struct.pack("<I", crc)


def decode_mask_segment(extra, shape):
    """Find and decode the mask segment in a container's trailing bytes.
    Unknown segment tags are skipped. Returns None when no mask segment
    is present."""
    pos = 0
    while pos < len(extra):
        if pos + 5 > len(extra):
            raise CorruptStreamError("truncated side-channel segment header")
        tag, plen = struct.unpack_from("<BI", extra, pos)
        pos += 5
        if pos + plen + 4 > len(extra):
            raise CorruptStreamError("truncated side-channel segment")
        payload = extra[pos : pos + plen]
        (crc,) = struct.unpack_from("<I", extra, pos + plen)
        if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
            raise CorruptStreamError("side-channel segment CRC mismatch")
        pos += plen + 4
        if tag == MASK_TAG:
            return _rle_decode(payload, shape)
    return None


def attach_mask(bs, mask):
    """Return a copy of the container with the loss mask appended as a
    side-channel segment and the header flag set."""
    mask = np.asarray(mask)
    if mask.shape != (bs.lat_h, bs.lat_w):
        raise ShapeError(f"mask {mask.shape} does not match header grid {(bs.lat_h, bs.lat_w)}")
    return Bitstream(
        height=bs.height, width=bs.width, channels=bs.channels, factor=bs.factor,
        lat_h=bs.lat_h, lat_w=bs.lat_w, step=bs.step, payload=bs.payload,
        model_id=bs.model_id, version=bs.version,
        flags=bs.flags | FLAG_HAS_MASK,
        extra=bs.extra + encode_mask_segment(mask),
    )


def extract_mask(bs):
    """Mask from the container's side channel, or None when absent."""
    if not bs.extra:
        return None
    return decode_mask_segment(bs.extra, (bs.lat_h, bs.lat_w))
