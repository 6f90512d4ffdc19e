"""Images, flow fields, and their on-disk formats.

File formats:

* ``.flo`` (Middlebury): little-endian throughout. 4-byte float magic
  202021.25 (reads as ASCII "PIEH"), int32 width, int32 height, then
  row-major interleaved float32 (u, v) pairs. No validity mask exists in
  the format; masks are in-memory only.
* PGM (P5) and PPM (P6), binary, maxval 255. Intensities map to [0, 1] by
  division by 255 on read and round-half-up on write, so 8-bit images
  round-trip exactly.

Coordinate convention, used everywhere in this package: x is the column
index (left to right), y is the row index (top to bottom), and a flow
vector (u, v) moves pixel (x, y) of frame 1 to (x + u, y + v) in frame 2.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

FLO_MAGIC = np.float32(202021.25)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class FormatError(ValueError):
    """Byte stream does not match the declared file format."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Image:
    """H x W x C intensity grid in [0, 1], C in {1, 3}. Immutable."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must be (H, W, 1|3), got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image extents must be positive, got {px.shape}")
        if not np.isfinite(px).all() or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image intensities must be finite and in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_gray(self) -> "Image":
        """Luma conversion (0.299, 0.587, 0.114); identity on grayscale."""
        if self.channels == 1:
            return self
        weights = np.asarray(LUMA_WEIGHTS, dtype=np.float32)
        gray = np.clip(self.pixels @ weights, 0.0, 1.0)
        return Image(gray)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement grids u (rightward) and v (downward), in pixels.

    ``valid_mask``, when present, marks pixels where the flow is defined
    (sparse reference flow); it never travels through the .flo format.
    """

    u: np.ndarray
    v: np.ndarray
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u and v must be matching 2-D grids, got {u.shape} and {v.shape}")
        if u.shape[0] < 1 or u.shape[1] < 1:
            raise ValueError(f"flow extents must be positive, got {u.shape}")
        mask = self.valid_mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != u.shape:
                raise ValueError(f"valid_mask shape {mask.shape} != flow shape {u.shape}")
            object.__setattr__(self, "valid_mask", _frozen(mask))
        checked = np.stack([u, v]) if mask is None else np.stack([u, v])[:, mask]
        if checked.size and not np.isfinite(checked).all():
            raise ValueError("flow displacements must be finite where valid")
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "v", _frozen(v))

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u.astype(np.float64) ** 2 + self.v.astype(np.float64) ** 2)


def zero_flow(height: int, width: int) -> FlowField:
    return FlowField(np.zeros((height, width), np.float32), np.zeros((height, width), np.float32))


# ---------------------------------------------------------------------------
# tensor glue
# ---------------------------------------------------------------------------

def images_to_tensor(images, dtype=np.float32, requires_grad=False) -> Tensor:
    """Stack Images into a (B, C, H, W) tensor."""
    if isinstance(images, Image):
        images = [images]
    batch = np.stack([img.pixels.transpose(2, 0, 1) for img in images]).astype(dtype)
    return Tensor(batch, requires_grad=requires_grad)


def flows_to_tensor(flows, dtype=np.float32, requires_grad=False) -> Tensor:
    """Stack FlowFields into a (B, 2, H, W) tensor, channel 0 = u, 1 = v."""
    if isinstance(flows, FlowField):
        flows = [flows]
    batch = np.stack([np.stack([f.u, f.v]) for f in flows]).astype(dtype)
    return Tensor(batch, requires_grad=requires_grad)


def tensor_to_flow(t: Tensor, index: int = 0) -> FlowField:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    return FlowField(np.asarray(data[index, 0], np.float32), np.asarray(data[index, 1], np.float32))


def tensor_to_image(t: Tensor, index: int = 0, clip: bool = True) -> Image:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    px = data[index].transpose(1, 2, 0)
    if clip:
        px = np.clip(px, 0.0, 1.0)
    return Image(px)


# ---------------------------------------------------------------------------
# .flo codec
# ---------------------------------------------------------------------------

def write_flo(flow: FlowField) -> bytes:
    if flow.valid_mask is not None:
        raise ValueError("the .flo format carries no validity mask; drop it before writing")
    h, w = flow.height, flow.width
    header = struct.pack("<fii", float(FLO_MAGIC), w, h)
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = flow.u
    data[:, :, 1] = flow.v
    return header + data.tobytes()


def read_flo(blob: bytes) -> FlowField:
    if len(blob) < 12:
        raise FormatError(f"flo header needs 12 bytes, got {len(blob)}")
    magic, w, h = struct.unpack("<fii", blob[:12])
    if np.float32(magic) != FLO_MAGIC:
        raise FormatError(f"bad flo magic {magic!r} (expected {float(FLO_MAGIC)!r})")
    if w <= 0 or h <= 0:
        raise FormatError(f"bad flo dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(blob) != expected:
        raise FormatError(f"flo payload is {len(blob)} bytes, expected {expected} for {w}x{h}")
    data = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(data[:, :, 0], data[:, :, 1])


def load_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        return read_flo(fh.read())


def save_flo(flow: FlowField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_flo(flow))


# ---------------------------------------------------------------------------
# PGM / PPM codec
# ---------------------------------------------------------------------------

def _parse_netpbm_header(blob: bytes):
    """Return (magic, width, height, maxval, payload offset)."""
    if len(blob) < 2:
        raise FormatError("not a netpbm file: too short")
    magic = blob[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise FormatError("netpbm header truncated")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(blob) and blob[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(blob[start:pos]))
        else:
            raise FormatError(f"unexpected byte {ch!r} in netpbm header")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("netpbm header missing whitespace before payload")
    return magic, fields[0], fields[1], fields[2], pos + 1


def read_image(blob: bytes) -> Image:
    magic, w, h, maxval, offset = _parse_netpbm_header(blob)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r} (binary P5/P6 only)")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (8-bit only)")
    channels = 1 if magic == b"P5" else 3
    expected = w * h * channels
    payload = blob[offset:offset + expected]
    if len(payload) != expected:
        raise FormatError(f"netpbm payload is {len(payload)} bytes, expected {expected}")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return Image(px.astype(np.float32) / 255.0)


def write_image(img: Image) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    quantized = np.floor(img.pixels.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    return header + quantized.tobytes()


def load_image(path) -> Image:
    with open(path, "rb") as fh:
        return read_image(fh.read())


def save_image(img: Image, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_image(img))


# ---------------------------------------------------------------------------
# color-wheel rendering
# ---------------------------------------------------------------------------

def _make_colorwheel() -> np.ndarray:
    """Middlebury 55-entry color wheel, rows in [0, 1] RGB."""
    transitions = (15, 6, 4, 11, 13, 6)  # RY, YG, GC, CB, BM, MR
    ncols = sum(transitions)
    wheel = np.zeros((ncols, 3))
    col = 0
    ry, yg, gc, cb, bm, mr = transitions
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel / 255.0


_COLORWHEEL = _make_colorwheel()


def flow_to_color(flow: FlowField, max_magnitude: float | None = None) -> Image:
    """Render a flow field with the Middlebury color wheel.

    Hue encodes direction (atan2(-v, -u)); saturation encodes magnitude
    relative to ``max_magnitude``, clamped to 1. The default maximum is the
    99th-percentile magnitude; an all-zero field renders white. Pixels
    masked invalid also render white.
    """
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    if flow.valid_mask is not None:
        u = np.where(flow.valid_mask, u, 0.0)
        v = np.where(flow.valid_mask, v, 0.0)
    mag = np.sqrt(u * u + v * v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99))
    if max_magnitude <= 0.0:
        return Image(np.ones((flow.height, flow.width, 3), np.float32))

    rad = np.minimum(mag / max_magnitude, 1.0)
    angle = np.arctan2(-v, -u) / np.pi                      # in [-1, 1]
    ncols = _COLORWHEEL.shape[0]
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[:, :, None]
    base = (1.0 - frac) * _COLORWHEEL[k0] + frac * _COLORWHEEL[k1]
    rgb = 1.0 - rad[:, :, None] * (1.0 - base)              # white at zero motion
    return Image(np.clip(rgb, 0.0, 1.0).astype(np.float32))
