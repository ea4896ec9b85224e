"""Image codec, resizing, normalization, synthetic lesions, packed records.

On-disk formats owned by this module:
  * NetPBM P5/P6, maxval 255, binary body (the only native image codec)
  * "LSR1" packed dataset files (little-endian, layout in pack_records)
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, GeometryError, InvalidMaskError, RecordError
from .ops import _lerp_matrix
from .tensor import RngState, rng_next, rng_next_bulk, rng_uniform, rng_uniform_bulk

RECORD_MAGIC = b"LSR1"


@dataclass
class Sample:
    """One image/mask pair plus its pre-resize dimensions."""

    id: str
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray   # (H, W) uint8, values 0/1
    orig_h: int
    orig_w: int


@dataclass
class SynthOpts:
    """Controls for the synthetic lesion generator."""

    count: int
    seed: int = 0
    size: int = 513
    hair_prob: float = 0.3
    fg_bounds: tuple[float, float] = (0.05, 0.45)


# ---------------------------------------------------------------------------
# NetPBM codec

def _next_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Scan one whitespace-delimited header token, skipping # comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise CodecError("unexpected end of header", offset=pos)
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_netpbm(path) -> np.ndarray:
    """Read a binary P5 (grayscale -> (H, W)) or P6 (RGB -> (H, W, 3)) file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise CodecError(f"bad magic {magic!r}, expected P5 or P6", offset=0)
    channels = 3 if magic == b"P6" else 1
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _next_token(buf, pos)
        if not tok.isdigit():
            raise CodecError(f"non-numeric header token {tok!r}", offset=pos - len(tok))
        fields.append(int(tok))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise CodecError(f"degenerate dimensions {w}x{h}", offset=2)
    if maxval != 255:
        raise CodecError(f"unsupported maxval {maxval}, expected 255", offset=pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise CodecError("missing whitespace after maxval", offset=pos)
    pos += 1  # exactly one whitespace byte separates header from body
    need = h * w * channels
    body = buf[pos:]
    if len(body) < need:
        raise CodecError(f"truncated body: {len(body)} of {need} bytes",
                         offset=pos + len(body))
    if len(body) > need:
        raise CodecError(f"{len(body) - need} trailing bytes after pixel data",
                         offset=pos + need)
    arr = np.frombuffer(body, dtype=np.uint8).copy()
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_netpbm(path, image: np.ndarray) -> None:
    """Write (H, W) as P5 or (H, W, 3) as P6, maxval 255."""
    if image.dtype != np.uint8:
        raise CodecError(f"image dtype must be uint8, got {image.dtype}")
    if image.ndim == 2:
        magic = "P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = "P6"
    else:
        raise CodecError(f"unsupported image shape {image.shape}")
    h, w = image.shape[:2]
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(image).tobytes())


# ---------------------------------------------------------------------------
# Resizing and normalization

def _nearest_index(out_size: int, in_size: int) -> np.ndarray:
    """Source index per output index: round(o * (in-1)/(out-1)), half up."""
    if out_size == 1 or in_size == 1:
        return np.zeros(out_size, dtype=np.int64)
    scale = (in_size - 1) / (out_size - 1)
    idx = np.floor(np.arange(out_size) * scale + 0.5).astype(np.int64)
    return np.clip(idx, 0, in_size - 1)


def resize(image: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    """Resize (H, W) or (H, W, C) uint8 images; masks should use nearest."""
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"target size {out_h}x{out_w} must be >= 1")
    if image.ndim not in (2, 3):
        raise GeometryError(f"expected HW or HWC image, got shape {image.shape}")
    h, w = image.shape[:2]
    if mode == "nearest":
        iy = _nearest_index(out_h, h)
        ix = _nearest_index(out_w, w)
        return image[np.ix_(iy, ix)]
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    mh = _lerp_matrix(out_h, h)
    mw = _lerp_matrix(out_w, w)
    flat = image.reshape(h, w, -1).astype(np.float64)
    tmp = np.tensordot(mh, flat, axes=(1, 0))          # (out_h, w, c)
    out = np.einsum("awc,ew->aec", tmp, mw, optimize=True)
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out.reshape(out_h, out_w) if image.ndim == 2 else out


def normalize(image: np.ndarray) -> np.ndarray:
    """Map 8-bit RGB (H, W, 3) to a float32 (3, H, W) tensor in [-1, 1]."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise GeometryError(f"expected (H, W, 3) uint8, got {image.shape} {image.dtype}")
    x = image.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# Synthetic lesions

def _uniform(rng: RngState, lo: float, hi: float) -> tuple[float, RngState]:
    u, rng = rng_uniform(rng)
    return lo + u * (hi - lo), rng


def _lesion_region(rng: RngState, size: int,
                   bounds: tuple[float, float]) -> tuple[np.ndarray, np.ndarray, RngState]:
    """Filled ellipse with a sinusoid-perturbed border; resampled until the
    foreground fraction lands inside `bounds`."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for attempt in range(32):
        frac, rng = _uniform(rng, 0.10, 0.32)
        ratio, rng = _uniform(rng, 0.60, 1.0)
        angle, rng = _uniform(rng, 0.0, math.pi)
        cx, rng = _uniform(rng, 0.36 * size, 0.64 * size)
        cy, rng = _uniform(rng, 0.36 * size, 0.64 * size)
        amps, phases = [], []
        for k in range(1, 4):
            a, rng = _uniform(rng, 0.0, 0.09 / k)
            ph, rng = _uniform(rng, 0.0, 2.0 * math.pi)
            amps.append(a)
            phases.append(ph)
        if attempt == 31:  # guaranteed-feasible fallback: centered plain circle
            frac, ratio, angle, cx, cy = 0.2, 1.0, 0.0, size / 2.0, size / 2.0
            amps = [0.0, 0.0, 0.0]

        rx = size * math.sqrt(frac / (math.pi * ratio))
        ry = rx * ratio
        u = xx - cx
        v = yy - cy
        ur = u * math.cos(angle) + v * math.sin(angle)
        vr = -u * math.sin(angle) + v * math.cos(angle)
        rho = np.hypot(ur / rx, vr / ry)
        theta = np.arctan2(vr / ry, ur / rx)
        border = 1.0 + sum(a * np.sin(k * theta + ph)
                           for k, (a, ph) in enumerate(zip(amps, phases), start=1))
        mask = rho <= border
        measured = mask.mean()
        if bounds[0] <= measured <= bounds[1]:
            return mask, rho, rng
    raise AssertionError("unreachable: fallback circle always satisfies bounds")


def _draw_hairs(rng: RngState, image: np.ndarray) -> RngState:
    """Overlay dark anti-aliased arcs (quadratic curves) on the image only."""
    size = image.shape[0]
    z, rng = rng_next(rng)
    n_hairs = 2 + z % 5
    alpha = np.zeros((size, size), dtype=np.float64)
    for _ in range(n_hairs):
        pts = []
        for _ in range(3):
            px, rng = _uniform(rng, 0.0, size - 1.0)
            py, rng = _uniform(rng, 0.0, size - 1.0)
            pts.append((px, py))
        (x0, y0), (x1, y1), (x2, y2) = pts
        t = np.linspace(0.0, 1.0, 4 * size)
        bx = (1 - t) ** 2 * x0 + 2 * (1 - t) * t * x1 + t ** 2 * x2
        by = (1 - t) ** 2 * y0 + 2 * (1 - t) * t * y1 + t ** 2 * y2
        px = np.floor(bx).astype(np.int64)
        py = np.floor(by).astype(np.int64)
        fx = bx - px
        fy = by - py
        for dy in (0, 1):
            for dx in (0, 1):
                wgt = (dx * fx + (1 - dx) * (1 - fx)) * (dy * fy + (1 - dy) * (1 - fy))
                ty = np.clip(py + dy, 0, size - 1)
                tx = np.clip(px + dx, 0, size - 1)
                np.maximum.at(alpha, (ty, tx), wgt)
    shade = (alpha * 0.75)[..., None]
    hair_rgb = np.array([52.0, 48.0, 46.0])  # dark gray, distinct from lesion brown
    image[...] = np.clip(image * (1.0 - shade) + hair_rgb * shade, 0, 255).astype(np.uint8)
    return rng


def synth_generate(opts: SynthOpts) -> list[Sample]:
    """Deterministic synthetic dermoscopy look-alikes with exact masks.

    Each sample runs on its own PRNG substream (hair drawn last), so the
    image/mask content of sample i depends only on (seed, i) and the hair
    toggle never perturbs masks or neighboring samples.
    """
    if opts.count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= opts.hair_prob <= 1.0:
        raise ValueError("hair_prob must be in [0, 1]")
    size = opts.size
    sub_seeds, _ = rng_next_bulk(RngState(opts.seed), opts.count)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    samples = []
    for i in range(opts.count):
        rng = RngState(int(sub_seeds[i]))
        # skin-tone background: light base color, linear gradient, mild noise
        r0, rng = _uniform(rng, 202.0, 240.0)
        g0, rng = _uniform(rng, 0.70 * r0, 0.82 * r0)
        b0, rng = _uniform(rng, 0.78 * g0, 0.92 * g0)
        gdir, rng = _uniform(rng, 0.0, 2.0 * math.pi)
        gamp, rng = _uniform(rng, 0.0, 7.0)
        ramp = ((xx * math.cos(gdir) + yy * math.sin(gdir)) / size)
        ramp -= ramp.mean()
        noise, rng = rng_uniform_bulk(rng, size * size * 3)
        noise = noise.reshape(size, size, 3) * 5.0 - 2.5
        img = np.empty((size, size, 3), dtype=np.float64)
        for c, base in enumerate((r0, g0, b0)):
            img[:, :, c] = base + gamp * ramp
        img += noise

        mask, rho, rng = _lesion_region(rng, size, opts.fg_bounds)

        # lesion fill: strongly darker brown, slightly lighter toward the rim
        rl, rng = _uniform(rng, 48.0, 92.0)
        gl, rng = _uniform(rng, 0.66 * rl, 0.80 * rl)
        bl, rng = _uniform(rng, 0.52 * gl, 0.72 * gl)
        lnoise, rng = rng_uniform_bulk(rng, size * size * 3)
        lnoise = lnoise.reshape(size, size, 3) * 7.0 - 3.5
        shade = (0.88 + 0.24 * np.clip(rho, 0.0, 1.0))[..., None]
        lesion = np.empty_like(img)
        for c, base in enumerate((rl, gl, bl)):
            lesion[:, :, c] = base
        lesion = lesion * shade + lnoise
        img[mask] = lesion[mask]

        img = np.clip(img, 0, 255).astype(np.uint8)
        hu, rng = rng_uniform(rng)
        if hu < opts.hair_prob:
            rng = _draw_hairs(rng, img)

        samples.append(Sample(id=f"synth_{i:04d}", image=img,
                              mask=mask.astype(np.uint8), orig_h=size, orig_w=size))
    return samples


# ---------------------------------------------------------------------------
# Packed record files

def pack_records(samples: list[Sample], path) -> None:
    """Write samples to a little-endian "LSR1" file (layout below).

    magic "LSR1", u32 count, then per record: u16 id length, UTF-8 id,
    u32 H, u32 W, u32 orig_h, u32 orig_w, u8 channels (3),
    H*W*3 image bytes, H*W mask bytes (0/1).
    """
    blobs = [RECORD_MAGIC, struct.pack("<I", len(samples))]
    for s in samples:
        if s.image.ndim != 3 or s.image.shape[2] != 3 or s.image.dtype != np.uint8:
            raise RecordError(f"{s.id}: image must be (H, W, 3) uint8")
        h, w = s.image.shape[:2]
        if s.mask.shape != (h, w) or s.mask.dtype != np.uint8:
            raise RecordError(f"{s.id}: mask must be (H, W) uint8 matching the image")
        if not np.isin(s.mask, (0, 1)).all():
            raise InvalidMaskError(f"{s.id}: mask values must be 0 or 1")
        ident = s.id.encode("utf-8")
        blobs.append(struct.pack("<H", len(ident)))
        blobs.append(ident)
        blobs.append(struct.pack("<IIIIB", h, w, s.orig_h, s.orig_w, 3))
        blobs.append(np.ascontiguousarray(s.image).tobytes())
        blobs.append(np.ascontiguousarray(s.mask).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


def read_records(path) -> list[Sample]:
    """Read an "LSR1" file back into samples; bit-exact inverse of pack_records."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != RECORD_MAGIC:
        raise RecordError(f"bad magic {buf[:4]!r}, expected {RECORD_MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise RecordError(f"truncated record file at byte {pos} (need {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    samples = []
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        ident = take(id_len).decode("utf-8")
        h, w, orig_h, orig_w, channels = struct.unpack("<IIIIB", take(17))
        if channels != 3:
            raise RecordError(f"{ident}: unsupported channel count {channels}")
        image = np.frombuffer(take(h * w * 3), dtype=np.uint8).reshape(h, w, 3)
        mask = np.frombuffer(take(h * w), dtype=np.uint8).reshape(h, w)
        if not np.isin(mask, (0, 1)).all():
            raise RecordError(f"{ident}: mask bytes outside {{0, 1}}")
        samples.append(Sample(id=ident, image=image.copy(), mask=mask.copy(),
                              orig_h=orig_h, orig_w=orig_w))
    if pos != len(buf):
        raise RecordError(f"{len(buf) - pos} trailing bytes after declared records")
    return samples
