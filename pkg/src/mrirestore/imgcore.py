"""Image value helpers, raw MRIR I/O and the synthetic phantom generator.

Images are plain 2D numpy arrays (row-major, ``float32`` or ``float64``).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MRIR"
HEADER = struct.Struct("<4sIIB")
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class InvalidImageError(ValueError):
    pass


class ImageFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def as_image(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise InvalidImageError(f"expected a 2D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidImageError("image contains non-finite values")
    return arr


def normalize_unit(img) -> np.ndarray:
    """Affinely map ``img`` onto [0, 1]; a constant image maps to zeros."""
    arr = as_image(img)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    out = (arr - lo) / (hi - lo)
    # guard against 1 ulp overshoot
    return np.clip(out, 0, 1, out=out)


# ---------------------------------------------------------------------------
# raw format


def write_image(img, path, dtype="float32") -> None:
    arr = as_image(img)
    tag = 0 if np.dtype(dtype) == np.float32 else 1
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    h, w = arr.shape
    payload = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes()
    Path(path).write_bytes(HEADER.pack(MAGIC, w, h, tag) + payload)


def read_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < HEADER.size:
        raise ImageFormatError("truncated header", len(buf))
    magic, w, h, tag = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ImageFormatError(f"bad magic {magic!r}", 0)
    if tag not in DTYPE_TAGS:
        raise ImageFormatError(f"unknown dtype tag {tag}", 12)
    dt = DTYPE_TAGS[tag]
    need = h * w * dt.itemsize
    have = len(buf) - HEADER.size
    if have < need:
        raise ImageFormatError(f"truncated payload: {have} of {need} bytes", len(buf))
    if have > need:
        raise ImageFormatError("trailing bytes after payload", HEADER.size + need)
    arr = np.frombuffer(buf, dtype=dt, count=h * w, offset=HEADER.size)
    return arr.reshape(h, w).astype(dt.newbyteorder("="))


def write_pgm(img, path) -> None:
    """16-bit binary PGM export (lossy: values are clamped and quantized)."""
    arr = as_image(img)
    q = np.round(np.clip(arr, 0, 1) * 65535).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ImageFormatError("not a binary PGM", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dt = ">u2" if maxval > 255 else "u1"
    q = np.frombuffer(data, dtype=dt, count=w * h, offset=pos).reshape(h, w)
    return q.astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    size: int = 256
    n_ellipses: tuple[int, int] = (4, 9)
    texture_amplitude: float = 0.03
    edge_sharpness: float = 10.0
    texture_band: tuple[float, float] = (0.02, 0.15)

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("phantom size must be >= 16")
        lo, hi = self.n_ellipses
        if not 1 <= lo <= hi:
            raise ValueError(f"bad ellipse count range {self.n_ellipses}")
        if self.texture_amplitude < 0 or self.edge_sharpness <= 0:
            raise ValueError("texture_amplitude must be >= 0 and edge_sharpness > 0")
        if not 0 <= self.texture_band[0] < self.texture_band[1] <= 1:
            raise ValueError(f"bad texture band {self.texture_band}")


def _band_noise(rng, n, lo_frac, hi_frac):
    """Unit-std noise restricted to an annulus of the frequency plane.

    Band edges are fractions of the Nyquist radius.
    """
    white = rng.standard_normal((n, n))
    f = np.fft.fftfreq(n)
    rad = np.hypot(*np.meshgrid(f, f, indexing="ij")) / 0.5
    band = (rad >= lo_frac) & (rad <= hi_frac)
    out = np.fft.ifft2(np.fft.fft2(white) * band).real
    sd = out.std()
    return out / sd if sd > 0 else out


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Ellipse composite on a smooth ramp with band-limited texture, in [0, 1].

    ``edge_sharpness`` is the inverse width (in pixels) of the logistic edge
    profile; large values give near-binary boundaries.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    coords = (np.arange(n) + 0.5) / n * 2 - 1
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    px = 2.0 / n

    theta = rng.uniform(0, 2 * np.pi)
    ramp = 0.15 * (np.cos(theta) * xx + np.sin(theta) * yy)
    img = 0.25 + ramp

    # outer body ellipse then nested structures inside it
    lo, hi = spec.n_ellipses
    count = int(rng.integers(lo, hi + 1))
    for k in range(count):
        if k == 0:
            cx, cy = rng.uniform(-0.08, 0.08, 2)
            a, b = rng.uniform(0.65, 0.85, 2)
            amp = rng.uniform(0.2, 0.35)
        else:
            cx, cy = rng.uniform(-0.45, 0.45, 2)
            a, b = rng.uniform(0.06, 0.3, 2)
            amp = rng.uniform(-0.25, 0.35)
        phi = rng.uniform(0, np.pi)
        c, s = np.cos(phi), np.sin(phi)
        u = ((xx - cx) * c + (yy - cy) * s) / a
        v = (-(xx - cx) * s + (yy - cy) * c) / b
        r = np.sqrt(u * u + v * v)
        # signed distance to the boundary, approx. in pixels
        dist = (1 - r) * min(a, b) / px
        img = img + amp / (1 + np.exp(-np.clip(dist * spec.edge_sharpness, -60, 60)))

    if spec.texture_amplitude > 0:
        img = img + spec.texture_amplitude * _band_noise(rng, n, *spec.texture_band)
    return normalize_unit(img)


def phantom_seed(seed: int, subject: int, slice_idx: int) -> int:
    return int(np.random.SeedSequence([seed, subject, slice_idx]).generate_state(1)[0])


def make_subject(seed: int, subject: int, n_slices: int = 8, size: int = 256, **spec_kw) -> np.ndarray:
    """Stack of independent phantom slices ``(n_slices, size, size)`` for one synthetic subject."""
    return np.stack([make_phantom(PhantomSpec(phantom_seed(seed, subject, z), size, **spec_kw))
                     for z in range(n_slices)])
