"""Orthonormal 2D Fourier transforms and k-space layout helpers.

Spectra carry a layout tag. ``STANDARD`` is numpy's native ordering (DC at
``[0, 0]``), ``CENTERED`` has DC at ``[h//2, w//2]`` and ``OVERTURNED`` is
the standard array read with high frequencies at the centre.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .imgcore import as_image

REF_SIGMA = 32.0
REF_SIGMA_SIZE = 256


class Layout(enum.Enum):
    STANDARD = "standard"
    CENTERED = "centered"
    OVERTURNED = "overturned"


class LayoutError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Spectrum2D:
    data: np.ndarray
    layout: Layout = Layout.STANDARD

    @property
    def shape(self):
        return self.data.shape

    def require(self, layout: Layout) -> None:
        if self.layout is not layout:
            raise LayoutError(f"expected {layout.value} layout, got {self.layout.value}")


def fft2_ortho(img) -> Spectrum2D:
    arr = as_image(img)
    return Spectrum2D(np.fft.fft2(arr, norm="ortho"), Layout.STANDARD)


def ifft2_ortho(spec: Spectrum2D, return_residual: bool = False):
    """Inverse transform; returns the real part.

    With ``return_residual`` the maximum absolute imaginary part is returned
    too, which is non-zero when the spectrum is not Hermitian symmetric.
    """
    spec.require(Layout.STANDARD)
    full = np.fft.ifft2(spec.data, norm="ortho")
    if return_residual:
        return full.real.copy(), float(np.abs(full.imag).max(initial=0.0))
    return full.real.copy()


def shift_center(spec: Spectrum2D) -> Spectrum2D:
    spec.require(Layout.STANDARD)
    return Spectrum2D(np.fft.fftshift(spec.data), Layout.CENTERED)


def unshift_center(spec: Spectrum2D) -> Spectrum2D:
    spec.require(Layout.CENTERED)
    return Spectrum2D(np.fft.ifftshift(spec.data), Layout.STANDARD)


def overturn(spec: Spectrum2D) -> Spectrum2D:
    # standard ordering already has the Nyquist bins in the middle of the array
    spec.require(Layout.STANDARD)
    return Spectrum2D(spec.data, Layout.OVERTURNED)


def unoverturn(spec: Spectrum2D) -> Spectrum2D:
    spec.require(Layout.OVERTURNED)
    return Spectrum2D(spec.data, Layout.STANDARD)


def crop_center(spec: Spectrum2D, out_h: int, out_w: int) -> Spectrum2D:
    """Keep the central block of a centred spectrum.

    Coefficients are scaled by sqrt(out area / in area) so band-limited
    content keeps its amplitude under the orthonormal inverse transform.
    """
    spec.require(Layout.CENTERED)
    in_h, in_w = spec.shape
    if out_h % 2 or out_w % 2 or out_h > in_h or out_w > in_w or out_h < 2 or out_w < 2:
        raise DimensionError(f"cannot crop {in_h}x{in_w} spectrum to {out_h}x{out_w}")
    r0 = in_h // 2 - out_h // 2
    c0 = in_w // 2 - out_w // 2
    block = spec.data[r0:r0 + out_h, c0:c0 + out_w]
    scale = np.sqrt((out_h * out_w) / (in_h * in_w))
    return Spectrum2D(block * scale, Layout.CENTERED)


def pad_center(spec: Spectrum2D, out_h: int, out_w: int) -> Spectrum2D:
    """Zero-fill a centred spectrum out to a larger grid (inverse of crop_center)."""
    spec.require(Layout.CENTERED)
    in_h, in_w = spec.shape
    if out_h % 2 or out_w % 2 or out_h < in_h or out_w < in_w or in_h % 2 or in_w % 2:
        raise DimensionError(f"cannot pad {in_h}x{in_w} spectrum to {out_h}x{out_w}")
    out = np.zeros((out_h, out_w), dtype=np.result_type(spec.data, np.complex128))
    r0 = out_h // 2 - in_h // 2
    c0 = out_w // 2 - in_w // 2
    out[r0:r0 + in_h, c0:c0 + in_w] = spec.data * np.sqrt((out_h * out_w) / (in_h * in_w))
    return Spectrum2D(out, Layout.CENTERED)


def fourier_upsample(img, factor: int) -> np.ndarray:
    """Zero-filled k-space interpolation to ``factor`` times the size (no normalization)."""
    arr = as_image(img)
    h, w = arr.shape
    spec = pad_center(shift_center(fft2_ortho(arr)), h * factor, w * factor)
    return ifft2_ortho(unshift_center(spec))


def gaussian_mask(h: int, w: int, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = np.arange(h) - h // 2
    c = np.arange(w) - w // 2
    d2 = r[:, None] ** 2 + c[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def default_sigma(size: int) -> float:
    """Reference value (32 at 256 px) scaled to keep the mask's relative footprint."""
    return REF_SIGMA * size / REF_SIGMA_SIZE


def sigma_objective(images, sigma: float) -> float:
    """Mean over images of |mean_HF - mean_LF| + |std_HF - std_LF| after masking.

    HF is the central h/2 x w/2 square of the overturned magnitude spectrum,
    LF its complement.
    """
    total = 0.0
    for img in images:
        mag = np.abs(overturn(fft2_ortho(img)).data)
        h, w = mag.shape
        masked = mag * gaussian_mask(h, w, sigma)
        hf = np.zeros((h, w), dtype=bool)
        hf[h // 4:h // 4 + h // 2, w // 4:w // 4 + w // 2] = True
        a, b = masked[hf], masked[~hf]
        total += abs(a.mean() - b.mean()) + abs(a.std() - b.std())
    return total / len(images)


def select_sigma(calibration, sigma_lo=10, sigma_hi=50, step=1, return_table=False):
    """Sweep sigma on a grid and return the minimiser of ``sigma_objective``.

    Ties resolve to the smaller sigma.
    """
    images = [as_image(im) for im in calibration]
    if not images:
        raise ValueError("empty calibration set")
    if len({im.shape for im in images}) != 1:
        raise DimensionError("calibration images differ in size")
    n = int(np.floor((sigma_hi - sigma_lo) / step + 1e-9)) + 1
    sigmas = [sigma_lo + i * step for i in range(n)]
    table = [(s, sigma_objective(images, s)) for s in sigmas]
    best = min(table, key=lambda t: t[1])[0]  # min keeps the first (smallest) on ties
    return (best, table) if return_table else best
