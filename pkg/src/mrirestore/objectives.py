"""Loss terms and quality metrics.

Loss functions take torch tensors shaped ``(N, 1, H, W)`` (or ``(H, W)``)
and return a scalar tensor, so they can be back-propagated. ``ssim_index``,
``psnr`` and ``aggregate`` are numpy-facing evaluation helpers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .kspace import default_sigma

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# largest |Sobel| magnitude reachable on a [0, 1] input (right column, top-right and bottom set)
SOBEL_MAX = 2.0 * math.sqrt(5.0)
DEFAULT_GRAD_A = 2.5


def _as4d(x) -> torch.Tensor:
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    if x.dim() != 4:
        raise ValueError(f"expected 2D-4D tensor, got shape {tuple(x.shape)}")
    return x


def _pair(x, y):
    x, y = _as4d(x), _as4d(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dtype != y.dtype:
        y = y.to(x.dtype)
    return x, y


def charbonnier(x, y, eps: float = 1e-3) -> torch.Tensor:
    x, y = _pair(x, y)
    d = x - y
    return torch.sqrt(d * d + eps * eps).mean()


def pixel_l1(x, y) -> torch.Tensor:
    x, y = _pair(x, y)
    return (x - y).abs().mean()


def _gauss_window(dtype, device=None) -> torch.Tensor:
    r = torch.arange(SSIM_WIN, dtype=dtype, device=device) - SSIM_WIN // 2
    g = torch.exp(-(r * r) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim_map(x, y) -> torch.Tensor:
    """Gaussian-window SSIM over windows lying fully inside the image."""
    x, y = _pair(x, y)
    if x.shape[-1] < SSIM_WIN or x.shape[-2] < SSIM_WIN:
        raise ValueError(f"image smaller than the {SSIM_WIN}px SSIM window")
    w = _gauss_window(x.dtype, x.device)
    c = x.shape[1]
    if c > 1:
        w = w.expand(c, 1, SSIM_WIN, SSIM_WIN)

    def filt(t):
        return F.conv2d(t, w, groups=c)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def loss_ssim_l1(x, y) -> torch.Tensor:
    return (1 - ssim_map(x, y)).abs().mean()


def grad_map(img) -> torch.Tensor:
    """Sobel magnitude with reflective borders, scaled into [0, 1]."""
    x = _as4d(img)
    if x.shape[-1] < 3 or x.shape[-2] < 3:
        raise ValueError("gradient map needs at least 3x3 pixels")
    xp = F.pad(x.reshape(-1, 1, *x.shape[-2:]), (1, 1, 1, 1), mode="reflect")[:, 0]
    # separable Sobel: smooth across, then difference; a constant gives exact zeros
    sr = xp[:, :-2] + 2 * xp[:, 1:-1] + xp[:, 2:]
    sc = xp[:, :, :-2] + 2 * xp[:, :, 1:-1] + xp[:, :, 2:]
    gx = sr[:, :, 2:] - sr[:, :, :-2]
    gy = sc[:, 2:] - sc[:, :-2]
    sq = gx * gx + gy * gy
    c = x.shape[1]
    # safe sqrt: zero gradient where the magnitude is exactly zero
    pos = sq > 0
    mag = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return (mag / SOBEL_MAX).reshape(x.shape[0], c, *x.shape[-2:])


def amplify_grad(m, a: float = DEFAULT_GRAD_A):
    """Boost small gradients: ``1 - exp(-a * m)``."""
    if torch.is_tensor(m):
        return 1 - torch.exp(-a * m)
    return 1 - np.exp(-a * np.asarray(m, dtype=np.float64))


def loss_grad_l1(x, y, amplified: bool = False, a: float = DEFAULT_GRAD_A) -> torch.Tensor:
    x, y = _pair(x, y)
    gx, gy = grad_map(x), grad_map(y)
    if amplified:
        gx, gy = amplify_grad(gx, a), amplify_grad(gy, a)
    return (gx - gy).abs().mean()


def _mask_tensor(h, w, sigma, dtype, device):
    r = torch.arange(h, dtype=dtype, device=device) - h // 2
    c = torch.arange(w, dtype=dtype, device=device) - w // 2
    return torch.exp(-(r[:, None] ** 2 + c[None, :] ** 2) / (2 * sigma * sigma))


def kspace_mse(x, y, masked: bool = False, sigma: float | None = None) -> torch.Tensor:
    """Mean squared modulus of the orthonormal spectrum difference.

    With ``masked`` the standard-layout spectrum is read as overturned (high
    frequencies central) and weighted by a centred Gaussian before squaring.
    """
    x, y = _pair(x, y)
    d = torch.fft.fft2(x - y, norm="ortho")
    if masked:
        h, w = x.shape[-2:]
        s = default_sigma(h) if sigma is None else sigma
        d = d * _mask_tensor(h, w, s, x.dtype, x.device)
    return (d.real ** 2 + d.imag ** 2).mean()


# ---------------------------------------------------------------------------
# composite objective


@dataclass(frozen=True)
class LossWeights:
    w_charb: float = 1.0
    w_ssim: float = 0.1
    w_kspace: float = 0.05
    w_grad: float = 0.1
    kspace_masked: bool = False
    grad_amplified: bool = False
    pixel_l1: bool = False
    charbonnier_eps: float = 1e-3
    grad_a: float = DEFAULT_GRAD_A
    mask_sigma: float | None = None

    def __post_init__(self):
        ws = (self.w_charb, self.w_ssim, self.w_kspace, self.w_grad)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError(f"weights must be non-negative with at least one positive: {ws}")
        if self.grad_a <= 0:
            raise ValueError("grad_a must be positive")
        if self.mask_sigma is not None and self.mask_sigma <= 0:
            raise ValueError("mask_sigma must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "LossWeights":
        try:
            base = PRESETS[name.upper()]
        except KeyError:
            raise ValueError(f"unknown loss preset {name!r}; choose from {sorted(PRESETS)}") from None
        return replace(base, **overrides)


PRESETS = {
    "R1": LossWeights(w_ssim=0.0, w_kspace=0.0, w_grad=0.0, pixel_l1=True),
    "R2": LossWeights(w_ssim=0.0, w_kspace=0.0, w_grad=0.0),
    "R3": LossWeights(),
    "R4": LossWeights(kspace_masked=True, grad_amplified=True),
}


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def composite_loss(x, y, w: LossWeights) -> LossBreakdown:
    """Weighted sum of the enabled terms; zero-weight terms are skipped."""
    x, y = _pair(x, y)
    terms, weights = {}, {}
    if w.w_charb > 0:
        if w.pixel_l1:
            terms["pixel_l1"] = pixel_l1(x, y)
        else:
            terms["charbonnier"] = charbonnier(x, y, w.charbonnier_eps)
        weights[next(iter(terms))] = w.w_charb
    if w.w_ssim > 0:
        terms["ssim_l1"] = loss_ssim_l1(x, y)
        weights["ssim_l1"] = w.w_ssim
    if w.w_kspace > 0:
        key = "kspace_plus_mse" if w.kspace_masked else "kspace_mse"
        terms[key] = kspace_mse(x, y, w.kspace_masked, w.mask_sigma)
        weights[key] = w.w_kspace
    if w.w_grad > 0:
        key = "grad_plus_l1" if w.grad_amplified else "grad_l1"
        terms[key] = loss_grad_l1(x, y, w.grad_amplified, w.grad_a)
        weights[key] = w.w_grad
    total = sum(weights[k] * terms[k] for k in terms)
    return LossBreakdown(total, terms, weights)


# ---------------------------------------------------------------------------
# metrics


def ssim_index(x, y) -> float:
    with torch.no_grad():
        return float(ssim_map(_as4d(x).double(), _as4d(y).double()).mean())


def psnr(x, y, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``inf``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return 10 * math.log10(peak * peak / mse)


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int

    def __str__(self):
        return f"{self.mean:.4f}±{self.std:.4f}"


def aggregate(values) -> Aggregate:
    """Mean and population std, ignoring infinite entries (PSNR of identical pairs)."""
    v = np.asarray(sorted(x for x in values if math.isfinite(x)), dtype=np.float64)
    if v.size < 2:
        raise ValueError("need at least two finite values to aggregate")
    return Aggregate(float(v.mean()), float(v.std()), int(v.size))
