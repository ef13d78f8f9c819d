"""RCAN-style restoration networks for super-resolution and motion-artifact reduction.

Topology: shallow 3x3 conv -> [MAR: stride-2 conv] -> stages of residual
groups (each a stack of RCABs plus a tail conv and skip) with a stage-level
long skip -> x2 sub-pixel upsamplers -> 3x3 reconstruction conv.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .degrade import StitchError, stitch_patches  # noqa: F401  (re-exported)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    task: str = "SR"  # SR or MAR
    scheme: str = "post"  # post or progressive
    sr_factor: int = 2
    n_rg_per_stage: int = 5
    n_rcab: int = 5
    n_feats: int = 64
    reduction: int = 16
    kernel: int = 3
    rir_skip: bool = True
    global_skip: bool = False
    zero_tail: bool = False

    def __post_init__(self):
        task = self.task.upper()
        object.__setattr__(self, "task", task)
        if task not in ("SR", "MAR"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.scheme not in ("post", "progressive"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if task == "SR" and self.sr_factor not in (2, 4):
            raise ConfigError("SR needs sr_factor 2 or 4")
        if task == "MAR" and self.sr_factor != 1:
            raise ConfigError("MAR needs sr_factor 1")
        if self.kernel != 3:
            raise ConfigError("kernel size is fixed at 3")
        if min(self.n_rg_per_stage, self.n_rcab, self.n_feats, self.reduction) < 1:
            raise ConfigError("counts must be positive")
        if self.n_feats % self.reduction:
            raise ConfigError("n_feats must be divisible by reduction")
        if self.global_skip and task == "SR":
            raise ConfigError("input bypass is only defined when input and output sizes agree")

    @property
    def n_stages(self) -> int:
        if self.task == "SR" and self.scheme == "progressive":
            return int(math.log2(self.sr_factor))
        return 1

    @property
    def n_upsamplers(self) -> int:
        return 1 if self.task == "MAR" else int(math.log2(self.sr_factor))

    @property
    def out_scale(self) -> int:
        return self.sr_factor

    @classmethod
    def toy(cls, task="SR", scheme="post", sr_factor=2, **kw) -> "ModelConfig":
        kw = {"n_rg_per_stage": 2, "n_rcab": 2, "n_feats": 8, "reduction": 4, **kw}
        return cls(task=task, scheme=scheme, sr_factor=sr_factor, **kw)

    @classmethod
    def full(cls, task="SR", scheme="post", sr_factor=2) -> "ModelConfig":
        """Full-size configurations: 5x5 per stage, 10x5 for single-stage x4 post."""
        n_rg = 10 if (task.upper() == "SR" and sr_factor == 4 and scheme == "post") else 5
        return cls(task=task, scheme=scheme, sr_factor=sr_factor, n_rg_per_stage=n_rg)

    def to_dict(self) -> dict:
        return asdict(self)


def pixel_shuffle(feat, r: int):
    """Sub-pixel rearrangement ``(..., C*r*r, H, W) -> (..., C, r*H, r*W)``.

    ``out[c, r*h + a, r*w + b] = in[c*r*r + a*r + b, h, w]``. Works on numpy
    arrays and torch tensors.
    """
    *lead, crr, h, w = feat.shape
    if crr % (r * r):
        raise ValueError(f"{crr} channels not divisible by r^2 = {r * r}")
    c = crr // (r * r)
    nl = len(lead)
    x = feat.reshape(*lead, c, r, r, h, w)
    perm = (*range(nl), nl, nl + 3, nl + 1, nl + 4, nl + 2)
    x = x.permute(*perm) if torch.is_tensor(x) else x.transpose(perm)
    return x.reshape(*lead, c, h * r, w * r)


def conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ChannelAttention(nn.Module):
    def __init__(self, n_feats, reduction):
        super().__init__()
        self.down = nn.Conv2d(n_feats, n_feats // reduction, 1)
        self.up = nn.Conv2d(n_feats // reduction, n_feats, 1)

    def gate(self, x):
        y = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.up(torch.relu(self.down(y))))

    def forward(self, x):
        return x * self.gate(x)


class RCAB(nn.Module):
    def __init__(self, n_feats, reduction):
        super().__init__()
        self.conv1 = conv3(n_feats, n_feats)
        self.conv2 = conv3(n_feats, n_feats)
        self.ca = ChannelAttention(n_feats, reduction)

    def forward(self, x):
        return x + self.ca(self.conv2(torch.relu(self.conv1(x))))


class ResidualGroup(nn.Module):
    def __init__(self, n_feats, reduction, n_rcab):
        super().__init__()
        self.blocks = nn.Sequential(*[RCAB(n_feats, reduction) for _ in range(n_rcab)])
        self.tail = conv3(n_feats, n_feats)

    def forward(self, x):
        return x + self.tail(self.blocks(x))


class Stage(nn.Module):
    """Residual-in-residual body: RGs, a tail conv and the long skip."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.groups = nn.Sequential(*[ResidualGroup(cfg.n_feats, cfg.reduction, cfg.n_rcab)
                                      for _ in range(cfg.n_rg_per_stage)])
        self.tail = conv3(cfg.n_feats, cfg.n_feats)
        self.skip = cfg.rir_skip

    def forward(self, x):
        y = self.tail(self.groups(x))
        return x + y if self.skip else y


class Upsampler2(nn.Module):
    def __init__(self, n_feats):
        super().__init__()
        self.conv = conv3(n_feats, 4 * n_feats)

    def forward(self, x):
        return pixel_shuffle(self.conv(x), 2)


class RestorationNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        nf = cfg.n_feats
        self.head = conv3(1, nf)
        self.down = conv3(nf, nf, stride=2) if cfg.task == "MAR" else None
        self.stages = nn.ModuleList([Stage(cfg) for _ in range(cfg.n_stages)])
        if cfg.scheme == "progressive" and cfg.task == "SR":
            # one x2 upsampler closing every stage
            self.stage_up = nn.ModuleList([Upsampler2(nf) for _ in range(cfg.n_stages)])
            self.tail_up = nn.ModuleList()
        else:
            self.stage_up = nn.ModuleList()
            self.tail_up = nn.ModuleList([Upsampler2(nf) for _ in range(cfg.n_upsamplers)])
        self.recon = conv3(nf, 1)

    @property
    def n_upsampler_blocks(self) -> int:
        return len(self.stage_up) + len(self.tail_up)

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x[:, None]
        if self.cfg.task == "MAR" and (x.shape[-1] % 2 or x.shape[-2] % 2):
            raise ValueError(f"MAR input dims must be even, got {tuple(x.shape[-2:])}")
        inp = x
        f = self.head(x)
        if self.down is not None:
            f = self.down(f)
        for i, stage in enumerate(self.stages):
            f = stage(f)
            if self.stage_up:
                f = self.stage_up[i](f)
        for up in self.tail_up:
            f = up(f)
        out = self.recon(f)
        if self.cfg.global_skip:
            out = out + inp
        return out[:, 0] if squeeze else out


def init_parameters(net: nn.Module, seed: int, zero_tail: bool = False) -> None:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), from one seeded stream."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                m.bias.copy_(torch.rand(m.bias.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
        if zero_tail:
            net.recon.weight.zero_()
            net.recon.bias.zero_()


def build_model(cfg: ModelConfig, init_seed: int = 0, dtype=torch.float32) -> RestorationNet:
    net = RestorationNet(cfg)
    init_parameters(net, init_seed, cfg.zero_tail)
    return net.to(dtype)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def forward_numpy(net: RestorationNet, img) -> np.ndarray:
    """Run one 2D image through the network without tracking gradients."""
    p = next(net.parameters())
    x = torch.as_tensor(np.asarray(img), dtype=p.dtype)[None, None]
    with torch.no_grad():
        return net(x)[0, 0].cpu().numpy().astype(np.float64)


def restore_image(net: RestorationNet, img, patch=None, stride=None) -> np.ndarray:
    """Restore a full image, either in one pass or by patch-and-stitch."""
    from .degrade import extract_patches

    arr = np.asarray(img)
    s = net.cfg.out_scale
    if patch is None:
        return np.clip(forward_numpy(net, arr), 0, 1)
    out = [(forward_numpy(net, p), r, c) for p, r, c in extract_patches(arr, patch, stride or patch)]
    return stitch_patches(out, (arr.shape[0] * s, arr.shape[1] * s), scale=s)
