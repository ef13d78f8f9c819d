"""Optimization loop, checkpoints, validation-based selection and test evaluation."""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .degrade import ROLES, parse_pair_id, split_subjects, stitch_patches  # noqa: F401
from .imgcore import read_image
from .kspace import fourier_upsample
from .model import ModelConfig, RestorationNet, build_model
from .objectives import LossWeights, aggregate, composite_loss, psnr, ssim_index

log = logging.getLogger(__name__)

CKPT_FORMAT = "mrirestore-ckpt/1"
SEVERITY_BUCKETS = (0.05, 0.15, 0.25, 0.35)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    base_lr: float = 1e-4
    warmup_epochs: int = 5
    halve_every: int = 10
    seed: int = 0
    precision: str = "f32"  # f32 for training, f64 for gradient checks

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.base_lr, self.halve_every) <= 0:
            raise ValueError("batch_size, epochs, base_lr and halve_every must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision is f32 or f64")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "f64" else torch.float32


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up to base_lr over ``warmup_epochs``, then halve every ``halve_every``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.base_lr / 2 ** ((epoch - cfg.warmup_epochs) // cfg.halve_every)


# ---------------------------------------------------------------------------
# data


@dataclass
class PairSet:
    ids: list
    lq: np.ndarray
    hq: np.ndarray

    def __len__(self):
        return len(self.ids)


def load_pairs(records, role: str) -> PairSet:
    recs = [r for r in records if r.role == role]
    if not recs:
        raise TrainingError(f"manifest has no {role} records")
    lq = np.stack([read_image(r.lq_path) for r in recs]).astype(np.float32)
    hq = np.stack([read_image(r.hq_path) for r in recs]).astype(np.float32)
    return PairSet([r.pair_id for r in recs], lq, hq)


def check_compatible(cfg: ModelConfig, pairs: PairSet) -> None:
    s = cfg.out_scale
    if pairs.hq.shape[1:] != (pairs.lq.shape[1] * s, pairs.lq.shape[2] * s):
        raise TrainingError(f"model scale x{s} does not map {pairs.lq.shape[1:]} to {pairs.hq.shape[1:]}")


def predict(net: RestorationNet, lq: np.ndarray, batch: int = 32) -> np.ndarray:
    p = next(net.parameters())
    outs = []
    with torch.no_grad():
        for i in range(0, len(lq), batch):
            x = torch.as_tensor(lq[i:i + batch], dtype=p.dtype)[:, None]
            outs.append(net(x)[:, 0].double().numpy())
    return np.concatenate(outs)


def score(pred, target):
    """Per-image SSIM and PSNR after clamping the prediction to [0, 1]."""
    pred = np.clip(pred, 0, 1)
    return ([ssim_index(p, t) for p, t in zip(pred, target)],
            [psnr(p, t) for p, t in zip(pred, target)])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net, opt, epoch, train_cfg, loss_w, runlog=None) -> None:
    torch.save({
        "format": CKPT_FORMAT,
        "model_config": net.cfg.to_dict(),
        "train_config": asdict(train_cfg),
        "loss_weights": asdict(loss_w),
        "params": net.state_dict(),
        "optimizer": opt.state_dict() if opt is not None else None,
        "epoch": epoch,
        "runlog": runlog.to_json() if runlog is not None else None,
    }, path)


def load_checkpoint(path):
    """Returns ``(net, state)``; ``state`` holds the raw checkpoint dict."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state.get("format") != CKPT_FORMAT:
        raise TrainingError(f"{path}: unsupported checkpoint format {state.get('format')!r}")
    cfg = ModelConfig(**state["model_config"])
    dtype = next(iter(state["params"].values())).dtype
    net = build_model(cfg, 0, dtype)
    net.load_state_dict(state["params"])
    return net, state


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train: dict
    val_ssim: tuple
    val_psnr: tuple


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_ssim: float = -math.inf

    def add(self, rec: EpochRecord) -> bool:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise TrainingError("epoch records out of order")
        self.records.append(rec)
        if rec.val_ssim[0] > self.best_val_ssim:
            self.best_val_ssim, self.best_epoch = rec.val_ssim[0], rec.epoch
            return True
        return False

    def to_json(self) -> dict:
        return {"records": [asdict(r) for r in self.records],
                "best_epoch": self.best_epoch, "best_val_ssim": self.best_val_ssim}

    @classmethod
    def from_json(cls, d) -> "RunLog":
        recs = [EpochRecord(r["epoch"], r["lr"], r["train"], tuple(r["val_ssim"]), tuple(r["val_psnr"]))
                for r in d["records"]]
        return cls(recs, d["best_epoch"], d["best_val_ssim"])


def make_optimizer(net, cfg: TrainConfig):
    return torch.optim.Adam(net.parameters(), lr=lr_at(0, cfg), betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(net: RestorationNet, records, loss_w: LossWeights, cfg: TrainConfig, out_dir=None,
          resume=None, validate: bool = True):
    """Train ``net`` in place; returns the RunLog.

    Writes ``epoch_XXX.pt``, ``best.pt`` and ``runlog.json`` to ``out_dir``
    when given. ``resume`` is a checkpoint path whose parameters, optimizer
    state and epoch counter are restored before continuing.
    """
    torch.use_deterministic_algorithms(True)
    net.to(cfg.dtype)
    train_set = load_pairs(records, "train")
    check_compatible(net.cfg, train_set)
    val_set = load_pairs(records, "val") if validate else None

    opt = make_optimizer(net, cfg)
    runlog, start = RunLog(), 0
    if resume is not None:
        state = torch.load(resume, map_location="cpu", weights_only=True)
        net.load_state_dict(state["params"])
        opt.load_state_dict(state["optimizer"])
        runlog = RunLog.from_json(state["runlog"]) if state["runlog"] else RunLog()
        start = state["epoch"] + 1
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    lq_all = torch.as_tensor(train_set.lq, dtype=cfg.dtype)[:, None]
    hq_all = torch.as_tensor(train_set.hq, dtype=cfg.dtype)[:, None]
    n = len(train_set)
    for epoch in range(start, cfg.epochs):
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        net.train()
        sums, count = defaultdict(float), 0
        order = epoch_order(n, cfg.seed, epoch)
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            it = torch.as_tensor(idx)
            out = net(lq_all[it])
            lb = composite_loss(out, hq_all[it], loss_w)
            if not torch.isfinite(lb.total):
                bad = [train_set.ids[i] for i in idx]
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b // cfg.batch_size}: {bad}")
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            opt.step()
            for k, v in lb.as_floats().items():
                sums[k] += v * len(idx)
            count += len(idx)
        train_means = {k: v / count for k, v in sums.items()}

        net.eval()
        if val_set is not None:
            ss, ps = score(predict(net, val_set.lq), val_set.hq.astype(np.float64))
            va, vp = aggregate(ss), aggregate(ps)
            val_ssim, val_psnr = (va.mean, va.std), (vp.mean, vp.std)
        else:
            val_ssim, val_psnr = (math.nan, math.nan), (math.nan, math.nan)
        improved = runlog.add(EpochRecord(epoch, lr, train_means, val_ssim, val_psnr))
        log.info("epoch %d lr %.3g loss %.5f val ssim %.4f psnr %.2f", epoch, lr,
                 train_means["total"], val_ssim[0], val_psnr[0])
        if out_dir is not None:
            ckpt = out_dir / f"epoch_{epoch:03d}.pt"
            save_checkpoint(ckpt, net, opt, epoch, cfg, loss_w, runlog)
            if improved:
                save_checkpoint(out_dir / "best.pt", net, opt, epoch, cfg, loss_w, runlog)
            (out_dir / "runlog.json").write_text(json.dumps(runlog.to_json(), indent=1), encoding="utf-8")
    return runlog


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Report:
    metrics: dict  # name -> Aggregate
    per_image: list  # dicts with id, ssim, psnr, base_ssim, base_psnr[, severity]
    buckets: dict = field(default_factory=dict)  # (lo, hi) -> {"ssim": Aggregate-like, "base_ssim": ...}

    def format(self) -> str:
        lines = ["metric\tmean\tstd\tn"]
        for name, agg in self.metrics.items():
            lines.append(f"{name}\t{agg.mean:.6f}\t{agg.std:.6f}\t{agg.n}")
        if self.buckets:
            lines.append("")
            lines.append("severity_bucket\tn\tssim\tbase_ssim\tpsnr\tbase_psnr")
            for (lo, hi), b in self.buckets.items():
                lines.append(f"{lo:.2f}-{hi:.2f}\t{b['n']}\t{b['ssim']:.6f}\t{b['base_ssim']:.6f}"
                             f"\t{b['psnr']:.4f}\t{b['base_psnr']:.4f}")
        lines.append("")
        keys = [k for k in ("id", "ssim", "psnr", "base_ssim", "base_psnr", "severity") if k in self.per_image[0]]
        lines.append("\t".join(keys))
        for row in self.per_image:
            lines.append("\t".join(row[k] if k == "id" else f"{row[k]:.6f}" for k in keys))
        return "\n".join(lines) + "\n"


def _finish_report(rows, plans=None) -> Report:
    metrics = {
        "ssim": aggregate([r["ssim"] for r in rows]),
        "psnr": aggregate([r["psnr"] for r in rows]),
        "base_ssim": aggregate([r["base_ssim"] for r in rows]),
        "base_psnr": aggregate([r["base_psnr"] for r in rows]),
    }
    buckets = {}
    if plans is not None:
        for r in rows:
            r["severity"] = plans[r["id"]].severity
        edges = SEVERITY_BUCKETS
        for lo, hi in zip(edges, edges[1:]):
            last = hi == edges[-1]
            sel = [r for r in rows if lo <= r["severity"] < hi or (last and r["severity"] == hi)]
            if sel:
                buckets[(lo, hi)] = {
                    "n": len(sel),
                    **{k: float(np.mean([r[k] for r in sel if math.isfinite(r[k])] or [math.inf]))
                       for k in ("ssim", "base_ssim", "psnr", "base_psnr")},
                }
    return Report(metrics, rows, buckets)


def _group_slices(recs):
    groups = defaultdict(list)
    for r in recs:
        subject, z, row, col, aug = parse_pair_id(r.pair_id)
        if aug != "none":
            continue
        groups[(subject, z)].append((r, row, col))
    return groups


def evaluate(net: RestorationNet, records, role: str = "test", stitch: bool = False, plans=None) -> Report:
    """SSIM/PSNR of restored vs reference images with the degraded-input baseline.

    SR baseline: zero-filled k-space upsampling of the LR input. MAR
    baseline: the MA input itself. With ``stitch`` SR patches are first
    reassembled into full slices (patch ids must follow ``degrade.pair_id``).
    """
    recs = [r for r in records if r.role == role]
    if not recs:
        raise TrainingError(f"no {role} records to evaluate")
    net.eval()
    s = net.cfg.out_scale
    rows = []
    if stitch and s > 1:
        for (subject, z), items in sorted(_group_slices(recs).items()):
            lq = [(read_image(r.lq_path).astype(np.float64), row // s, col // s) for r, row, col in items]
            hq = [(read_image(r.hq_path).astype(np.float64), row, col) for r, row, col in items]
            hr_shape = (max(rr + p.shape[0] for p, rr, _ in hq), max(cc + p.shape[1] for p, _, cc in hq))
            lr_shape = (hr_shape[0] // s, hr_shape[1] // s)
            lr = stitch_patches(lq, lr_shape)
            hr = stitch_patches(hq, hr_shape)
            preds = predict(net, np.stack([p for p, _, _ in lq]))
            sr = stitch_patches([(p, rr, cc) for p, (_, rr, cc) in zip(preds, lq)], hr_shape, scale=s)
            base = np.clip(fourier_upsample(lr, s), 0, 1)
            rows.append(_row(f"{subject}_z{z:03d}", sr, hr, base))
    else:
        pairs = load_pairs(recs, role)
        check_compatible(net.cfg, pairs)
        preds = predict(net, pairs.lq)
        for pid, p, lq, hq in zip(pairs.ids, preds, pairs.lq, pairs.hq):
            lq, hq = lq.astype(np.float64), hq.astype(np.float64)
            base = np.clip(fourier_upsample(lq, s), 0, 1) if s > 1 else lq
            rows.append(_row(pid, np.clip(p, 0, 1), hq, base))
    return _finish_report(rows, plans)


def _row(pid, pred, ref, base):
    return {"id": pid, "ssim": ssim_index(pred, ref), "psnr": psnr(pred, ref),
            "base_ssim": ssim_index(base, ref), "base_psnr": psnr(base, ref)}
