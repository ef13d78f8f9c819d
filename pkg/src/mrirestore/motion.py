"""Retrospective motion artifacts by splicing phase-encoding lines between k-spaces.

Rows of the standard-layout spectrum are treated as phase-encoding lines.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .degrade import ManifestRecord, resolve_records, split_subjects, write_manifest
from .imgcore import as_image, normalize_unit, write_image
from .kspace import DimensionError

log = logging.getLogger(__name__)

MAX_SHIFT = 8
MAX_ANGLE = 5.0
MAX_MOVES = 4
MAX_SEGMENTS = 6


class PlanError(ValueError):
    pass


def shift_image(img, dx: int, dy: int) -> np.ndarray:
    """Integer translation by ``dx`` columns and ``dy`` rows with zero fill."""
    arr = as_image(img)
    h, w = arr.shape
    if abs(dx) >= w or abs(dy) >= h:
        raise DimensionError(f"shift ({dx}, {dy}) out of range for {h}x{w}")
    out = np.zeros_like(arr)
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out


def rotate_image(img, angle_deg: float) -> np.ndarray:
    """Rotate about the image centre with bilinear interpolation, zero outside."""
    arr = as_image(img)
    if not np.isfinite(angle_deg):
        raise ValueError("angle must be finite")
    h, w = arr.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(angle_deg)
    cos, sin = np.cos(t), np.sin(t)
    rr, cc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source location
    sr = cos * rr - sin * cc + cy
    sc = sin * rr + cos * cc + cx
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr, fc = sr - r0, sc - c0

    padded = np.zeros((h + 2, w + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = arr
    r0p = np.clip(r0 + 1, 0, h + 1)
    c0p = np.clip(c0 + 1, 0, w + 1)
    r1p = np.clip(r0 + 2, 0, h + 1)
    c1p = np.clip(c0 + 2, 0, w + 1)
    out = ((1 - fr) * (1 - fc) * padded[r0p, c0p] + (1 - fr) * fc * padded[r0p, c1p]
           + fr * (1 - fc) * padded[r1p, c0p] + fr * fc * padded[r1p, c1p])
    outside = (sr <= -1) | (sr >= h) | (sc <= -1) | (sc >= w)
    out[outside] = 0.0
    return out.astype(arr.dtype, copy=False)


@dataclass(frozen=True)
class Move:
    dx: int = 0
    dy: int = 0
    angle: float = 0.0

    def apply(self, img) -> np.ndarray:
        out = np.asarray(img, dtype=np.float64)
        if self.angle:
            out = rotate_image(out, self.angle)
        if self.dx or self.dy:
            out = shift_image(out, self.dx, self.dy)
        return out


@dataclass(frozen=True)
class Segment:
    row_start: int
    row_len: int
    move_index: int


@dataclass(frozen=True)
class MotionPlan:
    height: int
    moves: tuple = ()
    segments: tuple = ()

    @property
    def replaced_rows(self) -> int:
        return sum(s.row_len for s in self.segments)

    @property
    def severity(self) -> float:
        return self.replaced_rows / self.height

    def validate(self) -> None:
        spans = sorted((s.row_start, s.row_start + s.row_len) for s in self.segments)
        for s in self.segments:
            if s.row_len < 1 or s.row_start < 0 or s.row_start + s.row_len > self.height:
                raise PlanError(f"segment {s} outside rows [0, {self.height})")
            if not 0 <= s.move_index < len(self.moves):
                raise PlanError(f"segment {s} references missing move")
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise PlanError(f"overlapping segments [{a0}, {a1}) and [{b0}, {b1})")

    def to_json(self) -> dict:
        return {"height": self.height, "severity": self.severity,
                "moves": [asdict(m) for m in self.moves],
                "segments": [asdict(s) for s in self.segments]}

    @classmethod
    def from_json(cls, d) -> "MotionPlan":
        return cls(d["height"], tuple(Move(**m) for m in d["moves"]),
                   tuple(Segment(**s) for s in d["segments"]))


def splice_spectrum(orig, plan: MotionPlan) -> np.ndarray:
    """Standard-layout spectrum of ``orig`` with the planned rows swapped in."""
    arr = as_image(orig).astype(np.float64)
    if plan.height != arr.shape[0]:
        raise PlanError(f"plan for {plan.height} rows applied to {arr.shape[0]}-row image")
    plan.validate()
    spec = np.fft.fft2(arr, norm="ortho")
    used = sorted({s.move_index for s in plan.segments})
    moved = {i: np.fft.fft2(plan.moves[i].apply(arr), norm="ortho") for i in used}
    for s in plan.segments:
        rows = slice(s.row_start, s.row_start + s.row_len)
        spec[rows] = moved[s.move_index][rows]
    return spec


def splice_kspace(orig, plan: MotionPlan, clamp: bool = True) -> np.ndarray:
    if not plan.segments:
        arr = as_image(orig).astype(np.float64)
        splice_spectrum(arr, plan)  # validation only
        return arr.copy()
    out = np.fft.ifft2(splice_spectrum(orig, plan), norm="ortho").real
    return np.clip(out, 0, 1) if clamp else out


def replaced_row_count(height: int, severity: float) -> int:
    return int(np.floor(severity * height + 1e-9))


def _sample_moves(rng):
    moves = []
    for _ in range(int(rng.integers(1, MAX_MOVES + 1))):
        angle = float(rng.uniform(0, MAX_ANGLE))
        kind = int(rng.integers(0, 4))  # 0 rotation only, 1 x, 2 y, 3 both
        dx = dy = 0
        if kind in (1, 3):
            dx = int(rng.integers(1, MAX_SHIFT + 1)) * int(rng.choice((-1, 1)))
        if kind in (2, 3):
            dy = int(rng.integers(1, MAX_SHIFT + 1)) * int(rng.choice((-1, 1)))
        moves.append(Move(dx, dy, angle))
    return tuple(moves)


def _sample_segments(rng, height, n_rows, protect_center, n_moves):
    lo = protect_center // 2
    avail = height - protect_center
    k = int(rng.integers(1, min(MAX_SEGMENTS, n_rows) + 1))
    cuts = np.sort(rng.choice(np.arange(1, n_rows), size=k - 1, replace=False)) if k > 1 else np.array([], int)
    lengths = np.diff(np.concatenate(([0], cuts, [n_rows])))
    gaps = np.sort(rng.integers(0, avail - n_rows + 1, size=k))
    segs, used = [], 0
    for g, ln in zip(gaps, lengths):
        start = lo + int(g) + used
        segs.append(Segment(start, int(ln), int(rng.integers(0, n_moves))))
        used += int(ln)
    return tuple(segs)


def sample_plan(rng, height, severity_range=(0.05, 0.35), protect_center=8) -> MotionPlan:
    """Draw moves and non-overlapping row segments.

    The replaced row count is floor(severity * height), with severity uniform
    in ``severity_range``. The ``protect_center`` lowest-frequency rows are
    never replaced.
    """
    s_lo, s_hi = severity_range
    if protect_center % 2 or protect_center < 0:
        raise PlanError("protect_center must be a non-negative even number")
    if replaced_row_count(height, s_lo) < 1 or replaced_row_count(height, s_hi) > height - protect_center:
        raise PlanError(f"severity {severity_range} infeasible for {height} rows "
                        f"with {protect_center} protected")
    if s_hi >= 1:
        raise PlanError("severity must be < 1")
    moves = _sample_moves(rng)
    n_rows = replaced_row_count(height, float(rng.uniform(s_lo, s_hi)))
    return MotionPlan(height, moves, _sample_segments(rng, height, n_rows, protect_center, len(moves)))


def gen_motion_set(img, n=5, severity_range=(0.05, 0.35), seed=0, protect_center=8, image_id=0):
    """``n`` motion-corrupted variants of ``img`` with pairwise distinct segment sets.

    Each variant's RNG stream is keyed on ``(seed, image_id, variant)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    arr = as_image(img)
    out, seen = [], set()
    for v in range(n):
        rng = np.random.default_rng([seed, image_id, v])
        while True:
            plan = sample_plan(rng, arr.shape[0], severity_range, protect_center)
            key = tuple((s.row_start, s.row_len) for s in plan.segments)
            if key not in seen:
                seen.add(key)
                break
        out.append((splice_kspace(arr, plan), plan))
    return out


@dataclass
class MotionDatasetConfig:
    variants: int = 5
    severity_range: tuple = (0.05, 0.35)
    protect_center: int = 8
    split: tuple = (21, 4, 3)
    seed: int = 0


def build_mar_dataset(volumes, out_dir, cfg: MotionDatasetConfig):
    """Write GT slices and MA variants; returns manifest records with resolved paths.

    Plans are also written to ``plans.jsonl`` keyed by pair id.
    """
    volumes = dict(volumes)
    roles = split_subjects(volumes, cfg.split, cfg.seed, scale=sum(cfg.split) != len(volumes))
    out_dir = Path(out_dir)
    (out_dir / "gt").mkdir(parents=True, exist_ok=True)
    (out_dir / "ma").mkdir(parents=True, exist_ok=True)
    records, plans = [], []
    image_id = 0
    for sid in sorted(volumes):
        for z, sl in enumerate(volumes[sid]):
            gt = normalize_unit(np.asarray(sl, dtype=np.float64))
            gt_rel = f"gt/{sid}_z{z:03d}.mrir"
            write_image(gt, out_dir / gt_rel)
            for v, (ma, plan) in enumerate(gen_motion_set(gt, cfg.variants, cfg.severity_range,
                                                          cfg.seed, cfg.protect_center, image_id)):
                pid = f"{sid}_z{z:03d}_v{v}"
                ma_rel = f"ma/{pid}.mrir"
                write_image(ma, out_dir / ma_rel)
                records.append(ManifestRecord(pid, sid, roles[sid], ma_rel, gt_rel, "none"))
                plans.append({"pair_id": pid, **plan.to_json()})
            image_id += 1
    write_manifest(records, out_dir / "manifest.tsv")
    with open(out_dir / "plans.jsonl", "w", encoding="utf-8") as f:
        for p in plans:
            f.write(json.dumps(p, sort_keys=True) + "\n")
    log.info("wrote %d MA images for %d subjects to %s", len(records), len(volumes), out_dir)
    return resolve_records(records, out_dir)


def read_plans(path) -> dict:
    plans = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                plans[d.pop("pair_id")] = MotionPlan.from_json(d)
    return plans
