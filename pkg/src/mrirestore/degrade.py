"""Fourier-domain LR synthesis, patching, augmentation and SR manifests."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgcore import as_image, normalize_unit, write_image
from .kspace import DimensionError, crop_center, fft2_ortho, ifft2_ortho, shift_center, unshift_center

log = logging.getLogger(__name__)

ROLES = ("train", "val", "test")
AUGMENTATIONS = ("none", "rot90", "rot180", "rot270")


class StitchError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def fourier_downsample(img, factor: int, normalize: bool = True) -> np.ndarray:
    """Keep the central 1/factor of k-space in each axis and return to image space."""
    arr = as_image(img)
    h, w = arr.shape
    if factor < 1 or h % (2 * factor) or w % (2 * factor):
        raise DimensionError(f"{h}x{w} image is not divisible by 2*{factor}")
    spec = shift_center(fft2_ortho(arr))
    spec = crop_center(spec, h // factor, w // factor)
    out = ifft2_ortho(unshift_center(spec))
    return normalize_unit(out) if normalize else out


def crop_roi(img, out: int = 256) -> np.ndarray:
    arr = as_image(img)
    h, w = arr.shape
    if h < out or w < out:
        raise DimensionError(f"cannot crop {h}x{w} to {out}x{out}")
    r0, c0 = (h - out) // 2, (w - out) // 2
    return arr[r0:r0 + out, c0:c0 + out].copy()


def extract_patches(img, patch: int, stride: int):
    """Row-major grid of ``(patch, row, col)`` tuples; the grid must tile exactly."""
    arr = as_image(img)
    h, w = arr.shape
    if patch > h or patch > w or stride < 1 or (h - patch) % stride or (w - patch) % stride:
        raise DimensionError(f"patch {patch}/stride {stride} does not tile {h}x{w}")
    return [
        (arr[r:r + patch, c:c + patch].copy(), r, c)
        for r in range(0, h - patch + 1, stride)
        for c in range(0, w - patch + 1, stride)
    ]


def stitch_patches(patches, shape, scale: int = 1, clamp: bool = True) -> np.ndarray:
    """Reassemble ``(patch, row, col)`` tuples, averaging overlaps uniformly.

    Offsets are in the source grid and get multiplied by ``scale``, so LR
    patch positions can be used directly for SR outputs.
    """
    acc = np.zeros(shape, dtype=np.float64)
    cnt = np.zeros(shape, dtype=np.int64)
    for p, r, c in patches:
        p = np.asarray(p)
        r, c = r * scale, c * scale
        ph, pw = p.shape
        if r < 0 or c < 0 or r + ph > shape[0] or c + pw > shape[1]:
            raise StitchError(f"patch at ({r}, {c}) of size {ph}x{pw} exceeds {shape}")
        acc[r:r + ph, c:c + pw] += p
        cnt[r:r + ph, c:c + pw] += 1
    if (cnt == 0).any():
        rows, cols = np.nonzero(cnt == 0)
        raise StitchError(f"{rows.size} pixels not covered, first at ({rows[0]}, {cols[0]})")
    out = acc / cnt
    return np.clip(out, 0, 1) if clamp else out


def rotate90(patch, k: int = 1) -> np.ndarray:
    # k quarter turns; pixel (0, 0) goes to (0, n-1) for k=1
    arr = as_image(patch)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"rotation needs a square patch, got {arr.shape}")
    return np.rot90(arr, -k).copy()


def augment_rot(patch):
    """Return ``{tag: rotated patch}`` for the four right-angle rotations."""
    return {tag: rotate90(patch, k) for k, tag in enumerate(AUGMENTATIONS)}


# ---------------------------------------------------------------------------
# splits and manifests


def split_subjects(subject_ids, counts=(21, 4, 3), seed=0, scale=True) -> dict:
    """Seeded subject-level split; returns ``{subject_id: role}``.

    When ``counts`` does not add up to the number of subjects and ``scale`` is
    set, val/test sizes are scaled proportionally and rounded down, the
    remainder going to train.
    """
    ids = sorted(subject_ids)
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate subject ids")
    n, total = len(ids), sum(counts)
    if any(c < 0 for c in counts) or total == 0:
        raise ManifestError(f"invalid split counts {counts}")
    if total != n:
        if not scale:
            raise ManifestError(f"split {counts} does not sum to {n} subjects")
        n_val = n * counts[1] // total
        n_test = n * counts[2] // total
        counts = (n - n_val - n_test, n_val, n_test)
    perm = np.random.default_rng(seed).permutation(n)
    roles = {}
    bounds = np.cumsum(counts)
    for pos, idx in enumerate(perm):
        roles[ids[idx]] = ROLES[int(np.searchsorted(bounds, pos, side="right"))]
    return roles


@dataclass(frozen=True)
class ManifestRecord:
    pair_id: str
    subject_id: str
    role: str
    lq_path: str
    hq_path: str
    augmentation: str = "none"


def write_manifest(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for r in records:
            f.write("\t".join((r.pair_id, r.subject_id, r.role, r.lq_path, r.hq_path, r.augmentation)) + "\n")


def resolve_records(records, base):
    """Records with ``lq_path``/``hq_path`` joined onto ``base``."""
    base = Path(base)
    return [ManifestRecord(r.pair_id, r.subject_id, r.role, str(base / r.lq_path), str(base / r.hq_path),
                           r.augmentation) for r in records]


def read_manifest(path, check_files: bool = True):
    """Parse a manifest; ``lq_path``/``hq_path`` come back resolved to absolute paths."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 6:
                raise ManifestError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            rec = ManifestRecord(*row)
            if rec.role not in ROLES or rec.augmentation not in AUGMENTATIONS:
                raise ManifestError(f"{path}:{lineno}: bad role/augmentation")
            rec = ManifestRecord(rec.pair_id, rec.subject_id, rec.role,
                                 str(base / rec.lq_path), str(base / rec.hq_path), rec.augmentation)
            if check_files:
                for p in (rec.lq_path, rec.hq_path):
                    if not os.path.exists(p):
                        raise ManifestError(f"{path}:{lineno}: missing file {p}")
            records.append(rec)
    check_disjoint(records)
    return records


def check_disjoint(records) -> None:
    seen = {}
    for r in records:
        if seen.setdefault(r.subject_id, r.role) != r.role:
            raise ManifestError(f"subject {r.subject_id} appears in roles {seen[r.subject_id]} and {r.role}")


@dataclass(frozen=True)
class SrPairSpec:
    sr_factor: int = 2
    hr_patch: int = 128
    hr_stride: int = 64

    def __post_init__(self):
        if self.sr_factor not in (2, 4):
            raise ValueError("sr_factor must be 2 or 4")
        if self.hr_patch % self.sr_factor or self.hr_stride % self.sr_factor:
            raise ValueError("patch and stride must be divisible by the SR factor")

    @property
    def lr_patch(self) -> int:
        return self.hr_patch // self.sr_factor

    @property
    def lr_stride(self) -> int:
        return self.hr_stride // self.sr_factor


def pair_id(subject, slice_idx, row, col, aug="none") -> str:
    return f"{subject}_z{slice_idx:03d}_r{row:04d}_c{col:04d}_{aug}"


def parse_pair_id(pid: str):
    """Inverse of ``pair_id``: ``(subject, slice, row, col, aug)``."""
    subject, z, r, c, aug = pid.rsplit("_", 4)
    return subject, int(z[1:]), int(r[1:]), int(c[1:]), aug


def _degrade(hr, factor, joint_norm):
    if joint_norm:
        return np.clip(fourier_downsample(hr, factor, normalize=False), 0, 1)
    return fourier_downsample(hr, factor)


def make_sr_pair(slice_img, factor, roi=256, joint_norm=False):
    """HR/LR pair for one slice: ROI crop, normalize, Fourier downsample."""
    hr = as_image(slice_img).astype(np.float64)
    if roi is not None and hr.shape != (roi, roi):
        hr = crop_roi(hr, roi)
    hr = normalize_unit(hr)
    return hr, _degrade(hr, factor, joint_norm)


def _rotated_origin(r, c, patch, shape, k):
    # top-left corner of a patch after k clockwise quarter turns of the whole slice
    h, w = shape
    for _ in range(k % 4):
        r, c = c, h - patch - r
        h, w = w, h
    return r, c


def _slice_job(args):
    subject, z, img, spec, roi, augment, joint_norm = args
    f = spec.sr_factor
    hr, lr = make_sr_pair(img, f, roi, joint_norm)
    hp = extract_patches(hr, spec.hr_patch, spec.hr_stride)
    if not augment:
        lp = extract_patches(lr, spec.lr_patch, spec.lr_stride)
        return [(pair_id(subject, z, r, c), "none", lpatch, hpatch)
                for (hpatch, r, c), (lpatch, _, _) in zip(hp, lp)]
    # Rotating an LR patch does not give the LR of the rotated HR patch: the
    # Fourier crop keeps HR pixel f*i, and a flip moves that onto an odd index.
    # So each rotation is degraded from the rotated slice instead.
    lrs = [lr] + [_degrade(np.rot90(hr, -k), f, joint_norm) for k in (1, 2, 3)]
    out = []
    for hpatch, r, c in hp:
        for k, tag in enumerate(AUGMENTATIONS):
            rr, cc = _rotated_origin(r, c, spec.hr_patch, hr.shape, k)
            lpatch = lrs[k][rr // f:rr // f + spec.lr_patch, cc // f:cc // f + spec.lr_patch]
            out.append((pair_id(subject, z, r, c, tag), tag, lpatch, rotate90(hpatch, k)))
    return out


def build_sr_dataset(volumes, spec: SrPairSpec, out_dir, split=(21, 4, 3), seed=0,
                     roi=256, joint_norm=False, workers=1):
    """Write LR/HR patch pairs for every slice and return the manifest records
    (paths resolved, as from ``read_manifest``).

    ``volumes`` maps subject id to a stack of slices ``(S, H, W)``. Only
    training patches are rotation-augmented. Files go to ``out_dir/lq`` and
    ``out_dir/hq`` and the manifest to ``out_dir/manifest.tsv``.
    """
    volumes = dict(volumes)
    if sum(split) != len(volumes):
        raise ManifestError(f"split {split} does not match {len(volumes)} volumes")
    roles = split_subjects(volumes, split, seed, scale=False)
    out_dir = Path(out_dir)
    (out_dir / "lq").mkdir(parents=True, exist_ok=True)
    (out_dir / "hq").mkdir(parents=True, exist_ok=True)

    jobs = [
        (sid, z, vol[z], spec, roi, roles[sid] == "train", joint_norm)
        for sid, vol in sorted(volumes.items())
        for z in range(len(vol))
    ]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_slice_job, jobs))
    else:
        results = [_slice_job(j) for j in jobs]

    records = []
    for job, pairs in zip(jobs, results):
        sid = job[0]
        for pid, tag, lq, hq in pairs:
            lq_rel, hq_rel = f"lq/{pid}.mrir", f"hq/{pid}.mrir"
            write_image(lq, out_dir / lq_rel)
            write_image(hq, out_dir / hq_rel)
            records.append(ManifestRecord(pid, sid, roles[sid], lq_rel, hq_rel, tag))
    write_manifest(records, out_dir / "manifest.tsv")
    log.info("wrote %d pairs for %d subjects to %s", len(records), len(volumes), out_dir)
    return resolve_records(records, out_dir)
