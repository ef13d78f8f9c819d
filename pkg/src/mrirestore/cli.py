"""Command-line front end: phantom, degrade, motion, sigma-cal, train, eval, restore, report.

Every subcommand writes a run manifest (JSON) next to its outputs with the
command line, the parsed options, the seed, input/output paths, the package
version and the wall-clock time, so a single-worker run can be replayed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .degrade import SrPairSpec, build_sr_dataset, read_manifest
from .imgcore import ImageFormatError, make_subject, read_image, write_image, write_pgm
from .kspace import fourier_upsample, select_sigma
from .model import ModelConfig, build_model, restore_image
from .motion import MotionDatasetConfig, build_mar_dataset, read_plans
from .objectives import LossWeights, amplify_grad, grad_map
from .trainer import TrainConfig, evaluate, load_checkpoint, train

log = logging.getLogger("mrirestore")

RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _range(text, n):
    parts = text.split(":")
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} colon-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number in {text!r}") from None


def _split(text):
    try:
        vals = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("split needs three counts: train,val,test")
    return vals


def _existing(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def load_volumes(root) -> dict:
    """Subject directories of ``.mrir`` slices, as written by ``phantom``."""
    root = _existing(root)
    vols = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(sub.glob("*.mrir"))
        if files:
            vols[sub.name] = np.stack([read_image(f) for f in files])
    if not vols:
        raise FileNotFoundError(f"no subject directories with .mrir slices under {root}")
    return vols


def _image_files(root):
    root = _existing(root)
    files = sorted(root.glob("*.mrir")) if root.is_dir() else [root]
    if not files:
        raise FileNotFoundError(f"no .mrir images in {root}")
    return files


def write_run_manifest(path, args, argv, inputs, outputs, started):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    rec = {
        "command": ["mrirestore", *argv],
        "subcommand": args.command,
        "config": json.loads(json.dumps(cfg, default=str)),
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(rec, indent=1) + "\n", encoding="utf-8")
    return rec


def _beside(path):
    # run manifest for a single-file output lives next to it
    p = Path(path)
    return p.with_name(p.name + ".run.json")


def loss_weights_from_args(args) -> LossWeights:
    over = {}
    for name in ("w_charb", "w_ssim", "w_kspace", "w_grad", "grad_a", "mask_sigma"):
        v = getattr(args, name)
        if v is not None:
            over[name] = v
    if args.kspace_masked:
        over["kspace_masked"] = True
    if args.grad_amplified:
        over["grad_amplified"] = True
    return LossWeights.preset(args.loss, **over)


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args):
    out = Path(args.out)
    for i in range(args.n):
        sub = out / f"s{i:02d}"
        sub.mkdir(parents=True, exist_ok=True)
        for z, sl in enumerate(make_subject(args.seed, i, args.slices, args.size)):
            write_image(sl, sub / f"z{z:03d}.mrir")
    print(f"wrote {args.n} subjects x {args.slices} slices to {out}")
    return [], [out], out / RUN_MANIFEST


def cmd_degrade(args):
    vols = load_volumes(args.inp)
    spec = SrPairSpec(args.factor, args.patch, args.stride)
    recs = build_sr_dataset(vols, spec, args.out, args.split, args.seed, roi=args.roi or None,
                            joint_norm=args.joint_norm, workers=args.workers)
    print(f"wrote {len(recs)} pairs to {args.out}")
    return [args.inp], [Path(args.out) / "manifest.tsv"], Path(args.out) / RUN_MANIFEST


def cmd_motion(args):
    vols = load_volumes(args.inp)
    lo, hi = args.severity
    cfg = MotionDatasetConfig(args.variants, (lo, hi), args.protect_center, args.split, args.seed)
    recs = build_mar_dataset(vols, args.out, cfg)
    print(f"wrote {len(recs)} motion-corrupted images to {args.out}")
    out = Path(args.out)
    return [args.inp], [out / "manifest.tsv", out / "plans.jsonl"], out / RUN_MANIFEST


def cmd_sigma_cal(args):
    vols = load_volumes(args.inp)
    imgs = [sl for v in vols.values() for sl in v]
    lo, hi, step = args.range
    best, table = select_sigma(imgs, lo, hi, step, return_table=True)
    print(f"sigma\t{best:g}")
    print("sigma\tJ")
    for s, j in table:
        print(f"{s:g}\t{j:.6g}")
    # never write into the input directory
    out = Path(args.out) if args.out else Path("sigma_cal.run.json")
    if args.out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sigma_table.tsv").write_text("sigma\tJ\n" + "".join(f"{s:g}\t{j:.10g}\n" for s, j in table),
                                             encoding="utf-8")
        out = out / RUN_MANIFEST
    return [args.inp], ([Path(args.out) / "sigma_table.tsv"] if args.out else []), out


def cmd_train(args):
    recs = read_manifest(_existing(args.manifest))
    task = args.task.upper()
    factor = args.factor if task == "SR" else 1
    make = ModelConfig.toy if args.toy else ModelConfig.full
    cfg = make(task=task, scheme=args.scheme, sr_factor=factor)
    tcfg = TrainConfig(batch_size=args.batch, epochs=args.epochs, base_lr=args.lr, seed=args.seed,
                       precision=args.precision)
    net = build_model(cfg, args.seed, tcfg.dtype)
    runlog = train(net, recs, loss_weights_from_args(args), tcfg, args.out, resume=args.resume,
                   validate=not args.no_val)
    best = runlog.best_epoch
    print(f"trained {tcfg.epochs} epochs; best epoch {best}")
    out = Path(args.out)
    return [args.manifest], [out / "best.pt", out / "runlog.json"], out / RUN_MANIFEST


def cmd_eval(args):
    net, _ = load_checkpoint(_existing(args.ckpt))
    recs = read_manifest(_existing(args.manifest))
    plans = None
    if args.plans or net.cfg.task == "MAR":
        pp = Path(args.plans) if args.plans else Path(args.manifest).with_name("plans.jsonl")
        plans = read_plans(_existing(pp)) if (args.plans or pp.exists()) else None
    rep = evaluate(net, recs, args.role, stitch=args.stitch, plans=plans)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(rep.format(), encoding="utf-8")
    for name, agg in rep.metrics.items():
        print(f"{name}\t{agg}")
    return [args.ckpt, args.manifest], [args.report], _beside(args.report)


def cmd_restore(args):
    net, _ = load_checkpoint(_existing(args.ckpt))
    if args.factor is not None and args.factor != net.cfg.out_scale:
        raise UsageError(f"--factor {args.factor} does not match checkpoint scale x{net.cfg.out_scale}")
    if (args.patch is None) != (args.stride is None):
        raise UsageError("--patch and --stride go together")
    files = _image_files(args.inp)
    out = Path(args.out)
    if out.resolve() == Path(args.inp).resolve():
        raise UsageError("--out must differ from --in")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in files:
        img = read_image(f)
        res = restore_image(net, img, args.patch, args.stride)
        write_image(res, out / f.name)
        written.append(out / f.name)
    print(f"restored {len(written)} images into {out}")
    return [args.ckpt, args.inp], written, out / RUN_MANIFEST


def _panel(images, gap=2):
    h = max(i.shape[0] for i in images)
    parts = []
    for i, img in enumerate(images):
        pad = np.zeros((h, img.shape[1]))
        pad[:img.shape[0]] = img
        parts.append(pad)
        if i < len(images) - 1:
            parts.append(np.ones((h, gap)))
    return np.clip(np.concatenate(parts, axis=1), 0, 1)


def cmd_report(args):
    net, _ = load_checkpoint(_existing(args.ckpt))
    recs = [r for r in read_manifest(_existing(args.manifest)) if r.role == args.role]
    if not recs:
        raise RuntimeError(f"no {args.role} records in {args.manifest}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = net.cfg.out_scale
    written = []
    for r in recs[:args.n]:
        lq, hq = read_image(r.lq_path), read_image(r.hq_path)
        res = restore_image(net, lq)
        shown = np.clip(fourier_upsample(lq, s), 0, 1) if s > 1 else lq
        diff = np.abs(res - hq)
        p = out / f"{r.pair_id}_panel.pgm"
        write_pgm(_panel([shown, res, hq, diff / max(diff.max(), 1e-12)]), p)
        g = grad_map(hq).numpy()[0, 0]
        q = out / f"{r.pair_id}_grad.pgm"
        write_pgm(_panel([g / max(g.max(), 1e-12), amplify_grad(g, args.grad_a)]), q)
        written += [p, q]
    print(f"wrote {len(written)} panels to {out}")
    return [args.ckpt, args.manifest], written, out / RUN_MANIFEST


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrirestore", description="MRI super-resolution and motion-artifact reduction.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
        return sp

    sp = add("phantom", cmd_phantom, "generate synthetic phantom subjects")
    sp.add_argument("--n", type=int, default=28, help="number of subjects")
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--slices", type=int, default=8, help="slices per subject")
    sp.add_argument("--out", required=True)

    sp = add("degrade", cmd_degrade, "build the SR patch-pair dataset")
    sp.add_argument("--in", dest="inp", required=True, help="phantom directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--factor", type=int, choices=(2, 4), default=2)
    sp.add_argument("--patch", type=int, default=128, help="HR patch size")
    sp.add_argument("--stride", type=int, default=64, help="HR patch stride")
    sp.add_argument("--roi", type=int, default=256, help="central crop size, 0 keeps the full slice")
    sp.add_argument("--split", type=_split, default=(21, 4, 3), help="train,val,test subject counts")
    sp.add_argument("--joint-norm", action="store_true", help="normalize LR with the HR range")
    sp.add_argument("--workers", type=int, default=1)

    sp = add("motion", cmd_motion, "build the motion-artifact dataset")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variants", type=int, default=5)
    sp.add_argument("--severity", type=lambda t: _range(t, 2), default=(0.05, 0.35), help="lo:hi row fraction")
    sp.add_argument("--protect-center", type=int, default=8, help="central k-space rows never replaced")
    sp.add_argument("--split", type=_split, default=(21, 4, 3))

    sp = add("sigma-cal", cmd_sigma_cal, "sweep the k-space mask width")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--range", type=lambda t: _range(t, 3), default=(10, 50, 1), help="lo:hi:step")
    sp.add_argument("--out", help="directory for the J table")

    sp = add("train", cmd_train, "train a restoration network")
    sp.add_argument("--task", choices=("sr", "mar"), type=str.lower, default="sr")
    sp.add_argument("--factor", type=int, choices=(2, 4), default=2)
    sp.add_argument("--scheme", choices=("post", "progressive"), default="post")
    sp.add_argument("--loss", type=str.upper, choices=("R1", "R2", "R3", "R4"), default="R4")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--toy", action="store_true", help="small network for desk-scale runs")
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--precision", choices=("f32", "f64"), default="f32")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--no-val", action="store_true", help="skip per-epoch validation")
    sp.add_argument("--w-charb", type=float)
    sp.add_argument("--w-ssim", type=float)
    sp.add_argument("--w-kspace", type=float)
    sp.add_argument("--w-grad", type=float)
    sp.add_argument("--kspace-masked", action="store_true")
    sp.add_argument("--grad-amplified", action="store_true")
    sp.add_argument("--grad-a", type=float)
    sp.add_argument("--mask-sigma", type=float)

    sp = add("eval", cmd_eval, "score a checkpoint on a manifest role")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--role", choices=("train", "val", "test"), default="test")
    sp.add_argument("--stitch", action="store_true", help="reassemble SR patches into slices first")
    sp.add_argument("--plans", help="plans.jsonl for severity buckets (MAR)")

    sp = add("restore", cmd_restore, "apply a checkpoint to a directory of images")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--factor", type=int, choices=(1, 2, 4))
    sp.add_argument("--patch", type=int)
    sp.add_argument("--stride", type=int)

    sp = add("report", cmd_report, "render inspection panels")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--role", choices=("train", "val", "test"), default="test")
    sp.add_argument("--n", type=int, default=4, help="number of panels")
    sp.add_argument("--grad-a", type=float, default=2.5)
    return p


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    started = time.time()
    try:
        inputs, outputs, manifest = args.func(args)
        write_run_manifest(manifest, args, argv, inputs, outputs, started)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mrirestore: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ImageFormatError, ValueError, RuntimeError) as e:
        print(f"mrirestore: error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
