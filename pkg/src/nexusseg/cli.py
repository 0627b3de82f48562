"""Command-line entry point: ``nexusseg {synth,train,segment,evaluate,check}``.

Exit codes: 0 success, 2 usage or I/O, 3 data error, 4 numeric failure.
"""
import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .data import TumorSpec, generate_phantom, read_volume, write_label_map, write_volume
from .errors import NexusError, NumericError
from .evaluation import evaluate, morph_cleanup, segment_volume, write_overlays, write_report_csv
from .models import ARCHITECTURES, ModelConfig, build_model, check_dims, load_checkpoint, save_checkpoint
from .selftest import run_selftest, selftest_ok
from .tensor import new_rng
from .training import TrainConfig, config_text, load_config, split_volumes, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
VOLUME_EXT = ".nxv"

log = logging.getLogger("nexusseg")


class DataError(Exception):
    pass


def _size(text):
    try:
        size = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; expected D,H,W") from None
    if len(size) != 3 or min(size) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; expected three positive extents")
    return size


def _volume_files(path):
    if os.path.isdir(path):
        return sorted(os.path.join(path, f) for f in os.listdir(path) if f.endswith(VOLUME_EXT))
    return [path]


def _read(path):
    try:
        return read_volume(path)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None


# verbs ---------------------------------------------------------------------------

def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    tumor = TumorSpec(radius=(0.0, 0.0, 0.0)) if args.tumor_free else None
    seeds = np.random.SeedSequence(args.seed).generate_state(args.count, dtype=np.uint32)
    rows = []
    for i, s in enumerate(seeds):
        name = f"phantom_{i:03d}{VOLUME_EXT}"
        write_volume(os.path.join(args.out, name), generate_phantom(int(s), args.size, tumor))
        rows.append((name, int(s)))
    with open(os.path.join(args.out, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "seed", "tumor_free"])
        for name, s in rows:
            w.writerow([name, s, int(args.tumor_free)])
    print(f"wrote {len(rows)} volumes to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.desk_scale is not None:
        overrides["desk_scale"] = args.desk_scale
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = TrainConfig(**{**cfg.__dict__, **overrides})
    if args.dry_run:
        print(config_text(cfg), end="")
        print(f"phase 1 patches {cfg.scaled(cfg.phase1_patch_count)}, phase 2 patches {cfg.scaled(cfg.phase2_patch_count)}")
        return EXIT_OK
    files = _volume_files(args.data)
    if len(files) < 2:
        raise DataError(f"need at least two volumes in {args.data}")
    vols = [_read(f) for f in files]
    missing = [f for f, v in zip(files, vols) if v.labels is None or v.modalities is None]
    if missing:
        raise DataError(f"volumes without labels or modalities: {', '.join(missing)}")
    train_vols, val_vols = split_volumes(vols, cfg.val_fraction, cfg.seed)
    model = build_model(args.arch, ModelConfig(width=cfg.model_width), rng=new_rng(cfg.seed))
    print(f"training {args.arch} on {len(train_vols)} volumes, validating on {len(val_vols)}; "
          f"patches {cfg.scaled(cfg.phase1_patch_count)}/{cfg.scaled(cfg.phase2_patch_count)}")
    model, tlog = train(model, train_vols, val_vols, cfg, checkpoint_dir=args.checkpoint_dir)
    save_checkpoint(model, args.out)
    tlog.write_csv(args.log or args.out + ".log.csv")
    check_dims(load_checkpoint(args.out))
    if not args.skip_eval:
        for i, v in enumerate(val_vols):
            rep = evaluate(morph_cleanup(segment_volume(model, v)), v.labels)
            print(f"validation volume {i}: " + "  ".join(
                f"{r} dice {s.dice:.4f} sens {s.sensitivity:.4f} spec {s.specificity:.4f}" for r, s in rep.regions.items()))
    print(f"saved {args.out}")
    return EXIT_OK


def _segment_one(ckpt, src, dst, postproc, overlay):
    model = load_checkpoint(ckpt)
    vol = _read(src)
    if vol.modalities is None:
        raise DataError(f"{src} holds no modalities")
    labels = segment_volume(model, vol)
    if postproc:
        labels = morph_cleanup(labels)
    write_label_map(dst, labels)
    if overlay:
        write_overlays(overlay, vol, labels)
    return dst, int(np.count_nonzero(labels))


def cmd_segment(args):
    srcs = _volume_files(args.inp)
    if os.path.isdir(args.inp):
        os.makedirs(args.out, exist_ok=True)
        dsts = [os.path.join(args.out, os.path.basename(s)) for s in srcs]
        overlays = [os.path.join(args.overlay, os.path.splitext(os.path.basename(s))[0]) if args.overlay else None for s in srcs]
    else:
        dsts, overlays = [args.out], [args.overlay]
    jobs = [(args.ckpt, s, d, not args.no_postproc, o) for s, d, o in zip(srcs, dsts, overlays)]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_segment_one, *zip(*jobs)))
    else:
        results = [_segment_one(*j) for j in jobs]
    for dst, n in results:
        print(f"{dst}: {n} tumour voxels")
    return EXIT_OK


def _evaluate_pair(pred_path, truth_path):
    pred, truth = _read(pred_path), _read(truth_path)
    if pred.labels is None or truth.labels is None:
        raise DataError("both prediction and truth need label maps")
    return evaluate(pred.labels, truth.labels, name=os.path.basename(pred_path))


def cmd_evaluate(args):
    if os.path.isdir(args.pred) != os.path.isdir(args.truth):
        raise DataError("--pred and --truth must both be files or both be directories")
    if os.path.isdir(args.pred):
        names = sorted(f for f in os.listdir(args.pred) if f.endswith(VOLUME_EXT))
        missing = [n for n in names if not os.path.exists(os.path.join(args.truth, n))]
        if missing or not names:
            raise DataError(f"no matching truth for {missing}" if missing else "no label maps found")
        pairs = [(os.path.join(args.pred, n), os.path.join(args.truth, n)) for n in names]
        aggregate = True
    else:
        pairs, aggregate = [(args.pred, args.truth)], False
    if args.workers > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            reports = list(pool.map(_evaluate_pair, *zip(*pairs)))
    else:
        reports = [_evaluate_pair(*p) for p in pairs]
    write_report_csv(args.out, reports, aggregate=aggregate)
    for rep in reports:
        for r, s in rep.regions.items():
            print(f"{rep.name} {r}: dice {s.dice:.4f} sensitivity {s.sensitivity:.4f} specificity {s.specificity:.4f}")
    return EXIT_OK


def cmd_check(args):
    ok = True
    for name in ARCHITECTURES:
        try:
            contract = check_dims(build_model(name, check=False))
            print(f"PASS check_dims {name} ({len(contract.edges)} edges)")
        except NexusError as e:
            print(f"FAIL check_dims {name}\n{e}")
            ok = False
    results = run_selftest(args.seed)
    return EXIT_OK if ok and selftest_ok(results) else EXIT_NUMERIC


# parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="nexusseg", description="Patch-based brain-lesion segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", help="write synthetic phantom volumes")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--size", type=_size, default=(64, 64, 64))
    s.add_argument("--tumor-free", action="store_true")
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--arch", required=True, choices=ARCHITECTURES)
    t.add_argument("--data", required=True, help="directory of labelled volumes")
    t.add_argument("--config", help="key = value configuration file")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--desk-scale", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    t.add_argument("--checkpoint-dir", help="write per-epoch checkpoints here")
    t.add_argument("--dry-run", action="store_true", help="print the resolved configuration and exit")
    t.add_argument("--skip-eval", action="store_true", help="skip validation segmentation at the end")
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("segment", help="label a volume (or a directory of volumes)")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--no-postproc", action="store_true")
    g.add_argument("--overlay", help="directory for per-slice PPM overlays")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(fn=cmd_segment)

    e = sub.add_parser("evaluate", help="score label maps against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(fn=cmd_evaluate)

    c = sub.add_parser("check", help="dimension contracts and the self-test suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, NexusError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
