"""Full-resolution inhale/exhale lung CT benchmark.  Long-running, optional.

Registers the ten COPD pairs (large-motion preset: 4 layers, 6000 epochs,
15000 points per epoch) and the ten 4DCT pairs (small-motion preset:
3 layers, 3000 epochs, 10000 points), then scores each pair against its
300 expert landmarks.  Full-resolution reference averages for these two
protocols are 1.74 mm (COPD) and 1.03 mm (4DCT); the identity baselines
are 23.36 mm and 8.46 mm.

This is an experiment script, not part of the test suite.  With the
windowed similarity every sampled point routes its whole 5x5x5 window
through the network, so expect several hours per pair on a CPU core;
use --epochs/--points/--cases for cut-down smoke runs.

Expected data layout under --data (or CONFORMREG_DIRLAB): one directory
tree containing, per case, the landmark files from the public
distribution (copd{N}_300_iBH_xyz_r1.txt / copd{N}_300_eBH_xyz_r1.txt,
case{N}_300_T00_xyz.txt / case{N}_300_T50_xyz.txt) and the CT volumes
converted to MetaImage (any *.mhd/*.mha whose filename contains the case
tag and the phase tag, e.g. copd1_iBH.mhd or case3_T00.mha).  An
optional sampling mask per target volume is picked up from a filename
that additionally contains "mask"; the COPD protocol samples only lung
voxels, so results without masks will trail the reference there.
"""

import argparse
import dataclasses
import json
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from conformreg.evaluation import tre
from conformreg.io import read_landmarks, read_volume, save_model
from conformreg.loss import LossConfig
from conformreg.opt import TrainConfig, register, resolve_preset

REFERENCE_AVG_MM = {"copd": 1.74, "4dct": 1.03}

DATASETS = {
    "copd": {
        "preset": "large-motion",
        "cases": [
            (f"copd{n}",
             (f"copd{n}", "ibh"), (f"copd{n}", "ebh"),
             f"copd{n}_300_iBH_xyz_r1.txt", f"copd{n}_300_eBH_xyz_r1.txt")
            for n in range(1, 11)
        ],
    },
    "4dct": {
        "preset": "small-motion",
        "cases": [
            (f"case{n}",
             (f"case{n}", "t00"), (f"case{n}", "t50"),
             f"case{n}_300_T00_xyz.txt", f"case{n}_300_T50_xyz.txt")
            for n in range(1, 11)
        ],
    },
}


def find_file(root, name):
    hits = [p for p in root.rglob(name) if p.is_file()]
    return hits[0] if hits else None


def find_volume(root, tags, mask=False):
    """First .mhd/.mha under root whose name contains every tag.

    Tags ending in a digit must not be followed by another digit, so
    "case1" does not match case10 files.
    """
    for p in sorted(root.rglob("*")):
        if p.suffix.lower() not in (".mhd", ".mha") or not p.is_file():
            continue
        name = p.name.lower()
        if all(re.search(re.escape(t) + r"(?!\d)", name) for t in tags) \
                and ("mask" in name) == mask:
            return p
    return None


def run_case(args, out_dir, preset, case, vol_t, vol_s, lm_t, lm_s):
    target = read_volume(vol_t)
    source = read_volume(vol_s)
    mask_path = find_volume(Path(args.data), (case,), mask=True)
    if mask_path is not None:
        mask = read_volume(mask_path)
        target.mask = mask.data > 0
        print(f"  sampling mask: {mask_path.name} "
              f"({target.mask.mean():.1%} of voxels)")

    landmarks_t = read_landmarks(lm_t)
    landmarks_s = read_landmarks(lm_s)
    init_mean, _ = tre(None, landmarks_t, landmarks_s,
                       target.spacing, target.origin)
    print(f"  initial TRE {init_mean:.2f} mm over {len(landmarks_t)} landmarks")

    net_cfg, train_cfg = resolve_preset(preset)
    overrides = {}
    if args.epochs:
        overrides["epochs"] = args.epochs
    if args.points:
        overrides["points"] = args.points
    epochs = overrides.get("epochs", train_cfg.epochs)
    overrides["log_every"] = max(1, epochs // 30)
    train_cfg = dataclasses.replace(train_cfg, **overrides)

    t0 = time.time()
    model, log = register(source, target, net_cfg=net_cfg,
                          loss_cfg=LossConfig(), train_cfg=train_cfg)
    seconds = time.time() - t0
    r = log[-1]
    took = f"{seconds / 3600:.2f} h" if seconds >= 3600 else f"{seconds:.0f} s"
    print(f"  trained {train_cfg.epochs} epochs in {took}; "
          f"final similarity {r.similarity:.4f}, total {r.total:.4f}")

    mean, per = tre(model, landmarks_t, landmarks_s,
                    target.spacing, target.origin)
    print(f"  final TRE {mean:.2f} mm (max {per.max():.2f} mm)")
    save_model(model, out_dir / f"{case}.ckpt")
    return {"case": case, "init_mm": init_mean, "final_mm": mean,
            "max_mm": float(per.max()), "seconds": seconds}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default=os.environ.get("CONFORMREG_DIRLAB"),
                    help="benchmark root (default: $CONFORMREG_DIRLAB)")
    ap.add_argument("--datasets", nargs="+", choices=sorted(DATASETS),
                    default=sorted(DATASETS))
    ap.add_argument("--cases", nargs="+",
                    help="restrict to these case tags, e.g. copd1 case5")
    ap.add_argument("--epochs", type=int, help="override preset epoch count")
    ap.add_argument("--points", type=int, help="override preset batch size")
    ap.add_argument("--out", default="benchmark_out",
                    help="directory for checkpoints and results.json")
    args = ap.parse_args(argv)

    if not args.data:
        sys.exit("no data root: pass --data or set CONFORMREG_DIRLAB")
    root = Path(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = {}
    for ds in args.datasets:
        spec = DATASETS[ds]
        rows = []
        for case, tags_t, tags_s, lm_t_name, lm_s_name in spec["cases"]:
            if args.cases and case not in args.cases:
                continue
            vol_t = find_volume(root, tags_t)
            vol_s = find_volume(root, tags_s)
            lm_t = find_file(root, lm_t_name)
            lm_s = find_file(root, lm_s_name)
            missing = [n for n, p in [("target volume", vol_t),
                                      ("source volume", vol_s),
                                      (lm_t_name, lm_t), (lm_s_name, lm_s)]
                       if p is None]
            if missing:
                print(f"{case}: skipped, missing {', '.join(missing)}")
                continue
            print(f"{case}: {vol_t.name} <- {vol_s.name} "
                  f"({spec['preset']} preset)")
            rows.append(run_case(args, out_dir, spec["preset"], case,
                                 vol_t, vol_s, lm_t, lm_s))
        if rows:
            avg = float(np.mean([r["final_mm"] for r in rows]))
            print(f"\n{ds}: average TRE {avg:.2f} mm over {len(rows)} pairs "
                  f"(reference {REFERENCE_AVG_MM[ds]:.2f} mm)\n")
            results[ds] = {"average_mm": avg, "cases": rows}

    with open(out_dir / "results.json", "w") as fh:
        json.dump(results, fh, indent=2)
    print(f"results written to {out_dir / 'results.json'}")


if __name__ == "__main__":
    main()
