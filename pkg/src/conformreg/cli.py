"""Command-line interface.

Verbs: register, warp, tre, jacdet, synth, selfcheck.  Exit codes:
0 success, 1 usage/config problems, 2 unreadable or inconsistent data,
3 numerical failure (non-finite loss, failed self-check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from . import io as cio
from .errors import ConfigError, DataError, NumericalError
from .evaluation import jacdet_grid, tre, warp_volume
from .grad import check_gradients
from .loss import LossConfig, total_loss
from .net import DeformationModel, NetConfig, NormTransform
from .opt import PRESETS, TrainConfig, register, resolve_preset
from .synth import make_field, make_pair, make_texture
from .volume import Volume

log = logging.getLogger("conformreg")


def _volume_arg(path, mask_path=None, normalize=True):
    vol = cio.read_volume(path)
    if mask_path is not None:
        mask = cio.read_volume(mask_path)
        if tuple(mask.dims) != tuple(vol.dims):
            raise DataError(f"mask dims {tuple(mask.dims)} != volume dims {tuple(vol.dims)}")
        vol.mask = mask.data > 0.5
    if normalize:
        vol, lo, hi = vol.normalized()
        log.info("normalized %s: [%g, %g] -> [0, 1]", path, lo, hi)
    return vol


def _override(cfg, **kw):
    """dataclasses.replace, skipping None values."""
    live = {k: v for k, v in kw.items() if v is not None}
    return dataclasses.replace(cfg, **live) if live else cfg


def _cmd_register(args):
    if args.config:
        net_cfg, loss_cfg, train_cfg = cio.read_config(args.config)
    elif args.preset:
        net_cfg, train_cfg = resolve_preset(args.preset)
        loss_cfg = LossConfig()
    else:
        net_cfg, loss_cfg, train_cfg = NetConfig(), LossConfig(), TrainConfig()
        log.info("no config or preset given; using built-in defaults")
    if args.config and args.preset:
        raise ConfigError("pass either --config or --preset, not both")

    net_cfg = _override(net_cfg, layers=args.layers, hidden=args.hidden,
                        omega=args.omega, encoder=args.encoder)
    loss_cfg = _override(loss_cfg, lam=args.lam, window=args.window,
                         ncc_mode=args.ncc_mode)
    train_cfg = _override(train_cfg, epochs=args.epochs, points=args.points,
                          lr=args.lr, seed=args.seed, log_every=args.log_every,
                          threads=args.threads,
                          deterministic=True if args.deterministic else None)
    log.info("net: %s", net_cfg)
    log.info("loss: %s", loss_cfg)
    log.info("train: %s", train_cfg)

    source = _volume_arg(args.source, args.source_mask)
    target = _volume_arg(args.target, args.mask)

    model, records = register(source, target, net_cfg=net_cfg,
                              loss_cfg=loss_cfg, train_cfg=train_cfg)
    cio.save_model(model, args.out_model)
    log.info("wrote model to %s", args.out_model)
    if args.out_log:
        cio.write_log(records, args.out_log)
    if records:
        r = records[-1]
        print(f"epoch {r.epoch}: similarity {r.similarity:.6f} "
              f"reg {r.reg:.6f} total {r.total:.6f}")
    return 0


def _cmd_warp(args):
    model = cio.load_model(args.model)
    source = cio.read_volume(args.source)
    geom = cio.read_volume(args.geometry_from)
    out = warp_volume(model, source, geom)
    cio.write_volume(out, args.out, element_type=args.element_type)
    print(f"wrote warped volume to {args.out}")
    return 0


def _cmd_tre(args):
    if (args.model is None) == (not args.identity):
        raise ConfigError("pass exactly one of --model or --identity")
    model = None if args.identity else cio.load_model(args.model)
    lm_t = cio.read_landmarks(args.landmarks_target)
    lm_s = cio.read_landmarks(args.landmarks_source)
    mean, per = tre(model, lm_t, lm_s, spacing=args.spacing,
                    origin=args.origin, index_base=args.index_base)
    print(f"mean TRE {mean:.4f} mm over {per.size} landmarks "
          f"(min {per.min():.4f}, max {per.max():.4f})")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"mean_mm": mean, "per_landmark_mm": per.tolist()}, fh, indent=1)
    return 0


def _cmd_jacdet(args):
    model = cio.load_model(args.model)
    geom = cio.read_volume(args.geometry_from)
    vol, stats = jacdet_grid(model, geom)
    print("jacdet min {min:.6f} max {max:.6f} mean {mean:.6f} "
          "negative_fraction {negative_fraction:.6g}".format(**stats))
    if args.out:
        cio.write_volume(vol, args.out, element_type="float32")
    if args.out_stats:
        with open(args.out_stats, "w") as fh:
            json.dump(stats, fh, indent=1)
    return 0


def _cmd_synth(args):
    import os

    os.makedirs(args.out_dir, exist_ok=True)
    probe = Volume(np.zeros(tuple(args.dims)), args.spacing, args.origin)
    field = make_field(probe, amplitude=args.amplitude, seed=args.seed)
    tex = make_texture(seed=args.texture_seed)
    src, tgt = make_pair(args.dims, args.spacing, args.origin, field, tex)
    cio.write_volume(src, os.path.join(args.out_dir, "source.mhd"))
    cio.write_volume(tgt, os.path.join(args.out_dir, "target.mhd"))
    truth = {
        "kind": "sinusoidal",
        "amplitude": field.amplitude,
        "freqs": field.freqs.tolist(),
        "phases": field.phases.tolist(),
        "norm_center": field.norm.center.tolist(),
        "norm_half_extent": field.norm.half_extent.tolist(),
        "fold_margin": field.fold_margin(),
    }
    with open(os.path.join(args.out_dir, "field.json"), "w") as fh:
        json.dump(truth, fh, indent=1)

    if args.landmarks:
        rng = np.random.default_rng(args.seed + 1)
        idx = np.stack([rng.integers(0, d, args.landmarks) for d in args.dims], axis=1)
        world_t = tgt.voxel_to_world(idx.astype(np.float64))
        world_s = field(world_t)
        base = 1.0
        lm_t = idx.astype(np.float64) + base
        lm_s = (world_s - tgt.origin) / tgt.spacing + base
        cio.write_landmarks(lm_t, os.path.join(args.out_dir, "landmarks_target.txt"))
        cio.write_landmarks(lm_s, os.path.join(args.out_dir, "landmarks_source.txt"))
    print(f"wrote synthetic pair to {args.out_dir} "
          f"(fold margin {truth['fold_margin']:.3f})")
    return 0


def _cmd_selfcheck(args):
    from .energy import EnergyParams, density, density_grad
    from .mat3 import det3, random_rotations

    rng = np.random.default_rng(args.seed)
    report = {}

    w_id = float(np.abs(density(np.eye(3))))
    report["energy_identity_zero"] = {"value": w_id, "pass": w_id < 1e-12}

    rots = random_rotations(50, rng)
    scales = np.exp(rng.uniform(np.log(0.2), np.log(5.0), 50))
    from .energy import density_terms
    t = density_terms(scales[:, None, None] * rots)
    inv = float(max(np.max(np.abs(t["length"])), np.max(np.abs(t["area"]))))
    report["conformal_terms_minimal"] = {"max_abs": inv, "pass": inv < 1e-9 * 3.0**4.5}

    jac = np.eye(3) + 0.3 * rng.standard_normal((50, 3, 3))
    w, g = density_grad(jac)
    h = 1e-6
    worst = 0.0
    for n in range(10):
        for i in range(3):
            for j in range(3):
                e = np.zeros((3, 3)); e[i, j] = h
                fd = (density(jac[n] + e) - density(jac[n] - e)) / (2 * h)
                worst = max(worst, abs(fd - g[n, i, j]) / max(1.0, abs(fd)))
    report["energy_grad_fd"] = {"max_rel_err": float(worst), "pass": bool(worst < 1e-4)}

    from .synth import make_texture
    tex = make_texture(seed=args.seed, wavelengths=(4.0, 12.0))
    dims, sp = (16, 16, 16), (1.0, 1.0, 1.0)
    probe = Volume(np.zeros(dims), sp, (0.0, 0.0, 0.0))
    vol = Volume(tex(probe.grid_points()).reshape(dims), sp, (0.0, 0.0, 0.0))
    norm = NormTransform.from_geometry(dims, sp, (0.0, 0.0, 0.0))
    worst = {}
    for mode in ("windowed", "batch_global"):
        model = DeformationModel(NetConfig(layers=3, hidden=8, omega=6.0), norm,
                                 seed=args.seed)
        wl, bl = model.layers[-1]
        model.layers[-1] = (0.01 * rng.standard_normal(wl.shape),
                            0.005 * rng.standard_normal(bl.shape))
        pts = vol.voxel_to_world(rng.uniform(3, 12, (6, 3)))
        rep = check_gradients(vol, vol, model, pts,
                              LossConfig(window=3, ncc_mode=mode), h=1e-5)
        for k, v in rep["components"].items():
            key = f"{mode}.{k}"
            worst[key] = v["max_rel_err"]
            report[f"grad.{key}"] = v

    ok = all(v["pass"] for v in report.values())
    for name, entry in report.items():
        detail = {k: v for k, v in entry.items() if k != "pass"}
        print(f"{'PASS' if entry['pass'] else 'FAIL'} {name} {detail}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"checks": report, "pass": ok}, fh, indent=1)
    if not ok:
        raise NumericalError("selfcheck failed")
    print("selfcheck passed")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="conformreg",
        description="Deformable 3-d registration with a sine-activated "
                    "coordinate network and a fold-resistant hyperelastic "
                    "regulariser.")
    p.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("register", help="fit a deformation between two volumes")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--mask", help="sampling mask volume (>0.5 is inside), target space")
    r.add_argument("--source-mask", help="mask used only for source normalisation")
    r.add_argument("--config", help="TOML run config")
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--out-model", required=True)
    r.add_argument("--out-log")
    r.add_argument("--epochs", type=int)
    r.add_argument("--points", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--log-every", type=int)
    r.add_argument("--lambda", dest="lam", type=float, help="regulariser weight")
    r.add_argument("--window", type=int)
    r.add_argument("--ncc-mode", choices=("windowed", "batch_global"))
    r.add_argument("--layers", type=int)
    r.add_argument("--hidden", type=int)
    r.add_argument("--omega", type=float)
    r.add_argument("--encoder", choices=("periodic", "fourier"))
    r.add_argument("--deterministic", action="store_true",
                   help="bitwise-reproducible runs regardless of --threads")
    r.add_argument("--threads", type=int, help="cap BLAS worker threads")
    r.set_defaults(func=_cmd_register)

    w = sub.add_parser("warp", help="resample a volume through a model")
    w.add_argument("--model", required=True)
    w.add_argument("--source", required=True)
    w.add_argument("--geometry-from", required=True,
                   help="volume whose grid the output uses")
    w.add_argument("--out", required=True)
    w.add_argument("--element-type", default="float32",
                   choices=("int16", "uint16", "float32"))
    w.set_defaults(func=_cmd_warp)

    t = sub.add_parser("tre", help="landmark registration error in mm")
    t.add_argument("--model")
    t.add_argument("--identity", action="store_true",
                   help="evaluate the identity baseline instead of a model")
    t.add_argument("--landmarks-target", required=True)
    t.add_argument("--landmarks-source", required=True)
    t.add_argument("--spacing", type=float, nargs=3, required=True,
                   metavar=("SX", "SY", "SZ"))
    t.add_argument("--origin", type=float, nargs=3, default=(0.0, 0.0, 0.0),
                   metavar=("OX", "OY", "OZ"))
    t.add_argument("--index-base", type=float, default=1.0,
                   help="landmark index origin (1 for 1-based files)")
    t.add_argument("--out", help="write per-landmark errors as JSON")
    t.set_defaults(func=_cmd_tre)

    j = sub.add_parser("jacdet", help="Jacobian determinant field of a model")
    j.add_argument("--model", required=True)
    j.add_argument("--geometry-from", required=True)
    j.add_argument("--out", help="write the determinant field volume")
    j.add_argument("--out-stats", help="write min/max/mean/negative_fraction JSON")
    j.set_defaults(func=_cmd_jacdet)

    s = sub.add_parser("synth", help="synthetic pair with known deformation")
    s.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64),
                   metavar=("NX", "NY", "NZ"))
    s.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0),
                   metavar=("SX", "SY", "SZ"))
    s.add_argument("--origin", type=float, nargs=3, default=(0.0, 0.0, 0.0),
                   metavar=("OX", "OY", "OZ"))
    s.add_argument("--amplitude", type=float, default=8.0,
                   help="max displacement magnitude in mm")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--texture-seed", type=int, default=0)
    s.add_argument("--landmarks", type=int, default=0,
                   help="also write this many landmark pairs")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=_cmd_synth)

    c = sub.add_parser("selfcheck", help="run built-in numerical checks")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="write the report as JSON")
    c.set_defaults(func=_cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
