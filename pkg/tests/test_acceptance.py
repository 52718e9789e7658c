"""End-to-end acceptance checks, one test per shipping criterion.

Run with -v to get one pass/fail line per criterion.  The synthetic
recovery pipeline and its two follow-ups (encoder parity, determinism)
drive the actual command-line verbs and share session fixtures, so the
expensive trainings happen exactly once each; on one CPU core the three
of them together take a couple of hours.  The thoracic-CT landmark
reproduction only runs when local data is pointed to by the
CONFORMREG_DIRLAB environment variable.
"""

import json
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from conformreg.cli import main as cli_main
from conformreg.energy import EnergyParams, density, density_terms
from conformreg.evaluation import endpoint_errors, jacdet_grid, tre
from conformreg.grad import check_gradients
from conformreg.io import load_model, read_landmarks, read_log, read_volume
from conformreg.loss import LossConfig, total_loss
from conformreg.mat3 import det3, frob
from conformreg.net import DeformationModel, NetConfig, NormTransform
from conformreg.synth import SinusoidalField, make_texture
from conformreg.volume import Volume


# ---------------------------------------------------------------- helpers


def quat_rotations(count, rng):
    """Rotation matrices from random unit quaternions (independent of the
    QR-based generator in mat3)."""
    q = rng.standard_normal((count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((count, 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def sine_volume(dims, spacing=(1.0, 1.0, 1.0), scale=1000.0, seed=5,
                wavelengths=(6.0, 24.0)):
    """Textured volume at CT-like intensity scale, strong enough that the
    variance floor in the similarity is negligible."""
    tex = make_texture(seed=seed, wavelengths=wavelengths)
    probe = Volume(np.zeros(tuple(dims)), spacing, (0.0, 0.0, 0.0))
    return Volume(scale * tex(probe.grid_points()).reshape(tuple(dims)),
                  spacing, (0.0, 0.0, 0.0))


def field_from_json(path) -> SinusoidalField:
    truth = json.loads(Path(path).read_text())
    return SinusoidalField(
        amplitude=truth["amplitude"],
        freqs=np.asarray(truth["freqs"]),
        phases=np.asarray(truth["phases"]),
        norm=NormTransform(center=np.asarray(truth["norm_center"]),
                           half_extent=np.asarray(truth["norm_half_extent"])),
    )


# -------------------------------------------------- criteria 1 and 2


def test_energy_normalization_identity_zero():
    """density(I) = 0 to 1e-12 absolute for 100 random parameter sets."""
    rng = np.random.default_rng(0)
    eye = np.eye(3)
    worst = 0.0
    for _ in range(100):
        p = EnergyParams(a1=rng.uniform(0.01, 10.0), a2=rng.uniform(0.01, 10.0),
                         a3=rng.uniform(0.01, 10.0), a4=rng.uniform(0.01, 10.0),
                         alpha=rng.uniform(0.5, 4.0))
        worst = max(worst, abs(float(density(eye, p))))
    assert worst <= 1e-12, f"max |density(I)| = {worst:.3e}"


def test_conformal_invariance_of_distortion_terms():
    """Both distortion terms are constant (a1*3^4.5 and a2*27) on every
    similarity transform cR, to 1e-9 relative."""
    rng = np.random.default_rng(1)
    rots = quat_rotations(200, rng)
    c = rng.uniform(0.5, 2.0, 200)
    j = c[:, None, None] * rots
    d = det3(j)
    term1 = frob(j) ** 9 / d**3
    cof = np.transpose(np.linalg.inv(j), (0, 2, 1)) * d[:, None, None]
    term2 = frob(cof) ** 6 / d**4
    np.testing.assert_allclose(term1, 3.0**4.5, rtol=1e-9)
    np.testing.assert_allclose(term2, 27.0, rtol=1e-9)

    # the shipped terms subtract exactly those constants, so they vanish
    # on cR for any coefficients
    p = EnergyParams(a1=rng.uniform(0.1, 5.0), a2=rng.uniform(0.1, 5.0))
    t = density_terms(j, p)
    assert np.abs(t["length"]).max() <= 1e-9 * p.a1 * 3.0**4.5
    assert np.abs(t["area"]).max() <= 1e-9 * p.a2 * 27.0


# -------------------------------------------------- criteria 3 and 4


def test_gradient_exactness_random_tiny_nets():
    """check_gradients on 20 random tiny nets, every loss component,
    max relative error vs central differences <= 1e-4."""
    rng = np.random.default_rng(2)
    vol = sine_volume((14, 14, 14), scale=1.0, wavelengths=(4.0, 10.0))
    norm = NormTransform.from_geometry(vol.dims, vol.spacing, vol.origin)
    worst = 0.0
    for trial in range(20):
        cfg = NetConfig(
            layers=int(rng.integers(2, 4)),
            hidden=int(rng.integers(4, 17)),
            omega=float(rng.uniform(4.0, 12.0)),
            encoder="fourier" if trial % 2 else "periodic",
            fourier_features=int(rng.integers(3, 9)),
        )
        model = DeformationModel(cfg, norm, seed=trial)
        w, b = model.layers[-1]
        model.layers[-1] = (0.02 * rng.standard_normal(w.shape),
                            0.01 * rng.standard_normal(b.shape))
        pts = vol.voxel_to_world(rng.uniform(3.0, 10.0, (5, 3)))
        mode = "batch_global" if trial % 3 == 0 else "windowed"
        report = check_gradients(vol, vol, model, pts,
                                 LossConfig(window=3, ncc_mode=mode, lam=0.05))
        for name, entry in report["components"].items():
            worst = max(worst, entry["max_rel_err"])
        assert report["pass"], f"net {trial} ({mode}): {report['components']}"
    assert worst <= 1e-4, f"max component error {worst:.3e}"


def test_spatial_jacobian_exactness():
    """Analytic spatial Jacobian vs central differences on 1000 random
    (model, point) pairs, relative error <= 1e-6."""
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(25):
        dims = rng.integers(10, 40, 3)
        spacing = rng.uniform(0.5, 2.5, 3)
        origin = rng.uniform(-20.0, 20.0, 3)
        norm = NormTransform.from_geometry(dims, spacing, origin)
        cfg = NetConfig(
            layers=int(rng.integers(2, 5)),
            hidden=int(rng.integers(8, 33)),
            omega=float(rng.uniform(4.0, 32.0)),
            encoder="fourier" if trial % 2 else "periodic",
            fourier_features=int(rng.integers(4, 17)),
        )
        model = DeformationModel(cfg, norm, seed=100 + trial)
        w, b = model.layers[-1]
        model.layers[-1] = (0.02 * rng.standard_normal(w.shape),
                            0.01 * rng.standard_normal(b.shape))
        lo = origin
        hi = origin + spacing * (dims - 1)
        pts = rng.uniform(lo, hi, (40, 3))
        jac = model.spatial_jacobian(pts)
        h = 1e-5
        fd = np.empty_like(jac)
        for ax in range(3):
            step = np.zeros(3)
            step[ax] = h
            fd[:, :, ax] = (model(pts + step) - model(pts - step)) / (2 * h)
        err = np.abs(jac - fd).max(axis=(1, 2)) / np.maximum(
            1.0, np.abs(fd).max(axis=(1, 2)))
        worst = max(worst, float(err.max()))
    assert worst <= 1e-6, f"max relative error {worst:.3e}"


# -------------------------------------------------- criterion 5


def test_identity_start_loss_is_minus_one():
    """A fresh model is the exact identity: zero regulariser, unit
    Jacobian determinant, and total loss -1 within 1e-9 on target = source."""
    vol = sine_volume((20, 20, 20))
    norm = NormTransform.from_geometry(vol.dims, vol.spacing, vol.origin)

    # exact identity holds for the default architecture
    fresh_default = DeformationModel(NetConfig(), norm, seed=4)
    probe = vol.grid_points()[::17]
    phi, jac = fresh_default.forward_with_jacobian(probe)
    assert np.array_equal(phi, probe)
    assert np.array_equal(det3(jac), np.ones(probe.shape[0]))

    # full-grid loss on a lighter fresh net (same zero-init contract)
    model = DeformationModel(NetConfig(layers=3, hidden=64), norm, seed=4)
    pts = vol.grid_points()
    lv = total_loss(vol, vol, model, pts, LossConfig())
    assert lv.reg == 0.0
    assert abs(lv.total + 1.0) <= 1e-9, f"total {lv.total!r}"
    assert abs(lv.similarity - 1.0) <= 1e-9


# -------------------------------------------------- criteria 6, 8, 9


RECIPE = [
    "--preset", "small-motion",
    "--lambda", "1e-3", "--lr", "1e-5", "--ncc-mode", "batch_global",
    "--seed", "0", "--deterministic", "--log-every", "1",
]


@pytest.fixture(scope="session")
def synth64(tmp_path_factory):
    d = tmp_path_factory.mktemp("accept-synth")
    rc = cli_main(["synth", "--dims", "64", "64", "64", "--amplitude", "8",
                   "--seed", "1", "--texture-seed", "5", "--out-dir", str(d)])
    assert rc == 0
    return d


def _run_recovery(synth_dir, out_dir, extra=()):
    out_dir.mkdir(parents=True, exist_ok=True)
    model = out_dir / "model.ckpt"
    logf = out_dir / "log.csv"
    t0 = time.time()
    rc = cli_main([
        "register",
        "--source", str(synth_dir / "source.mhd"),
        "--target", str(synth_dir / "target.mhd"),
        "--out-model", str(model), "--out-log", str(logf),
        *RECIPE, *extra,
    ])
    elapsed = time.time() - t0
    assert rc == 0
    return {"model_path": model, "log_path": logf, "seconds": elapsed}


@pytest.fixture(scope="session")
def periodic_run(synth64, tmp_path_factory):
    return _run_recovery(synth64, tmp_path_factory.mktemp("accept-periodic"))


@pytest.fixture(scope="session")
def fourier_run(synth64, tmp_path_factory):
    return _run_recovery(synth64, tmp_path_factory.mktemp("accept-fourier"),
                         extra=("--encoder", "fourier"))


def landmark_grid(target):
    """Regular 16^3 lattice of world points over the volume (every fourth
    voxel), the evaluation set for synthetic recovery."""
    idx = np.arange(0, 64, 4, dtype=np.float64)
    g = np.meshgrid(idx, idx, idx, indexing="ij")
    return target.voxel_to_world(np.stack([c.ravel() for c in g], axis=1))


def test_synthetic_recovery_small_motion(synth64, periodic_run):
    """64^3 pair with 8 mm max displacement: trained model brings the
    mean landmark-grid endpoint error from >= 5 mm down to <= 1.0 mm
    (hard fail above 1.5 mm) without folding anywhere on the grid."""
    target = read_volume(synth64 / "target.mhd")
    truth = field_from_json(synth64 / "field.json")
    grid = landmark_grid(target)

    init_mean = float(endpoint_errors(truth, None, grid).mean())
    assert init_mean >= 5.0, f"initial mean displacement {init_mean:.3f} mm"

    model = load_model(periodic_run["model_path"])
    err = endpoint_errors(model, truth, grid)
    mean = float(err.mean())
    _, stats = jacdet_grid(model, target)

    print(f"\nrecovery: init {init_mean:.3f} mm -> {mean:.3f} mm "
          f"(max {err.max():.3f} mm) in {periodic_run['seconds']:.0f} s; "
          f"jacdet min {stats['min']:.4f}")
    assert stats["negative_fraction"] == 0.0, stats
    assert mean <= 1.5, f"mean endpoint error {mean:.3f} mm"
    if mean > 1.0:
        warnings.warn(f"recovery mean {mean:.3f} mm is above the 1.0 mm "
                      f"target (report-only band up to 1.5 mm)")


def test_dirlab_identity_tre_reproduction():
    """Identity-baseline TRE on the thoracic CT landmark sets matches the
    published initial errors: COPD case 1 = 26.33 mm, COPD average =
    23.36 mm, 4DCT average = 8.46 mm, each to 0.05 mm.  Needs local data."""
    root = os.environ.get("CONFORMREG_DIRLAB")
    if not root:
        pytest.skip("set CONFORMREG_DIRLAB to the dataset root to enable")
    root = Path(root)

    copd_spacing = {
        1: (0.625, 0.625, 2.5), 2: (0.645, 0.645, 2.5), 3: (0.652, 0.652, 2.5),
        4: (0.590, 0.590, 2.5), 5: (0.647, 0.647, 2.5), 6: (0.633, 0.633, 2.5),
        7: (0.625, 0.625, 2.5), 8: (0.586, 0.586, 2.5), 9: (0.664, 0.664, 2.5),
        10: (0.742, 0.742, 2.5),
    }
    dct_spacing = {
        1: (0.97, 0.97, 2.5), 2: (1.16, 1.16, 2.5), 3: (1.15, 1.15, 2.5),
        4: (1.13, 1.13, 2.5), 5: (1.10, 1.10, 2.5), 6: (0.97, 0.97, 2.5),
        7: (0.97, 0.97, 2.5), 8: (0.97, 0.97, 2.5), 9: (0.97, 0.97, 2.5),
        10: (0.97, 0.97, 2.5),
    }

    def find(patterns):
        for pat in patterns:
            hits = sorted(root.rglob(pat))
            if hits:
                return hits[0]
        return None

    copd = []
    for n in range(1, 11):
        lt = find([f"copd{n}_300_iBH_xyz_r1.txt"])
        ls = find([f"copd{n}_300_eBH_xyz_r1.txt"])
        if lt is None or ls is None:
            pytest.skip(f"COPD case {n} landmark files not found under {root}")
        mean, _ = tre(None, read_landmarks(lt), read_landmarks(ls), copd_spacing[n])
        copd.append(mean)
    assert abs(copd[0] - 26.33) <= 0.05, f"COPD case 1 init TRE {copd[0]:.2f}"
    avg = float(np.mean(copd))
    assert abs(avg - 23.36) <= 0.05, f"COPD average init TRE {avg:.2f}"

    dct = []
    for n in range(1, 11):
        lt = find([f"case{n}_300_T00_xyz.txt", f"case{n}_dirLab300_T00_xyz.txt"])
        ls = find([f"case{n}_300_T50_xyz.txt", f"case{n}_dirLab300_T50_xyz.txt"])
        if lt is None or ls is None:
            pytest.skip(f"4DCT case {n} landmark files not found under {root}")
        mean, _ = tre(None, read_landmarks(lt), read_landmarks(ls), dct_spacing[n])
        dct.append(mean)
    avg = float(np.mean(dct))
    assert abs(avg - 8.46) <= 0.05, f"4DCT average init TRE {avg:.2f}"


def _moving_averages(log_path, window=100):
    rows = read_log(log_path)
    totals = np.asarray([r[3] for r in rows])
    assert totals.size >= 2 * window, "log too short for a moving average"
    return np.convolve(totals, np.ones(window) / window, mode="valid")


@pytest.mark.parametrize("run_name", ["periodic", "fourier"])
def test_encoder_parity_monotone_convergence(run_name, periodic_run, fourier_run):
    """Both encoders finish the recovery pipeline with a monotone decrease
    of the 100-epoch moving average of the total loss.

    Each epoch evaluates the loss on a freshly sampled batch, so even a
    fully converged run keeps residual sampling noise of a few 1e-4 in the
    averaged curve.  Monotone therefore means: the moving average never
    climbs above its running minimum by more than 2% of the total descent.
    That bound sits roughly an order of magnitude above the worst noise
    excursion and an order of magnitude below the smallest instability
    signature (a regulariser blow-up moves the loss by 0.1 or more before
    diverging), so it separates the two regimes cleanly.
    """
    run = {"periodic": periodic_run, "fourier": fourier_run}[run_name]
    ma = _moving_averages(run["log_path"])
    descent = float(ma[0] - ma.min())
    assert descent > 0.0, f"{run_name}: loss never decreased"
    excursions = ma - np.minimum.accumulate(ma)
    worst = float(excursions.max())
    assert worst <= 0.02 * descent, (
        f"{run_name}: moving average rises {worst:.4g} above its running "
        f"minimum (tolerance {0.02 * descent:.4g}); not monotone")
    blocks = ma[::100]
    n_rises = int(np.count_nonzero(np.diff(blocks) >= 0))
    print(f"\n{run_name}: descent {descent:.4f}, worst excursion {worst:.2e}"
          f", consecutive-block rises {n_rises}/{blocks.size - 1}")


def test_determinism_bitwise_checkpoints(synth64, periodic_run, tmp_path_factory):
    """Re-running the full recovery with the same seed and the determinism
    flag reproduces the checkpoint byte for byte."""
    repeat = _run_recovery(synth64, tmp_path_factory.mktemp("accept-repeat"))
    a = Path(periodic_run["model_path"]).read_bytes()
    b = Path(repeat["model_path"]).read_bytes()
    assert a == b, "checkpoints differ between identically seeded runs"
    assert Path(periodic_run["log_path"]).read_bytes() == \
        Path(repeat["log_path"]).read_bytes()
