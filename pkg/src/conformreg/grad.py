"""Training gradients for the registration loss.

Rebuilds the loss from loss.py on the reverse-mode tape and pulls one
vector-Jacobian product back to every network parameter.  The forward
pass doubles as the derivation of the spatial Jacobian (the same
omega cos(omega a) chain as DeformationModel.forward_with_jacobian), so
the regulariser's dependence on d phi/d p yields exact mixed second
derivatives through the single reverse sweep.

Large batches are split into fixed-size chunks; per-chunk gradients and
loss parts are combined by a fixed-order pairwise tree, so results are
reproducible bit for bit whatever the memory situation.  batch_global
similarity couples the whole batch inside one normalisation and is
therefore never chunked.

check_gradients verifies every loss component (similarity plus the four
energy terms) against central finite differences of the same values,
parameter by parameter; it is cheap for the small nets it is meant for
and is wired into the CLI selfcheck verb.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .energy import EnergyParams
from .errors import NumericalError
from .loss import LossConfig, LossValues, _chunk_slices, pairwise_sum, window_offsets

_C1 = 3.0**4.5
_TERM_NAMES = ("length", "area", "volume", "barrier")


def _param_vars(model):
    return [(Var(w), Var(b)) for w, b in model.layers]


def _forward(model, pvars, points, want_jacobian):
    """Tape version of the network forward pass on world points.

    Returns (phi, jac) Vars; jac is None unless requested.  Activations
    z and the directional-derivative blocks g (3, n, width) flow through
    the same ops as the plain numpy path, just recorded.
    """
    x = model.norm.to_unit(points)
    z, g = model._features(x)  # constants: encoders do not train
    om = model.cfg.omega
    for wv, bv in pvars[:-1]:
        a = ad.dot_last(z, ad.transpose(wv, (1, 0))) + bv
        om_a = a * om
        if want_jacobian:
            chain = ad.cos(om_a) * om
            gw = ad.dot_last(g, ad.transpose(wv, (1, 0)))
            g = ad.reshape(chain, (1,) + chain.shape) * gw
        z = ad.sin(om_a)
    wv, bv = pvars[-1]
    u = ad.dot_last(z, ad.transpose(wv, (1, 0))) + bv
    phi = points + u * model.norm.half_extent
    jac = None
    if want_jacobian:
        du = ad.dot_last(g, ad.transpose(wv, (1, 0)))  # (3, n, 3)
        jn = ad.transpose(du, (1, 2, 0))
        scale = model.norm.half_extent
        jac = np.eye(3) + jn * (scale[:, None] / scale[None, :])
    return phi, jac


def _sample_source(source, phi):
    """Interpolate the source volume at warped points, on the tape."""
    val, grad = source.sample_with_gradient(phi.value)
    return Var(val, [(phi, lambda g: g[:, None] * grad)])


def _ncc_from_samples(s, t, variance_eps):
    """Row-wise squared NCC of a Var s against constant t, both (r, w)."""
    ds = s - ad.vmean(s, axis=1, keepdims=True)
    dt = t - t.mean(axis=1, keepdims=True)
    ss = ad.vsum(ds * ds, axis=1)
    tt = np.einsum("ij,ij->i", dt, dt)
    num = ad.vsum(ds * dt, axis=1) ** 2.0
    # match ncc_rows: nan variances fail the < test and stay on the live
    # branch, so poisoned samples surface instead of scoring 0
    flat = (ss.value < variance_eps) | (tt < variance_eps)
    return ad.where_mask(~flat, num / (ss * tt + variance_eps), np.zeros_like(tt))


def _density_terms(jac, p: EnergyParams):
    """energy.density_terms rebuilt on the tape.

    The smooth-branch powers are evaluated with det clamped to eps_det
    so the masked-off side stays finite; where_mask then routes both
    values and gradients to the correct branch.
    """
    d = ad.det3(jac)
    c = ad.cof3(jac)
    f2 = ad.frob2(jac)
    g2c = ad.frob2(c)
    e = p.eps_det
    smooth = d.value > e
    dsafe = ad.where_mask(smooth, d, np.full_like(d.value, e))
    dd = d - e
    g1 = ad.where_mask(smooth, dsafe**-3.0, e**-3.0 - (3.0 * e**-4.0) * dd)
    g2 = ad.where_mask(smooth, dsafe**-4.0, e**-4.0 - (4.0 * e**-5.0) * dd)
    g3 = ad.where_mask(smooth, (dsafe - 1.0) ** 2.0, (e - 1.0) ** 2 + (2.0 * (e - 1.0)) * dd)
    g4 = ad.where_mask(
        smooth, dsafe**-p.alpha, e**-p.alpha - (p.alpha * e ** -(p.alpha + 1.0)) * dd
    )
    return {
        "length": p.a1 * (f2**4.5 * g1 - _C1),
        "area": p.a2 * (g2c**3.0 * g2 - 27.0),
        "volume": p.a3 * g3,
        "barrier": p.a4 * (g4 - 1.0),
    }


def build_loss(source, target, model, pvars, points, cfg: LossConfig):
    """Assemble the loss graph for one batch chunk.

    Returns a dict of Vars: per-row "ncc", per-point energy "terms",
    scalar "sim", "reg", per-term means, and "total".
    """
    if cfg.ncc_mode == "batch_global":
        phi, jac = _forward(model, pvars, points, want_jacobian=True)
        t = target.sample(points)[None, :]
        s = ad.reshape(_sample_source(source, phi), (1, -1))
        ncc = _ncc_from_samples(s, t, cfg.variance_eps)
    else:
        offs = window_offsets(cfg.window, target.spacing)
        w = offs.shape[0]
        p = (points[:, None, :] + offs[None, :, :]).reshape(-1, 3)
        t = target.sample(p).reshape(-1, w)
        phi_w, _ = _forward(model, pvars, p, want_jacobian=False)
        s = ad.reshape(_sample_source(source, phi_w), (-1, w))
        ncc = _ncc_from_samples(s, t, cfg.variance_eps)
        _, jac = _forward(model, pvars, points, want_jacobian=True)

    terms = _density_terms(jac, cfg.energy)
    sim = ad.vmean(ncc)
    term_means = {k: ad.vmean(v) for k, v in terms.items()}
    reg = term_means["length"] + term_means["area"] + term_means["volume"] + term_means["barrier"]
    total = cfg.lam * reg - sim
    return {
        "ncc": ncc, "terms": terms, "sim": sim, "reg": reg,
        "term_means": term_means, "total": total,
    }


def _first_bad_index(offset, *rows):
    for arr in rows:
        bad = ~np.isfinite(arr)
        if bad.any():
            return offset + int(np.argmax(bad))
    return offset


def loss_gradients(source, target, model, points, cfg: LossConfig = LossConfig()):
    """Loss values and d total / d parameter for one batch.

    Returns (LossValues, grads) with grads a list of arrays matching
    model.parameters() order.  Raises NumericalError naming the first
    offending batch index if any per-point loss value is non-finite.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    pvars = _param_vars(model)
    flat = [v for pair in pvars for v in pair]

    if cfg.ncc_mode == "batch_global":
        chunks = [slice(0, n)]
    else:
        chunks = _chunk_slices(n, cfg.window**3)

    tot_parts, sim_parts, reg_parts, grad_parts = [], [], [], []
    for sl in chunks:
        graph = build_loss(source, target, model, pvars, points[sl], cfg)
        dens = pairwise_sum([graph["terms"][k] for k in _TERM_NAMES]).value
        if not (np.isfinite(graph["ncc"].value).all() and np.isfinite(dens).all()):
            idx = _first_bad_index(
                sl.start,
                dens if cfg.ncc_mode == "batch_global" else graph["ncc"].value,
                dens,
            )
            raise NumericalError(f"non-finite loss contribution at batch index {idx}")
        weight = (sl.stop - sl.start) / n
        ad.zero_grads(flat)
        graph["total"].backward(seed=np.float64(weight))
        grad_parts.append([np.zeros_like(v.value) if v.grad is None else v.grad for v in flat])
        tot_parts.append(weight * graph["total"].value)
        sim_parts.append(weight * graph["sim"].value)
        reg_parts.append(weight * graph["reg"].value)

    grads = [pairwise_sum([g[i] for g in grad_parts]) for i in range(len(flat))]
    values = LossValues(
        total=float(pairwise_sum(tot_parts)),
        similarity=float(pairwise_sum(sim_parts)),
        reg=float(pairwise_sum(reg_parts)),
    )
    ad.zero_grads(flat)
    return values, grads


_COMPONENTS = ("similarity",) + _TERM_NAMES


def _component_values(source, target, model, points, cfg):
    pvars = _param_vars(model)
    graph = build_loss(source, target, model, pvars, points, cfg)
    vals = {"similarity": float(graph["sim"].value)}
    vals.update({k: float(graph["term_means"][k].value) for k in _TERM_NAMES})
    return vals, graph, pvars


def check_gradients(source, target, model, points, cfg: LossConfig = LossConfig(),
                    h: float = 1e-5, tol: float = 1e-4, rel_floor: float = 1e-6):
    """Compare tape gradients of every loss component against central
    finite differences, parameter by parameter.

    Intended for small nets; cost is two loss evaluations per scalar
    parameter.  Errors are normalised by the largest gradient magnitude
    seen in the component (with a small floor), so flat components do
    not divide by zero.  Returns a report dict with per-component
    max_rel_err and pass flags plus an overall "pass".
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    _, graph, pvars = _component_values(source, target, model, points, cfg)
    flat = [v for pair in pvars for v in pair]

    analytic = {}
    scalar_of = {"similarity": graph["sim"]}
    scalar_of.update({k: graph["term_means"][k] for k in _TERM_NAMES})
    for name in _COMPONENTS:
        ad.zero_grads(flat)
        scalar_of[name].backward()
        analytic[name] = np.concatenate(
            [np.zeros(v.value.size) if v.grad is None else v.grad.ravel() for v in flat]
        )

    arrays = model.parameters()
    total = sum(a.size for a in arrays)
    fd = {name: np.empty(total) for name in _COMPONENTS}
    col = 0
    for arr in arrays:
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            keep = arr[ix]
            arr[ix] = keep + h
            hi, _, _ = _component_values(source, target, model, points, cfg)
            arr[ix] = keep - h
            lo, _, _ = _component_values(source, target, model, points, cfg)
            arr[ix] = keep
            for name in _COMPONENTS:
                fd[name][col] = (hi[name] - lo[name]) / (2.0 * h)
            col += 1
            it.iternext()

    report = {"h": h, "tol": tol, "components": {}}
    ok = True
    for name in _COMPONENTS:
        scale = max(np.max(np.abs(fd[name])), np.max(np.abs(analytic[name])), rel_floor)
        err = float(np.max(np.abs(analytic[name] - fd[name])) / scale)
        good = err <= tol
        ok = ok and good
        report["components"][name] = {"max_rel_err": err, "pass": good}
    report["pass"] = ok
    return report
