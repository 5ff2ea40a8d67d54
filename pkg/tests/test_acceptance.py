"""Desk-scale acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line with the measured quantities and
then asserts the same condition.
"""
import math
import time

import numpy as np
import pytest

from landscape import autodiff as ad
from landscape.analysis import (angle_study, delta_loss_distribution, descent_comparison,
                                mli_curve, quadratic_overlay)
from landscape.cli import run
from landscape.data import (gen_blobs, parse_cifar10_bytes, read_cifar10, write_cifar10_bytes)
from landscape.directions import (delta_direction, gaussian_direction, load_direction,
                                  neg_gradient_direction, normalize, overlap_profile,
                                  save_direction)
from landscape.errors import FormatError
from landscape.miner import VVV_DEFAULTS, WPEAK_DEFAULTS, MineConfig, mine_vvv, mine_wpeak
from landscape.models import Model, ModelSpec
from landscape.params import ParamVector
from landscape.scan import count_stationary, scan_1d, uniform_grid
from landscape.spectral import (HvpOperator, MatrixOperator, dense_matrix, extremal_eigs,
                                slq_density)
from landscape.trainer import TrainConfig, load_checkpoint, save_checkpoint, train

from conftest import DESK_SPEC, EARLY_EPOCH

LN10 = math.log(10)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}")
    assert ok, detail


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_criterion_01_gradient_and_hvp_oracles(capsys, desk_model, desk, desk_data):
    t0 = time.perf_counter()
    params = desk.early.params
    batch = desk_data.batch(np.arange(256))
    g_err = ad.check_grad_fd(desk_model, params, batch, n_coords=64, h=1e-4)

    loss = ad.forward_loss(desk_model, params, batch)
    rng = np.random.default_rng(11)
    u = params.like(rng.normal(size=len(params)))
    v = params.like(rng.normal(size=len(params)))
    v = v / v.norm()  # unit probe keeps the +-h steps clear of ReLU kinks
    hv = ad.hvp(loss, v).values
    h = 1e-4
    gp = ad.gradient(ad.forward_loss(desk_model, params + v * h, batch)).values
    gm = ad.gradient(ad.forward_loss(desk_model, params - v * h, batch)).values
    hvp_err = _rel(hv, (gp - gm) / (2 * h))
    uhv, vhu = u.values @ hv, v.values @ ad.hvp(loss, u).values
    sym = abs(uhv - vhu) / max(abs(uhv), abs(vhu))
    dt = time.perf_counter() - t0
    ok = g_err < 1e-6 and hvp_err < 1e-4 and sym < 1e-8 and dt < 60
    report(capsys, 1, ok, f"grad FD rel {g_err:.2e} (<1e-6), HVP FD rel {hvp_err:.2e} (<1e-4), "
                          f"symmetry {sym:.2e} (<1e-8), {dt:.1f}s (<60s)")


def test_criterion_02_eigen_oracles(capsys, desk_model, desk, desk_data):
    t0 = time.perf_counter()
    op = HvpOperator(desk_model, desk.early.params, desk_data, n_samples=512)
    dense = np.linalg.eigvalsh(dense_matrix(op))
    errs, resid = [], []
    for which, ref in (("LA", dense[::-1][:5]), ("SA", dense[:5])):
        r = extremal_eigs(op, 5, which, tol=1e-10, seed=0)
        errs.append(np.max(np.abs(r.eigenvalues - ref) / np.abs(ref)))
        hv = np.column_stack([op.matvec(r.eigenvectors[:, i]) for i in range(5)])
        resid.append(np.max(np.linalg.norm(hv - r.eigenvectors * r.eigenvalues, axis=0)))
    dt = time.perf_counter() - t0
    ok = max(errs) < 1e-6 and max(resid) <= 1e-6 and dt < 300
    report(capsys, 2, ok, f"d={op.dim}, max rel eig error {max(errs):.2e} (<1e-6), "
                          f"max residual {max(resid):.2e} (<=1e-6), {dt:.1f}s (<300s)")


def test_criterion_03_slq(capsys):
    spec = np.array([-1.0] * 10 + [0.0] * 80 + [2.0] * 10)
    op = MatrixOperator(np.diag(spec))
    d = slq_density(op, n_probes=30, lanczos_steps=40, kernel_sigma=0.05, seed=0)
    modes = d.modes()
    near = [np.min(np.abs(modes - t)) for t in (-1.0, 0.0, 2.0)]
    exact = spec.mean()
    z = abs(d.first_moment - exact) / d.first_moment_stderr if d.first_moment_stderr > 0 else (
        0.0 if abs(d.first_moment - exact) < 1e-12 else np.inf)
    ok = abs(d.integral() - 1) <= 1e-6 and max(near) <= d.sigma and z <= 3
    report(capsys, 3, ok, f"integral {d.integral():.9f}, mode offsets {np.round(near, 4)} "
                          f"(<= bandwidth {d.sigma}), first moment {d.first_moment:.4f} vs "
                          f"{exact:.4f} ({z:.2f} SE)")


def test_criterion_04_gmi(capsys, desk_model, desk, desk_data):
    t0 = time.perf_counter()
    theta = desk.final.params
    grid = uniform_grid(-1, 1, 41)
    counts, labels = [], []
    for s in range(5):
        eps = normalize(gaussian_direction(theta.manifest, 1.0, seed=s), theta, "global")
        c = scan_1d(desk_model, theta, None, eps, grid, desk_data)
        counts.append(c.stationary_count)
        labels.append(c.label)
    frac = labels.count("v-basin") / len(labels)
    dt = time.perf_counter() - t0
    ok = np.mean(counts) <= 1.5 and frac >= 0.9 and dt < 300
    report(capsys, 4, ok, f"stationary counts {counts} mean {np.mean(counts):.2f} (<=1.5), "
                          f"v-basin {frac:.0%} (>=90%), {dt:.1f}s")


def test_criterion_05_v_side(capsys, desk_model, desk, desk_data):
    early = desk.early
    grid = uniform_grid(-1, 1, 41)
    z = int(np.nonzero(grid == 0)[0][0])
    neg = normalize(neg_gradient_direction(desk_model, early.params, desk_data.batch(np.arange(1000))),
                    early.params, "global")
    c1 = scan_1d(desk_model, early.params, None, neg, grid, desk_data)
    sub = delta_direction(early, desk.ckpts[EARLY_EPOCH + 1])
    c2 = scan_1d(desk_model, early.params, None, sub, grid, desk_data)
    ok = all(c.label == "v-side" and c.losses[z + 1] < c.losses[z] for c in (c1, c2))
    report(capsys, 5, ok, f"-g: {c1.label}, dL(+step) {c1.losses[z + 1] - c1.losses[z]:.3e}; "
                          f"subsequent delta: {c2.label}, dL(+step) "
                          f"{c2.losses[z + 1] - c2.losses[z]:.3e}")


def test_criterion_06_gaussian_vs_gradient(capsys):
    ds = gen_blobs(10, 200, 3072, 0.3, seed=0)
    spec = ModelSpec("mlp", (3072,), 10, hidden=128)
    model = Model(spec)
    ck = train(spec, TrainConfig(lr=0.1, epochs=1, checkpoint_epochs=(), seed=0), ds)[-1]
    batch = ds.batch(np.arange(128))
    st = angle_study(model, ck.params, batch, n=100)
    dc = descent_comparison(model, ck.params, batch, ds.head(1000), n=100, scale=10.0)
    mean, std, ref = st.gaussian_vs_grad.mean(), st.gaussian_vs_grad.std(), st.reference_std
    ratio = dc.gauss_drop / dc.grad_drop
    ok = abs(mean - 90) <= 0.5 and abs(std - ref) <= 0.5 * ref and ratio < 0.1
    report(capsys, 6, ok, f"d={st.dim}, mean angle {mean:.3f} (90+-0.5), std {std:.4f} vs "
                          f"{ref:.4f} (+-50%), best-of-100 Gaussian drop at 10x / gradient drop "
                          f"{ratio:.3f} (<0.1)")


def test_criterion_07_w_basin(capsys, desk_model, desk_runs, desk_data):
    grid = uniform_grid(-1, 2, 31)
    i0, i1 = int(np.nonzero(grid == 0)[0][0]), int(np.nonzero(grid == 1)[0][0])
    good, notes = 0, []
    for s in range(5):
        a, b = desk_runs[s].final, desk_runs[s + 5].final
        c = scan_1d(desk_model, a.params, None, delta_direction(a, b), grid, desk_data)
        path = c.losses[i0:i1 + 1]
        barrier = path.max() - max(c.losses[i0], c.losses[i1])
        hit = barrier >= 0.2 * LN10 and c.stationary_count == 3 and c.label == "w-basin"
        good += hit
        notes.append(f"({s},{s + 5}) barrier {barrier:.2f} count {c.stationary_count} {c.label}")
    report(capsys, 7, good >= 4, f"{good}/5 pairs (>=4); barrier threshold {0.2 * LN10:.3f}; "
                                 + "; ".join(notes))


def test_criterion_08_w_peak_via_negative_eigenvector(capsys, desk_model, desk_runs, desk_data):
    grid = uniform_grid(-0.2, 0.2, 21)
    z = int(np.nonzero(grid == 0)[0][0])
    good, shrink, notes = 0, 0, []
    for s in range(5):
        run_ = desk_runs[s]
        ops = {e: HvpOperator(desk_model, run_.ckpts[e].params, desk_data)
               for e in (EARLY_EPOCH, 50)}
        res = {e: extremal_eigs(op, 1, "SA", seed=0) for e, op in ops.items()}
        theta = run_.early.params
        v = normalize(theta.like(res[EARLY_EPOCH].eigenvectors[:, 0]), theta, "global")
        c = scan_1d(desk_model, theta, None, v, grid, desk_data)
        both = [k for k in range(1, z + 1)
                if c.losses[z + k] < c.losses[z] and c.losses[z - k] < c.losses[z]]
        good += bool(both)
        lam_e, lam_l = res[EARLY_EPOCH].eigenvalues[0], res[50].eigenvalues[0]
        shrink += abs(lam_l) < abs(lam_e)
        notes.append(f"s{s}: lambda*={grid[z + both[0]] if both else None} "
                     f"min eig {lam_e:.3f}->{lam_l:.4f}")
    ok = good >= 4 and shrink == 5
    report(capsys, 8, ok, f"w-peak {good}/5 (>=4), |lambda_min| shrinks {shrink}/5; "
                          + "; ".join(notes))


def test_criterion_09_algo1_mining(capsys, desk_model, desk, desk_data):
    theta = desk.early.params
    op = HvpOperator(desk_model, theta, desk_data)
    ne = extremal_eigs(op, 10, "SA", seed=0)
    pe = extremal_eigs(op, 10, "LA", seed=0)
    ne_v = [theta.like(x) for x in ne.eigenvectors.T]
    pe_v = [theta.like(x) for x in pe.eigenvectors.T]
    grid = uniform_grid(-1, 1, 41)
    labels, ne_m, pe_m = [], [], []
    for seed in range(3):
        cfg = MineConfig(WPEAK_DEFAULTS.epochs, WPEAK_DEFAULTS.lr, seed=seed)
        eps = mine_wpeak(desk_model, theta, desk_data, cfg)
        labels.append(scan_1d(desk_model, theta, None, eps, grid, desk_data).label)
        ne_m.append(overlap_profile(eps, ne_v).mean())
        pe_m.append(overlap_profile(eps, pe_v).mean())
    ok = all(l == "w-peak" for l in labels) and all(a >= b for a, b in zip(ne_m, pe_m))
    report(capsys, 9, ok, f"labels {labels}; N.E. overlap {np.round(ne_m, 3)} vs "
                          f"P.E. {np.round(pe_m, 3)}")


def test_criterion_10_algo2_mining(capsys, desk_model, desk, desk_data):
    theta = desk.final.params
    base = MineConfig(VVV_DEFAULTS.epochs, VVV_DEFAULTS.lr, gamma=0.0, alpha=0.0, seed=1)
    reg = MineConfig(VVV_DEFAULTS.epochs, VVV_DEFAULTS.lr, gamma=0.1, alpha=0.0, seed=1)
    path = uniform_grid(0, 1, 11)
    wide = uniform_grid(-1, 2, 31)
    _, e0 = mine_vvv(desk_model, theta, desk_data, base)
    _, e1 = mine_vvv(desk_model, theta, desk_data, reg)
    c0 = scan_1d(desk_model, theta, None, e0, np.r_[path], desk_data)
    c1 = scan_1d(desk_model, theta, None, e1, np.r_[path], desk_data)
    barrier0, mid1 = c0.losses.max(), c1.loss_at(0.5)
    label = scan_1d(desk_model, theta, None, e1, wide, desk_data).label
    report(capsys, 10, mid1 < barrier0,
           f"gamma=0.1 midpoint loss {mid1:.3f} < gamma=0 barrier {barrier0:.3f}; "
           f"wide-scan class {label} (vvv-basin emergence not gated)")


def test_criterion_11_eq4_mean(capsys, desk_model, desk, desk_data):
    op = HvpOperator(desk_model, desk.final.params, desk_data)
    assert op.dim <= 2000
    tr = np.trace(dense_matrix(op))
    samples = None
    rows, ok = [], True
    fracs = []
    for lam in (0.001, 0.01):
        r = delta_loss_distribution(desk_model, desk.final.params, desk_data, lam, 1.0, 100,
                                    seed=0, n_trace_probes=10, op=op, samples=samples)
        samples = (r.a, r.b)
        pred = 0.5 * lam ** 2 * tr
        z = abs(r.mean - pred) / r.stderr
        ok &= z <= 3
        fracs.append(r.positive_fraction)
        rows.append(f"lambda={lam}: mean {r.mean:.3e} vs {pred:.3e} ({z:.2f} SE), "
                    f"positive {r.positive_fraction:.2f}")
    ok &= fracs[1] > fracs[0]
    report(capsys, 11, ok, f"d={op.dim}, tr(H)={tr:.3f}; " + "; ".join(rows))


def test_criterion_12_mli_gmi_and_overlay(capsys, desk_model, desk, desk_data):
    theta0, thetaf = desk.init.params, desk.final.params
    eps = thetaf - theta0
    lams = uniform_grid(-1, 0, 11)
    gmi = scan_1d(desk_model, thetaf, None, eps, lams, desk_data, bn_mode="NoUpBN")
    mli = mli_curve(desk_model, theta0, thetaf, lams + 1.0, desk_data)
    mismatched = int(np.sum(gmi.losses != mli))
    gap = float(np.max(np.abs(gmi.losses - mli)))

    overlay = quadratic_overlay(desk_model, thetaf, eps, desk_data)
    err = {round(o.anchor, 6): o.max_error for o in overlay}
    drop = mli[0] - mli[-1]
    rise = float(np.max(np.diff(mli)))
    ok_bits = mismatched == 0
    ok_overlay = err[-1.0] > err[-0.5]
    ok_mono = rise <= 0.01 * drop
    report(capsys, 12, ok_bits and ok_overlay and ok_mono,
           f"bit-identical points {len(lams) - mismatched}/{len(lams)} (max |diff| {gap:.1e}); "
           f"overlay error at -1 {err[-1.0]:.2e} > at -0.5 {err[-0.5]:.2e}: {ok_overlay}; "
           f"MLI max rise {max(rise, 0):.2e} <= 1% of drop {drop:.3f}: {ok_mono}")


def test_criterion_13_formats(capsys, tmp_path, desk, monkeypatch):
    ck = desk.final
    save_checkpoint(ck, tmp_path / "c.lmck")
    back = load_checkpoint(tmp_path / "c.lmck", DESK_SPEC)
    ck_ok = back.params.bit_equal(ck.params) and back.epoch == ck.epoch
    d = normalize(gaussian_direction(ck.params.manifest, 1.0, seed=3), ck.params, "filter")
    save_direction(d, tmp_path / "d.lmdr")
    dr_ok = load_direction(tmp_path / "d.lmdr").vector.bit_equal(d.vector)

    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, 7)
    pixels = rng.integers(0, 256, (7, 3, 32, 32))
    raw = write_cifar10_bytes(labels, pixels)
    lab, pix = parse_cifar10_bytes(raw)
    parse_ok = len(raw) == 7 * 3073 and np.array_equal(lab, labels) and np.array_equal(pix, pixels)
    (tmp_path / "b.bin").write_bytes(raw)
    parse_ok &= len(read_cifar10(tmp_path / "b.bin")) == 7
    rejects = 0
    for bad in (raw[:-5], bytes([10]) + raw[1:]):
        try:
            parse_cifar10_bytes(bad)
        except FormatError:
            rejects += 1

    argv = ["train", "--hidden", "8", "--epochs", "2", "--checkpoint-epochs", "1",
            "--per-class", "40", "--dim", "16", "--out", "run"]
    scan = ["scan1d", "--ckpt", "run/e002", "--per-class", "40", "--dim", "16", "--seeds", "2",
            "--points", "11", "--out", "run/scan"]
    contents = []
    for where in ("a", "b"):
        (tmp_path / where).mkdir()
        monkeypatch.chdir(tmp_path / where)
        assert run(argv) == 0 and run(scan) == 0
        files = sorted((p for p in (tmp_path / where).rglob("*") if p.is_file()),
                       key=lambda p: (p.parent.name, p.suffix, p.name.split("_")[-1]))
        contents.append([(p.name.split("_")[-1], p.read_bytes()) for p in files])
    rerun_ok = contents[0] == contents[1] and len(contents[0]) > 0
    ok = ck_ok and dr_ok and parse_ok and rejects == 2 and rerun_ok
    report(capsys, 13, ok, f"checkpoint round-trip {ck_ok}, direction round-trip {dr_ok}, "
                           f"CIFAR parse at 3073-byte stride {parse_ok}, malformed rejected "
                           f"{rejects}/2, rerun byte-identical {rerun_ok}")
