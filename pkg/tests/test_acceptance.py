"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test reports a single PASS/FAIL line (also repeated in the pytest
terminal summary). Criteria 7-9 share one desk-scale run of gen-data and
train; criterion 9 performs a second identical run.
"""
import json
import os
import time

import numpy as np
import pytest
import scipy.linalg

from oracle import global_lod

from lodc import build_mesh, build_patch
from lodc.cli import RHS, main
from lodc.coeff import child_rng, restrict, restrict_all, sample_multiscale, smooth_sine
from lodc.config import load_config
from lodc.dataset import DatasetFile, sample_coefficient, unflatten_labels
from lodc.fem import assemble_rhs, relative_l2_error
from lodc.lod import (
    assemble_effective, compress_local, h_convergence_study, index_maps,
    localization_decay_study, patches, pg_lod_solve, solve_correctors,
)
from lodc.mesh import SENTINEL
from lodc.nn import MlpArchitecture, default_architecture, init_glorot, load_checkpoint, loss, loss_and_grad
from lodc.surrogate import evaluate


def test_criterion_1_assembly_oracle(record_criterion):
    t0 = time.perf_counter()
    mesh = build_mesh(3)
    worst = 0.0
    for i in range(5):
        coeff = sample_multiscale(5, 5, child_rng(1, i))
        for ell in (1, 2):
            S_ref = global_lod(mesh, coeff, ell)[0]
            S = assemble_effective(mesh, coeff, ell).matrix.toarray()
            worst = max(worst, np.abs(S - S_ref).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 60
    record_criterion(1, "assembly oracle equivalence", ok, f"max entry diff {worst:.2e} (<= 1e-10), {elapsed:.1f} s")
    assert ok


def _global_correctors(mesh, coeff, ell):
    """Implementation correctors summed into a (fine interior, coarse interior) matrix."""
    fine = build_mesh(coeff.eps_level)
    q = fine.n // mesh.n
    Q = np.zeros((fine.n_interior, mesh.n_interior))
    for p in patches(mesh, ell):
        QT = solve_correctors(p, coeff)
        nn = p.side * q + 1
        ly, lx = np.divmod(np.arange(nn * nn), nn)
        gx, gy = p.origin[0] * q + lx, p.origin[1] * q + ly
        inside = (gx > 0) & (gx < fine.n) & (gy > 0) & (gy < fine.n)
        rows = fine.interior_map[fine.node_index(gx[inside], gy[inside])]
        for corner, j in enumerate(p.phi):
            if j != SENTINEL:
                Q[rows, j] += QT[inside, corner]
    return Q


def test_criterion_2_orthogonality_and_symmetry(record_criterion):
    t0 = time.perf_counter()
    mesh = build_mesh(3)
    coeff = sample_multiscale(5, 5, child_rng(2))
    ell = 8
    _, _, K, P, C = global_lod(mesh, coeff, ell)
    Q = _global_correctors(mesh, coeff, ell)
    N = scipy.linalg.null_space(C)
    residual = np.abs(N.T @ (K @ (P - Q))).max()
    S = assemble_effective(mesh, coeff, ell).matrix.toarray()
    norm = np.abs(S).sum(axis=1).max()
    asym = np.abs(S - S.T).sum(axis=1).max()
    elapsed = time.perf_counter() - t0
    ok = residual <= 1e-9 * norm and asym <= 1e-9 * norm and elapsed < 60
    record_criterion(2, "orthogonality and symmetry at full radius", ok,
                     f"residual {residual / norm:.2e}, asymmetry {asym / norm:.2e} relative to ||S||_inf "
                     f"(<= 1e-9), {elapsed:.1f} s")
    assert ok


def test_criterion_3_localization_decay(record_criterion):
    t0 = time.perf_counter()
    cfg = load_config()
    mesh = build_mesh(cfg.coarse_level)
    coeff = sample_multiscale(cfg.eps_level, cfg.eps_level, child_rng(cfg.seed, 300))
    study = localization_decay_study(mesh, coeff, [1, 2, 3], f=1.0)
    errs = [r["rel_l2_error"] for r in study["rows"]]
    monotone = all(b <= a for a, b in zip(errs, errs[1:]))
    elapsed = time.perf_counter() - t0
    ok = monotone and study["slope"] <= -0.5 and elapsed < 300
    record_criterion(3, "localization decay against fine FEM", ok,
                     f"errors {', '.join(f'{e:.6f}' for e in errs)}, monotone={monotone}, "
                     f"slope {study['slope']:.3f} (<= -0.5), {elapsed:.1f} s")
    assert ok


def test_localization_decay_against_full_radius():
    """Distance of the localized solution from the full-radius one decays exponentially in ell."""
    mesh = build_mesh(3)
    coeff = sample_multiscale(5, 5, child_rng(0, 300))
    F = assemble_rhs(mesh, 1.0)
    U_inf = pg_lod_solve(assemble_effective(mesh, coeff, 7), F)
    errs = [relative_l2_error(mesh, pg_lod_solve(assemble_effective(mesh, coeff, ell), F), mesh, U_inf)
            for ell in (1, 2, 3, 4)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert np.polyfit([1, 2, 3, 4], np.log(errs), 1)[0] <= -1.0


def test_criterion_4_h_convergence(record_criterion):
    t0 = time.perf_counter()
    study = h_convergence_study(smooth_sine(6), [2, 3, 4, 5], 3, RHS["sine"])
    elapsed = time.perf_counter() - t0
    errs = [r["rel_l2_error"] for r in study["rows"]]
    ok = study["rate"] >= 0.9 and elapsed < 300
    record_criterion(4, "h-convergence", ok, f"errors {', '.join(f'{e:.2e}' for e in errs)}, "
                                             f"rate {study['rate']:.3f} (>= 0.9), {elapsed:.1f} s")
    assert ok


def test_criterion_5_gradient_check(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        widths = tuple(int(w) for w in rng.integers(2, 7, size=rng.integers(2, 5)))
        model = init_glorot(MlpArchitecture(widths), rng)
        for b in model.biases:
            b[:] = rng.uniform(-0.1, 0.1, size=b.shape)
        n = int(rng.integers(1, 8))
        X = rng.standard_normal((n, widths[0]))
        Y = rng.standard_normal((n, widths[-1]))
        _, grads, _ = loss_and_grad(model, X, Y)
        for p, g in zip(model.params(), grads):
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + 1e-6
                up = loss(model, X, Y)
                p[idx] = old - 1e-6
                down = loss(model, X, Y)
                p[idx] = old
                fd[idx] = (up - down) / 2e-6
            scale = max(np.linalg.norm(fd), np.linalg.norm(g))
            if scale > 0:
                worst = max(worst, np.linalg.norm(g - fd) / scale)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 60
    record_criterion(5, "gradient correctness", ok, f"max relative error {worst:.2e} (<= 1e-5), {elapsed:.1f} s")
    assert ok


def test_criterion_6_parameter_count(record_criterion):
    n = default_architecture(1600, 144, 3).n_params
    record_criterion(6, "parameter count", n == 5063504, f"{n} parameters (expected 5063504)")
    assert n == 5063504


def _desk_run(out):
    t0 = time.perf_counter()
    args = ["--preset", "desk", "--out", str(out), "--threads", str(os.cpu_count() or 1)]
    assert main(["gen-data"] + args) == 0
    assert main(["train"] + args) == 0
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    return out, _desk_run(out)


def test_criterion_7_desk_learning(desk, record_criterion):
    out, elapsed = desk
    t0 = time.perf_counter()
    history = [json.loads(line) for line in (out / "model" / "history.jsonl").read_text().splitlines()]
    first, last = history[0], history[-1]
    drop = first["train_loss"] / last["train_loss"]
    gap = abs(last["val_loss"] - last["train_loss"]) / last["train_loss"]

    cfg = load_config(preset="desk")
    data = cfg.dataset()
    model, _ = load_checkpoint(out / "model" / "best.lodn")
    test = data.split_ranges()["test"]
    ratios, solves = [], []
    for k in range(5):
        family, index = data.families[k], test[k % len(test)]
        report = evaluate(sample_coefficient(data, family, index), 1.0, model, cfg.coarse_level, cfg.ell,
                          fine_reference=True)
        ratios.append(report.fine_rel_error_nn / report.fine_rel_error_ref)
        solves.append(report.corrector_solves_online)
    elapsed += time.perf_counter() - t0

    a = drop >= 20
    b = gap <= 0.5
    c = max(ratios) <= 3
    d = not any(solves)
    ok = a and b and c and d and elapsed < 1800
    record_criterion(7, "desk-scale end-to-end learning", ok,
                     f"(a) loss drop {drop:.1f}x (>= 20; running-mean drop "
                     f"{first['running_loss'] / last['running_loss']:.1f}x) {'ok' if a else 'FAIL'}; "
                     f"(b) val/train gap {gap:.3f} (<= 0.5) {'ok' if b else 'FAIL'}; "
                     f"(c) error ratios {', '.join(f'{r:.2f}' for r in ratios)} (<= 3) {'ok' if c else 'FAIL'}; "
                     f"(d) online corrector solves {sum(solves)} {'ok' if d else 'FAIL'}; {elapsed:.0f} s")
    assert ok


def test_criterion_8_homogeneity_and_zero_rows(desk, record_criterion):
    t0 = time.perf_counter()
    mesh = build_mesh(3)
    coeff = sample_multiscale(5, 5, child_rng(8))
    inputs = restrict_all(coeff, mesh, 2)
    worst = 0.0
    for p in patches(mesh, 2):
        S = compress_local(p, inputs[p.center], 5)
        for c in (2.0, 5.0):
            worst = max(worst, np.abs(compress_local(p, c * inputs[p.center], 5) - c * S).max())
    assert np.array_equal(inputs[9], restrict(coeff, build_patch(mesh, 9, 2)))

    out, _ = desk
    data = load_config(preset="desk").dataset()
    pi, _ = index_maps(build_mesh(data.coarse_level), data.ell)
    nonzero = 0
    for split in ("train", "val", "test"):
        f = DatasetFile(str(out / "data" / f"{split}.lodd"))
        for start in range(0, len(f), 4096):
            mats = unflatten_labels(np.asarray(f.labels[start:start + 4096]), data.n_patch)
            elements = np.asarray(f.meta[start:start + 4096, 2]).astype(int)
            nonzero += int(np.count_nonzero(mats[pi[elements] == SENTINEL]))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and nonzero == 0 and elapsed < 60
    record_criterion(8, "homogeneity and zero rows", ok,
                     f"max |S_cA - c S_A| {worst:.2e} (<= 1e-10), {nonzero} nonzero sentinel entries, "
                     f"{elapsed:.1f} s")
    assert ok


def test_criterion_9_reproducibility(desk, tmp_path, record_criterion):
    first, _ = desk
    elapsed = _desk_run(tmp_path)
    files = ["data/train.lodd", "data/val.lodd", "data/test.lodd", "data/manifest.json",
             "model/last.lodn", "model/best.lodn"]
    differ = [f for f in files if (first / f).read_bytes() != (tmp_path / f).read_bytes()]
    ok = not differ
    record_criterion(9, "reproducibility", ok,
                     f"{len(files) - len(differ)}/{len(files)} files byte-identical"
                     + (f" (differ: {', '.join(differ)})" if differ else "") + f", rerun {elapsed:.0f} s")
    assert ok
