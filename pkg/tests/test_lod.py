import numpy as np
import pytest

from oracle import global_lod

from lodc import ConfigurationError, FormatError, SENTINEL, build_mesh, build_patch
from lodc.coeff import Coefficient, child_rng, restrict, sample_multiscale
from lodc.lod import (
    EffectiveMatrix, assemble_effective, compress_local, corrector_solves, h_convergence_study, index_maps,
    load_effective, local_effective_matrix, local_matrices, localization_decay_study, patch_system,
    pg_lod_solve, save_effective, scatter, solve_correctors,
)


@pytest.fixture(scope="module")
def small():
    mesh = build_mesh(2)
    coeff = sample_multiscale(4, 4, child_rng(11))
    return mesh, coeff


@pytest.mark.parametrize("ell", [1, 2])
def test_matches_global_oracle(small, ell):
    mesh, coeff = small
    S_ref = global_lod(mesh, coeff, ell)[0]
    S = assemble_effective(mesh, coeff, ell).matrix.toarray()
    assert np.abs(S - S_ref).max() <= 1e-11 * np.abs(S_ref).max()


def test_correctors_satisfy_constraints(small):
    mesh, coeff = small
    p = build_patch(mesh, 5, 1)
    system = patch_system(p, coeff.eps_level)
    Q = solve_correctors(p, coeff)
    assert Q.shape == ((p.side * 4 + 1) ** 2, 4)
    assert np.abs(system.constraints @ Q[system.free]).max() < 1e-12
    non_free = np.setdiff1d(np.arange(Q.shape[0]), system.free)
    assert not Q[non_free].any()


def test_two_paths_to_local_matrix(small):
    mesh, coeff = small
    p = build_patch(mesh, 2, 2)
    Q = solve_correctors(p, coeff)
    assert np.allclose(local_effective_matrix(p, coeff, Q), compress_local(p, restrict(coeff, p), coeff.eps_level),
                       rtol=0, atol=1e-13)


def test_zero_rows_and_shape(small):
    mesh, coeff = small
    local = local_matrices(mesh, coeff, 1)
    pi, _ = index_maps(mesh, 1)
    assert local.shape == (16, 16, 4)
    assert np.all(local[pi == SENTINEL] == 0.0)


def test_homogeneity(small):
    mesh, coeff = small
    p = build_patch(mesh, 0, 2)
    a = restrict(coeff, p)
    S = compress_local(p, a, 4)
    assert np.abs(compress_local(p, 3.0 * a, 4) - 3.0 * S).max() <= 1e-12 * np.abs(S).max()


def test_counter_counts_every_element(small):
    mesh, coeff = small
    before = corrector_solves.value
    assemble_effective(mesh, coeff, 1)
    assert corrector_solves.value - before == mesh.n_elements


def test_pattern_independent_of_coefficient(small):
    mesh, _ = small
    a = assemble_effective(mesh, sample_multiscale(4, 4, child_rng(1)), 1).matrix
    b = assemble_effective(mesh, sample_multiscale(4, 4, child_rng(2)), 1).matrix
    assert np.array_equal(a.indices, b.indices) and np.array_equal(a.indptr, b.indptr)


def test_scatter_sums_contributions():
    mesh = build_mesh(2)
    pi, phi = index_maps(mesh, 1)
    local = np.ones((mesh.n_elements, pi.shape[1], 4))
    S = scatter(mesh, 1, local).toarray()
    expect = np.zeros((9, 9))
    for T in range(mesh.n_elements):
        for i in pi[T][pi[T] != SENTINEL]:
            for j in phi[T][phi[T] != SENTINEL]:
                expect[i, j] += 1
    assert np.array_equal(S, expect)


def test_radius_beyond_domain_is_global():
    mesh = build_mesh(2)
    coeff = sample_multiscale(3, 4, child_rng(4))
    S4 = assemble_effective(mesh, coeff, 4).matrix.toarray()
    S6 = assemble_effective(mesh, coeff, 6).matrix.toarray()
    assert np.abs(S4 - S6).max() <= 1e-12 * np.abs(S4).max()
    assert np.abs(S4 - S4.T).max() <= 1e-12 * np.abs(S4).max()


def test_constant_coefficient_solution_close_to_fem():
    mesh = build_mesh(3)
    coeff = Coefficient(5, np.full(1024, 2.0))
    S = assemble_effective(mesh, coeff, 2)
    U = pg_lod_solve(S, np.full(mesh.n_interior, mesh.h ** 2))
    assert np.all(U > 0)
    study = localization_decay_study(mesh, coeff, [1, 2])
    assert all(r["rel_l2_error"] < 0.05 for r in study["rows"])


def test_level_mismatch():
    with pytest.raises(ConfigurationError):
        local_matrices(build_mesh(3), Coefficient(3, np.ones(64)), 1)


def test_h_convergence_rows():
    coeff = Coefficient(5, np.ones(1024))
    out = h_convergence_study(coeff, [2, 3], 2, 1.0)
    errs = [r["rel_l2_error"] for r in out["rows"]]
    assert errs[1] < errs[0] and out["rate"] > 0.9


def test_effective_file_roundtrip(tmp_path, small):
    mesh, coeff = small
    S = assemble_effective(mesh, coeff, 1)
    path = tmp_path / "s.lods"
    save_effective(S, path)
    raw = path.read_bytes()
    assert raw[:4] == b"LODS" and len(raw) == 20 + 16 * S.matrix.nnz
    back = load_effective(path, ell=1)
    assert isinstance(back, EffectiveMatrix)
    assert (back.matrix != S.matrix).nnz == 0
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_effective(path)
