"""Petrov-Galerkin LOD: element correctors, local effective matrices and global assembly.

Everything that depends only on geometry (fine-grid connectivity, free
nodes, interpolation constraints, coarse hats sampled on the fine grid) is
collected in a :class:`PatchSystem` and cached per patch shape, so the
per-element work is one constrained solve.
"""
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeff import restrict, restrict_all
from .errors import ConfigurationError, FormatError, SolverFailure
from .fem import _pattern, assemble_rhs, element_projection, fem_solve, q1_stiffness, relative_l2_error
from .linalg import as_csr, sparse_solve
from .mesh import SENTINEL, build_mesh, build_patch, fine_submesh

CONSTRAINT_TOL = 1e-9


class _Counter:
    """Number of corrector solves performed in this process."""

    def __init__(self):
        self.value = 0

    def reset(self):
        self.value = 0


corrector_solves = _Counter()


@dataclass(frozen=True, eq=False)
class PatchSystem:
    q: int
    nf: int
    free: np.ndarray          # fine node ids carrying corrector dofs
    basis: sp.csr_matrix      # (fine nodes, N_patch) coarse hats on the fine grid
    corner_local: np.ndarray
    center_cells: np.ndarray  # 0/1 mask of fine cells inside T
    constraints: sp.csr_matrix  # (n_constraints, n_free)
    zero_rows: np.ndarray     # local coarse nodes without a global dof
    full_pattern: tuple       # (indices, indptr, cell->data map) of the all-node stiffness
    free_pattern: tuple       # same for the free-node block

    @property
    def n_free(self):
        return self.free.size


@lru_cache(maxsize=64)
def _patch_system(key, side, q, cell_flags_bytes, pi_sentinel_bytes, corner_local_bytes):
    cell_flags = np.frombuffer(cell_flags_bytes, dtype=bool).reshape(side, side)
    sentinel = np.frombuffer(pi_sentinel_bytes, dtype=bool)
    corner_local = np.frombuffer(corner_local_bytes, dtype=np.int64).copy()
    nf = side * q
    nn = nf + 1

    fine_flags = np.repeat(np.repeat(cell_flags, q, axis=0), q, axis=1)
    padded = np.pad(fine_flags, 1, constant_values=False)
    # A node is free when it lies strictly inside the patch and all four adjacent fine cells are in D.
    all_in = padded[:-1, :-1] & padded[:-1, 1:] & padded[1:, :-1] & padded[1:, 1:]
    free_mask = np.zeros((nn, nn), dtype=bool)
    free_mask[1:-1, 1:-1] = all_in[1:-1, 1:-1]
    free = np.flatnonzero(free_mask.ravel())
    free_index = np.full(nn * nn, -1, dtype=np.int64)
    free_index[free] = np.arange(free.size)

    # Coarse hats of the patch nodes evaluated at fine nodes.
    t = np.arange(nn) / q
    A = np.arange(side + 1)
    hat = np.maximum(0.0, 1.0 - np.abs(t[:, None] - A[None, :]))   # (nn, side+1)
    hat = sp.csr_matrix(hat)
    basis = as_csr(sp.kron(hat, hat))

    center = np.zeros((nf, nf))
    ell = side // 2
    center[ell * q:(ell + 1) * q, ell * q:(ell + 1) * q] = 1.0

    # Quasi-interpolation rows of every coarse node carrying a global dof.
    E = element_projection(q)
    lt = np.arange(q + 1)
    lx, ly = np.meshgrid(lt, lt)
    lx, ly = lx.ravel(), ly.ravel()
    rows, cols, vals = [], [], []
    for z in np.flatnonzero(~sentinel):
        B, Az = divmod(int(z), side + 1)
        for cB in (B - 1, B):
            for cA in (Az - 1, Az):
                if not (0 <= cA < side and 0 <= cB < side):
                    continue
                corner = (Az - cA) + 2 * (B - cB)
                nodes = (cB * q + ly) * nn + (cA * q + lx)
                rows.append(np.full(nodes.size, z))
                cols.append(nodes)
                vals.append(0.25 * E[corner])
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    fi = free_index[cols]
    keep = fi >= 0
    C = sp.coo_matrix((vals[keep], (rows[keep], fi[keep])), shape=((side + 1) ** 2, free.size)).tocsr()
    C.sum_duplicates()
    nonempty = np.flatnonzero(np.abs(C).sum(axis=1).A1 > 1e-14)
    C = as_csr(C[nonempty])

    prow, pcol = _pattern(nf, nf)
    cells = np.repeat(np.arange(nf * nf), 16)
    ref = np.tile(q1_stiffness(1.0).ravel(), nf * nf)
    full_pattern = _csr_pattern(prow, pcol, cells, ref, nn * nn, nf * nf)
    fr, fc = free_index[prow], free_index[pcol]
    e = (fr >= 0) & (fc >= 0)
    free_pattern = _csr_pattern(fr[e], fc[e], cells[e], ref[e], free.size, nf * nf)

    def ro(a):
        a = np.ascontiguousarray(a)
        a.flags.writeable = False
        return a

    return PatchSystem(
        q=q, nf=nf, free=ro(free), basis=basis, corner_local=ro(corner_local),
        center_cells=ro(center.ravel()), constraints=C, zero_rows=ro(np.flatnonzero(sentinel)),
        full_pattern=full_pattern, free_pattern=free_pattern,
    )


def _csr_pattern(rows, cols, cells, ref, n, n_cells):
    """CSR structure of sum_c a_c K_ref over the given COO entries, with a sparse map a -> data."""
    keys, inverse = np.unique(rows * n + cols, return_inverse=True)
    r, c = np.divmod(keys, n)
    indptr = np.zeros(n + 1, dtype=np.int32)
    np.cumsum(np.bincount(r, minlength=n), out=indptr[1:])
    to_data = sp.csr_matrix((ref, (inverse.ravel(), cells)), shape=(keys.size, n_cells))
    return c.astype(np.int32), indptr, to_data


def _matrix(pattern, cell_values, fmt=sp.csr_matrix):
    indices, indptr, to_data = pattern
    n = indptr.size - 1
    return fmt((to_data @ cell_values, indices, indptr), shape=(n, n))


def patch_system(patch, eps_level):
    sub = fine_submesh(patch, eps_level)
    return _patch_system(
        patch.key(), patch.side, sub.q, patch.cell_interior.tobytes(),
        (patch.pi == SENTINEL).tobytes(), np.asarray(patch.corner_local, dtype=np.int64).tobytes())


def _solve_constrained(system, a_local, where=None):
    """Correctors (all fine nodes x 4) and the patch stiffness used to build them."""
    nf = system.nf
    nn = (nf + 1) ** 2
    # The free block is symmetric, so its CSR arrays double as CSC.
    Kff = _matrix(system.free_pattern, a_local, sp.csc_matrix)
    Lam = system.basis[:, system.corner_local].toarray()
    KT = _matrix(system.full_pattern, a_local * system.center_cells)
    R = (KT @ Lam)[system.free]
    C = system.constraints
    try:
        lu = spla.splu(Kff, permc_spec="MMD_AT_PLUS_A")
        Y = lu.solve(np.column_stack([R, C.T.toarray()]))
    except RuntimeError as exc:
        raise SolverFailure(f"singular patch stiffness: {exc}", where=where) from exc
    Yr, Yc = Y[:, :4], Y[:, 4:]
    schur = C @ Yc
    try:
        mu = scipy.linalg.solve(schur, C @ Yr, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
        raise SolverFailure(f"singular constraint Schur complement: {exc}", where=where) from exc
    Qf = Yr - Yc @ mu
    corrector_solves.value += 1

    cres = np.abs(C @ Qf).max() if C.shape[0] else 0.0
    scale = max(np.abs(Qf).max(), 1.0)
    if not np.isfinite(cres) or cres > CONSTRAINT_TOL * scale:
        raise SolverFailure(f"constraint residual {cres:.3e}", residual=cres, where=where)
    Q = np.zeros((nn, 4))
    Q[system.free] = Qf
    return Q, KT, Lam


def solve_correctors(patch, coeff, eps_level=None):
    """Element correctors of the four corner hats of the patch center, as (fine nodes, 4)."""
    eps_level = coeff.eps_level if eps_level is None else eps_level
    if eps_level != coeff.eps_level:
        raise ConfigurationError("eps_level does not match the coefficient", "eps_level")
    system = patch_system(patch, eps_level)
    Q, _, _ = _solve_constrained(system, restrict(coeff, patch), where=patch.center)
    return Q


def _local_matrix(system, a_local, Q, KT, Lam):
    K = _matrix(system.full_pattern, a_local)
    S = np.asarray(system.basis.T @ (KT @ Lam - K @ Q))
    S[system.zero_rows] = 0.0
    return S


def local_effective_matrix(patch, coeff, correctors):
    """Dense (N_patch, 4) block: rows = patch nodes, columns = corners of T (SW, SE, NW, NE)."""
    system = patch_system(patch, coeff.eps_level)
    a_local = restrict(coeff, patch)
    KT = _matrix(system.full_pattern, a_local * system.center_cells)
    Lam = system.basis[:, system.corner_local].toarray()
    return _local_matrix(system, a_local, correctors, KT, Lam)


def compress_local(patch, a_local, eps_level):
    """Local effective matrix straight from a restricted coefficient vector."""
    system = patch_system(patch, eps_level)
    Q, KT, Lam = _solve_constrained(system, a_local, where=patch.center)
    return _local_matrix(system, a_local, Q, KT, Lam)


@lru_cache(maxsize=32)
def patches(mesh, ell):
    return tuple(build_patch(mesh, T, ell) for T in range(mesh.n_elements))


@lru_cache(maxsize=32)
def index_maps(mesh, ell):
    """Stacked (pi, phi) for all elements: shapes (n_el, N_patch) and (n_el, 4)."""
    ps = patches(mesh, ell)
    pi = np.stack([p.pi for p in ps])
    phi = np.stack([p.phi for p in ps])
    pi.flags.writeable = False
    phi.flags.writeable = False
    return pi, phi


def local_matrices(mesh, coeff, ell, workers=1):
    """All local effective matrices, shape (n_el, N_patch, 4), in element order."""
    if coeff.eps_level <= mesh.level:
        raise ConfigurationError(
            f"coefficient level {coeff.eps_level} must exceed mesh level {mesh.level}", "eps_level")
    inputs = restrict_all(coeff, mesh, ell)
    ps = patches(mesh, ell)

    def one(T):
        return compress_local(ps[T], inputs[T], coeff.eps_level)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            mats = list(pool.map(one, range(mesh.n_elements)))
    else:
        mats = [one(T) for T in range(mesh.n_elements)]
    return np.stack(mats)


def scatter(mesh, ell, local):
    """sum_T pi_T S_T phi_T^T with SENTINEL rows/columns skipped; pattern depends on geometry only."""
    pi, phi = index_maps(mesh, ell)
    n_el, n_loc = pi.shape
    local = np.asarray(local, dtype=np.float64).reshape(n_el, n_loc, 4)
    rows = np.broadcast_to(pi[:, :, None], local.shape)
    cols = np.broadcast_to(phi[:, None, :], local.shape)
    keep = (rows != SENTINEL) & (cols != SENTINEL)
    m = mesh.n_interior
    S = sp.coo_matrix((local[keep], (rows[keep], cols[keep])), shape=(m, m)).tocsr()
    S.sum_duplicates()
    S.sort_indices()
    return S


@dataclass(frozen=True, eq=False)
class EffectiveMatrix:
    matrix: sp.csr_matrix
    ell: int
    provenance: str = "reference"

    @property
    def shape(self):
        return self.matrix.shape


def assemble_effective(mesh, coeff, ell, workers=1):
    S = scatter(mesh, ell, local_matrices(mesh, coeff, ell, workers))
    return EffectiveMatrix(S, int(ell), "reference")


def pg_lod_solve(S, F):
    matrix = S.matrix if isinstance(S, EffectiveMatrix) else S
    return sparse_solve(matrix, F)


def lod_solve(mesh, coeff, ell, f):
    """Assemble S_A and the load vector, then solve."""
    S = assemble_effective(mesh, coeff, ell)
    return pg_lod_solve(S, assemble_rhs(mesh, f))


def fine_reference(coeff, f):
    fine = build_mesh(coeff.eps_level)
    return fine, fem_solve(fine, coeff, f)


def _fit_slope(x, err):
    x = np.asarray(x, dtype=np.float64)
    y = np.log(np.asarray(err, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def localization_decay_study(mesh, coeff, ells, f=1.0):
    """Relative L2 error of PG-LOD vs fine FEM per radius, plus the slope of log(error) in ell."""
    fine, U_ref = fine_reference(coeff, f)
    F = assemble_rhs(mesh, f)
    rows = []
    for ell in ells:
        U = pg_lod_solve(assemble_effective(mesh, coeff, ell), F)
        rows.append({"ell": int(ell), "rel_l2_error": relative_l2_error(mesh, U, fine, U_ref)})
    slope = _fit_slope([r["ell"] for r in rows], [r["rel_l2_error"] for r in rows]) if len(rows) > 1 else None
    return {"rows": rows, "slope": slope}


def h_convergence_study(coeff, levels, ell, f):
    """Relative L2 error over coarse levels and the fitted rate in h."""
    fine, U_ref = fine_reference(coeff, f)
    rows = []
    for level in levels:
        mesh = build_mesh(level)
        U = lod_solve(mesh, coeff, ell, f)
        rows.append({"level": int(level), "h": mesh.h, "rel_l2_error": relative_l2_error(mesh, U, fine, U_ref)})
    rate = None
    if len(rows) > 1:
        rate = _fit_slope(np.log([r["h"] for r in rows]), [r["rel_l2_error"] for r in rows])
    return {"rows": rows, "rate": rate}


_LODS = struct.Struct("<4sIIQ")
_TRIPLET = np.dtype([("row", "<u4"), ("col", "<u4"), ("val", "<f8")])


def save_effective(S, path):
    M = S.matrix if isinstance(S, EffectiveMatrix) else S
    coo = M.tocoo()
    order = np.lexsort((coo.col, coo.row))
    rec = np.empty(coo.nnz, dtype=_TRIPLET)
    rec["row"], rec["col"], rec["val"] = coo.row[order], coo.col[order], coo.data[order]
    with open(path, "wb") as fh:
        fh.write(_LODS.pack(b"LODS", 1, M.shape[0], coo.nnz))
        fh.write(rec.tobytes())


def load_effective(path, ell=0, provenance="reference"):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _LODS.size:
        raise FormatError("effective-matrix file shorter than header", len(raw))
    magic, version, m, nnz = _LODS.unpack_from(raw)
    if magic != b"LODS":
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4)
    if len(raw) != _LODS.size + nnz * _TRIPLET.itemsize:
        raise FormatError(f"expected {nnz} triplets", _LODS.size)
    rec = np.frombuffer(raw, dtype=_TRIPLET, offset=_LODS.size)
    M = sp.csr_matrix((rec["val"].astype(np.float64), (rec["row"].astype(np.int64), rec["col"].astype(np.int64))),
                      shape=(m, m))
    M.sort_indices()
    return EffectiveMatrix(M, ell, provenance)
