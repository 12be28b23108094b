"""Bilinear (Q1) finite elements on Cartesian grids.

Global objects act on interior nodes only (homogeneous Dirichlet data).
The quasi-interpolation used to define the fine-scale space is the
element-wise L2 projection onto Q1 followed by averaging the four element
values at each interior coarse node.
"""
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .coeff import Coefficient
from .errors import ConfigurationError
from .linalg import as_csr, sparse_solve
from .mesh import SENTINEL

# Corner order SW, SE, NW, NE on the unit reference cell.
_STIFF_REF = np.array([
    [4.0, -1.0, -1.0, -2.0],
    [-1.0, 4.0, -2.0, -1.0],
    [-1.0, -2.0, 4.0, -1.0],
    [-2.0, -1.0, -1.0, 4.0],
]) / 6.0
_MASS_REF = np.array([
    [4.0, 2.0, 2.0, 1.0],
    [2.0, 4.0, 1.0, 2.0],
    [2.0, 1.0, 4.0, 2.0],
    [1.0, 2.0, 2.0, 4.0],
]) / 36.0
_GAUSS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def q1_stiffness(a=1.0):
    """Exact element stiffness for a constant coefficient on a square cell (size independent in 2D)."""
    return a * _STIFF_REF


def q1_mass(h_cell=1.0):
    return h_cell ** 2 * _MASS_REF


def shape_values(x, y):
    """Q1 shape functions on the unit cell at local coords, shape (..., 4)."""
    x, y = np.asarray(x), np.asarray(y)
    return np.stack([(1 - x) * (1 - y), x * (1 - y), (1 - x) * y, x * y], axis=-1)


@lru_cache(maxsize=None)
def grid_connectivity(nx, ny):
    """(nx*ny, 4) node ids of every cell of an nx-by-ny grid, row-major, SW/SE/NW/NE."""
    iy, ix = np.divmod(np.arange(nx * ny), nx)
    sw = iy * (nx + 1) + ix
    conn = np.column_stack([sw, sw + 1, sw + nx + 1, sw + nx + 2])
    conn.flags.writeable = False
    return conn


@lru_cache(maxsize=None)
def _pattern(nx, ny):
    conn = grid_connectivity(nx, ny)
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    return rows, cols


def grid_matrix(nx, ny, cell_values, element_matrix):
    """Assemble sum_c cell_values[c] * element_matrix over all nodes of an nx-by-ny grid."""
    rows, cols = _pattern(nx, ny)
    data = np.outer(np.asarray(cell_values, dtype=np.float64), element_matrix.ravel()).ravel()
    n = (nx + 1) * (ny + 1)
    return as_csr(sp.coo_matrix((data, (rows, cols)), shape=(n, n)))


def _cell_values(mesh, coeff):
    if isinstance(coeff, Coefficient):
        if coeff.eps_level != mesh.level:
            raise ConfigurationError(
                f"coefficient level {coeff.eps_level} does not match mesh level {mesh.level}", "eps_level")
        return coeff.values
    values = np.broadcast_to(np.asarray(coeff, dtype=np.float64), (mesh.n_elements,))
    return values


def _restrict_interior(mesh, M):
    idx = mesh.interior_nodes
    return as_csr(M[idx][:, idx])


def assemble_stiffness(mesh, coeff):
    """m-by-m stiffness over interior nodes; ``coeff`` is a Coefficient on the mesh level or per-cell values."""
    K = grid_matrix(mesh.n, mesh.n, _cell_values(mesh, coeff), q1_stiffness(1.0))
    return _restrict_interior(mesh, K)


def assemble_mass(mesh):
    M = grid_matrix(mesh.n, mesh.n, np.ones(mesh.n_elements), q1_mass(mesh.h))
    return _restrict_interior(mesh, M)


def assemble_rhs(mesh, f, quad_level=None):
    """Load vector (int f lambda_i) over interior nodes.

    ``f`` is a vectorized callable f(x, y), a scalar, or an array of
    per-cell values on some level >= mesh.level. Callables are integrated
    with composite 2x2 Gauss on the grid of ``quad_level`` (default two
    levels finer than the mesh).
    """
    if callable(f):
        ql = mesh.level + 2 if quad_level is None else quad_level
    elif np.ndim(f) == 0:
        value = float(f)
        f = lambda x, y: np.full_like(x, value)  # noqa: E731
        ql = mesh.level
    else:
        vals = np.asarray(f, dtype=np.float64)
        ql = int(round(np.log(vals.size) / np.log(4)))
        if 4 ** ql != vals.size or ql < mesh.level:
            raise ConfigurationError(f"{vals.size} cell values do not form a level >= {mesh.level}", "f")
    if ql < mesh.level:
        raise ConfigurationError("quadrature level below mesh level", "quad_level")
    q = 1 << (ql - mesh.level)
    hs = 1.0 / (1 << ql)
    # Sub-cell offsets inside a coarse cell, and Gauss points inside each sub-cell.
    sub = np.arange(q)
    gx = (sub[:, None] + _GAUSS[None, :]).ravel() / q
    GX, GY = np.meshgrid(gx, gx)
    lx, ly = GX.ravel(), GY.ravel()
    phi = shape_values(lx, ly)                      # (npts, 4)
    w = np.full(lx.size, 0.25 * hs * hs)
    ex, ey = mesh.cell_centers().T - 0.5 * mesh.h  # SW corners
    X = ex[:, None] + lx[None, :] * mesh.h
    Y = ey[:, None] + ly[None, :] * mesh.h
    if callable(f):
        F = np.asarray(f(X, Y), dtype=np.float64)
    else:
        nfine = 1 << ql
        ix = np.minimum((X * nfine).astype(np.int64), nfine - 1)
        iy = np.minimum((Y * nfine).astype(np.int64), nfine - 1)
        F = vals[iy * nfine + ix]
    local = (F * w) @ phi                           # (n_elements, 4)
    full = np.bincount(mesh.element_nodes.ravel(), weights=local.ravel(), minlength=mesh.n_nodes)
    return full[mesh.interior_nodes]


@lru_cache(maxsize=None)
def fine_to_coarse_values(q):
    """((q+1)^2, 4) values of the coarse cell's shape functions at its fine nodes."""
    t = np.arange(q + 1) / q
    X, Y = np.meshgrid(t, t)
    out = shape_values(X.ravel(), Y.ravel())
    out.flags.writeable = False
    return out


@lru_cache(maxsize=None)
def element_projection(q):
    """(4, (q+1)^2) map from fine nodal values on one coarse cell to its L2-projected Q1 nodal values."""
    P = fine_to_coarse_values(q)
    Mf = grid_matrix(q, q, np.ones(q * q), q1_mass(1.0 / q)).toarray()
    E = np.linalg.solve(q1_mass(1.0), P.T @ Mf)
    E.flags.writeable = False
    return E


def _level_ratio(fine, coarse):
    if fine.level <= coarse.level:
        raise ConfigurationError(
            f"fine level {fine.level} must exceed coarse level {coarse.level}", "level")
    return 1 << (fine.level - coarse.level)


def _coarse_cell_fine_nodes(fine, coarse):
    """(n_coarse_cells, (q+1)^2) global fine node ids in each coarse cell."""
    q = _level_ratio(fine, coarse)
    cy, cx = np.divmod(np.arange(coarse.n_elements), coarse.n)
    t = np.arange(q + 1)
    lx, ly = np.meshgrid(t, t)
    return fine.node_index(cx[:, None] * q + lx.ravel()[None, :], cy[:, None] * q + ly.ravel()[None, :])


def interpolation_matrix(fine, coarse):
    """Sparse (coarse interior) x (fine interior) matrix of the quasi-interpolation I_h."""
    q = _level_ratio(fine, coarse)
    E = element_projection(q)
    fnodes = _coarse_cell_fine_nodes(fine, coarse)
    rows, cols, data = [], [], []
    for corner in range(4):
        z = coarse.interior_map[coarse.element_nodes[:, corner]]
        keep = z != SENTINEL
        rows.append(np.repeat(z[keep], E.shape[1]))
        cols.append(fnodes[keep].ravel())
        data.append(np.tile(0.25 * E[corner], keep.sum()))
    rows, cols, data = map(np.concatenate, (rows, cols, data))
    fi = fine.interior_map[cols]
    keep = fi != SENTINEL
    C = sp.coo_matrix((data[keep], (rows[keep], fi[keep])), shape=(coarse.n_interior, fine.n_interior))
    return as_csr(C)


def prolongation_matrix(coarse, fine):
    """Sparse (fine interior) x (coarse interior) bilinear interpolation."""
    q = _level_ratio(fine, coarse)
    P = fine_to_coarse_values(q)
    fnodes = _coarse_cell_fine_nodes(fine, coarse)
    rows, cols, data = [], [], []
    for corner in range(4):
        z = coarse.interior_map[coarse.element_nodes[:, corner]]
        keep = z != SENTINEL
        rows.append(fnodes[keep].ravel())
        cols.append(np.repeat(z[keep], P.shape[0]))
        data.append(np.tile(P[:, corner], keep.sum()))
    rows, cols, data = map(np.concatenate, (rows, cols, data))
    fi = fine.interior_map[rows]
    keep = (fi != SENTINEL) & (data != 0.0)
    # Nodes shared by neighbouring coarse cells are visited more than once; keep a single copy.
    key = np.unique(np.column_stack([fi[keep], cols[keep]]), axis=0, return_index=True)[1]
    r, c, d = fi[keep][key], cols[keep][key], data[keep][key]
    return as_csr(sp.coo_matrix((d, (r, c)), shape=(fine.n_interior, coarse.n_interior)))


def fem_solve(mesh, coeff, f):
    """Standard Q1 Galerkin solution (interior nodal values)."""
    K = assemble_stiffness(mesh, coeff)
    F = assemble_rhs(mesh, f)
    return sparse_solve(K, F)


def l2_norm(mesh, U):
    M = assemble_mass(mesh)
    return float(np.sqrt(U @ (M @ U)))


def relative_l2_error(coarse, U, fine, U_ref):
    """||u_coarse - u_ref|| / ||u_ref|| in L2, with the coarse function interpolated to the fine grid."""
    V = U if coarse.level == fine.level else prolongation_matrix(coarse, fine) @ U
    M = assemble_mass(fine)
    d = V - U_ref
    return float(np.sqrt(d @ (M @ d)) / np.sqrt(U_ref @ (M @ U_ref)))
