"""Dyadic Cartesian meshes of the unit square and extended element patches.

Enumerations are row-major with x running fastest, for cells as well as
nodes. Element corners are always listed in the order SW, SE, NW, NE.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError

SENTINEL = -1
MAX_LEVEL = 14


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CartesianMesh:
    level: int

    @property
    def n(self):
        """Cells per side."""
        return 1 << self.level

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def n_elements(self):
        return self.n * self.n

    @property
    def n_nodes(self):
        return (self.n + 1) ** 2

    @property
    def n_interior(self):
        return (self.n - 1) ** 2

    def node_index(self, jx, jy):
        return np.asarray(jy) * (self.n + 1) + np.asarray(jx)

    def node_coords(self):
        j = np.arange(self.n + 1) * self.h
        x, y = np.meshgrid(j, j)
        return np.column_stack([x.ravel(), y.ravel()])

    def cell_centers(self):
        c = (np.arange(self.n) + 0.5) * self.h
        x, y = np.meshgrid(c, c)
        return np.column_stack([x.ravel(), y.ravel()])

    @cached_property
    def element_nodes(self):
        """(n_elements, 4) global node ids, SW/SE/NW/NE."""
        iy, ix = np.divmod(np.arange(self.n_elements), self.n)
        sw = self.node_index(ix, iy)
        return _frozen(np.column_stack([sw, sw + 1, sw + self.n + 1, sw + self.n + 2]))

    @cached_property
    def interior_map(self):
        """Global node id -> interior dof index, SENTINEL on the boundary."""
        jy, jx = np.divmod(np.arange(self.n_nodes), self.n + 1)
        inner = (jx > 0) & (jx < self.n) & (jy > 0) & (jy < self.n)
        out = np.full(self.n_nodes, SENTINEL, dtype=np.int64)
        out[inner] = (jy[inner] - 1) * (self.n - 1) + (jx[inner] - 1)
        return _frozen(out)

    @cached_property
    def interior_nodes(self):
        """Interior dof index -> global node id."""
        return _frozen(np.flatnonzero(self.interior_map != SENTINEL))

    def element_position(self, T):
        iy, ix = divmod(int(T), self.n)
        return ix, iy


def build_mesh(level):
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_LEVEL:
        raise ConfigurationError(f"mesh level must be in [0, {MAX_LEVEL}], got {level!r}", "level")
    return CartesianMesh(int(level))


@dataclass(frozen=True, eq=False)
class Patch:
    """Element neighborhood of order ``ell`` around ``center``, padded with ghost cells.

    ``pi`` maps the (2ell+2)^2 local coarse nodes to global interior dofs and
    ``phi`` does the same for the four corners of the center element.
    ``corner_local`` holds the local node ids of those corners.
    """

    mesh: CartesianMesh
    center: int
    ell: int
    origin: tuple
    cell_interior: np.ndarray
    pi: np.ndarray
    phi: np.ndarray
    corner_local: np.ndarray

    @property
    def side(self):
        return 2 * self.ell + 1

    @property
    def n_cells(self):
        return self.side ** 2

    @property
    def n_nodes(self):
        return (self.side + 1) ** 2

    def key(self):
        """Geometry signature: patches with equal keys share all fine-scale structure."""
        return (self.ell, self.cell_interior.tobytes(), (self.pi == SENTINEL).tobytes())


def build_patch(mesh, T, ell):
    if not 0 <= T < mesh.n_elements:
        raise ConfigurationError(f"element index {T} outside mesh with {mesh.n_elements} cells", "T")
    if ell < 1:
        raise ConfigurationError(f"localization radius must be >= 1, got {ell}", "ell")
    tx, ty = mesh.element_position(T)
    side = 2 * ell + 1
    x0, y0 = tx - ell, ty - ell

    cx = x0 + np.arange(side)
    cy = y0 + np.arange(side)
    inside = ((cy[:, None] >= 0) & (cy[:, None] < mesh.n)) & ((cx[None, :] >= 0) & (cx[None, :] < mesh.n))

    jx = x0 + np.arange(side + 1)
    jy = y0 + np.arange(side + 1)
    JX, JY = np.meshgrid(jx, jy)
    JX, JY = JX.ravel(), JY.ravel()
    inner = (JX > 0) & (JX < mesh.n) & (JY > 0) & (JY < mesh.n)
    pi = np.full(JX.size, SENTINEL, dtype=np.int64)
    pi[inner] = (JY[inner] - 1) * (mesh.n - 1) + (JX[inner] - 1)

    sw = ell * (side + 1) + ell
    corner_local = np.array([sw, sw + 1, sw + side + 1, sw + side + 2])
    return Patch(
        mesh=mesh,
        center=int(T),
        ell=int(ell),
        origin=(x0, y0),
        cell_interior=_frozen(inside.ravel()),
        pi=_frozen(pi),
        phi=_frozen(pi[corner_local]),
        corner_local=_frozen(corner_local),
    )


@dataclass(frozen=True, eq=False)
class PatchFineMesh:
    """Restriction of the fine mesh to a patch, aligned with the global fine grid.

    ``origin`` is the global fine-cell index of the patch's lower-left fine cell
    (may be negative for patches hanging over the boundary).
    """

    patch: Patch
    eps_level: int
    q: int
    origin: tuple
    cell_interior: np.ndarray

    @property
    def n(self):
        return self.patch.side * self.q

    @property
    def n_cells(self):
        return self.n * self.n

    @property
    def n_nodes(self):
        return (self.n + 1) ** 2


def fine_submesh(patch, eps_level):
    coarse = patch.mesh.level
    if eps_level <= coarse:
        raise ConfigurationError(
            f"fine level {eps_level} must exceed coarse level {coarse}", "eps_level")
    q = 1 << (eps_level - coarse)
    flags = patch.cell_interior.reshape(patch.side, patch.side)
    fine_flags = np.repeat(np.repeat(flags, q, axis=0), q, axis=1)
    return PatchFineMesh(
        patch=patch,
        eps_level=int(eps_level),
        q=q,
        origin=(patch.origin[0] * q, patch.origin[1] * q),
        cell_interior=_frozen(fine_flags.ravel()),
    )
