"""Online phase: network-assembled effective matrices and their evaluation."""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import lod
from .coeff import restrict_all
from .dataset import unflatten_labels
from .errors import ConfigurationError
from .fem import assemble_mass, assemble_rhs, fem_solve, relative_l2_error
from .linalg import spectral_norm
from .mesh import SENTINEL, build_mesh
from .nn import forward

log = logging.getLogger(__name__)

DENSE_NORM_LIMIT = 1000


def assemble_nn_matrix(mesh, coeff, model, ell):
    """S_hat = sum_T pi_T unflatten(psi(R_T A)) phi_T^T from one batched forward pass."""
    n_patch = (2 * ell + 2) ** 2
    r = (2 * ell + 1) ** 2 * 4 ** (coeff.eps_level - mesh.level)
    W0, WL = model.weights[0], model.weights[-1]
    if W0.shape[1] != r or WL.shape[0] != 4 * n_patch:
        raise ConfigurationError(
            f"network maps {W0.shape[1]} -> {WL.shape[0]} but the configuration needs {r} -> {4 * n_patch}",
            "architecture")
    inputs = restrict_all(coeff, mesh, ell)
    local = unflatten_labels(forward(model, inputs), n_patch).copy()
    pi, _ = lod.index_maps(mesh, ell)
    local[pi == SENTINEL] = 0.0
    return lod.EffectiveMatrix(lod.scatter(mesh, ell, local), int(ell), "network")


@dataclass
class CrossSection:
    axis: int
    position: float
    coords: list
    u_ref: list
    u_nn: list


@dataclass
class EvaluationReport:
    experiment: str
    coarse_level: int
    eps_level: int
    ell: int
    l2_error_abs: float
    l2_error_rel: float
    spectral_norm_diff: float
    l2_norm_ref: float
    fine_rel_error_ref: float = None
    fine_rel_error_nn: float = None
    corrector_solves_online: int = 0
    cross_sections: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["cross_sections"] = [CrossSection(**c) for c in d.get("cross_sections", [])]
        return cls(**d)


def nodal_grid(mesh, U):
    """Interior vector -> (n+1, n+1) nodal array with zero boundary, indexed [y, x]."""
    full = np.zeros(mesh.n_nodes)
    full[mesh.interior_nodes] = U
    return full.reshape(mesh.n + 1, mesh.n + 1)


def cross_section(mesh, U, axis, position):
    """Nodal values along x_{axis+1} = position (axis 0: vertical line x1 = c).

    Returns (coords, values) ordered along the line, boundary zeros included.
    Off-grid positions snap to the nearest mesh line with a warning.
    """
    j = position * mesh.n
    jr = int(round(j))
    if abs(j - jr) > 1e-9:
        log.warning("position %g is not on a mesh line; using %g", position, jr / mesh.n)
    jr = min(max(jr, 0), mesh.n)
    G = nodal_grid(mesh, U)
    values = G[:, jr] if axis == 0 else G[jr, :]
    coords = np.arange(mesh.n + 1) * mesh.h
    return coords, values.copy()


def write_cross_section_csv(path, cs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "u_ref", "u_nn"])
        for row in zip(cs.coords, cs.u_ref, cs.u_nn):
            w.writerow([repr(float(v)) for v in row])


def _spectral_diff(S, S_hat):
    D = (S.matrix - S_hat.matrix).tocsr()
    if D.nnz == 0 or not np.any(D.data):
        return 0.0
    if D.shape[0] <= DENSE_NORM_LIMIT:
        return float(spectral_norm(D.toarray()))
    return float(spectral_norm(D))


def evaluate(coeff, f, model, coarse_level, ell, experiment="custom", fine_reference=False, reference=None):
    """Compare the network surrogate against the reference PG-LOD solution.

    ``reference`` may be any object with ``assemble(mesh, coeff, ell)``
    returning an EffectiveMatrix; by default the LOD module is used.
    """
    mesh = build_mesh(coarse_level)
    F = assemble_rhs(mesh, f)
    S = reference(mesh, coeff, ell) if reference is not None else lod.assemble_effective(mesh, coeff, ell)
    U = lod.pg_lod_solve(S, F)

    before = lod.corrector_solves.value
    S_hat = model(mesh, coeff, ell) if callable(model) else assemble_nn_matrix(mesh, coeff, model, ell)
    online_solves = lod.corrector_solves.value - before
    U_hat = lod.pg_lod_solve(S_hat, F)

    M = assemble_mass(mesh)
    d = U - U_hat
    abs_err = float(np.sqrt(max(d @ (M @ d), 0.0)))
    ref_norm = float(np.sqrt(U @ (M @ U)))
    report = EvaluationReport(
        experiment=experiment, coarse_level=coarse_level, eps_level=coeff.eps_level, ell=ell,
        l2_error_abs=abs_err, l2_error_rel=abs_err / ref_norm if ref_norm > 0 else 0.0,
        spectral_norm_diff=_spectral_diff(S, S_hat), l2_norm_ref=ref_norm,
        corrector_solves_online=int(online_solves),
    )
    if fine_reference:
        fine = build_mesh(coeff.eps_level)
        U_fine = fem_solve(fine, coeff, f)
        report.fine_rel_error_ref = relative_l2_error(mesh, U, fine, U_fine)
        report.fine_rel_error_nn = relative_l2_error(mesh, U_hat, fine, U_fine)
    for axis in (0, 1):
        coords, u_ref = cross_section(mesh, U, axis, 0.5)
        _, u_nn = cross_section(mesh, U_hat, axis, 0.5)
        report.cross_sections.append(CrossSection(axis, 0.5, coords.tolist(), u_ref.tolist(), u_nn.tolist()))
    return report
