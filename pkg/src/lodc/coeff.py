"""Element-wise constant diffusion coefficients on the fine mesh.

Random families draw from numpy's PCG64. Streams are split through
``SeedSequence(seed, spawn_key=key)``; dataset generation uses the key
``(family_id, sample_index)`` and the multiscale sampler consumes one level
field after another from that stream, coarsest first.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError

ALPHA, BETA = 1.0, 5.0
_MAGIC = b"LODC"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def child_rng(seed, *key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


@dataclass(frozen=True, eq=False)
class Coefficient:
    eps_level: int
    values: np.ndarray
    alpha: float = ALPHA
    beta: float = BETA

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.shape != (4 ** self.eps_level,):
            raise ConfigurationError(
                f"expected {4 ** self.eps_level} values for level {self.eps_level}, got {v.shape}", "values")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive", "alpha")
        if v.min() < self.alpha or v.max() > self.beta:
            raise ConfigurationError(
                f"values outside [{self.alpha}, {self.beta}]: min {v.min()}, max {v.max()}", "values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return 1 << self.eps_level

    def grid(self):
        """Values as an (n, n) array indexed [row=y, col=x]."""
        return self.values.reshape(self.n, self.n)

    def scaled(self, c):
        return Coefficient(self.eps_level, c * self.values, c * self.alpha, c * self.beta)


@dataclass(frozen=True)
class CoefficientFamilySpec:
    kind: str
    level: int = 0
    interval: tuple = (ALPHA, BETA)
    cracks: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("level", "multiscale", "smooth-sine", "cracks"):
            raise ConfigurationError(f"unknown family kind {self.kind!r}", "kind")
        lo, hi = self.interval
        if lo > hi:
            raise ConfigurationError(f"interval [{lo}, {hi}] is empty", "interval")

    def sample(self, eps_level, rng=None):
        if self.kind == "level":
            return sample_level(self.level, eps_level, self.interval, rng)
        if self.kind == "multiscale":
            return sample_multiscale(self.level, eps_level, rng, self.interval)
        if self.kind == "smooth-sine":
            return smooth_sine(eps_level)
        return cracks(eps_level, crack_rects=self.cracks, rng=rng)


def prolongate(values, from_level, to_level):
    """Copy each cell value to its 4^(to-from) descendants."""
    n = 1 << from_level
    q = 1 << (to_level - from_level)
    g = np.asarray(values, dtype=np.float64).reshape(n, n)
    return np.repeat(np.repeat(g, q, axis=0), q, axis=1).ravel()


def coarsen(values, from_level, to_level):
    """Cell averages on a coarser level; inverse of :func:`prolongate` on prolongated data."""
    q = 1 << (from_level - to_level)
    n = 1 << to_level
    g = np.asarray(values, dtype=np.float64).reshape(n, q, n, q)
    return g.mean(axis=(1, 3)).ravel()


def _check_interval(interval):
    lo, hi = float(interval[0]), float(interval[1])
    if lo > hi:
        raise ConfigurationError(f"interval [{lo}, {hi}] is empty", "interval")
    return lo, hi


def sample_level(k, eps_level, interval=(ALPHA, BETA), rng=None):
    if not 0 <= k <= eps_level:
        raise ConfigurationError(f"level {k} must lie in [0, {eps_level}]", "k")
    lo, hi = _check_interval(interval)
    rng = rng if rng is not None else np.random.default_rng()
    draws = rng.uniform(lo, hi, size=4 ** k)
    return Coefficient(eps_level, prolongate(draws, k, eps_level), lo, hi)


def sample_multiscale(K, eps_level, rng=None, interval=(ALPHA, BETA)):
    """Cell-wise mean of K+1 independent level-k fields, k = 0..K."""
    if not 0 <= K <= eps_level:
        raise ConfigurationError(f"K={K} must lie in [0, {eps_level}]", "K")
    lo, hi = _check_interval(interval)
    rng = rng if rng is not None else np.random.default_rng()
    total = np.zeros(4 ** eps_level)
    for k in range(K + 1):
        total += sample_level(k, eps_level, (lo, hi), rng).values
    values = np.clip(total / (K + 1), lo, hi)
    return Coefficient(eps_level, values, lo, hi)


def smooth_sine(eps_level):
    n = 1 << eps_level
    c = (np.arange(n) + 0.5) / n
    x, y = np.meshgrid(c, c)
    values = 2.0 + np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    return Coefficient(eps_level, values.ravel(), 1.0, 3.0)


# Three thin cracks given as fractions of the unit square: (x0, y0, x1, y1).
DEFAULT_CRACKS = (
    (0.125, 0.25, 0.875, 0.28125),
    (0.625, 0.375, 0.65625, 0.9375),
    (0.1875, 0.625, 0.5, 0.65625),
)


def crack_cells(eps_level, rects):
    """Fraction rectangles -> half-open fine-cell index ranges (ix0, iy0, ix1, iy1)."""
    n = 1 << eps_level
    out = []
    for x0, y0, x1, y1 in rects:
        ix0, iy0 = int(round(x0 * n)), int(round(y0 * n))
        ix1, iy1 = max(int(round(x1 * n)), ix0 + 1), max(int(round(y1 * n)), iy0 + 1)
        if not (0 <= ix0 < ix1 <= n and 0 <= iy0 < iy1 <= n):
            raise ConfigurationError(f"crack {(x0, y0, x1, y1)} leaves the domain", "cracks")
        out.append((ix0, iy0, ix1, iy1))
    return out


def cracks(eps_level, background=(1.0, 2.0), crack_value_interval=(4.0, 5.0),
           crack_rects=DEFAULT_CRACKS, rng=None):
    """Background cells iid U(background), crack cells iid U(crack interval).

    Rectangles are fractions of the unit square snapped to fine cells.
    Overlapping cracks are allowed; a later rectangle overwrites an earlier one.
    """
    rng = rng if rng is not None else np.random.default_rng()
    blo, bhi = _check_interval(background)
    clo, chi = _check_interval(crack_value_interval)
    n = 1 << eps_level
    g = rng.uniform(blo, bhi, size=(n, n))
    for ix0, iy0, ix1, iy1 in crack_cells(eps_level, crack_rects):
        g[iy0:iy1, ix0:ix1] = rng.uniform(clo, chi, size=(iy1 - iy0, ix1 - ix0))
    return Coefficient(eps_level, g.ravel(), min(blo, clo), max(bhi, chi))


def padded_grid(coeff, pad):
    return np.pad(coeff.grid(), pad, mode="constant", constant_values=0.0)


def restrict(coeff, patch):
    """Coefficient values on the patch's fine cells, zero on ghost cells (row-major)."""
    q = 1 << (coeff.eps_level - patch.mesh.level)
    if q < 2:
        raise ConfigurationError(
            f"coefficient level {coeff.eps_level} must exceed mesh level {patch.mesh.level}", "eps_level")
    pad = patch.ell * q
    g = padded_grid(coeff, pad)
    x0 = patch.origin[0] * q + pad
    y0 = patch.origin[1] * q + pad
    nf = patch.side * q
    return g[y0:y0 + nf, x0:x0 + nf].ravel().copy()


def restrict_all(coeff, mesh, ell):
    """Stack of restrictions for every element T, shape (n_elements, r)."""
    q = 1 << (coeff.eps_level - mesh.level)
    if q < 2:
        raise ConfigurationError(
            f"coefficient level {coeff.eps_level} must exceed mesh level {mesh.level}", "eps_level")
    pad = ell * q
    g = padded_grid(coeff, pad)
    nf = (2 * ell + 1) * q
    win = np.lib.stride_tricks.sliding_window_view(g, (nf, nf))[::q, ::q]
    return np.ascontiguousarray(win.reshape(mesh.n_elements, nf * nf))


def save_coefficient(coeff, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, coeff.eps_level, coeff.values.size))
        fh.write(coeff.values.astype("<f8").tobytes())


def load_coefficient(path, alpha=None, beta=None):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("coefficient file shorter than header", len(raw))
    magic, version, level, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if count != 4 ** level:
        raise FormatError(f"count {count} inconsistent with level {level}", 12)
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise FormatError(f"expected {8 * count} payload bytes, found {len(body)}", _HEADER.size)
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    lo = values.min() if alpha is None else alpha
    hi = values.max() if beta is None else beta
    return Coefficient(int(level), values, float(lo), float(hi))
