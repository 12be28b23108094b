"""Offline data factory: coefficient samples -> (restricted coefficient, flattened local matrix) pairs.

Binary layout (little-endian)::

    header  : magic "LODD", u32 version, u32 r, u32 label_len, u64 count
    record  : f64 family_id, f64 sample_index, f64 element,
              f64[r] inputs, f64[label_len] labels

Labels are the local effective matrices flattened column by column.
"""
import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .coeff import child_rng, restrict_all, sample_level, sample_multiscale
from .errors import ConfigurationError, FormatError, SolverFailure
from .lod import index_maps, local_matrices
from .mesh import SENTINEL, build_mesh

log = logging.getLogger(__name__)

MAGIC = b"LODD"
VERSION = 1
HEADER = struct.Struct("<4sIIIQ")
META = 3
SPLITS = ("train", "val", "test")
MS_ID = 99


def family_id(name):
    name = str(name)
    if name == "ms":
        return MS_ID
    if not name.isdigit():
        raise ConfigurationError(f"unknown coefficient family {name!r}", "families")
    return int(name)


@dataclass
class DatasetConfig:
    coarse_level: int = 4
    eps_level: int = 6
    ell: int = 2
    families: list = field(default_factory=lambda: ["0", "1", "2", "3", "4", "5", "6", "ms"])
    samples_per_family: int = 40
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    interval: tuple = (1.0, 5.0)

    def __post_init__(self):
        self.families = [str(f) for f in self.families]
        self.split = tuple(float(s) for s in self.split)
        self.interval = tuple(float(s) for s in self.interval)
        self.validate()

    def validate(self):
        if not 0 <= self.coarse_level <= 14:
            raise ConfigurationError(f"must lie in [0, 14], got {self.coarse_level}", "coarse_level")
        if self.eps_level <= self.coarse_level:
            raise ConfigurationError(
                f"must exceed coarse_level={self.coarse_level}, got {self.eps_level}", "eps_level")
        if self.ell < 1:
            raise ConfigurationError(f"must be >= 1, got {self.ell}", "ell")
        for f in self.families:
            k = family_id(f)
            if k != MS_ID and k > self.eps_level:
                raise ConfigurationError(f"family level {k} exceeds eps_level {self.eps_level}", "families")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-12 or min(self.split) < 0:
            raise ConfigurationError(f"fractions must be nonnegative and sum to 1, got {self.split}", "split")
        if self.samples_per_family < 1:
            raise ConfigurationError("must be positive", "samples_per_family")
        if self.interval[0] > self.interval[1] or self.interval[0] <= 0:
            raise ConfigurationError(f"invalid interval {self.interval}", "interval")

    @property
    def q(self):
        return 1 << (self.eps_level - self.coarse_level)

    @property
    def r(self):
        return (2 * self.ell + 1) ** 2 * self.q ** 2

    @property
    def n_patch(self):
        return (2 * self.ell + 2) ** 2

    @property
    def label_len(self):
        return 4 * self.n_patch

    @property
    def n_elements(self):
        return 4 ** self.coarse_level

    def split_ranges(self):
        """Per-family sample-index ranges of train/val/test (first indices go to train)."""
        N = self.samples_per_family
        n_train = int(round(self.split[0] * N))
        n_val = int(round(self.split[1] * N))
        bounds = [0, n_train, min(n_train + n_val, N), N]
        return {name: range(bounds[i], bounds[i + 1]) for i, name in enumerate(SPLITS)}

    def to_dict(self):
        d = asdict(self)
        d["split"] = list(self.split)
        d["interval"] = list(self.interval)
        return d


def sample_coefficient(config, family, index):
    """Coefficient number ``index`` of ``family``; the stream is keyed by (family_id, index)."""
    fid = family_id(family)
    rng = child_rng(config.seed, fid, index)
    if fid == MS_ID:
        return sample_multiscale(config.eps_level, config.eps_level, rng, config.interval)
    return sample_level(fid, config.eps_level, config.interval, rng)


def flatten_labels(local):
    """(n, N_patch, 4) -> (n, 4*N_patch), column-major per matrix."""
    return np.ascontiguousarray(np.swapaxes(local, 1, 2).reshape(local.shape[0], -1))


def unflatten_labels(flat, n_patch):
    return np.swapaxes(np.asarray(flat).reshape(-1, 4, n_patch), 1, 2)


def compute_pairs(config, family, index):
    """Inputs (n_el, r) and labels (n_el, label_len) of one coefficient sample."""
    mesh = build_mesh(config.coarse_level)
    coeff = sample_coefficient(config, family, index)
    inputs = restrict_all(coeff, mesh, config.ell)
    try:
        local = local_matrices(mesh, coeff, config.ell)
    except SolverFailure as exc:
        raise SolverFailure(f"corrector solve failed for family={family} sample={index} element={exc.where}: {exc}",
                            exc.residual, (family, index, exc.where)) from exc
    return inputs, flatten_labels(local)


def _compute_task(args):
    config_dict, family, index = args
    return compute_pairs(DatasetConfig(**config_dict), family, index)


def check_zero_rows(config, labels):
    pi, _ = index_maps(build_mesh(config.coarse_level), config.ell)
    mats = unflatten_labels(labels, config.n_patch)
    bad = mats[pi == SENTINEL]
    if bad.size and np.any(bad != 0.0):
        raise ValueError("label rows without a global dof are not exactly zero")


def write_header(fh, r, label_len, count):
    fh.write(HEADER.pack(MAGIC, VERSION, r, label_len, count))


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def generate(config, out_dir, workers=1, progress=None):
    """Write train/val/test files and manifest.json into ``out_dir``; returns the manifest dict."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    ranges = config.split_ranges()
    total = config.samples_per_family * len(config.families)
    done = 0
    manifest = {"config": config.to_dict(), "format": {
        "magic": MAGIC.decode(), "version": VERSION, "r": config.r, "label_len": config.label_len,
        "meta": ["family_id", "sample_index", "element"], "label_order": "column-major (N_patch x 4)",
    }, "splits": {}}
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for split in SPLITS:
            tasks = [(f, i) for f in config.families for i in ranges[split]]
            count = len(tasks) * config.n_elements
            path = os.path.join(out_dir, f"{split}.lodd")
            tmp = path + ".part"
            if pool is not None:
                results = pool.map(_compute_task, [(config.to_dict(), f, i) for f, i in tasks])
            else:
                results = (compute_pairs(config, f, i) for f, i in tasks)
            with open(tmp, "wb") as fh:
                write_header(fh, config.r, config.label_len, count)
                for (f, i), (inputs, labels) in zip(tasks, results):
                    check_zero_rows(config, labels)
                    meta = np.column_stack([
                        np.full(config.n_elements, family_id(f), dtype=np.float64),
                        np.full(config.n_elements, i, dtype=np.float64),
                        np.arange(config.n_elements, dtype=np.float64),
                    ])
                    fh.write(np.hstack([meta, inputs, labels]).astype("<f8").tobytes())
                    done += 1
                    if progress is not None:
                        progress(done, total)
            os.replace(tmp, path)
            per_family = {f: len(ranges[split]) for f in config.families}
            manifest["splits"][split] = {
                "file": os.path.basename(path), "pairs": count, "samples_per_family": per_family,
                "sha256": sha256(path),
            }
            log.info("%s: %d pairs", split, count)
    finally:
        if pool is not None:
            pool.shutdown()
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class DatasetFile:
    """Memory-mapped view of a .lodd file."""

    def __init__(self, path):
        self.path = path
        size = os.path.getsize(path)
        if size < HEADER.size:
            raise FormatError("file shorter than header", size)
        with open(path, "rb") as fh:
            magic, version, r, label_len, count = HEADER.unpack(fh.read(HEADER.size))
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        self.r, self.label_len, self.count = int(r), int(label_len), int(count)
        self.record = META + self.r + self.label_len
        expected = HEADER.size + 8 * self.record * self.count
        if size != expected:
            complete = (size - HEADER.size) // (8 * self.record)
            raise FormatError(f"expected {expected} bytes for {count} records, found {size}",
                              HEADER.size + 8 * self.record * complete)
        self.data = np.memmap(path, dtype="<f8", mode="r", offset=HEADER.size,
                              shape=(self.count, self.record)) if self.count else np.empty((0, self.record))

    def __len__(self):
        return self.count

    @property
    def meta(self):
        return self.data[:, :META]

    @property
    def inputs(self):
        return self.data[:, META:META + self.r]

    @property
    def labels(self):
        return self.data[:, META + self.r:]

    def batches(self, batch_size, shuffle=True, seed=0):
        """Yield (inputs, labels) minibatches covering every pair exactly once."""
        if batch_size < 1:
            raise ConfigurationError("batch_size must be positive", "batch_size")
        if shuffle:
            seed = list(seed) if isinstance(seed, (tuple, list)) else seed
            order = np.random.default_rng(seed).permutation(self.count)
        else:
            order = None
        for start in range(0, self.count, batch_size):
            if order is None:
                block = np.asarray(self.data[start:start + batch_size], dtype=np.float64)
            else:
                block = np.asarray(self.data[order[start:start + batch_size]], dtype=np.float64)
            yield block[:, META:META + self.r], block[:, META + self.r:]


def load_batches(path, batch_size, seed=0, shuffle=True):
    return DatasetFile(path).batches(batch_size, shuffle=shuffle, seed=seed)
