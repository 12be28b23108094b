"""Dense ReLU network with hand-written backpropagation and ADAM.

Weights are stored as (out, in) matrices, inputs as rows: Z = X W^T + b.
The loss is the mean over pairs of 0.5 * ||psi(x) - y||^2 / ||y||^2.
"""
import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MlpArchitecture:
    widths: tuple

    def __post_init__(self):
        w = tuple(int(x) for x in self.widths)
        if len(w) < 2 or min(w) < 1:
            raise ConfigurationError(f"invalid layer widths {self.widths}", "widths")
        object.__setattr__(self, "widths", w)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def n_params(self):
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))


def default_architecture(r, label_len, gap_levels):
    """Two layers per bridged level plus two assembling layers.

    Each bridged level contributes an equal-width layer followed by a halving
    one; the last halving goes straight to ``label_len``. Widths that would
    drop below ``label_len`` are clamped to it.
    """
    if gap_levels < 1:
        raise ConfigurationError(f"gap_levels must be >= 1, got {gap_levels}", "gap_levels")
    widths = [r]
    width = r
    for g in range(gap_levels):
        widths.append(max(width, label_len))
        width = label_len if g == gap_levels - 1 else max(width // 2, label_len)
        widths.append(width)
    widths += [label_len, label_len]
    return MlpArchitecture(tuple(widths))


@dataclass
class Mlp:
    weights: list
    biases: list

    @property
    def architecture(self):
        return MlpArchitecture((self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights))

    def copy(self):
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def params(self):
        return self.weights + self.biases


def init_glorot(arch, rng):
    weights, biases = [], []
    for fan_in, fan_out in zip(arch.widths[:-1], arch.widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def forward(model, X, return_cache=False):
    A = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if A.shape[1] != model.weights[0].shape[1]:
        raise ConfigurationError(
            f"input width {A.shape[1]} does not match network input {model.weights[0].shape[1]}", "inputs")
    cache = [A]
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        Z = A @ W.T + b
        A = Z if i == last else np.maximum(Z, 0.0)
        cache.append(A)
    return (A, cache) if return_cache else A


def _label_norms(Y):
    sq = np.einsum("ij,ij->i", Y, Y)
    valid = sq > 0.0
    return sq, valid


def loss(model, X, Y):
    Y = np.atleast_2d(Y)
    sq, valid = _label_norms(Y)
    if not valid.any():
        return 0.0
    P = forward(model, X[valid])
    D = P - Y[valid]
    return float(np.mean(0.5 * np.einsum("ij,ij->i", D, D) / sq[valid]))


def loss_and_grad(model, X, Y):
    """Loss, gradients (same layout as ``model.params()``) and the number of skipped zero-norm labels."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    sq, valid = _label_norms(Y)
    skipped = int((~valid).sum())
    if skipped:
        X, Y, sq = X[valid], Y[valid], sq[valid]
    n = X.shape[0]
    if n == 0:
        zeros = [np.zeros_like(p) for p in model.params()]
        return 0.0, zeros, skipped
    out, cache = forward(model, X, return_cache=True)
    D = out - Y
    value = float(np.mean(0.5 * np.einsum("ij,ij->i", D, D) / sq))

    G = D / (sq[:, None] * n)
    L = len(model.weights)
    gW, gb = [None] * L, [None] * L
    for i in range(L - 1, -1, -1):
        gW[i] = G.T @ cache[i]
        gb[i] = G.sum(axis=0)
        if i:
            G = (G @ model.weights[i]) * (cache[i] > 0.0)
    return value, gW + gb, skipped


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, model, **kw):
        return cls([np.zeros_like(p) for p in model.params()], [np.zeros_like(p) for p in model.params()], **kw)


def adam_step(model, grads, state, stepsize):
    """In-place bias-corrected ADAM update of ``model`` and ``state``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(model.params(), grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= stepsize * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


@dataclass
class Schedule:
    epochs: int = 8
    batch_size: int = 256
    stepsizes: tuple = (1e-4, 1e-5)
    switch_epoch: int = 5

    def stepsize(self, epoch):
        """Step size for a 1-based epoch number."""
        return self.stepsizes[0] if epoch <= self.switch_epoch else self.stepsizes[1]


@dataclass
class TrainResult:
    model: Mlp
    best: Mlp
    history: list = field(default_factory=list)
    state: AdamState = None
    diverged: bool = False


def evaluate_loss(model, dataset, batch_size=4096):
    """Mean relative loss over a whole dataset file (pairs with zero labels skipped)."""
    total, count = 0.0, 0
    for X, Y in dataset.batches(batch_size, shuffle=False):
        sq, valid = _label_norms(Y)
        if not valid.any():
            continue
        P = forward(model, X[valid])
        D = P - Y[valid]
        total += float(np.sum(0.5 * np.einsum("ij,ij->i", D, D) / sq[valid]))
        count += int(valid.sum())
    return total / max(count, 1)


def train(train_set, val_set, model, schedule, seed, sink=None, state=None, start_epoch=1,
          checkpoint=None):
    """Minibatch ADAM training.

    ``train_set``/``val_set`` provide ``batches(size, shuffle, seed)``.
    Every epoch reshuffles with seed ``(seed, epoch)``. ``sink`` receives one
    history dict per epoch; ``checkpoint(model, best, state, record)`` is
    called after each finished epoch. A NaN loss stops training and flags
    the result as diverged with the last finite parameters kept.
    """
    width_in = model.weights[0].shape[1]
    width_out = model.weights[-1].shape[0]
    if (train_set.r, train_set.label_len) != (width_in, width_out):
        raise ConfigurationError(
            f"dataset widths ({train_set.r}, {train_set.label_len}) do not match network "
            f"({width_in}, {width_out})", "architecture")
    state = state or AdamState.zeros_like(model)
    best, best_val = model.copy(), np.inf
    history = []
    result = TrainResult(model, best, history, state)
    for epoch in range(start_epoch, schedule.epochs + 1):
        t0 = time.perf_counter()
        lr = schedule.stepsize(epoch)
        good = model.copy()
        good_state = AdamState([m.copy() for m in state.m], [v.copy() for v in state.v], state.t,
                               state.beta1, state.beta2, state.eps)
        running, nb, skipped = 0.0, 0, 0
        for X, Y in train_set.batches(schedule.batch_size, shuffle=True, seed=(seed, epoch)):
            value, grads, sk = loss_and_grad(model, X, Y)
            skipped += sk
            if not np.isfinite(value):
                log.error("non-finite loss in epoch %d; keeping last good parameters", epoch)
                result.model, result.state, result.diverged = good, good_state, True
                return result
            adam_step(model, grads, state, lr)
            running += value
            nb += 1
        train_loss = evaluate_loss(model, train_set)
        val_loss = evaluate_loss(model, val_set)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            result.model, result.state, result.diverged = good, good_state, True
            return result
        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "running_loss": running / max(nb, 1),
            "stepsize": lr,
            "skipped": skipped,
            "wall_time": time.perf_counter() - t0,
        }
        if val_loss < best_val:
            best_val = val_loss
            result.best = model.copy()
        history.append(record)
        log.info("epoch %d train %.3e val %.3e", epoch, train_loss, val_loss)
        if sink is not None:
            sink(record)
        if checkpoint is not None:
            checkpoint(model, result.best, state, record)
    return result


_HEAD = struct.Struct("<4sII")
_VERSION = 1


def save_checkpoint(model, path):
    arch = model.architecture
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(b"LODN", _VERSION, arch.n_layers))
        fh.write(np.asarray(arch.widths, dtype="<u4").tobytes())
        for W, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path, expected=None):
    """Read a checkpoint; ``expected`` (an MlpArchitecture) is checked against the stored widths."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEAD.size:
        raise FormatError("checkpoint shorter than header", len(raw))
    magic, version, n_layers = _HEAD.unpack_from(raw)
    if magic != b"LODN":
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != _VERSION:
        raise FormatError(f"checkpoint version {version}, expected {_VERSION}", 4)
    off = _HEAD.size
    if len(raw) < off + 4 * (n_layers + 1):
        raise FormatError("truncated width table", off)
    widths = tuple(int(w) for w in np.frombuffer(raw, dtype="<u4", count=n_layers + 1, offset=off))
    off += 4 * (n_layers + 1)
    arch = MlpArchitecture(widths)
    if expected is not None and tuple(expected.widths) != widths:
        raise ConfigurationError(f"checkpoint widths {widths} differ from requested {tuple(expected.widths)}",
                                 "architecture")
    weights, biases = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        need = 8 * (a * b + b)
        if len(raw) < off + need:
            raise FormatError("truncated parameter block", off)
        weights.append(np.frombuffer(raw, dtype="<f8", count=a * b, offset=off).reshape(b, a).astype(np.float64))
        off += 8 * a * b
        biases.append(np.frombuffer(raw, dtype="<f8", count=b, offset=off).astype(np.float64))
        off += 8 * b
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes", off)
    return Mlp(weights, biases), arch


def save_adam(state, path):
    arrays = {f"m{i}": m for i, m in enumerate(state.m)}
    arrays.update({f"v{i}": v for i, v in enumerate(state.v)})
    np.savez(path, t=state.t, betas=np.array([state.beta1, state.beta2, state.eps]), **arrays)


def load_adam(path):
    with np.load(path) as z:
        n = sum(1 for k in z.files if k.startswith("m"))
        b1, b2, eps = z["betas"]
        return AdamState([z[f"m{i}"] for i in range(n)], [z[f"v{i}"] for i in range(n)], int(z["t"]),
                         float(b1), float(b2), float(eps))


def append_history(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")
