import numpy as np
import pytest

from lodc import ConfigurationError, FormatError
from lodc.nn import (
    AdamState, Mlp, MlpArchitecture, Schedule, adam_step, default_architecture, forward, init_glorot,
    load_adam, load_checkpoint, loss, loss_and_grad, save_adam, save_checkpoint, train,
)


class ArrayData:
    """In-memory stand-in for a dataset file."""

    def __init__(self, X, Y):
        self.X, self.Y = X, Y
        self.r, self.label_len = X.shape[1], Y.shape[1]

    def batches(self, batch_size, shuffle=True, seed=0):
        n = len(self.X)
        order = np.random.default_rng(list(seed) if isinstance(seed, tuple) else seed).permutation(n) \
            if shuffle else np.arange(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            yield self.X[idx], self.Y[idx]


def _problem(seed=0, n=64, r=6, out=4):
    rng = np.random.default_rng(seed)
    X = rng.uniform(1, 5, size=(n, r))
    Y = X[:, :out] @ rng.standard_normal((out, out)) + 0.1
    return X, Y


def test_default_architecture_count():
    arch = default_architecture(1600, 144, 3)
    assert arch.widths == (1600, 1600, 800, 800, 400, 400, 144, 144, 144)
    assert arch.n_params == 5063504


def test_default_architecture_desk():
    arch = default_architecture(400, 144, 2)
    assert arch.widths[0] == 400 and arch.widths[-1] == 144 and arch.n_layers == 6


def test_glorot_limits():
    model = init_glorot(MlpArchitecture((50, 30, 10)), np.random.default_rng(0))
    assert np.abs(model.weights[0]).max() <= np.sqrt(6 / 80)
    assert not any(b.any() for b in model.biases)


def test_forward_batch_consistency():
    model = init_glorot(MlpArchitecture((6, 8, 8, 4)), np.random.default_rng(1))
    X = np.random.default_rng(2).standard_normal((5, 6))
    full = forward(model, X)
    for i in range(5):
        assert np.allclose(forward(model, X[i]), full[i], rtol=0, atol=1e-15)


def test_forward_hand_computed():
    model = Mlp([np.array([[1.0, -1.0]]), np.array([[2.0]])], [np.array([0.5]), np.array([1.0])])
    assert forward(model, np.array([[1.0, 3.0]]))[0, 0] == 1.0      # relu(-1.5)=0
    assert forward(model, np.array([[3.0, 1.0]]))[0, 0] == 6.0      # relu(2.5)*2+1


def test_width_mismatch():
    model = init_glorot(MlpArchitecture((3, 2)), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        forward(model, np.ones((1, 4)))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    model = init_glorot(MlpArchitecture((5, 7, 6, 3)), rng)
    X, Y = rng.standard_normal((9, 5)), rng.standard_normal((9, 3))
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
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-12)


def test_loss_permutation_invariant_and_zero_labels():
    rng = np.random.default_rng(4)
    model = init_glorot(MlpArchitecture((4, 5, 3)), rng)
    X, Y = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    perm = rng.permutation(6)
    assert np.isclose(loss(model, X, Y), loss(model, X[perm], Y[perm]))
    Y[2] = 0.0
    value, _, skipped = loss_and_grad(model, X, Y)
    assert skipped == 1 and np.isclose(value, loss(model, np.delete(X, 2, 0), np.delete(Y, 2, 0)))


def test_perfect_prediction_has_zero_loss():
    model = Mlp([np.eye(3)], [np.zeros(3)])
    X = np.random.default_rng(0).standard_normal((4, 3))
    assert loss(model, X, X) == 0.0


def test_first_adam_step_is_sign_step():
    model = Mlp([np.zeros((2, 2))], [np.zeros(2)])
    grads = [np.array([[1.0, -2.0], [3e-3, -4.0]]), np.array([0.5, -0.5])]
    state = AdamState.zeros_like(model)
    adam_step(model, grads, state, 1e-3)
    assert state.t == 1
    assert np.allclose(model.weights[0], -1e-3 * np.sign(grads[0]), rtol=1e-4)
    assert np.allclose(model.biases[0], -1e-3 * np.sign(grads[1]), rtol=1e-6)


def test_schedule():
    s = Schedule(epochs=8, stepsizes=(1e-4, 1e-5), switch_epoch=5)
    assert [s.stepsize(e) for e in (1, 5, 6, 8)] == [1e-4, 1e-4, 1e-5, 1e-5]


def test_training_reduces_loss_and_is_deterministic():
    X, Y = _problem()
    data = ArrayData(X, Y)
    arch = MlpArchitecture((6, 16, 4))
    runs = []
    for _ in range(2):
        model = init_glorot(arch, np.random.default_rng(7))
        runs.append(train(data, data, model, Schedule(12, 8, (1e-2, 1e-3), 8), seed=3))
    a, b = runs
    assert a.history[-1]["train_loss"] < a.history[0]["train_loss"]
    assert all(np.array_equal(p, q) for p, q in zip(a.model.params(), b.model.params()))
    assert len(a.history) == 12 and a.history[8]["stepsize"] == 1e-3
    best_epoch = min(a.history, key=lambda r: r["val_loss"])
    assert np.isclose(best_epoch["val_loss"], loss(a.best, X, Y))


def test_nan_marks_divergence():
    X, Y = _problem()
    X[5, 0] = np.nan
    data = ArrayData(X, Y)
    model = init_glorot(MlpArchitecture((6, 4)), np.random.default_rng(0))
    start = model.copy()
    result = train(data, data, model, Schedule(2, 16, (1e-3, 1e-3), 1), seed=0)
    assert result.diverged and result.history == []
    assert np.isfinite(result.model.weights[0]).all()
    # A NaN in the first epoch leaves the parameters as they were at its start.
    assert all(np.array_equal(p, q) for p, q in zip(result.model.params(), start.params()))


def test_dataset_width_mismatch():
    X, Y = _problem()
    model = init_glorot(MlpArchitecture((5, 4)), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        train(ArrayData(X, Y), ArrayData(X, Y), model, Schedule(1), seed=0)


def test_checkpoint_roundtrip(tmp_path):
    model = init_glorot(MlpArchitecture((5, 4, 3)), np.random.default_rng(0))
    path = tmp_path / "m.lodn"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"LODN" and len(raw) == 12 + 4 * 3 + 8 * (5 * 4 + 4 + 4 * 3 + 3)
    back, arch = load_checkpoint(path)
    assert arch.widths == (5, 4, 3)
    assert all(np.array_equal(p, q) for p, q in zip(back.params(), model.params()))
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, MlpArchitecture((5, 4, 2)))
    path.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert err.value.offset == 0


def test_adam_state_roundtrip(tmp_path):
    model = init_glorot(MlpArchitecture((3, 2)), np.random.default_rng(0))
    state = AdamState.zeros_like(model)
    _, grads, _ = loss_and_grad(model, np.ones((2, 3)), np.ones((2, 2)))
    adam_step(model, grads, state, 1e-3)
    save_adam(state, tmp_path / "a.npz")
    back = load_adam(tmp_path / "a.npz")
    assert back.t == 1 and all(np.array_equal(a, b) for a, b in zip(back.m + back.v, state.m + state.v))
