import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyrec.neuralcore import (
    MLP,
    AdamW,
    CheckpointError,
    PlateauScheduler,
    adamw_step,
    gradient_check,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_init,
    plateau_step,
    save_checkpoint,
)


def central_differences(f, params, eps):
    """Plain finite-difference gradient of ``f()`` w.r.t. every parameter entry."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


# --- init -------------------------------------------------------------------

def test_init_shapes():
    mlp = mlp_init([4, 3], seed=0)
    assert len(mlp.weights) == 1
    assert mlp.weights[0].shape == (3, 4) and mlp.biases[0].shape == (3,)
    assert not mlp.biases[0].any()


def test_init_deterministic():
    a, b = mlp_init([5, 7, 2], seed=11), mlp_init([5, 7, 2], seed=11)
    for x, y in zip(a.params(), b.params()):
        np.testing.assert_array_equal(x, y)


def test_init_bound():
    mlp = mlp_init([600, 256, 128, 3], seed=0)
    first = mlp.weights[0].reshape(-1)
    sample = np.random.default_rng(0).choice(first, size=10000, replace=False)
    assert np.abs(sample).max() <= math.sqrt(6 / 600)
    for w, fan_in in zip(mlp.weights, [600, 256, 128]):
        assert np.abs(w).max() <= math.sqrt(6 / fan_in)


@pytest.mark.parametrize("dims", [[], [4], [4, 0], [3, -1, 2]])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        mlp_init(dims)


# --- forward ----------------------------------------------------------------

def test_forward_identity():
    mlp = MLP([np.eye(4)], [np.zeros(4)])
    x = np.array([1.0, -2.0, 3.5, 0.25])
    y, _ = mlp_forward(mlp, x)
    np.testing.assert_array_equal(y, x)


def test_zero_dropout_train_equals_eval():
    mlp = mlp_init([6, 8, 8, 3], seed=1)
    x = np.random.default_rng(0).standard_normal((5, 6))
    a, _ = mlp_forward(mlp, x, dropout=0.0, training=True, rng=np.random.default_rng(0))
    b, _ = mlp_forward(mlp, x)
    np.testing.assert_array_equal(a, b)


def test_inverted_dropout_preserves_mean_activation():
    mlp = mlp_init([10, 64, 1], seed=2)
    x = np.random.default_rng(1).standard_normal(10)
    _, eval_cache = mlp_forward(mlp, x[None, :])
    batch = np.repeat(x[None, :], 20000, axis=0)
    _, cache = mlp_forward(mlp, batch, dropout=0.4, training=True, rng=np.random.default_rng(3))
    eval_act = eval_cache.inputs[1][0]
    mc_act = cache.inputs[1].mean(axis=0)
    rel = np.abs(mc_act - eval_act).sum() / eval_act.sum()
    assert rel < 0.02


def test_forward_errors():
    mlp = mlp_init([3, 2], seed=0)
    with pytest.raises(ValueError, match="shape"):
        mlp_forward(mlp, np.zeros(4))
    with pytest.raises(ValueError, match="dropout"):
        mlp_forward(mlp, np.zeros(3), dropout=1.0)


# --- backward -----------------------------------------------------------------

def test_linear_layer_gradient_is_outer_product():
    rng = np.random.default_rng(0)
    mlp = MLP([rng.standard_normal((3, 4))], [np.zeros(3)])
    x, g = rng.standard_normal(4), rng.standard_normal(3)
    _, cache = mlp_forward(mlp, x)
    grads, gx = mlp_backward(mlp, cache, g)
    np.testing.assert_allclose(grads[0], np.outer(g, x))
    np.testing.assert_allclose(grads[1], g)
    np.testing.assert_allclose(gx, mlp.weights[0].T @ g)


def test_relu_blocks_negative_preactivation():
    w1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    mlp = MLP([w1, np.ones((1, 2))], [np.array([0.0, -10.0]), np.zeros(1)])
    x = np.array([1.0, 1.0])  # second hidden unit preactivation = -9
    _, cache = mlp_forward(mlp, x)
    grads, gx = mlp_backward(mlp, cache, np.array([1.0]))
    assert not grads[0][1].any() and grads[1][1] == 0.0
    assert gx[1] == 0.0


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    mlp = mlp_init([5, 7, 3], seed=4)
    x = rng.standard_normal((6, 5))
    target = rng.standard_normal((6, 3))

    def loss():
        y, _ = mlp_forward(mlp, x)
        return 0.5 * np.sum((y - target) ** 2)

    y, cache = mlp_forward(mlp, x)
    grads, _ = mlp_backward(mlp, cache, y - target)
    numeric = central_differences(loss, mlp.params(), 1e-3)
    worst = max(np.max(np.abs(a - n) / np.maximum(np.abs(n), 1e-6)) for a, n in zip(grads, numeric))
    assert worst < 1e-4


def test_backward_replays_dropout_mask():
    rng = np.random.default_rng(1)
    mlp = mlp_init([4, 9, 2], seed=0)
    x = rng.standard_normal((3, 4))
    y, cache = mlp_forward(mlp, x, dropout=0.4, training=True, rng=np.random.default_rng(7))
    grads, _ = mlp_backward(mlp, cache, np.ones_like(y))

    def loss():
        out, _ = mlp_forward(mlp, x, dropout=0.4, training=True, rng=np.random.default_rng(7))
        return out.sum()

    numeric = central_differences(loss, mlp.params(), 1e-4)
    for a, n in zip(grads, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-7)


def test_backward_shape_error():
    mlp = mlp_init([3, 2], seed=0)
    _, cache = mlp_forward(mlp, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        mlp_backward(mlp, cache, np.zeros((2, 5)))


# --- AdamW --------------------------------------------------------------------

def test_adamw_zero_grad_pure_decay():
    # p <- p - lr * wd * p = 1 - 0.1 * 0.1 = 0.99
    p = np.array([1.0])
    adamw_step([p], [np.zeros(1)], AdamW(lr=0.1, weight_decay=0.1))
    assert p[0] == pytest.approx(0.99, abs=1e-15)


@pytest.mark.parametrize("g", [0.3, -2.0, 17.0])
def test_adamw_first_step_is_lr_sign(g):
    # at t=1, m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
    p = np.array([0.5])
    state = AdamW(lr=0.01, weight_decay=0.0)
    adamw_step([p], [np.array([g])], state)
    assert p[0] - 0.5 == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-6)


def test_adamw_zero_lr_is_null_step():
    rng = np.random.default_rng(0)
    p = rng.standard_normal((3, 4))
    before = p.copy()
    state = AdamW(lr=0.0, weight_decay=0.5)
    for _ in range(3):
        adamw_step([p], [rng.standard_normal((3, 4))], state)
    np.testing.assert_array_equal(p, before)


def test_adamw_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        adamw_step([np.zeros(2)], [np.array([1.0, np.inf])], AdamW())


def test_adamw_matches_reference_recursion():
    rng = np.random.default_rng(4)
    p = rng.standard_normal(6)
    ref, m, v = p.copy(), np.zeros(6), np.zeros(6)
    state = AdamW(lr=0.05, weight_decay=0.01)
    for t in range(1, 6):
        g = rng.standard_normal(6)
        adamw_step([p], [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        ref = ref - 0.05 * (mh / (np.sqrt(vh) + 1e-8) + 0.01 * ref)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


# --- plateau scheduler --------------------------------------------------------

def test_plateau_improving_never_decays():
    s = PlateauScheduler(1e-3)
    for loss in np.linspace(1.0, 0.1, 40):
        plateau_step(s, float(loss))
    assert s.lr == 1e-3


def test_plateau_halves_after_patience():
    s = PlateauScheduler(1e-3, factor=0.5, patience=5)
    s.step(1.0)
    for i in range(6):
        assert s.lr == 1e-3
        s.step(1.0)
    assert s.lr == 5e-4
    for _ in range(5):
        s.step(1.0)
    assert s.lr == 5e-4


def test_plateau_floor():
    s = PlateauScheduler(2e-7, factor=0.5, patience=0, min_lr=1e-7)
    for _ in range(10):
        s.step(1.0)
    assert s.lr == 1e-7


def test_plateau_leaves_zero_lr_alone():
    s = PlateauScheduler(0.0, patience=0)
    for _ in range(5):
        s.step(1.0)
    assert s.lr == 0.0


@given(st.lists(st.floats(0, 10), min_size=1, max_size=200))
@settings(max_examples=100, deadline=None)
def test_plateau_lr_monotone_and_bounded(losses):
    s = PlateauScheduler(1e-3, patience=2, min_lr=1e-5)
    prev = s.lr
    for loss in losses:
        s.step(loss)
        assert s.min_lr <= s.lr <= prev
        prev = s.lr


# --- gradient checking --------------------------------------------------------

def test_gradient_check_quadratic():
    p = np.array([3.0])
    err = gradient_check(lambda: float(p[0] ** 2), [p], [np.array([6.0])])
    assert err * 6.0 < 1e-8


def test_gradient_check_detects_corrupted_gradient():
    rng = np.random.default_rng(0)
    mlp = mlp_init([4, 5, 2], seed=1)
    x = rng.standard_normal((3, 4))

    def loss():
        return float(np.sum(mlp_forward(mlp, x)[0] ** 2))

    y, cache = mlp_forward(mlp, x)
    grads, _ = mlp_backward(mlp, cache, 2 * y)
    assert gradient_check(loss, mlp.params(), grads) < 1e-4
    err = gradient_check(loss, mlp.params(), [2 * g for g in grads])
    assert err == pytest.approx(1.0, abs=0.05)


def test_gradient_check_sampled_coordinates_restore_params():
    mlp = mlp_init([6, 4, 1], seed=2)
    before = [p.copy() for p in mlp.params()]
    x = np.ones((2, 6))
    y, cache = mlp_forward(mlp, x)
    grads, _ = mlp_backward(mlp, cache, np.ones_like(y))
    err = gradient_check(lambda: float(mlp_forward(mlp, x)[0].sum()), mlp.params(), grads,
                         n_samples=5, rng=0)
    assert err < 1e-4
    for a, b in zip(before, mlp.params()):
        np.testing.assert_array_equal(a, b)


# --- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    nets = {"a": mlp_init([5, 4, 3], seed=0), "b": mlp_init([3, 1], seed=1)}
    desc = {"k": [1.5, 2.25], "name": "x"}
    save_checkpoint(tmp_path / "c.pwts", "early", nets, desc)
    arch, back, d = load_checkpoint(tmp_path / "c.pwts")
    assert arch == "early" and d == desc and list(back) == ["a", "b"]
    for name in nets:
        assert back[name].dims == nets[name].dims
        for x, y in zip(nets[name].params(), back[name].params()):
            np.testing.assert_array_equal(x, y)
    save_checkpoint(tmp_path / "d.pwts", arch, back, d)
    assert (tmp_path / "c.pwts").read_bytes() == (tmp_path / "d.pwts").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.pwts").write_bytes(b"NOPE")
    with pytest.raises(CheckpointError, match="not a PWTS"):
        load_checkpoint(tmp_path / "x.pwts")
    save_checkpoint(tmp_path / "y.pwts", "early", {"a": mlp_init([2, 2], seed=0)})
    raw = (tmp_path / "y.pwts").read_bytes()
    (tmp_path / "y.pwts").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "y.pwts")
