import numpy as np
import pytest

from pinna.optim import adam_init, adam_step


def test_zero_gradient_leaves_params():
    params = np.array([1.0, -2.0, 3.0])
    out, state = adam_step(params, np.zeros(3), adam_init(3), lr=0.1)
    assert np.array_equal(out, params)
    assert state.t == 1


def test_first_step_magnitude_is_lr():
    # bias-corrected first step is exactly lr * g / (|g| + eps) per component
    g = np.array([0.5, -3.0, 1e-3])
    lr = 0.07
    out, _ = adam_step(np.zeros(3), g, adam_init(3), lr=lr)
    expected = -lr * g / (np.abs(g) + 1e-8)
    assert np.allclose(out, expected, rtol=1e-12)
    assert np.allclose(np.abs(out), lr, rtol=1e-4)


def test_trajectories_bitwise_deterministic(rng):
    g_seq = rng.normal(size=(20, 4))

    def run():
        p = np.ones(4)
        s = adam_init(4)
        for g in g_seq:
            p, s = adam_step(p, g, s, lr=0.01)
        return p

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="mismatch"):
        adam_step(np.zeros(3), np.zeros(4), adam_init(3), lr=0.1)


def test_state_is_not_mutated():
    state = adam_init(2)
    adam_step(np.ones(2), np.ones(2), state, lr=0.1)
    assert state.t == 0 and (state.m == 0).all()


def test_descends_quadratic():
    p = np.array([5.0, -3.0])
    s = adam_init(2)
    for _ in range(2000):
        p, s = adam_step(p, 2 * p, s, lr=0.05)
    assert np.abs(p).max() < 1e-3
