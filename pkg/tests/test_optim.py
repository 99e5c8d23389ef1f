import numpy as np
import pytest

from vmfhash.encoder import EncoderConfig, init_weights
from vmfhash.optim import AdamState, adam_step


def small():
    return init_weights(EncoderConfig(in_channels=2, embed_dim=3, blocks=((4, 3, 1),), precision="f64"))


def zero_grads(w):
    return {k: np.zeros_like(v) for k, v in w.params.items()}


def test_zero_gradient_leaves_weights_and_counts_the_step():
    w = small()
    before = {k: v.copy() for k, v in w.params.items()}
    state = AdamState.for_weights(w)
    adam_step(w, zero_grads(w), state)
    assert state.step == 1
    assert all(np.array_equal(before[k], w.params[k]) for k in before)


def test_first_step_is_lr_times_sign_like(rng):
    w = small()
    before = {k: v.copy() for k, v in w.params.items()}
    grads = {k: rng.normal(size=v.shape) for k, v in w.params.items()}
    state = AdamState.for_weights(w, lr=1e-2)
    adam_step(w, grads, state)
    for k, g in grads.items():
        # bias correction makes m_hat = g and v_hat = g^2 at t = 1
        assert np.allclose(w.params[k] - before[k], -1e-2 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-15)


def test_matches_reference_over_several_steps(rng):
    w = small()
    p0 = {k: v.copy() for k, v in w.params.items()}
    state = AdamState.for_weights(w, lr=3e-3)
    m = {k: 0.0 for k in p0}
    v = {k: 0.0 for k in p0}
    for t in range(1, 6):
        g = {k: rng.normal(size=x.shape) for k, x in p0.items()}
        adam_step(w, g, state)
        for k in p0:
            m[k] = 0.9 * m[k] + 0.1 * g[k]
            v[k] = 0.999 * v[k] + 0.001 * g[k] ** 2
            p0[k] = p0[k] - 3e-3 * (m[k] / (1 - 0.9**t)) / (np.sqrt(v[k] / (1 - 0.999**t)) + 1e-8)
    for k in p0:
        assert np.allclose(w.params[k], p0[k], rtol=1e-12, atol=1e-15)


def test_defaults():
    s = AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps, s.step) == (1e-3, 0.9, 0.999, 1e-8, 0)


def test_deterministic(rng):
    grads = {k: rng.normal(size=v.shape) for k, v in small().params.items()}
    runs = []
    for _ in range(2):
        w = small()
        state = AdamState.for_weights(w)
        for _ in range(3):
            adam_step(w, grads, state)
        runs.append(w.params)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_nonfinite_gradient_rejects_step(caplog):
    w = small()
    before = {k: v.copy() for k, v in w.params.items()}
    state = AdamState.for_weights(w)
    grads = zero_grads(w)
    grads["head.weight"][0, 0] = np.nan
    version = w.version
    adam_step(w, grads, state)
    assert state.rejected == 1 and state.step == 0 and w.version == version
    assert all(np.array_equal(before[k], w.params[k]) for k in before)
    assert "rejected" in caplog.text


def test_gradient_structure_checked():
    w = small()
    state = AdamState.for_weights(w)
    with pytest.raises(ValueError):
        adam_step(w, {"head.weight": np.zeros((3, 4))}, state)
    bad = zero_grads(w)
    bad["head.weight"] = np.zeros((1, 1))
    with pytest.raises(ValueError):
        adam_step(w, bad, state)
