import numpy as np
import pytest

from hvar.nn import Parameter
from hvar.optim import AdamW, MissingGradientError


def _param(value, name="w"):
    return Parameter(np.array(value, dtype=np.float64), name=name)


def test_first_step_moves_by_learning_rate():
    p = _param([1.0])
    opt = AdamW([p], lr=0.1, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8)
    p.grad = np.array([1.0])
    opt.step()
    # bias-corrected moments are both 1, so the step is lr / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_zero_grad_zero_decay_leaves_param_unchanged():
    p = _param([0.3, -2.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [0.3, -2.0])


def test_two_steps_constant_gradient_match_closed_form():
    g, lr, b1, b2, eps = 0.5, 0.01, 0.9, 0.95, 1e-8
    p = _param([2.0])
    opt = AdamW([p], lr=lr, betas=(b1, b2), weight_decay=0.0, eps=eps)
    expected = 2.0
    m = v = 0.0
    for t in (1, 2):
        p.grad = np.array([g])
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        expected -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    # with a constant gradient both corrected moments are exact: v_hat = g^2
    assert opt.state.second_moment[id(p)][0] / (1 - b2 ** 2) == pytest.approx(g * g, rel=1e-12)


def test_decoupled_weight_decay_scales_before_update():
    p = _param([4.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == pytest.approx(4.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_no_decay_names_are_exempt():
    p = _param([4.0], name="codebook.weight")
    opt = AdamW([p], lr=0.1, weight_decay=0.5, no_decay={"codebook.weight"})
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 4.0


def test_frozen_parameters_receive_no_update():
    a, b = _param([1.0], "a"), _param([1.0], "b")
    b.trainable = False
    opt = AdamW([a, b], lr=0.1)
    a.grad = np.ones(1)
    opt.step()
    assert b.data[0] == 1.0 and a.data[0] != 1.0


def test_missing_gradient_is_an_error():
    p = _param([1.0])
    opt = AdamW([p], lr=0.1)
    with pytest.raises(MissingGradientError):
        opt.step()


def test_moment_buffers_match_parameter_shapes():
    p = _param(np.ones((3, 2)))
    opt = AdamW([p])
    p.grad = np.ones((3, 2))
    opt.step()
    assert opt.state.first_moment[id(p)].shape == (3, 2)
    assert opt.state.second_moment[id(p)].shape == (3, 2)
