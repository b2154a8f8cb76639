import numpy as np
import pytest

from fedinject import tensor as T
from fedinject.gradcheck import grad_check
from fedinject.nn import MLP, Linear
from fedinject.optim import Optimizer, OptimizerState, step
from fedinject.tensor import Parameter, Tensor


def test_sgd_single_step():
    w = Parameter([1.0])
    w.grad = np.array([1.0])
    step([w], OptimizerState("sgd", 0.1))
    assert w.data[0] == pytest.approx(0.9, abs=1e-15)
    assert w.grad is None


def test_adam_two_steps_by_hand():
    w = Parameter([1.0])
    opt = OptimizerState("adam", 0.1)
    w.grad = np.array([0.5])
    step([w], opt)
    # m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
    w1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert w.data[0] == pytest.approx(w1, abs=1e-15)
    w.grad = np.array([-0.25])
    step([w], opt)
    m = 0.9 * 0.05 + 0.1 * -0.25
    v = 0.999 * 0.00025 + 0.001 * 0.0625
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    assert w.data[0] == pytest.approx(w1 - 0.1 * m_hat / (v_hat ** 0.5 + 1e-8), abs=1e-15)


def test_adam_moments_match_parameter_shapes():
    params = [Parameter(np.ones((2, 3))), Parameter(np.ones(4))]
    opt = Optimizer(params, "adam", 0.01)
    for p in params:
        p.grad = np.ones_like(p.data)
    opt.step()
    for p in params:
        m, v, t = opt.state.moments[id(p)]
        assert m.shape == v.shape == p.shape and t == 1


def test_sgd_keeps_no_moments():
    w = Parameter([1.0])
    opt = OptimizerState("sgd", 0.1)
    w.grad = np.array([1.0])
    step([w], opt)
    assert opt.moments == {}


def test_frozen_parameter_untouched_over_many_steps():
    rng = np.random.default_rng(0)
    frozen = Parameter(rng.normal(size=(3, 3)), trainable=False)
    live = Parameter(rng.normal(size=(3, 3)))
    before = frozen.data.tobytes()
    opt = Optimizer([frozen, live], "adam", 0.1)
    for _ in range(50):
        T.backward(T.square(T.matmul(live, frozen)).sum())
        opt.step()
    assert frozen.data.tobytes() == before
    assert live.data.tobytes() != before


def test_unreached_parameter_is_skipped_entirely():
    a, b = Parameter([1.0]), Parameter([1.0])
    opt = Optimizer([a, b], "adam", 0.1)
    T.backward(a.sum())
    opt.step()
    assert b.data[0] == 1.0 and id(b) not in opt.state.moments


def test_unknown_kind():
    with pytest.raises(ValueError):
        OptimizerState("rmsprop")


# --------------------------------------------------------------- grad check

def test_grad_check_linear():
    rng = np.random.default_rng(1)
    layer = Linear(5, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)))
    w = rng.normal(size=(4, 3))
    rep = grad_check(lambda: (layer(x) * w).sum(), layer.parameters(), tolerance=1e-4)
    assert rep.passed and rep.n_checked == 18


def test_grad_check_relu_mlp_away_from_kinks():
    rng = np.random.default_rng(2)
    net = MLP([3, 6, 2], rng)
    x = Tensor(rng.normal(size=(5, 3)))
    pre = x.data @ net.layers[0].weight.data + net.layers[0].bias.data
    assert np.min(np.abs(pre)) > 1e-3   # no hidden unit sits on its kink
    w = rng.normal(size=(5, 2))
    assert grad_check(lambda: (net(x) * w).sum(), net.parameters(), tolerance=1e-4).passed


def test_grad_check_flags_a_wrong_gradient():
    w = Parameter([0.3, -0.7])

    def bad_square(x):
        # forward x^2, backward pretends the derivative is x
        return T._node(x.data ** 2, (x,), lambda g: (g * x.data,))
    rep = grad_check(lambda: bad_square(w).sum(), [w])
    assert not rep.passed and rep.max_rel_error > 0.4


def test_module_finds_parameters_in_nested_containers():
    from fedinject.nn import Module

    class Holder(Module):
        def __init__(self):
            self.grid = [[Parameter([1.0]), Parameter([2.0])], [Parameter([3.0])]]
            self.table = {"a": Parameter([4.0]), "b": [Parameter([5.0])]}
    names = [n for n, _ in Holder().named_parameters()]
    assert names == ["grid.0.0", "grid.0.1", "grid.1.0", "table.a", "table.b.0"]
