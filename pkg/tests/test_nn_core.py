import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d3lab.models import ArchSpec, init_model
from d3lab.nn import OptimizerState, Rng, Tensor, backward, grad, mse_loss, step
from d3lab.nn.params import ParamVector
from d3lab.nn.tensor import NonFiniteError, softmax_cross_entropy

from .helpers import fd_max_rel_error, set_params


def test_square_gradient():
    th = Tensor(3.0, requires_grad=True)
    (g,) = grad(th * th, [th])
    assert g == 6.0


def test_single_unit_mse_gradient_by_hand():
    # f = w x + b on one sample, L = (f - y)^2
    m = init_model(ArchSpec("mlp_relu", 1, 1, (1,)), 0)
    lin = init_model(ArchSpec("linear_features", 1, 1, feature_basis=_poly(2)), 0)
    lin.theta.params[:] = [1.0, 2.0]  # b=1, w=2
    x, y = 3.0, 4.0
    out, leaves = lin.graph(np.array([[x]]))
    g = lin.flat_grad(mse_loss(out, [[y]]), leaves)
    f = 1.0 + 2.0 * x
    np.testing.assert_array_equal(g, [2 * (f - y), 2 * (f - y) * x])
    assert m.n_params == 4


def _poly(P):
    from d3lab.models import FeatureBasis

    return FeatureBasis("polynomial", P)


def test_identity_and_affine_forward():
    m = init_model(ArchSpec("linear_features", 1, 1, feature_basis=_poly(2)), 0)
    m.theta.params[:] = [1.0, 2.0]
    np.testing.assert_array_equal(m(np.array([[3.0]])), [[7.0]])

    # a ReLU MLP whose first layer is the identity on positive inputs
    net = init_model(ArchSpec("mlp_relu", 2, 2, (2,)), 0)
    set_params(net, {(0, "W"): np.eye(2), (0, "b"): np.zeros(2), (1, "W"): np.eye(2), (1, "b"): np.zeros(2)})
    np.testing.assert_array_equal(net(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_forward_golden_value():
    # recorded from the first audited run; guards init order and forward algebra
    m = init_model(ArchSpec("mlp_relu", 3, 2, (8, 8)), 0)
    out = m(np.zeros((1, 3)))
    np.testing.assert_allclose(out, GOLDEN_MLP_SEED0, rtol=0, atol=1e-15)


GOLDEN_MLP_SEED0 = np.array([[0.22720779719902395, -0.10012507572281185]])


def test_shape_mismatch_raises():
    m = init_model(ArchSpec("mlp_relu", 3, 1, (4,)), 0)
    with pytest.raises(ValueError):
        m(np.zeros((2, 4)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises():
    m = init_model(ArchSpec("mlp_relu", 1, 1, (4,)), 0)
    with pytest.raises(NonFiniteError):
        m(np.array([[np.inf]]))


@pytest.mark.parametrize("kind", ["mlp_relu", "mlp_sine"])
@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_central_differences(kind, seed):
    rng = np.random.default_rng(seed)
    depth = 1 + seed % 3
    widths = tuple(int(w) for w in rng.integers(2, 12, depth))
    arch = ArchSpec(kind, 3, 2, widths, sine_omega0=3.0)
    m = init_model(arch, seed)
    x = rng.normal(size=(6, 3))
    y = rng.normal(size=(6, 2))
    assert fd_max_rel_error(m, x, y) <= 1e-5


def test_cross_entropy_gradient_matches_fd():
    arch = ArchSpec("mlp_relu", 4, 3, (6,))
    m = init_model(arch, 11)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(9, 4))
    labels = rng.integers(0, 3, 9)
    assert fd_max_rel_error(m, x, labels, loss=softmax_cross_entropy) <= 1e-5


def test_broadcast_and_reductions():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    loss = ((a * b + b) / 2.0).mean()
    ga, gb = grad(loss, [a, b])
    np.testing.assert_allclose(ga, np.tile([1, 2, 3], (2, 1)) / 12)
    np.testing.assert_allclose(gb, (np.array([3.0, 5.0, 7.0]) + 2.0) / 12)


def test_graph_reusable_for_several_seeds():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x
    g1 = backward(y, np.array([1.0, 0.0]))[id(x)]
    g2 = backward(y, np.array([0.0, 1.0]))[id(x)]
    np.testing.assert_array_equal(g1, [2.0, 0.0])
    np.testing.assert_array_equal(g2, [0.0, 4.0])


# ----------------------------------------------------------------------
# optimizers


def test_sgd_plain_step():
    opt = OptimizerState("sgd_momentum", lr=1.0)
    th = step(opt, np.array([1.0]), np.array([0.5]))
    assert th[0] == 0.5


def test_sgd_momentum_two_steps():
    opt = OptimizerState("sgd_momentum", lr=0.1, momentum=0.9)
    th = np.array([1.0])
    g = np.array([2.0])
    step(opt, th, g)  # v1 = g
    step(opt, th, g)  # v2 = 0.9 g + g
    assert th[0] == pytest.approx(1.0 - 0.1 * 2.0 - 0.1 * 1.9 * 2.0, abs=1e-15)


def test_weight_decay_is_additive_l2():
    opt = OptimizerState("sgd_momentum", lr=0.5, weight_decay=0.1)
    th = step(opt, np.array([2.0]), np.array([0.0]))
    assert th[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_adam_decreases_quadratic():
    opt = OptimizerState("adam", lr=0.05)
    th = np.array([3.0])
    mags = []
    for _ in range(100):
        step(opt, th, 2 * th)
        mags.append(abs(th[0]))
    # oracle: same scalar recurrence simulated independently
    m = v = 0.0
    x = 3.0
    for t in range(1, 101):
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert th[0] == pytest.approx(x, rel=1e-12)
    assert mags[-1] < 0.5 * mags[0]
    drops = np.diff(mags[:40])
    assert np.all(drops < 0)


def test_optimizer_rejects_bad_input():
    with pytest.raises(ValueError):
        OptimizerState("sgd_momentum", lr=0.0)
    opt = OptimizerState("sgd_momentum", lr=1.0)
    with pytest.raises(ValueError):
        step(opt, np.zeros(2), np.zeros(3))
    with pytest.raises(NonFiniteError):
        step(opt, np.zeros(1), np.array([np.nan]))


@settings(max_examples=30, deadline=None)
@given(
    curv=st.lists(st.floats(0.1, 10.0), min_size=1, max_size=5),
    frac=st.floats(0.05, 0.95),
    seed=st.integers(0, 2**32 - 1),
)
def test_gd_nonincreasing_on_convex_quadratic(curv, frac, seed):
    h = np.array(curv)
    lr = frac * 2.0 / h.max()  # below the stability bound 2 / lambda_max
    x = np.random.default_rng(seed).normal(size=h.size)
    opt = OptimizerState("sgd_momentum", lr=lr)
    prev = 0.5 * np.sum(h * x * x)
    for _ in range(50):
        step(opt, x, h * x)
        cur = 0.5 * np.sum(h * x * x)
        assert cur <= prev * (1 + 1e-12)
        prev = cur


# ----------------------------------------------------------------------
# determinism and plumbing


def test_rng_streams_are_reproducible():
    a = Rng(42, "x").uniform(0, 1, 5)
    b = Rng(42, "x").uniform(0, 1, 5)
    c = Rng(42, "y").uniform(0, 1, 5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    # Philox output is fixed by the algorithm; pin the first draw
    assert Rng(0).uniform(0, 1) == pytest.approx(PHILOX_FIRST_DRAW, abs=0)


PHILOX_FIRST_DRAW = 0.014067035665647709


def test_training_is_bit_identical():
    def run():
        m = init_model(ArchSpec("mlp_relu", 2, 1, (16, 16)), 3)
        opt = OptimizerState("sgd_momentum", lr=0.05, momentum=0.9, weight_decay=1e-4)
        x = Rng(1).normal(0, 1, (20, 2))
        y = Rng(2).normal(0, 1, (20, 1))
        for _ in range(25):
            out, leaves = m.graph(x)
            step(opt, m.theta.params, m.flat_grad(mse_loss(out, y), leaves))
        return m.theta.params.tobytes()

    assert run() == run()


def test_param_layout_covers_vector():
    pv = ParamVector.allocate([(0, "W", (3, 4)), (0, "b", (4,)), (1, "W", (4, 1))])
    pv.check_layout()
    assert len(pv) == 12 + 4 + 4
    pv.view(pv.segment(0, "b"))[...] = 7.0
    assert np.count_nonzero(pv.params == 7.0) == 4
