import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from npdg.fields import (
    AnalyticField, Mlp, PReLU, Softplus, Tanh, TruncatedField,
    init_params, load_checkpoint, param_count, save_checkpoint,
    zeta, zeta_grad,
)

ACTIVATIONS = [Tanh(), Softplus(), Softplus(beta=0.25), PReLU()]


def make_net(d_in, d_h, d_out, n_l, act, seed=0):
    rng = np.random.default_rng(seed)
    p = init_params(d_in, d_h, d_out, n_l, act, rng)
    return Mlp(d_in, d_h, d_out, n_l, act, p)


def test_value_matches_manual_forward_tanh():
    net = make_net(2, 3, 1, 2, Tanh(), seed=1)
    Ws, bs, _ = net._unpack(net.params)
    X = np.array([[0.3, -0.7], [1.1, 0.2]])
    h = np.tanh(X @ Ws[0].T + bs[0])
    manual = h @ Ws[1].T + bs[1]
    assert np.allclose(net.value(X), manual[:, 0], atol=1e-14)


def test_param_count_matches_vector_length():
    for act in ACTIVATIONS:
        net = make_net(3, 5, 2, 3, act)
        assert net.n_params == param_count(3, 5, 2, 3, act)
        assert net.params.size == net.n_params


@pytest.mark.parametrize("act", ACTIVATIONS, ids=lambda a: type(a).__name__)
@pytest.mark.parametrize("need", ["value", "grad"])
def test_adjoint_identity(act, need):
    # <J v, w> must equal <v, J^T w> to near machine precision
    rng = np.random.default_rng(7)
    net = make_net(2, 6, 1, 3, act, seed=3)
    X = rng.uniform(-1, 1, size=(11, 2))
    tr = net.bind(X, need=need)
    v = rng.standard_normal(net.n_params)
    w_val = rng.standard_normal(11)
    w_grad = rng.standard_normal((11, 2)) if need == "grad" else None
    jv_val, jv_grad = tr.jvp(v)
    lhs = float(jv_val @ w_val)
    if need == "grad":
        lhs += float(np.sum(jv_grad * w_grad))
    jt = tr.vjp(w_val=w_val, w_grad=w_grad)
    rhs = float(v @ jt)
    scale = max(abs(lhs), abs(rhs), 1.0)
    assert abs(lhs - rhs) <= 1e-12 * scale


@pytest.mark.parametrize("act", [Tanh(), Softplus(beta=0.25)], ids=lambda a: type(a).__name__)
def test_laplacian_adjoint_identity(act):
    rng = np.random.default_rng(11)
    net = make_net(3, 5, 1, 3, act, seed=5)
    X = rng.uniform(-1, 1, size=(7, 3))
    tr = net.bind(X, need="lap")
    v = rng.standard_normal(net.n_params)
    w = rng.standard_normal(7)
    jv = tr.jvp_lap(v) if hasattr(tr, "jvp_lap") else None
    if jv is None:
        # adjoint check through param_vjp against finite differences instead
        g = net.param_vjp(X, w_lap=w)
        eps = 1e-6
        lap0 = net.with_params(net.params - eps * v).input_laplacian(X)
        lap1 = net.with_params(net.params + eps * v).input_laplacian(X)
        fd = float(w @ (lap1 - lap0) / (2 * eps))
        assert abs(float(v @ g) - fd) <= 1e-5 * max(abs(fd), 1.0)


@pytest.mark.parametrize("act", ACTIVATIONS, ids=lambda a: type(a).__name__)
def test_param_gradient_matches_finite_differences(act):
    rng = np.random.default_rng(2)
    net = make_net(2, 5, 1, 3, act, seed=9)
    X = rng.uniform(-0.9, 0.9, size=(6, 2))
    w = rng.standard_normal(6)
    g = net.param_vjp(X, w_val=w)
    for _ in range(20):
        v = rng.standard_normal(net.n_params)
        eps = 1e-6
        f0 = float(w @ net.with_params(net.params - eps * v).value(X))
        f1 = float(w @ net.with_params(net.params + eps * v).value(X))
        fd = (f1 - f0) / (2 * eps)
        assert abs(float(v @ g) - fd) <= 1e-5 * max(abs(fd), 1.0)


def test_input_gradient_matches_finite_differences():
    net = make_net(3, 6, 1, 3, Tanh(), seed=4)
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(5, 3))
    G = net.input_gradient(X)
    eps = 1e-6
    for k in range(3):
        dX = np.zeros_like(X)
        dX[:, k] = eps
        fd = (net.value(X + dX) - net.value(X - dX)) / (2 * eps)
        assert np.max(np.abs(G[:, k] - fd)) <= 1e-6


def test_input_laplacian_matches_finite_differences():
    net = make_net(2, 6, 1, 3, Softplus(), seed=8)
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(5, 2))
    lap = net.input_laplacian(X)
    eps = 1e-4
    acc = np.zeros(5)
    for k in range(2):
        dX = np.zeros_like(X)
        dX[:, k] = eps
        acc += (net.value(X + dX) - 2 * net.value(X) + net.value(X - dX)) / eps**2
    assert np.max(np.abs(lap - acc)) <= 1e-5


def test_prelu_kink_and_learned_slope():
    net = make_net(1, 4, 1, 2, PReLU(), seed=0)
    # slopes live at the tail of the parameter vector, one per hidden layer
    slopes = net.params[net._slope_off:]
    assert slopes.shape == (1,)
    assert np.all(slopes == 0.25)
    Ws, bs, _ = net._unpack(net.params)
    X = np.array([[-2.0], [0.0], [3.0]])
    pre = X @ Ws[0].T + bs[0]
    h = np.where(pre >= 0, pre, 0.25 * pre)
    manual = (h @ Ws[1].T + bs[1])[:, 0]
    assert np.allclose(net.value(X), manual, atol=1e-14)


def test_prelu_laplacian_rejected():
    net = make_net(2, 4, 1, 3, PReLU())
    with pytest.raises(ValueError):
        net.bind(np.zeros((3, 2)), need="lap")


def test_bind_rejects_unknown_level():
    net = make_net(2, 4, 1, 3, Tanh())
    with pytest.raises(ValueError):
        net.bind(np.zeros((3, 2)), need="hessian")


def test_set_params_validates():
    net = make_net(2, 4, 1, 2, Tanh())
    with pytest.raises(ValueError):
        net.set_params(np.zeros(3))
    bad = net.params.copy()
    bad[0] = np.nan
    with pytest.raises(ValueError):
        net.set_params(bad)


def test_wrong_input_dimension_rejected():
    net = make_net(3, 4, 1, 2, Tanh())
    with pytest.raises(ValueError):
        net.value(np.zeros((5, 2)))


def test_truncated_field_vanishes_on_box_faces():
    net = make_net(2, 8, 1, 3, Tanh(), seed=6)
    f = TruncatedField(net, np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    edge = np.array([[1.0, 0.3], [-1.0, 0.9], [0.2, 1.0], [0.4, -1.0]])
    assert np.max(np.abs(f.value(edge))) == 0.0
    inside = np.array([[0.1, -0.2]])
    assert abs(f.value(inside)[0]) > 0.0


def test_truncated_field_gradient_by_finite_differences():
    net = make_net(2, 6, 1, 3, Tanh(), seed=2)
    f = TruncatedField(net, np.array([0.0, 0.0]), np.array([2.0, 2.0]))
    rng = np.random.default_rng(3)
    X = rng.uniform(0.2, 1.8, size=(6, 2))
    G = f.input_gradient(X)
    eps = 1e-6
    for k in range(2):
        dX = np.zeros_like(X)
        dX[:, k] = eps
        fd = (f.value(X + dX) - f.value(X - dX)) / (2 * eps)
        assert np.max(np.abs(G[:, k] - fd)) <= 1e-6


def test_truncated_field_has_no_laplacian():
    net = make_net(2, 4, 1, 3, Tanh())
    f = TruncatedField(net, np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        f.bind(np.full((3, 2), 0.5), need="lap")


def test_zeta_gradient_away_from_kinks():
    a = np.array([0.0, 0.0])
    b = np.array([2.0, 3.0])
    X = np.array([[0.3, 1.9], [1.7, 0.4], [0.9, 2.8]])
    g = zeta_grad(X, a, b)
    eps = 1e-7
    for k in range(2):
        dX = np.zeros_like(X)
        dX[:, k] = eps
        fd = (zeta(X + dX, a, b) - zeta(X - dX, a, b)) / (2 * eps)
        assert np.max(np.abs(g[:, k] - fd)) <= 1e-7


def test_analytic_field_handles():
    f = AnalyticField(2, lambda X: X[:, 0] ** 2 + X[:, 1],
                      lambda X: np.stack([2 * X[:, 0], np.ones(len(X))], axis=1),
                      lambda X: np.full(len(X), 2.0))
    X = np.array([[1.0, 2.0], [0.5, -1.0]])
    assert np.allclose(f.value(X), [3.0, -0.75])
    assert np.allclose(f.input_laplacian(X), 2.0)
    assert f.param_vjp(X, w_val=np.ones(2)).size == 0


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    for act in ACTIVATIONS:
        net = make_net(3, 5, 2, 3, act, seed=12)
        path = tmp_path / f"{type(act).__name__}.npdg"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.params.tobytes() == net.params.tobytes()
        assert (back.d_in, back.d_h, back.d_out, back.n_l) == (3, 5, 2, 3)
        assert type(back.activation) is type(net.activation)


def test_checkpoint_unwraps_truncation(tmp_path):
    net = make_net(2, 4, 1, 3, Tanh())
    f = TruncatedField(net, np.zeros(2), np.ones(2))
    path = tmp_path / "t.npdg"
    save_checkpoint(f, path)
    assert load_checkpoint(path).params.tobytes() == net.params.tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.npdg"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def ones_tanh_chain():
    # single tanh unit: u(x) = tanh(x)
    return Mlp(1, 1, 1, 2, Tanh(), np.array([1.0, 0.0, 1.0, 0.0]))


def test_single_unit_chain_frozen_values():
    net = ones_tanh_chain()
    assert net.value(np.array([[0.0]]))[0] == 0.0
    assert abs(net.value(np.array([[1.0]]))[0] - 0.7615941559) <= 1e-9
    assert abs(net.input_gradient(np.array([[0.0]]))[0, 0] - 1.0) <= 1e-15
    assert abs(net.input_laplacian(np.array([[0.0]]))[0]) <= 1e-15


def test_zeroed_output_layer_is_the_zero_function():
    net = make_net(2, 6, 1, 3, Tanh(), seed=5)
    p = net.params.copy()
    w_sl, b_sl = net._slices[-1]
    p[w_sl] = 0.0
    p[b_sl] = 0.0
    z = net.with_params(p)
    X = np.random.default_rng(0).uniform(-2, 2, size=(40, 2))
    assert np.all(z.value(X) == 0.0)


def test_softplus_gradient_fd_tight():
    net = make_net(3, 8, 1, 3, Softplus(beta=0.25), seed=13)
    rng = np.random.default_rng(14)
    X = rng.uniform(-1, 1, size=(8, 3))
    G = net.input_gradient(X)
    h = 1e-5
    for k in range(3):
        dX = np.zeros_like(X)
        dX[:, k] = h
        fd = (net.value(X + dX) - net.value(X - dX)) / (2 * h)
        denom = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(G[:, k] - fd) / denom) <= 1e-6


def test_tanh_laplacian_vs_five_point_stencil():
    net = make_net(2, 6, 1, 3, Tanh(), seed=15)
    rng = np.random.default_rng(16)
    X = rng.uniform(-1, 1, size=(6, 2))
    lap = net.input_laplacian(X)
    h = 1e-3
    acc = np.zeros(6)
    for k in range(2):
        dX = np.zeros_like(X)
        dX[:, k] = h
        acc += (-net.value(X + 2 * dX) + 16 * net.value(X + dX)
                - 30 * net.value(X) + 16 * net.value(X - dX)
                - net.value(X - 2 * dX)) / (12 * h**2)
    denom = np.maximum(np.abs(acc), 1e-6)
    assert np.max(np.abs(lap - acc) / denom) <= 1e-4


def test_truncation_gradient_on_the_face_is_base_times_cutoff_gradient():
    net = make_net(2, 6, 1, 3, Tanh(), seed=17)
    a, b = np.zeros(2), np.ones(2)
    f = TruncatedField(net, a, b)
    X = np.array([[0.0, 0.5]])
    assert f.value(X)[0] == 0.0
    want = net.value(X)[0] * zeta_grad(X, a, b)[0]
    assert np.allclose(f.input_gradient(X)[0], want, atol=1e-14)


def test_zero_cotangents_give_zero_vjp():
    net = make_net(2, 5, 1, 3, Softplus(), seed=18)
    X = np.random.default_rng(19).uniform(-1, 1, (5, 2))
    g = net.param_vjp(X, w_val=np.zeros(5), w_grad=np.zeros((5, 2)))
    assert np.all(g == 0.0)


def test_zero_direction_gives_zero_jvp():
    net = make_net(2, 5, 1, 3, Tanh(), seed=20)
    X = np.random.default_rng(21).uniform(-1, 1, (5, 2))
    tv, tg = net.bind(X, need="grad").jvp(np.zeros(net.n_params))
    assert np.all(tv == 0.0) and np.all(tg == 0.0)


def test_jvp_is_homogeneous():
    net = make_net(2, 5, 1, 3, PReLU(), seed=22)
    rng = np.random.default_rng(23)
    X = rng.uniform(-1, 1, (5, 2))
    v = rng.standard_normal(net.n_params)
    tr = net.bind(X, need="grad")
    a1, g1 = tr.jvp(v)
    a2, g2 = tr.jvp(2 * v)
    assert np.max(np.abs(a2 - 2 * a1)) <= 1e-14 * max(1.0, np.max(np.abs(a1)))
    assert np.max(np.abs(g2 - 2 * g1)) <= 1e-14 * max(1.0, np.max(np.abs(g1)))


def test_forward_and_reverse_jacobians_agree_entrywise():
    # column k from jvp(e_k) against row i from vjp(e_i): two independent
    # code paths assembling the same Jacobian
    net = make_net(2, 3, 1, 2, Tanh(), seed=24)
    X = np.random.default_rng(25).uniform(-1, 1, (4, 2))
    tr = net.bind(X, need="value")
    m = net.n_params
    J_fwd = np.empty((4, m))
    for k in range(m):
        e = np.zeros(m)
        e[k] = 1.0
        J_fwd[:, k], _ = tr.jvp(e, need_grad=False)
    J_rev = np.empty((4, m))
    for i in range(4):
        w = np.zeros(4)
        w[i] = 1.0
        J_rev[i] = tr.vjp(w_val=w)
    scale = np.max(np.abs(J_fwd)) + 1e-30
    assert np.max(np.abs(J_fwd - J_rev)) <= 1e-10 * scale


def test_init_is_deterministic_and_seed_sensitive():
    act = Tanh()
    a = init_params(3, 16, 1, 3, act, np.random.default_rng(42))
    b = init_params(3, 16, 1, 3, act, np.random.default_rng(42))
    assert a.tobytes() == b.tobytes()
    differing = 0
    total = 0
    for s in range(10):
        p = init_params(3, 16, 1, 3, act, np.random.default_rng(s))
        q = init_params(3, 16, 1, 3, act, np.random.default_rng(s + 100))
        differing += int(np.sum(p != q))
        total += p.size
    assert differing >= 0.99 * total


def test_parameter_counts_frozen():
    assert param_count(2, 8, 1, 3, Tanh()) == 105
    assert param_count(10, 256, 1, 4, Tanh()) == 134657
    assert param_count(1, 1, 1, 2, Tanh()) == 4
    # PReLU adds one slope per hidden layer
    assert param_count(2, 8, 1, 3, PReLU()) == 107


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(2, 4),
       st.integers(0, 2), st.integers(0, 2**31 - 1))
def test_adjoint_identity_property(d_in, d_h, n_l, act_idx, seed):
    act = [Tanh(), Softplus(beta=0.5), PReLU()][act_idx]
    rng = np.random.default_rng(seed)
    p = init_params(d_in, d_h, 1, n_l, act, rng)
    net = Mlp(d_in, d_h, 1, n_l, act, p)
    X = rng.uniform(-1, 1, size=(4, d_in))
    tr = net.bind(X, need="grad")
    v = rng.standard_normal(net.n_params)
    w_val = rng.standard_normal(4)
    w_grad = rng.standard_normal((4, d_in))
    jv_val, jv_grad = tr.jvp(v)
    lhs = float(jv_val @ w_val) + float(np.sum(jv_grad * w_grad))
    rhs = float(v @ tr.vjp(w_val=w_val, w_grad=w_grad))
    assert abs(lhs - rhs) <= 1e-11 * max(abs(lhs), abs(rhs), 1.0)
