import dataclasses
import math

import numpy as np
import pytest

import npdg.problems as prob
from npdg.fields import AnalyticField, Mlp, Tanh
from npdg.krylov import assemble_dense
from npdg.sampling import Rng

from helpers import explicit_gram, family, fresh, gauss_1d, mixture_1d

KINDS = ["poisson", "varcoeff", "nonlinear_elliptic", "allen_cahn_step", "ot"]


def zero_field(d):
    return AnalyticField(d, lambda X: np.zeros(len(X)),
                         lambda X: np.zeros((len(X), d)),
                         lambda X: np.zeros(len(X)))


def directional_fd(f, x0, v, h=1e-6):
    return (f(x0 + h * v) - f(x0 - h * v)) / (2 * h)


@pytest.mark.parametrize("kind", KINDS)
def test_dual_gradient_matches_loss_derivative(kind):
    spec, u, phi, psi, batch = family(kind)
    w_phi, w_psi = prob.grad_dual(spec, u, phi, psi, batch)
    rng = np.random.default_rng(1)

    v = rng.standard_normal(phi.n_params)
    fd = directional_fd(
        lambda e: prob.loss_value(spec, u, phi.with_params(e), psi, batch),
        phi.params, v)
    got = float(v @ w_phi)
    assert abs(got - fd) <= 1e-5 * max(abs(fd), 1e-3)

    if psi is not None:
        v = rng.standard_normal(psi.n_params)
        fd = directional_fd(
            lambda e: prob.loss_value(spec, u, phi, psi.with_params(e), batch),
            psi.params, v)
        got = float(v @ w_psi)
        assert abs(got - fd) <= 1e-5 * max(abs(fd), 1e-3)
    else:
        assert w_psi.size == 0


@pytest.mark.parametrize("kind", KINDS)
def test_primal_gradient_matches_loss_derivative(kind):
    spec, u, phi, psi, batch = family(kind)
    w_u = prob.grad_primal(spec, u, phi, psi, batch)
    v = np.random.default_rng(2).standard_normal(u.n_params)
    fd = directional_fd(
        lambda t: prob.loss_value(spec, u.with_params(t), phi, psi, batch),
        u.params, v)
    got = float(v @ w_u)
    assert abs(got - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_loss_is_zero_when_both_duals_vanish():
    spec = prob.poisson_spec(2, augment_boundary=False)
    _, u, _, _, batch = family("poisson")
    z = zero_field(2)
    assert prob.loss_value(spec, u, z, z, batch) == 0.0


def test_augmentation_term_is_the_only_dual_free_piece():
    spec = prob.poisson_spec(2, augment_boundary=True)
    _, u, _, _, batch = family("poisson")
    z = zero_field(2)
    got = prob.loss_value(spec, u, z, z, batch)
    res = u.value(batch.boundary) - spec.g(batch.boundary)
    assert abs(got - spec.lam * np.mean(res ** 2)) <= 1e-12 * max(1.0, abs(got))


def test_loss_at_exact_solution_is_dual_energy_up_to_mc_noise():
    spec = prob.poisson_spec(2)
    _, _, phi, psi, _ = family("poisson", seed=5)
    batch = prob.draw_batch(spec, 4000, 400, Rng(6).split("mc"))
    ex = prob.exact_solution(spec)
    loss = prob.loss_value(spec, ex.u, phi, psi, batch)
    X = batch.interior
    gp = phi.input_gradient(X)
    pv = psi.value(batch.boundary)
    energy = -0.5 * spec.eps * (np.mean(np.sum(gp * gp, axis=1))
                                + spec.lam * np.mean(pv ** 2))
    # the gap is the Monte-Carlo mean of the weak-form integrand at u*,
    # which vanishes in expectation
    integrand = (np.sum(ex.u.input_gradient(X) * gp, axis=1)
                 - spec.f(X) * phi.value(X))
    sigma = float(np.std(integrand) / math.sqrt(X.shape[0]))
    assert loss <= 0.0 + 4 * sigma
    assert abs(loss - energy) <= 4 * sigma + 1e-12


def test_stationary_duals_have_zero_gradient():
    # zero data, zero primal, eps=0: both dual gradients vanish identically
    base = prob.poisson_spec(2, eps=0.0, augment_boundary=False)
    spec = dataclasses.replace(base, f=lambda X: np.zeros(len(X)),
                               g=lambda X: np.zeros(len(X)))
    _, _, phi, psi, batch = family("poisson")
    u0 = zero_field(2)
    w_phi, w_psi = prob.grad_dual(spec, u0, phi, psi, batch)
    assert np.all(w_phi == 0.0)
    assert np.all(w_psi == 0.0)


def test_boundary_dual_gradient_linear_in_lambda():
    spec5 = prob.poisson_spec(2, lam=5.0, eps=0.0)
    spec10 = prob.poisson_spec(2, lam=10.0, eps=0.0)
    _, u, phi, psi, batch = family("poisson")
    _, w5 = prob.grad_dual(spec5, u, phi, psi, batch)
    _, w10 = prob.grad_dual(spec10, u, phi, psi, batch)
    assert np.array_equal(w10, 2.0 * w5)


def test_primal_gradient_zero_when_extrapolated_duals_vanish():
    spec = prob.poisson_spec(2, augment_boundary=False)
    _, u, _, _, batch = family("poisson")
    z = zero_field(2)
    w = prob.grad_primal(spec, u, z, z, batch)
    assert np.all(w == 0.0)


def test_nonlinear_term_off_reduces_to_poisson_formulas():
    # with the quadratic coefficient zeroed and V = -f the nonlinear family
    # must produce the poisson gradients term for term, on the same batch
    nle = prob.nle_spec(5, eps=0.0, augment_boundary=False)
    f = lambda X: np.sin(X[:, 0]) + X[:, 1] ** 2
    nle0 = dataclasses.replace(nle, nle_c=0.0, V=lambda X: -f(X))
    pois = dataclasses.replace(
        prob.poisson_spec(5, eps=0.0, augment_boundary=False),
        f=f, g=nle.g)
    _, u, phi, psi, _ = family("nonlinear_elliptic")
    batch = prob.draw_batch(nle, 50, 12, Rng(7).split("cmp"))
    wp_a, ws_a = prob.grad_dual(nle0, u, phi, psi, batch)
    wp_b, ws_b = prob.grad_dual(pois, u, phi, psi, batch)
    assert np.allclose(wp_a, wp_b, atol=1e-14)
    assert np.allclose(ws_a, ws_b, atol=1e-14)
    ga = prob.grad_primal(nle0, u, phi, psi, batch)
    gb = prob.grad_primal(pois, u, phi, psi, batch)
    assert np.allclose(ga, gb, atol=1e-14)


def test_ot_loss_identity_map_zero_potential():
    spec = prob.ot_spec(1, gauss_1d(), gauss_1d())
    batch = prob.draw_batch(spec, 200, 0, Rng(8).split("ot"))
    ident = AnalyticField(1, lambda X: X[:, 0],
                          lambda X: np.ones((len(X), 1)))
    assert prob.loss_value(spec, ident, zero_field(1), None, batch) == 0.0


def test_ot_loss_matches_hand_computation():
    spec, u, phi, _, batch = family("ot")
    got = prob.loss_value(spec, u, phi, None, batch)
    X, Y = batch.source, batch.target
    TX = u.value(X)[:, None] if u.value(X).ndim == 1 else u.value(X)
    want = float(np.mean(0.5 * np.sum((X - TX) ** 2, axis=1) + phi.value(TX))
                 - np.mean(phi.value(Y)))
    assert abs(got - want) <= 1e-14 * max(1.0, abs(want))


def test_poisoned_loss_raises_with_offending_sample():
    spec, u, phi, psi, batch = family("poisson")
    bad = AnalyticField(2, lambda X: np.full(len(X), np.nan),
                        lambda X: np.zeros((len(X), 2)))
    with pytest.raises(prob.PoisonedLossError):
        prob.loss_value(spec, bad, phi, psi, batch)


# -- Gram operators against dense assembly ---------------------------------


def gram_pair(kind, role):
    spec, u, phi, psi, batch = family(kind, n_in=30, n_bdd=10)
    if role == "primal":
        op = prob.gram_primal(spec, u, batch)
        dense = explicit_gram(spec, "primal", u, batch)
    elif role == "dual":
        op = prob.gram_dual(spec, phi, batch)
        dense = explicit_gram(spec, "dual", phi, batch)
    elif role == "boundary":
        op = prob.gram_bdd(spec, psi, batch)
        dense = explicit_gram(spec, "boundary", psi, batch)
    return op, dense


@pytest.mark.parametrize("kind,role", [
    ("poisson", "primal"), ("poisson", "dual"), ("poisson", "boundary"),
    ("varcoeff", "primal"), ("allen_cahn_step", "primal"),
    ("allen_cahn_step", "dual"),
])
def test_gram_matches_dense_assembly(kind, role):
    op, dense = gram_pair(kind, role)
    got = assemble_dense(op)
    scale = np.max(np.abs(dense)) + 1e-30
    assert np.max(np.abs(got - dense)) <= 1e-10 * scale


@pytest.mark.parametrize("variant", ["identity_both", "grad_potential"])
def test_ot_potential_gram_matches_dense_assembly(variant):
    spec, u, phi, _, batch = family("ot", n_in=30)
    spec = dataclasses.replace(spec, ot_precond=variant)
    op = prob.ot_gram_potential(spec, phi, u, batch)
    dense = explicit_gram(spec, "ot_potential", phi, batch, ot_map=u)
    got = assemble_dense(op)
    scale = np.max(np.abs(dense)) + 1e-30
    assert np.max(np.abs(got - dense)) <= 1e-10 * scale


def test_ot_map_gram_matches_dense_assembly():
    spec, u, _, _, batch = family("ot", n_in=30)
    op = prob.gram_primal(spec, u, batch)
    dense = explicit_gram(spec, "ot_map", u, batch)
    got = assemble_dense(op)
    scale = np.max(np.abs(dense)) + 1e-30
    assert np.max(np.abs(got - dense)) <= 1e-10 * scale


def test_gram_identity_preconditioner_swaps_stack():
    spec = prob.poisson_spec(2, precond_op="id")
    _, u, _, _, batch = family("poisson", n_in=30, n_bdd=10)
    op = prob.gram_primal(spec, u, batch)
    dense = explicit_gram(spec, "primal", u, batch)
    assert np.max(np.abs(assemble_dense(op) - dense)) <= 1e-10 * np.max(np.abs(dense))


def test_gram_psd_and_zero():
    spec, u, phi, psi, batch = family("poisson", n_in=30, n_bdd=10)
    rng = np.random.default_rng(9)
    for op in (prob.gram_primal(spec, u, batch),
               prob.gram_dual(spec, phi, batch),
               prob.gram_bdd(spec, psi, batch)):
        assert np.all(op.apply(np.zeros(op.dim)) == 0.0)
        for _ in range(20):
            v = rng.standard_normal(op.dim)
            assert v @ op.apply(v) >= -1e-12


def test_ot_potential_gram_rejects_pde_spec():
    spec, u, phi, psi, batch = family("poisson")
    with pytest.raises(ValueError):
        prob.ot_gram_potential(spec, phi, u, batch)


# -- exact solutions -------------------------------------------------------


@pytest.mark.parametrize("kind,d", [
    ("poisson", 2), ("poisson", 5), ("varcoeff", 10), ("nonlinear_elliptic", 5),
])
def test_exact_solution_satisfies_its_pde(kind, d):
    if kind == "poisson":
        spec = prob.poisson_spec(d)
    elif kind == "varcoeff":
        spec = prob.varcoeff_spec(d)
    else:
        spec = prob.nle_spec(d)
    ex = prob.exact_solution(spec)
    batch = prob.draw_batch(spec, 200, 50, Rng(10).split("pde"))
    X = batch.interior
    if kind == "poisson":
        resid = -ex.u.input_laplacian(X) - spec.f(X)
    elif kind == "varcoeff":
        # -div(kappa grad u) = -kappa lap u - grad kappa . grad u
        resid = (-spec.kappa(X) * ex.u.input_laplacian(X)
                 - np.sum(spec.kappa_grad(X) * ex.u.input_gradient(X), axis=1)
                 - spec.f(X))
    else:
        gu = ex.u.input_gradient(X)
        r = np.linalg.norm(X, axis=1)
        hp = math.pi / 2
        lap = -hp * hp * np.cos(hp * r) - hp * (d - 1) * np.sin(hp * r) / r
        resid = -lap + 0.5 * spec.nle_c * np.sum(gu * gu, axis=1) + spec.V(X)
    assert np.max(np.abs(resid)) <= 1e-8
    # boundary data matches the trace
    bdd = ex.u.value(batch.boundary) - spec.g(batch.boundary)
    assert np.max(np.abs(bdd)) <= 1e-12


def test_exact_gradient_handle_consistent():
    spec = prob.poisson_spec(3)
    ex = prob.exact_solution(spec)
    X = Rng(11).split("g").uniform(-1, 1, size=(20, 3))
    G = ex.u.input_gradient(X)
    h = 1e-6
    for k in range(3):
        dX = np.zeros_like(X)
        dX[:, k] = h
        fd = (ex.u.value(X + dX) - ex.u.value(X - dX)) / (2 * h)
        assert np.max(np.abs(G[:, k] - fd)) <= 1e-8


def test_poisson_exact_gradient_at_origin():
    spec = prob.poisson_spec(4)
    ex = prob.exact_solution(spec)
    g = ex.u.input_gradient(np.zeros((1, 4)))[0]
    assert np.allclose(g, math.pi / 2, atol=1e-14)


def test_reference_norms_frozen_values():
    assert abs(prob.exact_solution(prob.poisson_spec(10)).norm_l2 - 6.4402) <= 5e-4
    assert abs(prob.exact_solution(prob.poisson_spec(10)).norm_h1grad - 3.5124) <= 5e-4


def test_relative_error_of_zeroed_network_is_one():
    spec = prob.poisson_spec(2)
    net = fresh(2, 6, 1, 3, Tanh(), 3)
    p = net.params.copy()
    w_sl, b_sl = net._slices[-1]
    p[w_sl] = 0.0
    p[b_sl] = 0.0
    z = net.with_params(p)
    eval_batch = prob.draw_eval_batch(spec, 20000, Rng(12).split("e"))
    assert abs(prob.relative_l2_error(spec, z, eval_batch) - 1.0) <= 1e-12
    assert abs(prob.relative_h1_error(spec, z, eval_batch) - 1.0) <= 1e-12


def test_relative_error_of_exact_solution_is_zero():
    spec = prob.poisson_spec(2)
    ex = prob.exact_solution(spec)
    eval_batch = prob.draw_eval_batch(spec, 5000, Rng(13).split("e"))
    assert prob.relative_l2_error(spec, ex.u, eval_batch) <= 1e-12


def test_measure_validation():
    with pytest.raises(ValueError):
        prob.draw_measure({"type": "nope"}, 1, 10, Rng(0).split("m"))
