"""Shared fixtures for the test suite: tiny problem family instances and an
explicit dense route for Gram operators, used to cross-check the matvec
implementations."""

import numpy as np

import npdg.driver as driver
import npdg.problems as prob
from npdg.fields import Mlp, PReLU, Softplus, Tanh, TruncatedField, init_params
from npdg.sampling import Rng


def fresh(d_in, d_h, d_out, n_l, act, seed):
    rng = np.random.default_rng(seed)
    return Mlp(d_in, d_h, d_out, n_l, act,
               init_params(d_in, d_h, d_out, n_l, act, rng))


def mixture_1d():
    return {"type": "mixture", "weights": [2 / 3, 1 / 3],
            "means": [-1.0, 1.0], "sigmas": [0.5, 0.5]}


def gauss_1d():
    return {"type": "gaussian", "mean": 0.0, "cov": 1.0}


def family(kind, seed=0, n_in=60, n_bdd=16):
    """(spec, u, phi, psi, batch) at unit-test scale for one family."""
    if kind == "poisson":
        spec = prob.poisson_spec(2)
        u = fresh(2, 6, 1, 3, Tanh(), seed)
        phi = TruncatedField(fresh(2, 6, 1, 3, Tanh(), seed + 1),
                             spec.domain.a, spec.domain.b)
        psi = fresh(2, 4, 1, 3, Tanh(), seed + 2)
    elif kind == "varcoeff":
        spec = prob.varcoeff_spec(2)
        u = fresh(2, 6, 1, 3, Softplus(beta=0.25), seed)
        phi = TruncatedField(fresh(2, 6, 1, 3, Softplus(beta=0.25), seed + 1),
                             spec.domain.a, spec.domain.b)
        psi = fresh(2, 4, 1, 3, Softplus(beta=0.25), seed + 2)
    elif kind == "nonlinear_elliptic":
        spec = prob.nle_spec(5)
        u = fresh(5, 6, 1, 3, Tanh(), seed)
        phi = fresh(5, 6, 1, 3, Tanh(), seed + 1)
        psi = fresh(5, 4, 1, 3, Tanh(), seed + 2)
    elif kind == "allen_cahn_step":
        u_prev = driver.allen_cahn_initial_field(1)
        spec = prob.allen_cahn_spec(u_prev, d=1)
        u = fresh(1, 6, 1, 3, Tanh(), seed)
        phi = TruncatedField(fresh(1, 6, 1, 3, Tanh(), seed + 1),
                             spec.domain.a, spec.domain.b)
        psi = fresh(1, 4, 1, 3, Tanh(), seed + 2)
    elif kind == "ot":
        spec = prob.ot_spec(1, gauss_1d(), mixture_1d())
        u = fresh(1, 8, 1, 3, PReLU(), seed)
        phi = fresh(1, 8, 1, 3, PReLU(), seed + 1)
        psi = None
    else:
        raise ValueError(kind)
    batch = prob.draw_batch(spec, n_in, n_bdd if spec.kind != "ot" else 0,
                            Rng(100 + seed).split("unit"))
    return spec, u, phi, psi, batch


def jacobian_values(field, X):
    """Dense Jacobian of field values at X, one tangent basis vector at a
    time: rows are samples (times output components), columns parameters."""
    tr = field.bind(X, need="value")
    m = field.n_params
    cols = []
    for k in range(m):
        e = np.zeros(m)
        e[k] = 1.0
        tv, _ = tr.jvp(e, need_grad=False)
        cols.append(np.asarray(tv).reshape(-1))
    return np.stack(cols, axis=1)


def jacobian_gradients(field, X):
    """Dense Jacobian of field input-gradients at X, flattened over (sample,
    coordinate)."""
    tr = field.bind(X, need="grad")
    m = field.n_params
    cols = []
    for k in range(m):
        e = np.zeros(m)
        e[k] = 1.0
        _, tg = tr.jvp(e)
        cols.append(np.asarray(tg).reshape(-1))
    return np.stack(cols, axis=1)


def explicit_gram(spec, role, field, batch, ot_map=None):
    """Dense JᵀWJ assembly of the named Gram operator from its definition,
    bypassing the matvec plumbing entirely."""
    lam = spec.lam

    def stack_blocks(X, n):
        c_val, c_grad = prob._pde_stack(spec)
        M = np.zeros((field.n_params, field.n_params))
        if c_val:
            J = jacobian_values(field, X)
            M += (c_val / n) * (J.T @ J)
        if c_grad:
            Jg = jacobian_gradients(field, X)
            M += (c_grad / n) * (Jg.T @ Jg)
        return M

    if role == "primal":
        X, Y = batch.interior, batch.boundary
        n, m = X.shape[0], Y.shape[0]
        M = stack_blocks(X, n)
        if spec.kind == "allen_cahn_step" and spec.precond_op != "id":
            Jg = jacobian_gradients(field, Y).reshape(m, Y.shape[1], -1)
            Jn = np.einsum("ijk,ij->ik", Jg, batch.boundary_normals)
            M += (lam / m) * (Jn.T @ Jn)
        else:
            Jb = jacobian_values(field, Y)
            M += (lam / m) * (Jb.T @ Jb)
        return M
    if role == "dual":
        X = batch.interior
        return stack_blocks(X, X.shape[0])
    if role == "boundary":
        Y = batch.boundary
        J = jacobian_values(field, Y)
        return (lam / Y.shape[0]) * (J.T @ J)
    if role == "ot_map":
        X = batch.source
        J = jacobian_values(field, X)
        return (1.0 / X.shape[0]) * (J.T @ J)
    if role == "ot_potential":
        Z = prob._as_points(ot_map.value(batch.source))
        n = Z.shape[0]
        if spec.ot_precond == "identity_both":
            J = jacobian_values(field, Z)
        else:
            J = jacobian_gradients(field, Z)
        return (1.0 / n) * (J.T @ J)
    raise ValueError(role)
