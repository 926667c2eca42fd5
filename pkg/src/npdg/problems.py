"""The variational problem families.

Each family contributes the same four services: the Monte-Carlo loss, its
exact parameter gradients for the dual and primal networks, and the
matrix-free Gram operators that precondition those gradients. The sampled
loss is the single source of truth; gradients and Gram matvecs are exact
derivatives of it, built from the same per-sample Jacobian pairings with the
same 1/N_in and lambda/N_bdd weights. That discipline is what makes the
natural-gradient residual orthogonal to the parameter tangent space in
floating point, not just on paper.

Families:

- poisson: -Lap u = f on a box, Dirichlet data g.
- varcoeff: -div(kappa grad u) = f, kappa(x) = (x^T Lambda x + 1)/2.
- nonlinear_elliptic: -Lap u + c/2 |grad u|^2 + V = 0 on a ball, zero data.
- allen_cahn_step: one implicit time step of the Allen-Cahn flow with
  homogeneous Neumann data, plus a pointwise-residual regularizer.
- ot: the L2 optimal-transport saddle over a map T and a potential phi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import sampling
from .fields import AnalyticField
from .krylov import SymmetricOperator

__all__ = [
    "Box",
    "Ball",
    "FreeSpace",
    "ProblemSpec",
    "PoisonedLossError",
    "GramOperator",
    "ExactSolution",
    "poisson_spec",
    "varcoeff_spec",
    "nle_spec",
    "allen_cahn_spec",
    "ot_spec",
    "draw_batch",
    "draw_eval_batch",
    "loss_value",
    "grad_dual",
    "grad_primal",
    "gram_primal",
    "gram_dual",
    "gram_bdd",
    "ot_gram_map",
    "ot_gram_potential",
    "exact_solution",
    "relative_l2_error",
    "relative_h1_error",
]


def _as_points(vals):
    """Map outputs as a point cloud: scalar-output maps give (n,) values."""
    vals = np.asarray(vals)
    return vals[:, None] if vals.ndim == 1 else vals


class PoisonedLossError(ValueError):
    """A loss evaluation produced a non-finite number.

    Carries the first offending sample point when one can be identified.
    """

    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


@dataclass
class Box:
    a: np.ndarray
    b: np.ndarray


@dataclass
class Ball:
    R: float


@dataclass
class FreeSpace:
    pass


@dataclass
class ProblemSpec:
    """Static description of one variational problem.

    Only the fields relevant to ``kind`` are populated; the factory functions
    below are the intended constructors. ``precond_op`` switches the PDE Gram
    stacks between the proper first-order preconditioner ("grad") and the
    value-Gram misuse ("id") used by the ablation study.
    """

    kind: str
    d: int
    domain: object
    lam: float = 10.0
    eps: float = 1.0
    augment_boundary: bool = True
    precond_op: str = "grad"
    f: object = None
    g: object = None
    kappa: object = None
    kappa_grad: object = None
    Lam_diag: np.ndarray = None
    nle_c: float = 0.0
    V: object = None
    eps0: float = 0.1
    h_t: float = 0.1
    u_prev: object = None
    pinn_coeff: float = 1.0
    ot_precond: str = "identity_both"
    source: dict = None
    target: dict = None
    ball_mode: str = "paper_recipe"

    # Allen-Cahn linearization constants around ubar = 1 (W''(1) = 2)
    @property
    def ac_a(self):
        return 1.0 + 2.0 * self.h_t / self.eps0

    @property
    def ac_b(self):
        return self.eps0 * self.h_t


# -- factories -------------------------------------------------------------


def poisson_spec(d, lam=10.0, eps=1.0, augment_boundary=True, precond_op="grad"):
    """-Lap u = f on [0,1]^d with u* = sum_k sin(pi x_k / 2)."""
    half_pi = math.pi / 2.0

    def f(X):
        return (math.pi ** 2 / 4.0) * np.sin(half_pi * X).sum(axis=1)

    def g(X):
        return np.sin(half_pi * X).sum(axis=1)

    return ProblemSpec(
        kind="poisson", d=d, domain=Box(np.zeros(d), np.ones(d)),
        lam=lam, eps=eps, augment_boundary=augment_boundary,
        precond_op=precond_op, f=f, g=g,
    )


def _varcoeff_lambda(d):
    return np.array([1.0 if k % 2 == 0 else 4.0 for k in range(d)])


def varcoeff_spec(d, lam=10.0, eps=1.0, augment_boundary=True, precond_op="grad"):
    """-div(kappa grad u) = f on [-1,1]^d, kappa = (x^T Lambda x + 1)/2.

    Lambda = diag(1, 4, 1, 4, ...) and u* = x^T Lambda^{-1} x / 2.
    """
    Lam = _varcoeff_lambda(d)
    inv = 1.0 / Lam
    trace_inv = inv.sum()

    def kappa(X):
        return (np.sum(Lam * X * X, axis=1) + 1.0) / 2.0

    def kappa_grad(X):
        return Lam * X

    def f(X):
        quad = np.sum(Lam * X * X, axis=1)
        return -np.sum(X * X, axis=1) - 0.5 * trace_inv * (quad + 1.0)

    def g(X):
        return 0.5 * np.sum(inv * X * X, axis=1)

    return ProblemSpec(
        kind="varcoeff", d=d, domain=Box(-np.ones(d), np.ones(d)),
        lam=lam, eps=eps, augment_boundary=augment_boundary,
        precond_op=precond_op, f=f, g=g,
        kappa=kappa, kappa_grad=kappa_grad, Lam_diag=Lam,
    )


def nle_spec(d=5, variant="main", R=3.0, lam=10.0, eps=1.0,
             augment_boundary=True, precond_op="grad", ball_mode="paper_recipe"):
    """-Lap u + c/2 |grad u|^2 + V = 0 on the ball B(0, R), zero data.

    u* = cos(pi r / 2); variant 'main' has c = 1, variant 'mild' c = -0.1.
    V is chosen so that u* solves the equation exactly.
    """
    if variant == "main":
        c = 1.0
    elif variant == "mild":
        c = -0.1
    else:
        raise ValueError(f"unknown variant {variant!r}")
    half_pi = math.pi / 2.0

    def sinc_half(r):
        # sin(pi r / 2) / r, finite at r = 0
        out = np.full_like(r, half_pi)
        nz = r > 1e-12
        out[nz] = np.sin(half_pi * r[nz]) / r[nz]
        return out

    def V(X):
        r = np.linalg.norm(X, axis=1)
        s = np.sin(half_pi * r)
        return (-(math.pi ** 2 / 4.0) * np.cos(half_pi * r)
                - half_pi * (d - 1) * sinc_half(r)
                - c * (math.pi ** 2 / 8.0) * s * s)

    def g(X):
        return np.zeros(X.shape[0])

    return ProblemSpec(
        kind="nonlinear_elliptic", d=d, domain=Ball(R),
        lam=lam, eps=eps, augment_boundary=augment_boundary,
        precond_op=precond_op, g=g, nle_c=c, V=V, ball_mode=ball_mode,
    )


def allen_cahn_spec(u_prev, d=1, box=(0.0, 2.0), h_t=0.1, eps0=0.1,
                    lam=10.0, eps=1.0, pinn_coeff=1.0, precond_op="grad"):
    """One implicit Allen-Cahn step: u - eps0 h_t Lap u + (h_t/eps0)(u^3 - u)
    = u_prev, homogeneous Neumann data. ``u_prev`` is any field handle."""
    lo, hi = box
    a = np.full(d, float(lo))
    b = np.full(d, float(hi))
    return ProblemSpec(
        kind="allen_cahn_step", d=d, domain=Box(a, b),
        lam=lam, eps=eps, augment_boundary=False, precond_op=precond_op,
        eps0=eps0, h_t=h_t, u_prev=u_prev, pinn_coeff=pinn_coeff,
    )


def ot_spec(d, source, target, precond="identity_both"):
    """L2 optimal transport from ``source`` to ``target``.

    The measures are descriptor dicts: {'type': 'standard_normal'},
    {'type': 'gaussian', 'mean': ..., 'cov': ...} or
    {'type': 'mixture', 'weights': ..., 'means': ..., 'sigmas': ...}.
    """
    if precond not in ("identity_both", "grad_potential"):
        raise ValueError(f"unknown OT preconditioner {precond!r}")
    return ProblemSpec(
        kind="ot", d=d, domain=FreeSpace(), lam=0.0, eps=0.0,
        augment_boundary=False, ot_precond=precond,
        source=source, target=target,
    )


# -- sampling --------------------------------------------------------------


def draw_measure(measure: dict, d, N, rng):
    kind = measure["type"]
    if kind == "standard_normal":
        return sampling.sample_gaussian(np.zeros(d), np.eye(d), N, rng)
    if kind == "gaussian":
        return sampling.sample_gaussian(measure["mean"], measure["cov"], N, rng)
    if kind == "mixture":
        return sampling.sample_mixed_gaussian(
            measure["weights"], measure["means"], measure["sigmas"], N, rng)
    raise ValueError(f"unknown measure type {kind!r}")


def draw_batch(spec: ProblemSpec, n_in, n_bdd, rng: sampling.Rng) -> sampling.SampleBatch:
    """Draw one training batch for the problem.

    The same batch must feed the loss, both gradients and all Gram operators
    of one optimizer step.
    """
    if spec.kind == "ot":
        X = draw_measure(spec.source, spec.d, n_in, rng.split("source"))
        Y = draw_measure(spec.target, spec.d, n_in, rng.split("target"))
        return sampling.SampleBatch(source=X, target=Y,
                                    measures={"source": spec.source["type"],
                                              "target": spec.target["type"]})
    if isinstance(spec.domain, Box):
        a, b = spec.domain.a, spec.domain.b
        X = sampling.sample_box_interior(spec.d, a, b, n_in, rng.split("interior"))
        if spec.kind == "allen_cahn_step" and spec.d == 1:
            # one atom per endpoint, matching the two-point boundary measure
            reps = (n_bdd + 1) // 2
            Y = np.tile(np.array([[a[0]], [b[0]]]), (reps, 1))[:n_bdd]
            nrm = np.tile(np.array([[-1.0], [1.0]]), (reps, 1))[:n_bdd]
        else:
            Y = sampling.sample_box_boundary(spec.d, a, b, n_bdd, rng.split("boundary"))
            nrm = sampling.box_boundary_normals(Y, a, b)
        return sampling.SampleBatch(interior=X, boundary=Y, boundary_normals=nrm,
                                    measures={"interior": "uniform", "boundary": "uniform"})
    if isinstance(spec.domain, Ball):
        R = spec.domain.R
        X = sampling.sample_ball(spec.d, R, n_in, rng.split("interior"), mode=spec.ball_mode)
        Y = sampling.sample_sphere(spec.d, R, n_bdd, rng.split("boundary"))
        return sampling.SampleBatch(interior=X, boundary=Y, boundary_normals=Y / R,
                                    measures={"interior": spec.ball_mode, "boundary": "uniform"})
    raise ValueError(f"cannot sample domain {spec.domain!r}")


def draw_eval_batch(spec: ProblemSpec, n_eval, rng: sampling.Rng) -> sampling.SampleBatch:
    """Evaluation stream. Ball domains always use the exact uniform measure
    here, which is the measure the stored solution norms refer to."""
    if isinstance(spec.domain, Ball):
        R = spec.domain.R
        X = sampling.sample_ball(spec.d, R, n_eval, rng.split("interior"), mode="exact_uniform")
        return sampling.SampleBatch(interior=X, measures={"interior": "exact_uniform"})
    if spec.kind == "ot":
        X = draw_measure(spec.source, spec.d, n_eval, rng.split("source"))
        return sampling.SampleBatch(source=X, measures={"source": spec.source["type"]})
    a, b = spec.domain.a, spec.domain.b
    X = sampling.sample_box_interior(spec.d, a, b, n_eval, rng.split("interior"))
    return sampling.SampleBatch(interior=X, measures={"interior": "uniform"})


# -- loss ------------------------------------------------------------------


def _require_finite(arr, points, what):
    arr = np.asarray(arr)
    if np.all(np.isfinite(arr)):
        return
    flat_bad = np.argwhere(~np.isfinite(arr))
    idx = int(flat_bad[0][0])
    sample = None if points is None else points[idx]
    raise PoisonedLossError(f"non-finite {what} during loss evaluation", sample=sample)


def _interior_pairing(spec, u, phi, X):
    """Per-sample integrand of the interior residual pairing <residual, phi>,
    together with the u-quantities the caller may want to reuse."""
    if spec.kind == "poisson":
        gu = u.input_gradient(X)
        gp = phi.input_gradient(X)
        vals = np.sum(gu * gp, axis=1) - spec.f(X) * phi.value(X)
        return vals, gu
    if spec.kind == "varcoeff":
        gu = u.input_gradient(X)
        gp = phi.input_gradient(X)
        vals = spec.kappa(X) * np.sum(gu * gp, axis=1) - spec.f(X) * phi.value(X)
        return vals, gu
    if spec.kind == "nonlinear_elliptic":
        gu = u.input_gradient(X)
        gp = phi.input_gradient(X)
        q = 0.5 * spec.nle_c * np.sum(gu * gu, axis=1) + spec.V(X)
        vals = np.sum(gu * gp, axis=1) + q * phi.value(X)
        return vals, gu
    if spec.kind == "allen_cahn_step":
        uv = u.value(X)
        gu = u.input_gradient(X)
        res_lin = uv - spec.u_prev.value(X) + (spec.h_t / spec.eps0) * (uv ** 3 - uv)
        vals = res_lin * phi.value(X) + spec.ac_b * np.sum(gu * phi.input_gradient(X), axis=1)
        return vals, (uv, gu, res_lin)
    raise ValueError(f"no interior pairing for kind {spec.kind!r}")


def _boundary_operator(spec, u, Y, normals):
    """B u on the boundary batch: the trace for Dirichlet problems, the
    normal derivative for the Neumann Allen-Cahn step."""
    if spec.kind == "allen_cahn_step":
        return np.sum(u.input_gradient(Y) * normals, axis=1)
    return u.value(Y)


def loss_value(spec: ProblemSpec, u, phi, psi, batch: sampling.SampleBatch) -> float:
    """Monte-Carlo estimate of the full saddle objective."""
    if spec.kind == "ot":
        X, Y = batch.source, batch.target
        TX = _as_points(u.value(X))
        cost = 0.5 * np.sum((X - TX) ** 2, axis=1)
        pot = phi.value(TX)
        _require_finite(TX, X, "transported point")
        _require_finite(pot, X, "potential value")
        vals = cost + pot
        out = float(np.mean(vals) - np.mean(phi.value(Y)))
        _require_finite(out, None, "loss")
        return out

    X = batch.interior
    Y = batch.boundary
    vals, extra = _interior_pairing(spec, u, phi, X)
    _require_finite(vals, X, "interior integrand")
    total = float(np.mean(vals))

    if spec.eps > 0:
        gp = phi.input_gradient(X)
        reg = np.mean(np.sum(gp * gp, axis=1))
        if spec.kind == "allen_cahn_step":
            pv = phi.value(X)
            reg = spec.ac_a * np.mean(pv ** 2) + spec.ac_b * reg
        total -= 0.5 * spec.eps * reg

    Bu = _boundary_operator(spec, u, Y, batch.boundary_normals)
    gb = spec.g(Y) if spec.g is not None else 0.0
    resb = Bu - gb
    _require_finite(resb, Y, "boundary residual")
    psiv = psi.value(Y)
    bterm = np.mean(resb * psiv)
    if spec.eps > 0:
        bterm -= 0.5 * spec.eps * np.mean(psiv ** 2)
    total += spec.lam * bterm
    if spec.augment_boundary:
        total += spec.lam * np.mean(resb ** 2)

    if spec.kind == "allen_cahn_step" and spec.pinn_coeff:
        uv, gu, res_lin = extra
        lap = u.input_laplacian(X)
        res_pinn = res_lin - spec.eps0 * spec.h_t * lap
        _require_finite(res_pinn, X, "pointwise residual")
        total += spec.pinn_coeff * (np.mean(res_pinn ** 2)
                                    + spec.lam * np.mean(resb ** 2))
    _require_finite(total, None, "loss")
    return total


# -- gradients -------------------------------------------------------------


def grad_dual(spec: ProblemSpec, u, phi, psi, batch):
    """Exact gradient of the sampled loss in the dual parameters.

    Returns (w_phi, w_psi). The cotangents below are literally the partial
    derivatives of each per-sample integrand with respect to (phi, grad phi)
    and psi, divided by the batch sizes.
    """
    if spec.kind == "ot":
        X, Y = batch.source, batch.target
        n = X.shape[0]
        TX = _as_points(u.value(X))
        w_eta = (phi.param_vjp(TX, w_val=np.full(n, 1.0 / n))
                 + phi.param_vjp(Y, w_val=np.full(Y.shape[0], -1.0 / Y.shape[0])))
        _require_finite(w_eta, None, "dual gradient")
        return w_eta, np.zeros(0)

    X, Y = batch.interior, batch.boundary
    n, m = X.shape[0], Y.shape[0]
    tr = phi.bind(X, need="grad")
    if spec.kind == "poisson":
        q = -spec.f(X)
        p = u.input_gradient(X)
        a_d, b_d = 0.0, 1.0
    elif spec.kind == "varcoeff":
        q = -spec.f(X)
        p = spec.kappa(X)[:, None] * u.input_gradient(X)
        a_d, b_d = 0.0, 1.0
    elif spec.kind == "nonlinear_elliptic":
        gu = u.input_gradient(X)
        q = 0.5 * spec.nle_c * np.sum(gu * gu, axis=1) + spec.V(X)
        p = gu
        a_d, b_d = 0.0, 1.0
    elif spec.kind == "allen_cahn_step":
        uv = u.value(X)
        q = uv - spec.u_prev.value(X) + (spec.h_t / spec.eps0) * (uv ** 3 - uv)
        p = spec.ac_b * u.input_gradient(X)
        a_d, b_d = spec.ac_a, spec.ac_b
    else:
        raise ValueError(f"unknown kind {spec.kind!r}")

    w_val = q.copy()
    w_grad = p.copy()
    if spec.eps > 0:
        w_val -= spec.eps * a_d * tr.val
        w_grad -= spec.eps * b_d * tr.grad
    w_phi = tr.vjp(w_val=w_val / n, w_grad=w_grad / n)

    Bu = _boundary_operator(spec, u, Y, batch.boundary_normals)
    gb = spec.g(Y) if spec.g is not None else 0.0
    wb = (Bu - gb)
    if spec.eps > 0:
        wb = wb - spec.eps * psi.value(Y)
    w_psi = psi.param_vjp(Y, w_val=spec.lam * wb / m)
    _require_finite(w_phi, None, "dual gradient")
    _require_finite(w_psi, None, "dual gradient")
    return w_phi, w_psi


def grad_primal(spec: ProblemSpec, u, phi_t, psi_t, batch):
    """Gradient of the sampled loss in the primal parameters, with the dual
    handles (typically extrapolated) held fixed."""
    if spec.kind == "ot":
        X = batch.source
        n = X.shape[0]
        raw = u.value(X)
        TX = _as_points(raw)
        w = ((TX - X) + _as_points(phi_t.input_gradient(TX))) / n
        out = u.param_vjp(X, w_val=w[:, 0] if np.asarray(raw).ndim == 1 else w)
        _require_finite(out, None, "primal gradient")
        return out

    X, Y = batch.interior, batch.boundary
    n, m = X.shape[0], Y.shape[0]
    pt = phi_t.value(X)
    gpt = phi_t.input_gradient(X)

    if spec.kind == "poisson":
        w_val_i = None
        w_grad_i = gpt / n
        w_lap_i = None
    elif spec.kind == "varcoeff":
        w_val_i = None
        w_grad_i = spec.kappa(X)[:, None] * gpt / n
        w_lap_i = None
    elif spec.kind == "nonlinear_elliptic":
        gu = u.input_gradient(X)
        w_val_i = None
        w_grad_i = (gpt + spec.nle_c * pt[:, None] * gu) / n
        w_lap_i = None
    elif spec.kind == "allen_cahn_step":
        uv = u.value(X)
        dres = 1.0 + (spec.h_t / spec.eps0) * (3.0 * uv ** 2 - 1.0)
        w_val_i = dres * pt / n
        w_grad_i = spec.ac_b * gpt / n
        w_lap_i = None
    else:
        raise ValueError(f"unknown kind {spec.kind!r}")

    out = u.param_vjp(X, w_val=w_val_i, w_grad=w_grad_i, w_lap=w_lap_i)

    normals = batch.boundary_normals
    gb = spec.g(Y) if spec.g is not None else 0.0
    if spec.kind == "allen_cahn_step":
        # boundary pairing is against the normal derivative of u
        w_grad_b = spec.lam * psi_t.value(Y)[:, None] * normals / m
        out += u.param_vjp(Y, w_grad=w_grad_b)
    else:
        w_val_b = spec.lam * psi_t.value(Y)
        if spec.augment_boundary:
            w_val_b = w_val_b + 2.0 * spec.lam * (u.value(Y) - gb)
        out += u.param_vjp(Y, w_val=w_val_b / m)

    if spec.kind == "allen_cahn_step" and spec.pinn_coeff:
        uv = u.value(X)
        res_lin = uv - spec.u_prev.value(X) + (spec.h_t / spec.eps0) * (uv ** 3 - uv)
        lap = u.input_laplacian(X)
        res_pinn = res_lin - spec.eps0 * spec.h_t * lap
        dres = 1.0 + (spec.h_t / spec.eps0) * (3.0 * uv ** 2 - 1.0)
        coeff = spec.pinn_coeff
        out += u.param_vjp(
            X,
            w_val=2.0 * coeff * res_pinn * dres / n,
            w_lap=-2.0 * coeff * res_pinn * spec.eps0 * spec.h_t / n,
        )
        dnu = np.sum(u.input_gradient(Y) * normals, axis=1)
        out += u.param_vjp(
            Y, w_grad=2.0 * coeff * spec.lam * dnu[:, None] * normals / m)

    _require_finite(out, None, "primal gradient")
    return out


# -- Gram operators --------------------------------------------------------


class _GramTerm:
    """One J^T J block: weight * sum over a batch of the selected tangent
    components paired against themselves."""

    def __init__(self, trace, weight, c_val=0.0, c_grad=0.0, normals=None):
        self.trace = trace
        self.weight = weight
        self.c_val = c_val
        self.c_grad = c_grad
        self.normals = normals
        self.need_grad = c_grad != 0.0 or normals is not None

    def apply(self, v):
        tv, tg = self.trace.jvp(v, need_grad=self.need_grad)
        w_val = None
        w_grad = None
        if self.c_val:
            w_val = (self.weight * self.c_val) * tv
        if self.normals is not None:
            s = np.sum(tg * self.normals, axis=1)
            w_grad = (self.weight * s)[:, None] * self.normals
        elif self.c_grad:
            w_grad = (self.weight * self.c_grad) * tg
        return self.trace.vjp(w_val=w_val, w_grad=w_grad)


class GramOperator(SymmetricOperator):
    """Symmetric PSD operator sum of _GramTerm blocks, bound to one batch."""

    def __init__(self, role, dim, terms):
        self.role = role
        self.terms = terms
        super().__init__(dim, self._apply_terms)

    def _apply_terms(self, v):
        out = None
        for t in self.terms:
            c = t.apply(v)
            out = c if out is None else out + c
        return out


def _pde_stack(spec):
    """(c_val, c_grad) coefficients of the interior preconditioner stack."""
    if spec.precond_op == "id":
        return 1.0, 0.0
    if spec.kind == "allen_cahn_step":
        return spec.ac_a, spec.ac_b
    return 0.0, 1.0


def gram_primal(spec: ProblemSpec, u, batch) -> GramOperator:
    """M_p: interior stack Gram plus the lambda-weighted boundary block."""
    if spec.kind == "ot":
        return ot_gram_map(spec, u, batch)
    X, Y = batch.interior, batch.boundary
    n, m = X.shape[0], Y.shape[0]
    c_val, c_grad = _pde_stack(spec)
    need = "grad" if (c_grad or spec.kind == "allen_cahn_step") else "value"
    terms = [_GramTerm(u.bind(X, need=need), 1.0 / n, c_val=c_val, c_grad=c_grad)]
    if spec.kind == "allen_cahn_step" and spec.precond_op != "id":
        terms.append(_GramTerm(u.bind(Y, need="grad"), spec.lam / m,
                               normals=batch.boundary_normals))
    else:
        terms.append(_GramTerm(u.bind(Y, need="value"), spec.lam / m, c_val=1.0))
    return GramOperator("primal", u.n_params, terms)


def gram_dual(spec: ProblemSpec, phi, batch) -> GramOperator:
    """M_d: the interior Gram of the dual stack, no boundary block."""
    X = batch.interior
    n = X.shape[0]
    c_val, c_grad = _pde_stack(spec)
    need = "grad" if c_grad else "value"
    terms = [_GramTerm(phi.bind(X, need=need), 1.0 / n, c_val=c_val, c_grad=c_grad)]
    return GramOperator("dual", phi.n_params, terms)


def gram_bdd(spec: ProblemSpec, psi, batch) -> GramOperator:
    """M_bdd: lambda-weighted value Gram of psi over the boundary batch."""
    Y = batch.boundary
    m = Y.shape[0]
    terms = [_GramTerm(psi.bind(Y, need="value"), spec.lam / m, c_val=1.0)]
    return GramOperator("boundary", psi.n_params, terms)


def ot_gram_map(spec: ProblemSpec, T, batch) -> GramOperator:
    """Value Gram of the transport map over the source batch, all output
    components paired (the only reading that yields one operator)."""
    X = batch.source
    n = X.shape[0]
    terms = [_GramTerm(T.bind(X, need="value"), 1.0 / n, c_val=1.0)]
    return GramOperator("ot_map", T.n_params, terms)


def ot_gram_potential(spec: ProblemSpec, phi, T, batch) -> GramOperator:
    """Potential-side Gram over source points pushed through the frozen map.

    identity_both pairs potential values; grad_potential pairs potential
    gradients (the choice that mirrors the map-side metric).
    """
    if spec.kind != "ot":
        raise ValueError("potential Gram is specific to transport problems")
    Z = _as_points(T.value(batch.source))
    n = Z.shape[0]
    if spec.ot_precond == "identity_both":
        terms = [_GramTerm(phi.bind(Z, need="value"), 1.0 / n, c_val=1.0)]
    else:
        terms = [_GramTerm(phi.bind(Z, need="grad"), 1.0 / n, c_grad=1.0)]
    return GramOperator("ot_potential", phi.n_params, terms)


# -- exact solutions and error metrics -------------------------------------


@dataclass
class ExactSolution:
    u: AnalyticField
    norm_l2: float
    norm_h1grad: float
    grad_weight_diag: np.ndarray = None  # inner-product weight for the H1 seminorm


def exact_solution(spec: ProblemSpec) -> ExactSolution:
    """Analytic solution handle with its exact solution norms.

    The stored norms are closed-form values of ||u*|| and ||grad u*|| in
    L2 of the evaluation measure (uniform on the domain; for the variable
    coefficient family the gradient norm is weighted by Lambda, which is the
    convention the reference values use).
    """
    d = spec.d
    if spec.kind == "poisson":
        half_pi = math.pi / 2.0

        def val(X):
            return np.sin(half_pi * X).sum(axis=1)

        def grad(X):
            return half_pi * np.cos(half_pi * X)

        def lap(X):
            return -(math.pi ** 2 / 4.0) * np.sin(half_pi * X).sum(axis=1)

        return ExactSolution(
            u=AnalyticField(d, val, grad, lap),
            norm_l2=math.sqrt(4.0 * d * (d - 1) / math.pi ** 2 + d / 2.0),
            norm_h1grad=math.sqrt(math.pi ** 2 * d / 8.0),
        )
    if spec.kind == "varcoeff":
        inv = 1.0 / spec.Lam_diag
        S1 = inv.sum()
        S2 = (inv * inv).sum()

        def val(X):
            return 0.5 * np.sum(inv * X * X, axis=1)

        def grad(X):
            return inv * X

        def lap(X):
            return np.full(X.shape[0], S1)

        return ExactSolution(
            u=AnalyticField(d, val, grad, lap),
            norm_l2=0.5 * math.sqrt(S2 / 5.0 + (S1 * S1 - S2) / 9.0),
            norm_h1grad=math.sqrt(S1 / 3.0),
            grad_weight_diag=spec.Lam_diag.copy(),
        )
    if spec.kind == "nonlinear_elliptic":
        half_pi = math.pi / 2.0

        def val(X):
            r = np.linalg.norm(X, axis=1)
            return np.cos(half_pi * r)

        def grad(X):
            r = np.linalg.norm(X, axis=1)
            coef = np.full_like(r, -half_pi * half_pi)  # limit of -pi/2 sin / r at 0
            nz = r > 1e-12
            coef[nz] = -half_pi * np.sin(half_pi * r[nz]) / r[nz]
            return coef[:, None] * X

        pi2 = math.pi ** 2
        return ExactSolution(
            u=AnalyticField(d, val, grad),
            norm_l2=math.sqrt(0.5 - 10.0 / (9.0 * pi2) + 20.0 / (27.0 * pi2 * pi2)),
            norm_h1grad=math.sqrt(pi2 / 8.0 * (1.0 + 20.0 / (9.0 * pi2)
                                               - 40.0 / (27.0 * pi2 * pi2))),
        )
    raise ValueError(f"no analytic solution for kind {spec.kind!r}")


def relative_l2_error(spec: ProblemSpec, u, eval_batch) -> float:
    """||u - u*|| / ||u*|| with both norms estimated on the same batch."""
    ex = exact_solution(spec)
    X = eval_batch.interior
    diff = u.value(X) - ex.u.value(X)
    ref = ex.u.value(X)
    return float(np.sqrt(np.mean(diff ** 2) / np.mean(ref ** 2)))


def relative_h1_error(spec: ProblemSpec, u, eval_batch) -> float:
    """Gradient analogue of relative_l2_error, weighted where the family's
    reference norms are."""
    ex = exact_solution(spec)
    X = eval_batch.interior
    diff = u.input_gradient(X) - ex.u.input_gradient(X)
    ref = ex.u.input_gradient(X)
    if ex.grad_weight_diag is not None:
        w = ex.grad_weight_diag
        num = np.mean(np.sum(w * diff * diff, axis=1))
        den = np.mean(np.sum(w * ref * ref, axis=1))
    else:
        num = np.mean(np.sum(diff * diff, axis=1))
        den = np.mean(np.sum(ref * ref, axis=1))
    return float(np.sqrt(num / den))
