"""The natural primal-dual hybrid gradient optimizer and its baselines.

One step: snapshot the dual parameters, take a preconditioned ascent step on
the duals, form the function-space extrapolation (1+omega)*new - omega*old,
then take a preconditioned descent step on the primal network against the
extrapolated duals. All preconditioner applications go through MINRES on
the matrix-free Gram operators of the problems module.

Baselines living here as well: flat_pdg_step (same loop, no solves), the
Adam PINN trainer for the PDE families, the alternating PD-Adam trainer for
transport, and the alpha/beta tangent-space diagnostics.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import problems as prob
from .fields import Mlp, TruncatedField, save_checkpoint
from .krylov import minres
from .sampling import Rng

__all__ = [
    "NpdhgConfig",
    "TrainerState",
    "ExtrapolatedDual",
    "Problem",
    "MetricsRow",
    "DivergenceError",
    "AdamState",
    "npdhg_step",
    "flat_pdg_step",
    "run_npdhg",
    "adam_step",
    "run_adam_pinn",
    "run_pd_adam",
    "estimate_alpha_beta",
    "pinn_loss",
    "pinn_grad",
]


@dataclass
class NpdhgConfig:
    """Optimizer hyperparameters.

    Defaults are the reported main-experiment configuration: tau_u = 0.05,
    tau_phi = tau_psi = 0.095, omega = 1, eps = 1, lam = 10, MINRES capped
    at 1000 iterations with relative tolerance 1e-3. ``eps`` and ``lam``
    are applied onto the problem's coefficients at the start of a run so
    that config and problem cannot drift apart.
    """

    tau_u: float = 0.05
    tau_phi: float = 0.095
    tau_psi: float = 0.095
    omega: float = 1.0
    eps: float = 1.0
    lam: float = 10.0
    minres_max_iter: int = 1000
    minres_tol: float = 1e-3
    warm_start: bool = False
    n_in: int = 2000
    n_bdd: int = 160
    n_iter: int = 5000
    seed: int = 0
    metric_every: int = 50
    n_eval: int = 100000
    diag_every: int = 0
    adam_lr: float = 1e-3
    stop_rel_l2: float = 0.0

    @classmethod
    def intro_preset(cls, **kw):
        """The alternative 'standard configuration': eps = 0.1 with the two
        step-size roles swapped (tau_u = 0.095, tau_phi = tau_psi = 0.05)."""
        base = dict(eps=0.1, tau_u=0.095, tau_phi=0.05, tau_psi=0.05)
        base.update(kw)
        return cls(**base)


@dataclass
class Problem:
    """A problem spec together with the field templates being trained.

    ``psi`` is None for transport problems. ``reference_map`` optionally
    supplies an independent reference (FD profile, oracle transport map);
    when present the rel_l2 metric column reports the absolute L2 distance
    to it instead of the relative error against an exact solution.
    """

    spec: prob.ProblemSpec
    u: object
    phi: object
    psi: object = None
    reference_map: object = None

    def with_coefficients(self, eps, lam):
        return replace(self, spec=replace(self.spec, eps=eps, lam=lam))


@dataclass
class MetricsRow:
    iter: int
    wall_seconds: float
    loss: float
    rel_l2: float
    rel_h1: float
    minres_iters_u: int
    minres_iters_phi: int
    minres_iters_psi: int
    minres_resid_u: float
    minres_resid_phi: float
    minres_resid_psi: float
    alpha: float = None
    beta1: float = None
    beta2: float = None


@dataclass
class TrainerState:
    theta: np.ndarray
    eta: np.ndarray
    xi: np.ndarray
    eta_prev: np.ndarray
    xi_prev: np.ndarray
    iteration: int = 0
    rows: list = field(default_factory=list)
    last_loss: float = math.nan
    minres_iters: tuple = (0, 0, 0)
    minres_resid: tuple = (0.0, 0.0, 0.0)
    minres_converged: tuple = (True, True, True)
    v_u: np.ndarray = None
    v_phi: np.ndarray = None
    v_psi: np.ndarray = None


class DivergenceError(RuntimeError):
    """A parameter update went non-finite; carries the pre-update state."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


class ExtrapolatedDual:
    """Function-space combination (1+omega)*new - omega*old of two handles.

    When the two parameter vectors coincide (or omega = 0) evaluation
    short-circuits to the plain new handle, making the reduction exact to
    the last bit rather than merely up to rounding.
    """

    def __init__(self, new, old, omega):
        self.new = new
        self.old = old
        self.omega = float(omega)
        self._plain = self.omega == 0.0 or np.array_equal(
            np.asarray(new.params), np.asarray(old.params))

    def value(self, X):
        if self._plain:
            return self.new.value(X)
        return (1.0 + self.omega) * self.new.value(X) - self.omega * self.old.value(X)

    def input_gradient(self, X):
        if self._plain:
            return self.new.input_gradient(X)
        return ((1.0 + self.omega) * self.new.input_gradient(X)
                - self.omega * self.old.input_gradient(X))

    def input_laplacian(self, X):
        if self._plain:
            return self.new.input_laplacian(X)
        return ((1.0 + self.omega) * self.new.input_laplacian(X)
                - self.omega * self.old.input_laplacian(X))


def _solve(op, b, config, x0=None, least_squares_ok=False):
    """MINRES with optional warm start (solve for the correction) and one
    retry with a tiny diagonal shift if the Lanczos process breaks down
    before reaching the tolerance."""
    if b.size == 0:
        return b.copy(), None
    rhs = b if x0 is None else b - op.apply(x0)
    rep = minres(op, rhs, tol=config.minres_tol, max_iter=config.minres_max_iter,
                 least_squares_ok=least_squares_ok)
    if rep.breakdown and not rep.converged:
        rep = minres(op, rhs, tol=config.minres_tol,
                     max_iter=config.minres_max_iter, shift=1e-10,
                     least_squares_ok=least_squares_ok)
    sol = rep.solution if x0 is None else x0 + rep.solution
    return sol, rep


def _rep_stats(rep):
    if rep is None:
        return 0, 0.0, True
    return rep.iterations, rep.relative_residual, rep.converged


def npdhg_step(problem: Problem, state: TrainerState, config: NpdhgConfig,
               rng: Rng) -> TrainerState:
    """One natural primal-dual step on a fresh batch.

    Ascend the duals through their Gram solves, extrapolate in function
    space, then descend the primal through its Gram solve. MINRES hitting
    its iteration cap is not an error; the best iterate is used and the
    residual columns of the metrics expose it.
    """
    spec = problem.spec
    batch = prob.draw_batch(spec, config.n_in, config.n_bdd, rng)
    return _step_on_batch(problem, state, config, batch, precondition=True)


def flat_pdg_step(problem: Problem, state: TrainerState, config: NpdhgConfig,
                  rng: Rng) -> TrainerState:
    """npdhg_step with the Gram solves replaced by v := w."""
    spec = problem.spec
    batch = prob.draw_batch(spec, config.n_in, config.n_bdd, rng)
    return _step_on_batch(problem, state, config, batch, precondition=False)


def _step_on_batch(problem, state, config, batch, precondition):
    spec = problem.spec
    u = problem.u.with_params(state.theta)
    phi = problem.phi.with_params(state.eta)
    psi = problem.psi.with_params(state.xi) if problem.psi is not None else None

    eta_old = state.eta.copy()
    xi_old = state.xi.copy()

    w_phi, w_psi = prob.grad_dual(spec, u, phi, psi, batch)

    if precondition:
        if spec.kind == "ot":
            # the target-measure term of the potential gradient lies outside
            # the range of a Gram built on pushed source samples, so this
            # solve is a least-squares problem by construction
            M_d = prob.ot_gram_potential(spec, phi, u, batch)
            lsq_ok = True
        else:
            M_d = prob.gram_dual(spec, phi, batch)
            lsq_ok = False
        v_phi, rep_phi = _solve(M_d, w_phi, config,
                                state.v_phi if config.warm_start else None,
                                least_squares_ok=lsq_ok)
    else:
        v_phi, rep_phi = w_phi, None
    eta_new = state.eta + config.tau_phi * v_phi

    if psi is not None:
        if precondition:
            M_b = prob.gram_bdd(spec, psi, batch)
            v_psi, rep_psi = _solve(M_b, w_psi, config,
                                    state.v_psi if config.warm_start else None)
        else:
            v_psi, rep_psi = w_psi, None
        xi_new = state.xi + config.tau_psi * v_psi
    else:
        v_psi, rep_psi = np.zeros(0), None
        xi_new = state.xi

    phi_tilde = ExtrapolatedDual(problem.phi.with_params(eta_new), phi, config.omega)
    if psi is not None:
        psi_tilde = ExtrapolatedDual(problem.psi.with_params(xi_new), psi, config.omega)
    else:
        psi_tilde = None

    w_u = prob.grad_primal(spec, u, phi_tilde, psi_tilde, batch)
    if precondition:
        M_p = prob.gram_primal(spec, u, batch)
        v_u, rep_u = _solve(M_p, w_u, config,
                            state.v_u if config.warm_start else None)
    else:
        v_u, rep_u = w_u, None
    theta_new = state.theta - config.tau_u * v_u

    for name, vec in (("theta", theta_new), ("eta", eta_new), ("xi", xi_new)):
        if not np.all(np.isfinite(vec)):
            raise DivergenceError(f"non-finite {name} after iteration "
                                  f"{state.iteration + 1}", state)

    iu, ru, cu = _rep_stats(rep_u)
    ip, rp, cp = _rep_stats(rep_phi)
    iq, rq, cq = _rep_stats(rep_psi)
    new_state = TrainerState(
        theta=theta_new, eta=eta_new, xi=xi_new,
        eta_prev=eta_old, xi_prev=xi_old,
        iteration=state.iteration + 1, rows=state.rows,
        last_loss=state.last_loss,
        minres_iters=(iu, ip, iq), minres_resid=(ru, rp, rq),
        minres_converged=(cu, cp, cq),
        v_u=v_u if precondition else None,
        v_phi=v_phi if precondition else None,
        v_psi=v_psi if precondition else None,
    )
    if config.metric_every and new_state.iteration % config.metric_every == 0:
        u2 = problem.u.with_params(theta_new)
        phi2 = problem.phi.with_params(eta_new)
        psi2 = problem.psi.with_params(xi_new) if problem.psi is not None else None
        new_state.last_loss = prob.loss_value(spec, u2, phi2, psi2, batch)
    return new_state


# -- the outer loop --------------------------------------------------------


def _eval_points(problem, eval_batch):
    return eval_batch.source if problem.spec.kind == "ot" else eval_batch.interior


def _reference_target(problem, eval_batch):
    """Reference-map values on the (fixed) evaluation batch, or None.

    Computed once per run; the oracle map can cost seconds per call at the
    evaluation sample size."""
    if problem.reference_map is None:
        return None
    X = _eval_points(problem, eval_batch)
    return prob._as_points(np.asarray(problem.reference_map(X)))


def _metrics(problem, state, eval_batch, ref_target=None):
    u = problem.u.with_params(state.theta)
    if problem.reference_map is not None:
        X = _eval_points(problem, eval_batch)
        if ref_target is None:
            ref_target = _reference_target(problem, eval_batch)
        pred = prob._as_points(u.value(X))
        err = float(np.sqrt(np.mean(np.sum((pred - ref_target) ** 2, axis=1))))
        return err, math.nan
    try:
        rel_l2 = prob.relative_l2_error(problem.spec, u, eval_batch)
        rel_h1 = prob.relative_h1_error(problem.spec, u, eval_batch)
        return rel_l2, rel_h1
    except ValueError:
        return math.nan, math.nan


def _checkpoint_target(problem, theta):
    u = problem.u.with_params(theta)
    return u.base if isinstance(u, TruncatedField) else u


_MAP_WARMUP_ITERS = 100
_MAP_WARMUP_TAU = 0.5


def _warm_map_to_identity(problem, config, theta, rng):
    """Natural-gradient regression of the transport map onto x -> x.

    A randomly initialized map sends every source sample into a small blob,
    and the potential Gram over that blob is numerically rank-deficient in
    exactly the directions the target-measure term of the dual gradient
    needs. The first dual solve then returns a parameter step far outside
    the tangent regime and the saddle dynamics never recover. Fitting the
    identity first spreads the pushforward over the source's own support,
    which keeps every later Gram well conditioned.
    """
    spec = problem.spec
    for it in range(_MAP_WARMUP_ITERS):
        u = problem.u.with_params(theta)
        batch = prob.draw_batch(spec, config.n_in, config.n_bdd, rng.split(str(it)))
        X = batch.source
        raw = u.value(X)
        resid = (prob._as_points(raw) - X) / X.shape[0]
        g = u.param_vjp(X, w_val=resid[:, 0] if np.asarray(raw).ndim == 1 else resid)
        v, _ = _solve(prob.gram_primal(spec, u, batch), g, config)
        theta = theta - _MAP_WARMUP_TAU * v
    return theta


def run_npdhg(problem: Problem, config: NpdhgConfig, checkpoint_path=None,
              step_fn=npdhg_step, theta0=None):
    """Run ``config.n_iter`` optimizer steps; returns (rows, final_state).

    All randomness comes from config.seed through three named streams:
    "init" (parameters, unless theta0 pins the primal), "train" (one child
    stream per iteration), "eval" (the fixed metric batch). Transport runs
    additionally fit the map to the identity during initialization (see
    _warm_map_to_identity); theta0 skips that too. Metric rows are appended
    every metric_every iterations; a positive stop_rel_l2 ends the run
    early once the rel_l2 column drops below it.
    """
    problem = problem.with_coefficients(config.eps, config.lam)
    root = Rng(config.seed)
    init = root.split("init")
    theta = (np.asarray(theta0, dtype=np.float64).copy() if theta0 is not None
             else _fresh_params(problem.u, init.split("u")))
    if theta0 is None and problem.spec.kind == "ot":
        theta = _warm_map_to_identity(problem, config, theta, init.split("warmup"))
    eta = _fresh_params(problem.phi, init.split("phi"))
    xi = (_fresh_params(problem.psi, init.split("psi"))
          if problem.psi is not None else np.zeros(0))

    eval_batch = prob.draw_eval_batch(problem.spec, config.n_eval, root.split("eval"))
    ref_target = _reference_target(problem, eval_batch)
    train = root.split("train")
    state = TrainerState(theta=theta, eta=eta, xi=xi,
                         eta_prev=eta.copy(), xi_prev=xi.copy())
    if checkpoint_path is not None and config.n_iter == 0:
        save_checkpoint(_checkpoint_target(problem, state.theta), checkpoint_path)

    t0 = time.perf_counter()
    for it in range(1, config.n_iter + 1):
        state = step_fn(problem, state, config, train.split(str(it)))
        if config.metric_every and it % config.metric_every == 0:
            rel_l2, rel_h1 = _metrics(problem, state, eval_batch, ref_target)
            row = MetricsRow(
                iter=it, wall_seconds=time.perf_counter() - t0,
                loss=state.last_loss, rel_l2=rel_l2, rel_h1=rel_h1,
                minres_iters_u=state.minres_iters[0],
                minres_iters_phi=state.minres_iters[1],
                minres_iters_psi=state.minres_iters[2],
                minres_resid_u=state.minres_resid[0],
                minres_resid_phi=state.minres_resid[1],
                minres_resid_psi=state.minres_resid[2],
            )
            if config.diag_every and it % config.diag_every == 0:
                batch = prob.draw_batch(problem.spec, config.n_in, config.n_bdd,
                                        train.split(str(it)))
                row.alpha, row.beta1, row.beta2 = estimate_alpha_beta(
                    problem, state.theta, state.eta, state.xi, batch)
            state.rows.append(row)
            if (config.stop_rel_l2 and not math.isnan(rel_l2)
                    and rel_l2 <= config.stop_rel_l2):
                break
    if checkpoint_path is not None and config.n_iter > 0:
        save_checkpoint(_checkpoint_target(problem, state.theta), checkpoint_path)
    return state.rows, state


def _fresh_params(template, rng):
    base = template.base if isinstance(template, TruncatedField) else template
    if isinstance(base, Mlp):
        from .fields import init_params
        return init_params(base.d_in, base.d_h, base.d_out, base.n_l,
                           base.activation, rng.generator)
    return np.asarray(template.params, dtype=np.float64).copy()


# -- Adam baselines --------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(gradient, moment_state: AdamState, lr,
              betas=(0.9, 0.999), eps_adam=1e-8):
    """One Adam update; returns the increment to subtract for descent."""
    b1, b2 = betas
    s = moment_state
    s.t += 1
    s.m = b1 * s.m + (1.0 - b1) * gradient
    s.v = b2 * s.v + (1.0 - b2) * gradient * gradient
    mhat = s.m / (1.0 - b1 ** s.t)
    vhat = s.v / (1.0 - b2 ** s.t)
    return lr * mhat / (np.sqrt(vhat) + eps_adam)


def pinn_loss(spec, u, batch):
    """Pointwise-residual objective: mean squared strong-form residual plus
    lam times the mean squared boundary mismatch."""
    X, Y = batch.interior, batch.boundary
    res = _strong_residual(spec, u, X)[0]
    if spec.kind == "allen_cahn_step":
        b = np.sum(u.input_gradient(Y) * batch.boundary_normals, axis=1)
    else:
        b = u.value(Y) - (spec.g(Y) if spec.g is not None else 0.0)
    return float(np.mean(res ** 2) + spec.lam * np.mean(b ** 2))


def _strong_residual(spec, u, X):
    """Residual values and the cotangent pieces of d(residual)/d(u-jets)."""
    if spec.kind == "poisson":
        lap = u.input_laplacian(X)
        res = -lap - spec.f(X)
        return res, (None, None, -np.ones(X.shape[0]))
    if spec.kind == "varcoeff":
        lap = u.input_laplacian(X)
        gu = u.input_gradient(X)
        kap = spec.kappa(X)
        gk = spec.kappa_grad(X)
        res = -kap * lap - np.sum(gk * gu, axis=1) - spec.f(X)
        return res, (None, -gk, -kap)
    if spec.kind == "nonlinear_elliptic":
        lap = u.input_laplacian(X)
        gu = u.input_gradient(X)
        res = -lap + 0.5 * spec.nle_c * np.sum(gu * gu, axis=1) + spec.V(X)
        return res, (None, spec.nle_c * gu, -np.ones(X.shape[0]))
    if spec.kind == "allen_cahn_step":
        uv = u.value(X)
        lap = u.input_laplacian(X)
        res = (uv - spec.u_prev.value(X) + (spec.h_t / spec.eps0) * (uv ** 3 - uv)
               - spec.eps0 * spec.h_t * lap)
        dval = 1.0 + (spec.h_t / spec.eps0) * (3.0 * uv ** 2 - 1.0)
        return res, (dval, None, np.full(X.shape[0], -spec.eps0 * spec.h_t))
    raise ValueError(f"no pointwise residual for kind {spec.kind!r}")


def pinn_grad(spec, u, batch):
    """Exact parameter gradient of pinn_loss."""
    X, Y = batch.interior, batch.boundary
    n, m = X.shape[0], Y.shape[0]
    res, (dval, dgrad, dlap) = _strong_residual(spec, u, X)
    w_val = (2.0 / n) * res * dval if dval is not None else None
    w_grad = (2.0 / n) * res[:, None] * dgrad if dgrad is not None else None
    w_lap = (2.0 / n) * res * dlap
    g = u.param_vjp(X, w_val=w_val, w_grad=w_grad, w_lap=w_lap)
    if spec.kind == "allen_cahn_step":
        nrm = batch.boundary_normals
        dn = np.sum(u.input_gradient(Y) * nrm, axis=1)
        g += u.param_vjp(Y, w_grad=(2.0 * spec.lam / m) * dn[:, None] * nrm)
    else:
        bres = u.value(Y) - (spec.g(Y) if spec.g is not None else 0.0)
        g += u.param_vjp(Y, w_val=(2.0 * spec.lam / m) * bres)
    return g


def run_adam_pinn(problem: Problem, config: NpdhgConfig, checkpoint_path=None,
                  theta0=None):
    """Adam on the pointwise-residual objective; same stream layout and
    metric schema as run_npdhg (solver columns are zero)."""
    problem = problem.with_coefficients(config.eps, config.lam)
    root = Rng(config.seed)
    theta = (np.asarray(theta0, dtype=np.float64).copy() if theta0 is not None
             else _fresh_params(problem.u, root.split("init").split("u")))
    eval_batch = prob.draw_eval_batch(problem.spec, config.n_eval, root.split("eval"))
    ref_target = _reference_target(problem, eval_batch)
    train = root.split("train")
    adam = AdamState.zeros(theta.size)
    state = TrainerState(theta=theta, eta=np.zeros(0), xi=np.zeros(0),
                         eta_prev=np.zeros(0), xi_prev=np.zeros(0))
    t0 = time.perf_counter()
    for it in range(1, config.n_iter + 1):
        batch = prob.draw_batch(problem.spec, config.n_in, config.n_bdd,
                                train.split(str(it)))
        u = problem.u.with_params(state.theta)
        g = pinn_grad(problem.spec, u, batch)
        theta = state.theta - adam_step(g, adam, config.adam_lr)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"non-finite theta after iteration {it}", state)
        state = replace(state, theta=theta, iteration=it)
        if config.metric_every and it % config.metric_every == 0:
            rel_l2, rel_h1 = _metrics(problem, state, eval_batch, ref_target)
            loss = pinn_loss(problem.spec, problem.u.with_params(theta), batch)
            state.rows.append(MetricsRow(
                iter=it, wall_seconds=time.perf_counter() - t0, loss=loss,
                rel_l2=rel_l2, rel_h1=rel_h1,
                minres_iters_u=0, minres_iters_phi=0, minres_iters_psi=0,
                minres_resid_u=0.0, minres_resid_phi=0.0, minres_resid_psi=0.0))
            if (config.stop_rel_l2 and not math.isnan(rel_l2)
                    and rel_l2 <= config.stop_rel_l2):
                break
    if checkpoint_path is not None:
        save_checkpoint(_checkpoint_target(problem, state.theta), checkpoint_path)
    return state.rows, state


def run_pd_adam(problem: Problem, config: NpdhgConfig, checkpoint_path=None):
    """Alternating Adam saddle trainer for transport: one ascent step on the
    potential, one descent step on the map (K1 = K2 = 1)."""
    if problem.spec.kind != "ot":
        raise ValueError("pd_adam is the transport baseline")
    root = Rng(config.seed)
    init = root.split("init")
    theta = _fresh_params(problem.u, init.split("u"))
    eta = _fresh_params(problem.phi, init.split("phi"))
    eval_batch = prob.draw_eval_batch(problem.spec, config.n_eval, root.split("eval"))
    ref_target = _reference_target(problem, eval_batch)
    train = root.split("train")
    adam_t = AdamState.zeros(theta.size)
    adam_e = AdamState.zeros(eta.size)
    state = TrainerState(theta=theta, eta=eta, xi=np.zeros(0),
                         eta_prev=eta.copy(), xi_prev=np.zeros(0))
    t0 = time.perf_counter()
    for it in range(1, config.n_iter + 1):
        batch = prob.draw_batch(problem.spec, config.n_in, config.n_bdd,
                                train.split(str(it)))
        u = problem.u.with_params(state.theta)
        phi = problem.phi.with_params(state.eta)
        w_eta, _ = prob.grad_dual(problem.spec, u, phi, None, batch)
        eta = state.eta + adam_step(w_eta, adam_e, config.adam_lr)
        phi_new = problem.phi.with_params(eta)
        w_theta = prob.grad_primal(problem.spec, u, phi_new, None, batch)
        theta = state.theta - adam_step(w_theta, adam_t, config.adam_lr)
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(eta))):
            raise DivergenceError(f"non-finite update after iteration {it}", state)
        state = replace(state, theta=theta, eta=eta, eta_prev=state.eta, iteration=it)
        if config.metric_every and it % config.metric_every == 0:
            rel_l2, rel_h1 = _metrics(problem, state, eval_batch, ref_target)
            loss = prob.loss_value(problem.spec, problem.u.with_params(theta),
                                   problem.phi.with_params(eta), None, batch)
            state.rows.append(MetricsRow(
                iter=it, wall_seconds=time.perf_counter() - t0, loss=loss,
                rel_l2=rel_l2, rel_h1=rel_h1,
                minres_iters_u=0, minres_iters_phi=0, minres_iters_psi=0,
                minres_resid_u=0.0, minres_resid_phi=0.0, minres_resid_psi=0.0))
    if checkpoint_path is not None:
        save_checkpoint(_checkpoint_target(problem, state.theta), checkpoint_path)
    return state.rows, state


# -- tangent-space diagnostics ---------------------------------------------


def _projection_gap(norm_sq, g, c, Mc):
    """norm of the residual after projecting onto the tangent span, from the
    normal-equation quantities: ||U - Jc||^2 = ||U||^2 - 2 c.g + c.Mc.
    Clamped into [0, ||U||^2] (c = 0 is always admissible)."""
    q = norm_sq - 2.0 * float(c @ g) + float(c @ Mc)
    return max(0.0, min(q, norm_sq))


def estimate_alpha_beta(problem: Problem, theta, eta, xi, batch,
                        tol=1e-4, max_iter=2000):
    """A-posteriori tangent-space coverage diagnostics (alpha, beta1, beta2).

    alpha: fraction of the preconditioned error field (grad(u - u*) inside,
    sqrt(lam) trace on the boundary) outside the primal tangent span.
    beta1: same for the dual-operator image of that field against the dual
    tangent span; beta2: for the dual stack (grad phi, psi) itself. Each is
    computed by solving the Gram normal equations with MINRES under the
    batch inner product. All three lie in [0, 1].
    """
    spec = problem.spec
    ex = prob.exact_solution(spec)
    u = problem.u.with_params(theta)
    phi = problem.phi.with_params(eta)
    psi = problem.psi.with_params(xi)
    X, Y = batch.interior, batch.boundary
    n, m = X.shape[0], Y.shape[0]
    lam = spec.lam

    cfg = NpdhgConfig(minres_tol=tol, minres_max_iter=max_iter)

    # error field through the primal preconditioner stack
    U_int = u.input_gradient(X) - ex.u.input_gradient(X)
    U_bdd = u.value(Y) - ex.u.value(Y)
    U2 = float(np.mean(np.sum(U_int * U_int, axis=1))
               + lam * np.mean(U_bdd * U_bdd))
    if U2 == 0.0:
        alpha = 0.0
    else:
        g = (u.param_vjp(X, w_grad=U_int / n)
             + u.param_vjp(Y, w_val=lam * U_bdd / m))
        M_p = prob.gram_primal(spec, u, batch)
        c, _ = _solve(M_p, g, cfg)
        alpha = math.sqrt(_projection_gap(U2, g, c, M_p.apply(c)) / U2)

    # the same field pushed through the operator core, against the dual span
    if spec.kind == "varcoeff":
        V_int = spec.kappa(X)[:, None] * U_int
    else:
        V_int = U_int
    V2 = float(np.mean(np.sum(V_int * V_int, axis=1))
               + lam * np.mean(U_bdd * U_bdd))
    M_d = prob.gram_dual(spec, phi, batch)
    M_b = prob.gram_bdd(spec, psi, batch)
    if V2 == 0.0:
        beta1 = 0.0
    else:
        g_phi = phi.param_vjp(X, w_grad=V_int / n)
        g_psi = psi.param_vjp(Y, w_val=lam * U_bdd / m)
        c_phi, _ = _solve(M_d, g_phi, cfg)
        c_psi, _ = _solve(M_b, g_psi, cfg)
        q = _projection_gap(V2, np.concatenate([g_phi, g_psi]),
                            np.concatenate([c_phi, c_psi]),
                            np.concatenate([M_d.apply(c_phi), M_b.apply(c_psi)]))
        beta1 = math.sqrt(q / V2)

    # the dual stack itself against its own tangent span
    P_int = phi.input_gradient(X)
    P_bdd = psi.value(Y)
    P2 = float(np.mean(np.sum(P_int * P_int, axis=1))
               + lam * np.mean(P_bdd * P_bdd))
    if P2 == 0.0:
        beta2 = 0.0
    else:
        g_phi = phi.param_vjp(X, w_grad=P_int / n)
        g_psi = psi.param_vjp(Y, w_val=lam * P_bdd / m)
        c_phi, _ = _solve(M_d, g_phi, cfg)
        c_psi, _ = _solve(M_b, g_psi, cfg)
        q = _projection_gap(P2, np.concatenate([g_phi, g_psi]),
                            np.concatenate([c_phi, c_psi]),
                            np.concatenate([M_d.apply(c_phi), M_b.apply(c_psi)]))
        beta2 = math.sqrt(q / P2)
    return alpha, beta1, beta2
