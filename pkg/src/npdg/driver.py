"""Experiment orchestration: run configs, presets, metrics CSV files,
checkpoint evaluation and the self-check suite behind the command line.

A run is described by a flat key=value config document (dotted section
keys, '#' comments). ``problem.kind`` selects the family and pulls in that
family's reported defaults; any further keys override them. The resolved
configuration is echoed next to the metrics so every run directory is
reproducible from its own echo file.
"""

import dataclasses
import math
import os
import sys

import numpy as np

from . import npdhg
from . import oracles
from . import problems as prob
from .fields import (AnalyticField, Mlp, PReLU, Softplus, Tanh,
                     TruncatedField, load_checkpoint, save_checkpoint)
from .krylov import SymmetricOperator, assemble_dense, minres
from .npdhg import MetricsRow, NpdhgConfig, Problem  # noqa: F401  (re-export)
from .sampling import Rng


class ConfigError(ValueError):
    """Bad run configuration: unknown key, malformed value, missing file."""


# -- architectures ----------------------------------------------------------


_ACTIVATION_NAMES = ("tanh", "softplus", "prelu")


@dataclasses.dataclass(frozen=True)
class ArchSpec:
    """Network shape written as 'd_in,d_h,d_out,n_l,activation'."""

    d_in: int
    d_h: int
    d_out: int
    n_l: int
    activation: str = "tanh"

    @classmethod
    def parse(cls, text):
        parts = [p.strip() for p in str(text).split(",")]
        if len(parts) != 5:
            raise ConfigError(
                f"architecture must be 'd_in,d_h,d_out,n_l,activation', got {text!r}")
        try:
            dims = [int(p) for p in parts[:4]]
        except ValueError:
            raise ConfigError(f"non-integer dimension in architecture {text!r}") from None
        act = parts[4].lower()
        if act not in _ACTIVATION_NAMES:
            raise ConfigError(
                f"unknown activation {act!r}; expected one of {_ACTIVATION_NAMES}")
        return cls(dims[0], dims[1], dims[2], dims[3], act)

    def format(self):
        return f"{self.d_in},{self.d_h},{self.d_out},{self.n_l},{self.activation}"

    def build(self, softplus_beta=0.25) -> Mlp:
        if self.activation == "tanh":
            act = Tanh()
        elif self.activation == "softplus":
            act = Softplus(softplus_beta)
        else:
            act = PReLU()
        return Mlp(self.d_in, self.d_h, self.d_out, self.n_l, act)


# -- run configuration ------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    """Everything one experiment needs, flattened.

    Field defaults are the Poisson main-experiment configuration; use
    :func:`preset` (or just set ``problem.kind`` in a config file) to get
    the per-family reported defaults.
    """

    kind: str = "poisson"
    d: int = 2
    lam: float = 10.0
    eps: float = 1.0
    augment_boundary: bool = True
    precond_op: str = "grad"
    variant: str = "main"
    ball_mode: str = "paper_recipe"
    n_t: int = 10
    h_t: float = 0.1
    eps0: float = 0.1
    ref_nx: int = 400
    pinn_coeff: float = 1.0
    ot_precond: str = "identity_both"
    arch_u: str = "2,256,1,4,tanh"
    arch_phi: str = "2,256,1,4,tanh"
    arch_psi: str = "2,64,1,4,tanh"
    softplus_beta: float = 0.25
    tau_u: float = 0.05
    tau_phi: float = 0.095
    tau_psi: float = 0.095
    omega: float = 1.0
    minres_tol: float = 1e-3
    minres_max_iter: int = 1000
    warm_start: bool = False
    n_in: int = 2000
    n_bdd: int = 160
    n_iter: int = 5000
    metric_every: int = 50
    n_eval: int = 100000
    diag_every: int = 0
    adam_lr: float = 1e-3
    stop_rel_l2: float = 0.0
    optimizer: str = "npdhg"
    out: str = ""
    seed: int = 0

    def npdhg_config(self) -> NpdhgConfig:
        return NpdhgConfig(
            tau_u=self.tau_u, tau_phi=self.tau_phi, tau_psi=self.tau_psi,
            omega=self.omega, eps=self.eps, lam=self.lam,
            minres_max_iter=self.minres_max_iter, minres_tol=self.minres_tol,
            warm_start=self.warm_start, n_in=self.n_in, n_bdd=self.n_bdd,
            n_iter=self.n_iter, seed=self.seed, metric_every=self.metric_every,
            n_eval=self.n_eval, diag_every=self.diag_every,
            adam_lr=self.adam_lr, stop_rel_l2=self.stop_rel_l2)


# (dotted key, RunConfig attribute, value type); also the echo-file order.
_KEYS = (
    ("problem.kind", "kind", str),
    ("problem.d", "d", int),
    ("problem.lam", "lam", float),
    ("problem.eps", "eps", float),
    ("problem.augment_boundary", "augment_boundary", bool),
    ("problem.precond", "precond_op", str),
    ("problem.variant", "variant", str),
    ("problem.ball_mode", "ball_mode", str),
    ("problem.n_t", "n_t", int),
    ("problem.h_t", "h_t", float),
    ("problem.eps0", "eps0", float),
    ("problem.ref_nx", "ref_nx", int),
    ("problem.pinn_coeff", "pinn_coeff", float),
    ("problem.ot_precond", "ot_precond", str),
    ("arch.u", "arch_u", str),
    ("arch.phi", "arch_phi", str),
    ("arch.psi", "arch_psi", str),
    ("arch.softplus_beta", "softplus_beta", float),
    ("npdhg.tau_u", "tau_u", float),
    ("npdhg.tau_phi", "tau_phi", float),
    ("npdhg.tau_psi", "tau_psi", float),
    ("npdhg.omega", "omega", float),
    ("npdhg.minres_tol", "minres_tol", float),
    ("npdhg.minres_max_iter", "minres_max_iter", int),
    ("npdhg.warm_start", "warm_start", bool),
    ("npdhg.n_in", "n_in", int),
    ("npdhg.n_bdd", "n_bdd", int),
    ("npdhg.n_iter", "n_iter", int),
    ("npdhg.metric_every", "metric_every", int),
    ("npdhg.n_eval", "n_eval", int),
    ("npdhg.diag_every", "diag_every", int),
    ("npdhg.adam_lr", "adam_lr", float),
    ("npdhg.stop_rel_l2", "stop_rel_l2", float),
    ("run.optimizer", "optimizer", str),
    ("run.out", "out", str),
    ("run.seed", "seed", int),
)

_KEY_TABLE = {dotted: (attr, typ) for dotted, attr, typ in _KEYS}

_KINDS = ("poisson", "varcoeff", "nonlinear_elliptic", "allen_cahn", "ot")
_OPTIMIZERS = ("npdhg", "flat", "adam_pinn", "pd_adam")


def preset(kind, d=None) -> RunConfig:
    """Per-family defaults as reported for the main experiments.

    Widths are the full-scale ones; desk-scale runs override ``arch.*``
    (and usually ``npdhg.n_iter``) in their config files.
    """
    if kind == "poisson":
        d = 2 if d is None else d
        return RunConfig(
            kind=kind, d=d,
            arch_u=f"{d},256,1,4,tanh", arch_phi=f"{d},256,1,4,tanh",
            arch_psi=f"{d},64,1,4,tanh",
            n_in=2000, n_bdd=80 * d, n_iter=5000)
    if kind == "varcoeff":
        d = 10 if d is None else d
        tau = (0.1, 0.19, 0.19) if d <= 10 else (0.05, 0.095, 0.095)
        return RunConfig(
            kind=kind, d=d,
            arch_u=f"{d},256,1,4,softplus", arch_phi=f"{d},256,1,4,softplus",
            arch_psi=f"{d},128,1,4,softplus",
            tau_u=tau[0], tau_phi=tau[1], tau_psi=tau[2],
            minres_tol=5e-4, n_in=4000, n_bdd=40 * d, n_iter=10000)
    if kind == "nonlinear_elliptic":
        d = 5 if d is None else d
        return RunConfig(
            kind=kind, d=d,
            arch_u=f"{d},256,1,4,tanh", arch_phi=f"{d},256,1,4,tanh",
            arch_psi=f"{d},128,1,4,tanh",
            n_in=4000, n_bdd=40 * d, n_iter=10000)
    if kind == "allen_cahn":
        d = 1 if d is None else d
        return RunConfig(
            kind=kind, d=d,
            arch_u=f"{d},128,1,5,tanh", arch_phi=f"{d},128,1,5,tanh",
            arch_psi=f"{d},64,1,5,tanh",
            n_in=2000, n_bdd=2 if d == 1 else 80 * d,
            n_iter=3000 if d == 1 else 1000,
            n_t=10 if d == 1 else 15,
            ref_nx=400 if d == 1 else 64)
    if kind == "ot":
        d = 1 if d is None else d
        if d == 1:
            return RunConfig(
                kind=kind, d=1,
                arch_u="1,50,1,3,prelu", arch_phi="1,50,1,3,prelu", arch_psi="",
                tau_u=0.15, tau_phi=0.15, tau_psi=0.15,
                n_in=800, n_bdd=0, n_iter=6000)
        return RunConfig(
            kind=kind, d=d,
            arch_u=f"{d},80,{d},4,prelu", arch_phi=f"{d},80,1,4,prelu", arch_psi="",
            n_in=2000, n_bdd=0, n_iter=20000)
    raise ConfigError(f"unknown problem kind {kind!r}; expected one of {_KINDS}")


def _convert(typ, text, where, key):
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: {key} needs a boolean, got {text!r}")
    if typ is str:
        return text
    try:
        return typ(text)
    except ValueError:
        raise ConfigError(
            f"{where}: {key} needs {typ.__name__}, got {text!r}") from None


def parse_config(text, origin="<config>") -> RunConfig:
    """Parse a config document into a RunConfig.

    The problem kind (and dimension, if present) is read first so that
    every other key's default comes from that family's preset. Unknown
    keys are an error, not a warning.
    """
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        pairs.append((lineno, key.strip(), val.strip()))

    kind = d = None
    for lineno, key, val in pairs:
        if key == "problem.kind":
            kind = val
        elif key == "problem.d":
            d = _convert(int, val, f"{origin}:{lineno}", key)
    if kind is None:
        raise ConfigError(f"{origin}: missing required key problem.kind")

    rc = preset(kind, d)
    for lineno, key, val in pairs:
        if key not in _KEY_TABLE:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        attr, typ = _KEY_TABLE[key]
        setattr(rc, attr, _convert(typ, val, f"{origin}:{lineno}", key))
    validate_config(rc)
    return rc


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config(text, origin=str(path))


def validate_config(rc: RunConfig):
    if rc.kind not in _KINDS:
        raise ConfigError(f"unknown problem kind {rc.kind!r}; expected one of {_KINDS}")
    if rc.optimizer not in _OPTIMIZERS:
        raise ConfigError(
            f"unknown optimizer {rc.optimizer!r}; expected one of {_OPTIMIZERS}")
    if rc.d < 1:
        raise ConfigError("problem.d must be at least 1")
    arch_u = ArchSpec.parse(rc.arch_u)
    arch_phi = ArchSpec.parse(rc.arch_phi)
    if arch_u.d_in != rc.d or arch_phi.d_in != rc.d:
        raise ConfigError("arch.u and arch.phi input dimension must equal problem.d")
    if rc.kind == "ot":
        if arch_u.d_out != rc.d:
            raise ConfigError("transport map output dimension must equal problem.d")
        if rc.arch_psi:
            raise ConfigError("transport problems have no boundary multiplier; "
                              "leave arch.psi empty")
        if rc.optimizer == "adam_pinn":
            raise ConfigError("adam_pinn is the PDE baseline; use pd_adam for transport")
    else:
        if not rc.arch_psi:
            raise ConfigError("arch.psi is required for PDE problems")
        arch_psi = ArchSpec.parse(rc.arch_psi)
        if arch_psi.d_in != rc.d:
            raise ConfigError("arch.psi input dimension must equal problem.d")
        if rc.optimizer == "pd_adam":
            raise ConfigError("pd_adam is the transport baseline; "
                              "use adam_pinn for PDE problems")
    if rc.kind == "allen_cahn" and rc.d not in (1, 2):
        raise ConfigError("allen_cahn runs support d = 1 and d = 2")
    if rc.kind == "nonlinear_elliptic" and rc.variant not in ("main", "mild"):
        raise ConfigError(f"unknown variant {rc.variant!r}; expected main or mild")
    if rc.ot_precond not in ("identity_both", "grad_potential"):
        raise ConfigError(
            f"unknown ot preconditioner {rc.ot_precond!r}; "
            "expected identity_both or grad_potential")
    if rc.precond_op not in ("grad", "id"):
        raise ConfigError(f"unknown preconditioner {rc.precond_op!r}; expected grad or id")
    for name in ("tau_u", "tau_phi", "tau_psi", "h_t", "eps0"):
        if getattr(rc, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    for name in ("n_in", "n_iter", "n_t", "minres_max_iter"):
        if getattr(rc, name) < 0:
            raise ConfigError(f"{name} must be non-negative")


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def echo_config(rc: RunConfig) -> str:
    """The resolved configuration as a config document (itself parseable)."""
    lines = [f"{dotted} = {_format_value(getattr(rc, attr))}"
             for dotted, attr, _ in _KEYS]
    return "\n".join(lines) + "\n"


# -- problem construction ---------------------------------------------------


def _build_spec(rc: RunConfig):
    if rc.kind == "poisson":
        return prob.poisson_spec(rc.d, lam=rc.lam, eps=rc.eps,
                                 augment_boundary=rc.augment_boundary,
                                 precond_op=rc.precond_op)
    if rc.kind == "varcoeff":
        return prob.varcoeff_spec(rc.d, lam=rc.lam, eps=rc.eps,
                                  augment_boundary=rc.augment_boundary,
                                  precond_op=rc.precond_op)
    if rc.kind == "nonlinear_elliptic":
        return prob.nle_spec(rc.d, variant=rc.variant, lam=rc.lam, eps=rc.eps,
                             augment_boundary=rc.augment_boundary,
                             precond_op=rc.precond_op, ball_mode=rc.ball_mode)
    raise ConfigError(f"no direct spec for kind {rc.kind!r}")


def _truncated(phi_net: Mlp, domain) -> TruncatedField:
    return TruncatedField(phi_net, domain.a, domain.b)


def ot_measures(rc: RunConfig):
    """The transport test pair: 1-D pushes a standard normal onto a bimodal
    mixture; 5-D maps between two centered Gaussians with an affine answer."""
    if rc.d == 1:
        source = {"type": "standard_normal"}
        target = {"type": "mixture",
                  "weights": np.array([2.0 / 3.0, 1.0 / 3.0]),
                  "means": np.array([-1.0, 1.0]),
                  "sigmas": np.array([0.5, 0.5])}
        return source, target
    if rc.d == 5:
        cov0 = np.diag([0.25, 1.0, 1.0, 1.0, 1.0])
        cov1 = np.diag([1.0, 0.25, 1.0, 0.625, 0.625])
        cov1[3, 4] = cov1[4, 3] = 0.375
        source = {"type": "gaussian", "mean": np.zeros(5), "cov": cov0}
        target = {"type": "gaussian", "mean": np.zeros(5), "cov": cov1}
        return source, target
    raise ConfigError("transport presets exist for d = 1 and d = 5")


def ot_reference(source, target):
    """The independently computed transport map for a preset measure pair."""
    if source["type"] == "standard_normal":
        mix = oracles.GaussianMixture1D(target["weights"], target["means"],
                                        target["sigmas"])

        def ref(X):
            return oracles.ot_map_1d(mix, np.asarray(X)[:, 0])[:, None]

        return ref
    A, b = oracles.ot_map_gaussian(source["cov"], target["cov"])

    def ref(X):
        return np.asarray(X) @ A.T + b

    return ref


def allen_cahn_initial_field(d) -> AnalyticField:
    """The benchmark initial data: a double-hump profile in 1-D, a tanh
    bubble of radius 0.5 around (1, 1) in 2-D."""
    if d == 1:
        def val(X):
            c = np.cos(np.pi * (X[:, 0] - 1.0))
            return c - c * c

        def grad(X):
            t = np.pi * (X[:, 0] - 1.0)
            return (-np.pi * np.sin(t) * (1.0 - 2.0 * np.cos(t)))[:, None]

        def lap(X):
            t = np.pi * (X[:, 0] - 1.0)
            c, s = np.cos(t), np.sin(t)
            return -np.pi ** 2 * (c * (1.0 - 2.0 * c) + 2.0 * s * s)

        return AnalyticField(1, val, grad, lap)
    if d == 2:
        x0, R, nu = np.array([1.0, 1.0]), 0.5, 0.1

        def _parts(X):
            delta = np.asarray(X) - x0
            r = np.maximum(np.linalg.norm(delta, axis=1), 1e-12)
            t = np.tanh(-(r - R) / nu)
            sech2 = 1.0 - t * t
            return delta, r, t, sech2

        def val(X):
            return _parts(X)[2]

        def grad(X):
            delta, r, _, sech2 = _parts(X)
            return (-sech2 / (nu * r))[:, None] * delta

        def lap(X):
            _, r, t, sech2 = _parts(X)
            return -2.0 * sech2 * t / nu ** 2 - sech2 / (nu * r)

        return AnalyticField(2, val, grad, lap)
    raise ConfigError("initial data presets exist for d = 1 and d = 2")


def build_problem(rc: RunConfig) -> Problem:
    """RunConfig -> Problem with nets, truncation and reference wiring.

    For allen_cahn this is the first implicit step (previous state = the
    initial data) with the final-time benchmark profile as reference; the
    marching driver rebuilds the spec per physical step.
    """
    try:
        arch_u = ArchSpec.parse(rc.arch_u)
        arch_phi = ArchSpec.parse(rc.arch_phi)
        beta = rc.softplus_beta
        if rc.kind == "ot":
            source, target = ot_measures(rc)
            spec = prob.ot_spec(rc.d, source, target, precond=rc.ot_precond)
            return Problem(spec=spec, u=arch_u.build(beta), phi=arch_phi.build(beta),
                           psi=None, reference_map=ot_reference(source, target))
        psi = ArchSpec.parse(rc.arch_psi).build(beta)
        if rc.kind == "allen_cahn":
            u_prev = allen_cahn_initial_field(rc.d)
            spec = prob.allen_cahn_spec(u_prev, d=rc.d, h_t=rc.h_t, eps0=rc.eps0,
                                        lam=rc.lam, eps=rc.eps,
                                        pinn_coeff=rc.pinn_coeff,
                                        precond_op=rc.precond_op)
            nodes, fd_values = allen_cahn_fd_reference(rc)
            ref = grid_interpolant(rc.d, nodes, fd_values[-1])
            phi = _truncated(arch_phi.build(beta), spec.domain)
            return Problem(spec=spec, u=arch_u.build(beta), phi=phi, psi=psi,
                           reference_map=ref)
        spec = _build_spec(rc)
        phi_net = arch_phi.build(beta)
        phi = (phi_net if rc.kind == "nonlinear_elliptic"
               else _truncated(phi_net, spec.domain))
        return Problem(spec=spec, u=arch_u.build(beta), phi=phi, psi=psi)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


# -- Allen-Cahn time marching ----------------------------------------------


def allen_cahn_fd_reference(rc: RunConfig):
    """March the benchmark finite-difference scheme through all physical
    steps. Returns (nodes, [values at t_1 .. t_{n_t}])."""
    u0 = allen_cahn_initial_field(rc.d)
    n = rc.ref_nx
    nodes = np.linspace(0.0, 2.0, n + 1)
    if rc.d == 1:
        U0 = u0.value(nodes[:, None])
        grids = oracles.allen_cahn_fd_1d(U0, n, rc.h_t, rc.n_t, rc.eps0)
    else:
        XX, YY = np.meshgrid(nodes, nodes, indexing="ij")
        pts = np.column_stack([XX.ravel(), YY.ravel()])
        U0 = u0.value(pts).reshape(n + 1, n + 1)
        grids = oracles.allen_cahn_fd_2d(U0, n, n, rc.h_t, rc.n_t, rc.eps0)
    return nodes, [np.asarray(g.values) for g in grids[1:]]


def grid_interpolant(d, nodes, values):
    """Piecewise-linear interpolant of nodal values, callable on (n, d)."""
    if d == 1:
        vals = np.asarray(values)

        def ref(X):
            return np.interp(np.asarray(X)[:, 0], nodes, vals)

        return ref
    from scipy.interpolate import RegularGridInterpolator
    itp = RegularGridInterpolator((nodes, nodes), np.asarray(values),
                                  method="linear", bounds_error=False,
                                  fill_value=None)

    def ref(X):
        return itp(np.asarray(X))

    return ref


@dataclasses.dataclass
class AllenCahnResult:
    rows: list
    thetas: list
    nodes: np.ndarray
    fd_values: list
    rms: list


def _ac_rms(rc, u, nodes, values):
    """Root-mean-square gap to the benchmark grid; in 1-D over the interior
    and right-end nodes (i = 1..N), matching the reported curve."""
    if rc.d == 1:
        pred = u.value(nodes[1:, None])
        return float(np.sqrt(np.mean((pred - np.asarray(values)[1:]) ** 2)))
    XX, YY = np.meshgrid(nodes, nodes, indexing="ij")
    pts = np.column_stack([XX.ravel(), YY.ravel()])
    pred = u.value(pts)
    return float(np.sqrt(np.mean((pred - np.asarray(values).ravel()) ** 2)))


def run_allen_cahn(rc: RunConfig, out_dir=None) -> AllenCahnResult:
    """Sequential implicit stepping: each physical step trains one elliptic
    problem, warm-starting the solution net from the previous step and
    freezing its parameters as that step's previous-state field."""
    beta = rc.softplus_beta
    u_tmpl = ArchSpec.parse(rc.arch_u).build(beta)
    psi_tmpl = ArchSpec.parse(rc.arch_psi).build(beta)
    phi_net = ArchSpec.parse(rc.arch_phi).build(beta)
    nodes, fd_values = allen_cahn_fd_reference(rc)
    cfg = rc.npdhg_config()

    if rc.optimizer == "npdhg":
        step_fn = npdhg.npdhg_step
    elif rc.optimizer == "flat":
        step_fn = npdhg.flat_pdg_step
    elif rc.optimizer == "adam_pinn":
        step_fn = None
    else:
        raise ConfigError("pd_adam is the transport baseline")

    theta = None
    u_prev = allen_cahn_initial_field(rc.d)
    rows_all, thetas, rms = [], [], []
    iter_off, wall_off = 0, 0.0
    for k in range(1, rc.n_t + 1):
        spec = prob.allen_cahn_spec(u_prev, d=rc.d, h_t=rc.h_t, eps0=rc.eps0,
                                    lam=rc.lam, eps=rc.eps,
                                    pinn_coeff=rc.pinn_coeff,
                                    precond_op=rc.precond_op)
        phi = _truncated(phi_net, spec.domain)
        ref = grid_interpolant(rc.d, nodes, fd_values[k - 1])
        problem = Problem(spec=spec, u=u_tmpl, phi=phi, psi=psi_tmpl,
                          reference_map=ref)
        cfg_k = dataclasses.replace(cfg, seed=rc.seed + 1000 * k)
        ckpt = (os.path.join(out_dir, f"checkpoint_step{k:02d}.npdg")
                if out_dir else None)
        if step_fn is None:
            rows, state = npdhg.run_adam_pinn(problem, cfg_k, checkpoint_path=ckpt,
                                              theta0=theta)
        else:
            rows, state = npdhg.run_npdhg(problem, cfg_k, checkpoint_path=ckpt,
                                          step_fn=step_fn, theta0=theta)
        theta = state.theta.copy()
        thetas.append(theta)
        for r in rows:
            rows_all.append(dataclasses.replace(
                r, iter=r.iter + iter_off, wall_seconds=r.wall_seconds + wall_off))
        if rows_all:
            wall_off = rows_all[-1].wall_seconds
        iter_off += cfg.n_iter
        u_prev = u_tmpl.with_params(theta)
        rms.append(_ac_rms(rc, u_prev, nodes, fd_values[k - 1]))
    if out_dir and theta is not None:
        save_checkpoint(u_tmpl.with_params(theta), os.path.join(out_dir, "checkpoint.npdg"))
    return AllenCahnResult(rows=rows_all, thetas=thetas, nodes=nodes,
                           fd_values=fd_values, rms=rms)


# -- metrics persistence ----------------------------------------------------


CSV_COLUMNS = ("iter", "wall_seconds", "loss", "rel_l2", "rel_h1",
               "minres_iters_u", "minres_iters_phi", "minres_iters_psi",
               "minres_resid_u", "minres_resid_phi", "minres_resid_psi",
               "alpha", "beta1", "beta2")

_INT_COLUMNS = {"iter", "minres_iters_u", "minres_iters_phi", "minres_iters_psi"}


def _format_cell(name, value):
    if value is None:
        return ""
    if name in _INT_COLUMNS:
        return str(int(value))
    return f"{float(value):.17g}"


def write_metrics_csv(rows, path):
    """Serialize metric rows; floats carry 17 significant digits so the file
    is byte-stable across reruns (wall_seconds excepted)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            cells = [_format_cell(c, getattr(row, c)) for c in CSV_COLUMNS]
            fh.write(",".join(cells) + "\n")


def read_metrics_csv(path):
    """Inverse of write_metrics_csv; empty diagnostic cells become None."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        for line in fh:
            cells = line.rstrip("\n").split(",")
            kw = {}
            for name, cell in zip(CSV_COLUMNS, cells):
                if cell == "":
                    kw[name] = None
                elif name in _INT_COLUMNS:
                    kw[name] = int(cell)
                else:
                    kw[name] = float(cell)
            rows.append(MetricsRow(**kw))
    return rows


def grid_to_csv(path, nodes, values, d=1):
    """Write a grid snapshot as x[,y],value rows for downstream plotting."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if d == 1:
            fh.write("x,value\n")
            for x, v in zip(nodes, np.asarray(values)):
                fh.write(f"{x:.17g},{v:.17g}\n")
        else:
            fh.write("x,y,value\n")
            vals = np.asarray(values)
            for i, x in enumerate(nodes):
                for j, y in enumerate(nodes):
                    fh.write(f"{x:.17g},{y:.17g},{vals[i, j]:.17g}\n")


# -- experiment entry points ------------------------------------------------


@dataclasses.dataclass
class RunResult:
    config: RunConfig
    rows: list
    out_dir: str
    metrics_path: str
    checkpoint_path: str
    extra: object = None


def run_experiment(rc: RunConfig) -> RunResult:
    """Execute one configured run and persist its artifacts.

    Writes the resolved-config echo before training starts, then the metric
    CSV and the final checkpoint. Without run.out nothing is written.
    """
    validate_config(rc)
    out_dir = rc.out or ""
    metrics_path = ckpt_path = ""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.cfg"), "w", encoding="utf-8") as fh:
            fh.write(echo_config(rc))
        metrics_path = os.path.join(out_dir, "metrics.csv")
        ckpt_path = os.path.join(out_dir, "checkpoint.npdg")

    extra = None
    if rc.kind == "allen_cahn":
        extra = run_allen_cahn(rc, out_dir or None)
        rows = extra.rows
        ckpt_path = os.path.join(out_dir, "checkpoint.npdg") if out_dir else ""
    else:
        problem = build_problem(rc)
        cfg = rc.npdhg_config()
        ckpt = ckpt_path or None
        if rc.optimizer == "npdhg":
            rows, extra = npdhg.run_npdhg(problem, cfg, checkpoint_path=ckpt)
        elif rc.optimizer == "flat":
            rows, extra = npdhg.run_npdhg(problem, cfg, checkpoint_path=ckpt,
                                          step_fn=npdhg.flat_pdg_step)
        elif rc.optimizer == "adam_pinn":
            rows, extra = npdhg.run_adam_pinn(problem, cfg, checkpoint_path=ckpt)
        else:
            rows, extra = npdhg.run_pd_adam(problem, cfg, checkpoint_path=ckpt)
    if metrics_path:
        write_metrics_csv(rows, metrics_path)
    return RunResult(config=rc, rows=rows, out_dir=out_dir,
                     metrics_path=metrics_path, checkpoint_path=ckpt_path,
                     extra=extra)


def _same_arch(a: Mlp, b: Mlp) -> bool:
    if (a.d_in, a.d_h, a.d_out, a.n_l) != (b.d_in, b.d_h, b.d_out, b.n_l):
        return False
    if type(a.activation) is not type(b.activation):
        return False
    if isinstance(a.activation, Softplus):
        return math.isclose(a.activation.beta, b.activation.beta,
                            rel_tol=0.0, abs_tol=1e-12)
    return True


def eval_checkpoint(checkpoint_path, problem: Problem, n_eval_samples=100000,
                    seed=0):
    """Load saved parameters into the problem's solution template and score
    them on a fresh evaluation stream. Returns (rel_l2, rel_h1); problems
    scored against a reference map report (absolute L2 gap, nan)."""
    net = load_checkpoint(checkpoint_path)
    base = problem.u.base if isinstance(problem.u, TruncatedField) else problem.u
    if not isinstance(base, Mlp) or not _same_arch(net, base):
        raise ValueError(
            f"checkpoint {checkpoint_path} does not match the problem's "
            "solution architecture")
    u = problem.u.with_params(net.params)
    batch = prob.draw_eval_batch(problem.spec, int(n_eval_samples),
                                 Rng(seed).split("eval"))
    if problem.reference_map is not None:
        return npdhg._reference_l2(problem, u, batch), math.nan
    try:
        return (prob.relative_l2_error(problem.spec, u, batch),
                prob.relative_h1_error(problem.spec, u, batch))
    except ValueError:
        return math.nan, math.nan


# -- self checks ------------------------------------------------------------


def _check_adjoint():
    rng = np.random.default_rng(7)
    worst = 0.0
    for act in (Tanh(), Softplus(0.25), PReLU()):
        net = Mlp(2, 6, 1, 3, act)
        net.set_params(rng.normal(size=net.n_params) * 0.5)
        X = rng.normal(size=(5, 2))
        tr = net.bind(X, need="grad")
        v = rng.normal(size=net.n_params)
        w_val = rng.normal(size=(5, 1) if net.d_out == 1 else (5, net.d_out))
        w_grad = rng.normal(size=(5, 2))
        jv, jg = tr.jvp(v, need_grad=True)
        lhs = float(np.sum(np.atleast_2d(jv.reshape(5, -1)) * w_val)
                    + np.sum(jg.reshape(5, 2) * w_grad))
        rhs = float(tr.vjp(w_val=w_val[:, 0], w_grad=w_grad) @ v)
        scale = max(abs(lhs), abs(rhs), 1e-30)
        worst = max(worst, abs(lhs - rhs) / scale)
    ok = worst < 1e-12
    return ok, f"max adjoint mismatch {worst:.2e}"


def _check_gradient_fd():
    rng = np.random.default_rng(11)
    net = Mlp(3, 8, 1, 3, Tanh())
    net.set_params(rng.normal(size=net.n_params) * 0.5)
    X = rng.normal(size=(4, 3))
    w = rng.normal(size=4)

    def f(p):
        return float(net.with_params(p).value(X) @ w)

    g = net.bind(X, need="value").vjp(w_val=w)
    h = 1e-5
    worst = 0.0
    for i in rng.choice(net.n_params, size=25, replace=False):
        e = np.zeros(net.n_params)
        e[i] = h
        fd = (f(net.params + e) - f(net.params - e)) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-12))
    ok = worst < 1e-5
    return ok, f"max gradient mismatch {worst:.2e}"


def _check_gram_dense():
    rng = Rng(3)
    spec = prob.poisson_spec(2)
    u = Mlp(2, 4, 1, 3, Tanh())
    u.set_params(np.random.default_rng(5).normal(size=u.n_params) * 0.5)
    batch = prob.draw_batch(spec, 20, 8, rng.split("batch"))
    op = prob.gram_primal(spec, u, batch)
    M = assemble_dense(op)
    # independent route: explicit Jacobians from one-hot forward sweeps
    tr_i = u.bind(batch.interior, need="grad")
    tr_b = u.bind(batch.boundary, need="value")
    m = u.n_params
    Jg = np.empty((20, 2, m))
    Jb = np.empty((8, m))
    for k in range(m):
        e = np.zeros(m)
        e[k] = 1.0
        _, g = tr_i.jvp(e, need_grad=True)
        Jg[:, :, k] = g
        vb, _ = tr_b.jvp(e, need_grad=False)
        Jb[:, k] = vb.reshape(8)
    M_ref = (np.einsum("ndi,ndj->ij", Jg, Jg) / 20
             + spec.lam * (Jb.T @ Jb) / 8)
    err = float(np.max(np.abs(M - M_ref)))
    ok = err < 1e-10
    return ok, f"max entry gap {err:.2e}"


def _check_minres_dense():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(60, 60))
    A = A @ A.T + 60 * np.eye(60)
    b = rng.normal(size=60)
    op = SymmetricOperator(60, lambda v: A @ v)
    rep = minres(op, b, tol=1e-10, max_iter=600)
    err = float(np.linalg.norm(rep.solution - np.linalg.solve(A, b))
                / np.linalg.norm(np.linalg.solve(A, b)))
    ok = rep.converged and err < 1e-6
    return ok, f"relative error {err:.2e} in {rep.iterations} iterations"


def _check_erf():
    xs = np.linspace(-6.0, 6.0, 121)
    worst = max(abs(oracles.erf(float(x)) - math.erf(float(x))) for x in xs)
    ys = np.linspace(-0.999, 0.999, 41)
    round_trip = max(abs(oracles.erf(oracles.erfinv(float(y))) - float(y))
                     for y in ys)
    try:
        oracles.erfinv(1.0)
        return False, "erfinv(1) did not overflow"
    except OverflowError:
        pass
    ok = worst < 1e-13 and round_trip < 1e-10
    return ok, f"erf gap {worst:.1e}, inverse round trip {round_trip:.1e}"


def _check_transport_map():
    mix = oracles.GaussianMixture1D(np.array([2.0 / 3.0, 1.0 / 3.0]),
                                    np.array([-1.0, 1.0]),
                                    np.array([0.5, 0.5]))
    xs = np.linspace(-3.0, 3.0, 41)
    T = oracles.ot_map_1d(mix, xs)
    gap = float(np.max(np.abs(mix.cdf(T) - oracles.normal_cdf(xs))))
    monotone = bool(np.all(np.diff(T) > 0))
    ok = gap < 1e-9 and monotone
    return ok, f"pushforward identity gap {gap:.1e}, monotone={monotone}"


def _check_allen_cahn_fd():
    n = 100
    nodes = np.linspace(0.0, 2.0, n + 1)
    c = np.cos(np.pi * (nodes - 1.0))
    U0 = c - c * c
    grids = oracles.allen_cahn_fd_1d(U0, n, 0.1, 1, 0.1)
    U1 = grids[-1].values
    h = 2.0 / n
    lap = np.empty_like(U1)
    lap[1:-1] = (U1[2:] - 2 * U1[1:-1] + U1[:-2]) / h ** 2
    lap[0] = (U1[1] - U1[0]) / h ** 2
    lap[-1] = (U1[-2] - U1[-1]) / h ** 2
    res = (U1 - U0) / 0.1 - 0.1 * lap + (U1 ** 3 - U1) / 0.1
    r = float(np.max(np.abs(res)))
    ones = oracles.allen_cahn_fd_1d(np.ones(n + 1), n, 0.1, 3, 0.1)[-1].values
    eq = float(np.max(np.abs(ones - 1.0)))
    ok = r < 1e-8 and eq < 1e-12
    return ok, f"implicit residual {r:.1e}, equilibrium drift {eq:.1e}"


def _check_grid_rate():
    observed, spectral = oracles.grid_pdhg_demo(8)
    gap = abs(observed - spectral) / spectral
    ok = gap < 0.05
    return ok, f"observed {observed:.6f} vs spectral {spectral:.6f}"


def _check_checkpoint_roundtrip():
    rng = np.random.default_rng(9)
    net = Mlp(2, 5, 1, 3, Softplus(0.25))
    net.set_params(rng.normal(size=net.n_params))
    path = os.path.join(os.getcwd(), ".selfcheck_ckpt.npdg")
    try:
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        ok = (_same_arch(net, back)
              and np.array_equal(net.params, back.params))
    finally:
        if os.path.exists(path):
            os.remove(path)
    return ok, "bit-exact round trip" if ok else "round trip altered parameters"


def _check_determinism():
    rc = preset("poisson", 1)
    rc.arch_u = "1,8,1,3,tanh"
    rc.arch_phi = "1,8,1,3,tanh"
    rc.arch_psi = "1,6,1,3,tanh"
    rc.n_in, rc.n_bdd, rc.n_iter = 60, 8, 3
    rc.metric_every, rc.n_eval, rc.seed = 1, 200, 4
    problem = build_problem(rc)
    cfg = rc.npdhg_config()
    rows_a, st_a = npdhg.run_npdhg(problem, cfg)
    rows_b, st_b = npdhg.run_npdhg(build_problem(rc), cfg)
    same_rows = all(
        ra.iter == rb.iter and ra.loss == rb.loss and ra.rel_l2 == rb.rel_l2
        for ra, rb in zip(rows_a, rows_b)) and len(rows_a) == len(rows_b)
    same_params = np.array_equal(st_a.theta, st_b.theta)
    ok = same_rows and same_params
    return ok, "replay is bit-identical" if ok else "replay diverged"


_SELF_CHECKS = (
    ("derivative adjoint identity", _check_adjoint),
    ("derivative finite differences", _check_gradient_fd),
    ("gram operator dense equivalence", _check_gram_dense),
    ("minres dense agreement", _check_minres_dense),
    ("erf and inverse", _check_erf),
    ("transport map pushforward", _check_transport_map),
    ("allen-cahn implicit scheme", _check_allen_cahn_fd),
    ("grid saddle contraction rate", _check_grid_rate),
    ("checkpoint round trip", _check_checkpoint_roundtrip),
    ("trainer determinism", _check_determinism),
)


def self_check(stream=None):
    """Run every oracle against its target; returns True when all pass."""
    stream = stream if stream is not None else sys.stdout
    all_ok = True
    for name, fn in _SELF_CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        stream.write(f"[{'ok' if ok else 'FAIL'}] {name}: {detail}\n")
    return all_ok
