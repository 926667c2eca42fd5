"""Independent reference solutions.

Everything in here is deliberately decoupled from the network/optimizer
stack: classical finite differences with Newton steps for the Allen-Cahn
flow, closed-form or CDF-inverted transport maps, hand-rolled error
functions, and a dense grid PDHG iteration whose contraction factor can be
cross-checked against a power-iteration eigenvalue. These are the
yardsticks the trained networks get measured against, so none of them may
share code paths with the things they validate (the lone exception: the 2-D
Allen-Cahn Newton step reuses the krylov MINRES as its inner solver, which
is itself validated against dense factorizations).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .krylov import SymmetricOperator, minres

__all__ = [
    "Grid1D",
    "Grid2D",
    "GaussianMixture1D",
    "allen_cahn_fd_1d",
    "allen_cahn_fd_2d",
    "erf",
    "erfinv",
    "normal_cdf",
    "ot_map_1d",
    "ot_map_gaussian",
    "grid_pdhg_demo",
]


# -- grids -----------------------------------------------------------------


@dataclass
class Grid1D:
    """Nodal values U_i at x_i = i*h, i = 0..N_x; spacing h = L / N_x."""

    h: float
    values: np.ndarray

    @property
    def n_nodes(self):
        return self.values.size

    def nodes(self, origin=0.0):
        return origin + self.h * np.arange(self.values.size)


@dataclass
class Grid2D:
    """Nodal values U[i, j] at (i*h_x, j*h_y)."""

    h_x: float
    h_y: float
    values: np.ndarray


# -- Allen-Cahn finite differences -----------------------------------------


def _lap_1d(U, h):
    """Second difference with homogeneous-Neumann ghosts U_{-1}=U_0,
    U_{N+1}=U_N."""
    out = np.empty_like(U)
    out[1:-1] = U[:-2] - 2.0 * U[1:-1] + U[2:]
    out[0] = U[1] - U[0]
    out[-1] = U[-2] - U[-1]
    return out / (h * h)


def allen_cahn_fd_1d(u0_grid, N_x, h_t, steps, eps0):
    """Implicit time stepping of u_t = eps0 Lap u - (u^3 - u)/eps0 in 1-D.

    Each step solves (U - U_prev)/h_t = eps0 D2 U - (U^3 - U)/eps0 by Newton
    iteration with tridiagonal solves, driven to max-norm residual 1e-10.
    ``u0_grid`` may be a Grid1D or a plain array of N_x + 1 nodal values on
    the benchmark domain [0, 2] (h = 2/N_x). Returns the list of all
    N-step grids including the initial one.
    """
    if N_x < 4:
        raise ValueError("need at least 4 cells")
    if h_t <= 0:
        raise ValueError("time step must be positive")
    if isinstance(u0_grid, Grid1D):
        h = u0_grid.h
        U = np.asarray(u0_grid.values, dtype=np.float64).copy()
    else:
        h = 2.0 / N_x
        U = np.asarray(u0_grid, dtype=np.float64).copy()
    if U.size != N_x + 1:
        raise ValueError(f"expected {N_x + 1} nodal values, got {U.size}")

    out = [Grid1D(h, U.copy())]
    n = U.size
    off = -h_t * eps0 / (h * h)
    # -Lap diagonal: 2/h^2 interior, 1/h^2 at the Neumann ends
    dlap = np.full(n, 2.0 / (h * h))
    dlap[0] = dlap[-1] = 1.0 / (h * h)
    ab = np.zeros((3, n))
    ab[0, 1:] = off
    ab[2, :-1] = off

    for step in range(1, steps + 1):
        Up = U.copy()
        for it in range(51):
            F = U - Up - h_t * (eps0 * _lap_1d(U, h) - (U ** 3 - U) / eps0)
            if np.max(np.abs(F)) <= 1e-10:
                break
            if it == 50:
                raise RuntimeError(f"Newton stalled at time step {step}")
            ab[1] = 1.0 + h_t * eps0 * dlap + (h_t / eps0) * (3.0 * U * U - 1.0)
            U -= solve_banded((1, 1), ab, F)
        out.append(Grid1D(h, U.copy()))
    return out


def _lap_2d(U, h_x, h_y):
    out = np.zeros_like(U)
    out[1:-1, :] += U[:-2, :] - 2.0 * U[1:-1, :] + U[2:, :]
    out[0, :] += U[1, :] - U[0, :]
    out[-1, :] += U[-2, :] - U[-1, :]
    out /= h_x * h_x
    t = np.zeros_like(U)
    t[:, 1:-1] += U[:, :-2] - 2.0 * U[:, 1:-1] + U[:, 2:]
    t[:, 0] += U[:, 1] - U[:, 0]
    t[:, -1] += U[:, -2] - U[:, -1]
    return out + t / (h_y * h_y)


def allen_cahn_fd_2d(u0_grid, N_x, N_y, h_t, steps, eps0):
    """2-D analogue of allen_cahn_fd_1d on the 5-point stencil.

    The Newton linearization is symmetric, so the inner solves go through
    MINRES. Plain arrays are taken as nodal values on [0, 2]^2.
    """
    if N_x < 4 or N_y < 4:
        raise ValueError("need at least 4 cells per axis")
    if isinstance(u0_grid, Grid2D):
        h_x, h_y = u0_grid.h_x, u0_grid.h_y
        U = np.asarray(u0_grid.values, dtype=np.float64).copy()
    else:
        h_x, h_y = 2.0 / N_x, 2.0 / N_y
        U = np.asarray(u0_grid, dtype=np.float64).copy()
    if U.shape != (N_x + 1, N_y + 1):
        raise ValueError(f"expected {(N_x + 1, N_y + 1)} nodal values, got {U.shape}")

    out = [Grid2D(h_x, h_y, U.copy())]
    shape = U.shape
    dim = U.size
    for step in range(1, steps + 1):
        Up = U.copy()
        for it in range(51):
            F = U - Up - h_t * (eps0 * _lap_2d(U, h_x, h_y) - (U ** 3 - U) / eps0)
            if np.max(np.abs(F)) <= 1e-9:
                break
            if it == 50:
                raise RuntimeError(f"Newton stalled at time step {step}")
            diag = 1.0 + (h_t / eps0) * (3.0 * U * U - 1.0)

            def jac(v, diag=diag):
                V = v.reshape(shape)
                JV = diag * V - h_t * eps0 * _lap_2d(V, h_x, h_y)
                return JV.ravel()

            rep = minres(SymmetricOperator(dim, jac), F.ravel(),
                         tol=1e-12, max_iter=50 * max(N_x, N_y))
            U -= rep.solution.reshape(shape)
        out.append(Grid2D(h_x, h_y, U.copy()))
    return out


# -- error functions -------------------------------------------------------

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def _erf_series(x):
    # erf(x) = 2/sqrt(pi) exp(-x^2) sum_n x (2x^2)^n / (2n+1)!!
    # all-positive terms, good to |x| around 3
    term = x.copy()
    total = x.copy()
    x2 = 2.0 * x * x
    for n in range(1, 120):
        term = term * x2 / (2 * n + 1)
        total += term
        if np.all(np.abs(term) <= 1e-18 * np.abs(total) + 1e-300):
            break
    return _TWO_OVER_SQRT_PI * np.exp(-x * x) * total


def _erfc_cf(x):
    # sqrt(pi) exp(x^2) erfc(x) = 1/(x+ (1/2)/(x+ (2/2)/(x+ (3/2)/(x+ ...))))
    # evaluated by the modified Lentz recurrence; x >= 2 only
    tiny = 1e-300
    f = np.full_like(x, tiny)
    C = f.copy()
    D = np.zeros_like(x)
    for j in range(1, 120):
        a = 1.0 if j == 1 else (j - 1) / 2.0
        D = x + a * D
        D[D == 0.0] = tiny
        C = x + a / C
        C[C == 0.0] = tiny
        D = 1.0 / D
        delta = C * D
        f = f * delta
        if np.all(np.abs(delta - 1.0) < 1e-17):
            break
    return np.exp(-x * x) / math.sqrt(math.pi) * f


def erf(x):
    """Error function, |error| <= 1e-12, scalars or arrays."""
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    ax = np.abs(arr)
    small = ax <= 2.5
    if np.any(small):
        out[small] = _erf_series(arr[small])
    if np.any(~small):
        big = ax[~small]
        out[~small] = np.sign(arr[~small]) * (1.0 - _erfc_cf(big))
    return float(out[0]) if scalar else out


def erfinv(y):
    """Inverse error function on (-1, 1): rational seed plus Newton."""
    arr = np.asarray(y, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr).copy()
    if np.any(np.abs(arr) > 1.0):
        raise ValueError("erfinv domain is [-1, 1]")
    if np.any(np.abs(arr) == 1.0):
        raise OverflowError("erfinv is infinite at +-1")
    # Winitzki's approximation as the seed
    a = 0.147
    ln1 = np.log1p(-arr * arr)
    u = 2.0 / (math.pi * a) + ln1 / 2.0
    t = np.sign(arr) * np.sqrt(np.sqrt(u * u - ln1 / a) - u)
    for _ in range(6):
        err = erf(t) - arr
        t = t - err / (_TWO_OVER_SQRT_PI * np.exp(-t * t))
        if np.all(np.abs(err) < 1e-15):
            break
    return float(t[0]) if scalar else t


def normal_cdf(x):
    """Standard normal CDF via erf."""
    return 0.5 * (1.0 + erf(np.asarray(x, dtype=np.float64) / math.sqrt(2.0)))


# -- optimal transport maps ------------------------------------------------


@dataclass
class GaussianMixture1D:
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.asarray(self.means, dtype=np.float64).ravel()
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).ravel()
        if not (self.weights.size == self.means.size == self.sigmas.size):
            raise ValueError("component arrays must have equal length")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights <= 0):
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.sigmas <= 0):
            raise ValueError("standard deviations must be positive")

    def cdf(self, y):
        y = np.asarray(y, dtype=np.float64)
        z = (y[..., None] - self.means) / self.sigmas
        return np.sum(self.weights * normal_cdf(z), axis=-1)


def ot_map_1d(mixture: GaussianMixture1D, x):
    """Monotone transport map from N(0, 1) to the mixture: G^{-1}(Phi(x)),
    with the mixture CDF inverted by bisection to 1e-12."""
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    p = normal_cdf(arr)
    span = 15.0 * float(np.max(mixture.sigmas)) + float(np.max(np.abs(arr))) + 1.0
    lo = np.full(arr.shape, float(np.min(mixture.means)) - span)
    hi = np.full(arr.shape, float(np.max(mixture.means)) + span)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = mixture.cdf(mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) <= 1e-13:
            break
    out = 0.5 * (lo + hi)
    return float(out[0]) if scalar else out


def _spd_sqrt(S, name):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.max(np.abs(S - S.T)) > 1e-10 * max(1.0, np.max(np.abs(S))):
        raise ValueError(f"{name} must be symmetric")
    vals, vecs = np.linalg.eigh(S)
    if vals.min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    root = np.sqrt(vals)
    return (vecs * root) @ vecs.T, (vecs / root) @ vecs.T


def ot_map_gaussian(Sigma0, Sigma1, mu0=None, mu1=None):
    """Affine transport between Gaussians: returns (A, b) with
    A = S0^{-1/2} (S0^{1/2} S1 S0^{1/2})^{1/2} S0^{-1/2}, b = mu1 - A mu0."""
    half0, inv_half0 = _spd_sqrt(Sigma0, "Sigma0")
    S1 = np.asarray(Sigma1, dtype=np.float64)
    mid = half0 @ S1 @ half0
    mid_half, _ = _spd_sqrt(mid, "Sigma1")  # SPD iff Sigma1 is
    A = inv_half0 @ mid_half @ inv_half0
    d = A.shape[0]
    mu0 = np.zeros(d) if mu0 is None else np.asarray(mu0, dtype=np.float64)
    mu1 = np.zeros(d) if mu1 is None else np.asarray(mu1, dtype=np.float64)
    return A, mu1 - A @ mu0


# -- grid PDHG contraction demo --------------------------------------------


def _dirichlet_laplacian(N_x):
    h = 1.0 / (N_x + 1)
    A = (np.diag(np.full(N_x, 2.0)) - np.diag(np.ones(N_x - 1), 1)
         - np.diag(np.ones(N_x - 1), -1)) / (h * h)
    return A


def grid_pdhg_demo(N_x, tau_x=None, tau_y=None, steps=None):
    """Un-preconditioned PDHG on the grid Laplacian system A x = b.

    Runs the three-line iteration (dual ascent, extrapolation with omega = 1,
    primal descent), measures the tail contraction factor of the joint error,
    and independently computes the iteration's spectral radius as
    sqrt(lambda_max(I - tau_x tau_y A^T A)) by power iteration. Returns
    (observed_rate, spectral_rate). A divergent iteration shows up as an
    observed rate >= 1, it is reported rather than raised.
    """
    A = _dirichlet_laplacian(N_x)
    h = 1.0 / (N_x + 1)
    lam_max = (2.0 - 2.0 * math.cos(N_x * math.pi / (N_x + 1))) / (h * h)
    if tau_x is None:
        tau_x = 0.9 / lam_max
    if tau_y is None:
        tau_y = 0.9 / lam_max

    # spectral radius: every 2x2 mode block of the iteration matrix has
    # determinant 1 - tau_x tau_y lambda_i^2, so rho^2 is the top eigenvalue
    # of S = I - tau_x tau_y A^T A whenever the blocks are complex pairs
    i = np.arange(1, N_x + 1)
    v = np.sin(math.pi * i / (N_x + 1))
    v /= np.linalg.norm(v)
    rho2 = 0.0
    for _ in range(500):
        w = v - tau_x * tau_y * (A @ (A @ v))
        new = float(v @ w)
        v = w / np.linalg.norm(w)
        if abs(new - rho2) <= 1e-14 * max(abs(new), 1.0):
            rho2 = new
            break
        rho2 = new
    spectral_rate = math.sqrt(max(rho2, 0.0))

    if steps is None:
        decay = -math.log(min(spectral_rate, 1.0 - 1e-12))
        steps = int(min(2_600_000, max(20_000, 28.0 / decay)))

    x_true = (np.sin(math.pi * i / (N_x + 1))
              + 0.3 * np.sin(2.0 * math.pi * i / (N_x + 1)))
    b = A @ x_true
    x = np.zeros(N_x)
    y = np.zeros(N_x)
    rec = max(1, steps // 4000)
    ts, errs = [], []
    for t in range(1, steps + 1):
        y_new = y + tau_y * (A @ x - b)
        y_tilde = 2.0 * y_new - y
        y = y_new
        x = x - tau_x * (A @ y_tilde)
        if t % rec == 0:
            e = math.sqrt(float(np.sum((x - x_true) ** 2) + np.sum(y ** 2)))
            if not math.isfinite(e):
                break
            ts.append(t)
            errs.append(e)

    ts = np.array(ts, dtype=np.float64)
    errs = np.array(errs)
    floor = max(errs[0], 1.0) * 1e-13
    keep = errs > floor
    ts, errs = ts[keep], errs[keep]
    # fit the second half of what is left above the noise floor
    start = ts.size // 2
    if ts.size - start < 8:
        start = max(0, ts.size - 8)
    slope = np.polyfit(ts[start:], np.log(errs[start:]), 1)[0]
    observed_rate = math.exp(slope)
    return observed_rate, spectral_rate
