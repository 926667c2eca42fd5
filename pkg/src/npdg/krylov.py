"""Matrix-free symmetric linear algebra.

The natural-gradient updates never form their Gram matrices; every solve goes
through :func:`minres` against an abstract symmetric operator. The dense
helpers at the bottom exist for test oracles only and refuse to run at sizes
where forming the matrix would be a mistake.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "SymmetricOperator",
    "SolveReport",
    "minres",
    "dense_solve_spd",
    "assemble_dense",
    "operator_from_matrix",
]

_DENSE_LIMIT = 512


class SymmetricOperator:
    """A symmetric linear map on R^dim given by its matvec.

    Parameters
    ----------
    dim : int
        Dimension of the space the operator acts on.
    apply_fn : callable
        Maps a vector of shape ``(dim,)`` to another; must be linear and
        symmetric with respect to the Euclidean inner product.
    """

    def __init__(self, dim, apply_fn):
        self.dim = int(dim)
        self._apply = apply_fn

    def apply(self, v):
        return self._apply(v)


def operator_from_matrix(A) -> SymmetricOperator:
    A = np.asarray(A, dtype=np.float64)
    return SymmetricOperator(A.shape[0], lambda v: A @ v)


@dataclass
class SolveReport:
    """Outcome of one MINRES solve.

    ``relative_residual`` is recomputed from scratch (one extra matvec) after
    the iteration ends; ``recurrence_residual`` is the value the Lanczos/QR
    recurrence tracked, kept so tests can confirm the two agree.
    """

    solution: np.ndarray
    iterations: int
    relative_residual: float
    converged: bool
    recurrence_residual: float = 0.0
    breakdown: bool = False
    residual_history: list = field(default_factory=list)
    least_squares: bool = False


def minres(op: SymmetricOperator, b, tol: float = 1e-3, max_iter: int = 1000,
           shift: float = 0.0, least_squares_ok: bool = False) -> SolveReport:
    """Minimum-residual iteration for symmetric (possibly singular) systems.

    Solves ``(A + shift I) x = b`` with the Paige-Saunders recurrences,
    starting from the zero vector. Iteration stops when the tracked relative
    residual drops to ``tol`` or after ``max_iter`` steps. For a consistent
    singular system the Krylov space stays inside range(A), so the iteration
    converges to the minimum-norm solution without special handling.

    When b has a component outside range(A) the residual stalls at that
    component and can never meet the tolerance; iterating past the stall
    only amplifies roundoff along the null space. Callers that know their
    system may be inconsistent pass ``least_squares_ok=True``, which adds
    two stopping tests: ``||A r|| <= tol ||A|| ||r||`` (the iterate then
    solves the least-squares problem, reported via ``least_squares``), and
    a guard on the running estimate of cond(A) reaching the reciprocal
    machine precision. These tests stay off by default because the
    ``||A r||`` quantity also dips below tol transiently on ill-conditioned
    consistent systems, long before the b-relative residual converges.

    Returns
    -------
    SolveReport
        ``b = 0`` short-circuits to the zero solution, converged, at zero
        iterations. A Lanczos breakdown (Krylov space exhausted before the
        tolerance was met) returns the best iterate with ``breakdown=True``.
        ``converged`` covers both stopping tests.
    """
    b = np.asarray(b, dtype=np.float64).ravel()
    n = b.size
    if op.dim != n:
        raise ValueError(f"operator dimension {op.dim} does not match rhs {n}")
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    if shift:
        matvec = lambda v: op.apply(v) + shift * v
    else:
        matvec = op.apply

    x = np.zeros(n)
    beta1 = np.sqrt(b @ b)
    if beta1 == 0.0:
        return SolveReport(x, 0, 0.0, True, 0.0, False, [0.0])

    eps = np.finfo(np.float64).eps

    # Lanczos state
    r1 = b
    r2 = b
    y = b
    oldb = 0.0
    beta = beta1
    dbar = 0.0
    epsln = 0.0
    phibar = beta1
    cs = -1.0
    sn = 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    tnorm2 = 0.0
    gmax = 0.0
    gmin = np.inf

    history = [1.0]
    itn = 0
    breakdown = False
    least_squares = False
    while itn < max_iter:
        itn += 1
        s = 1.0 / beta
        v = s * y
        y = matvec(v)
        if itn >= 2:
            y = y - (beta / oldb) * r1
        alfa = v @ y
        y = y - (alfa / beta) * r2
        r1 = r2
        r2 = y
        oldb = beta
        beta = np.sqrt(y @ y)
        tnorm2 += alfa * alfa + oldb * oldb + beta * beta

        # previous plane rotation applied to the new Lanczos column
        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        root = np.hypot(gbar, dbar)  # ||A r_{k-1}|| / phibar_{k-1}
        gamma = np.sqrt(gbar * gbar + beta * beta)
        gamma = max(gamma, eps)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar
        gmax = max(gmax, gamma)
        gmin = min(gmin, gamma)

        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w

        history.append(phibar / beta1)
        if phibar <= tol * beta1:
            break
        if least_squares_ok and root <= tol * np.sqrt(tnorm2):
            # residual is orthogonal to range(A) up to tol: the iterate
            # already solves the least-squares problem
            least_squares = True
            break
        if least_squares_ok and gmax >= 0.1 / eps * gmin:
            breakdown = True
            break
        if beta <= np.sqrt(tnorm2) * eps:
            # Krylov space exhausted before reaching tol
            breakdown = True
            break

    recurrence = phibar / beta1
    true_res = float(np.linalg.norm(matvec(x) - b) / beta1)
    converged = true_res <= tol or least_squares
    return SolveReport(x, itn, true_res, converged, float(recurrence), breakdown,
                       history, least_squares=least_squares)


def dense_solve_spd(matrix, b):
    """Direct Cholesky solve of a small SPD system (test oracle).

    Raises on asymmetry, on indefiniteness, and on systems larger than the
    dense-oracle limit.
    """
    A = np.asarray(matrix, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = A.shape[0]
    if m > _DENSE_LIMIT:
        raise ValueError(f"dense oracle limited to {_DENSE_LIMIT}, got {m}")
    scale = np.max(np.abs(A)) if m else 0.0
    if np.max(np.abs(A - A.T)) > 1e-10 * (scale + 1.0):
        raise ValueError("matrix is not symmetric")
    try:
        cf = scipy.linalg.cho_factor(A, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc
    return scipy.linalg.cho_solve(cf, b)


def assemble_dense(op: SymmetricOperator) -> np.ndarray:
    """Materialize a small operator column by column (test oracle).

    Applies op to every basis vector and checks the result is symmetric.
    Refuses operators above the dense-oracle limit so nobody accidentally
    runs an O(m^2) assembly inside a training loop.
    """
    m = op.dim
    if m > _DENSE_LIMIT:
        raise ValueError(f"refusing to assemble operator of dimension {m}")
    M = np.empty((m, m))
    e = np.zeros(m)
    for k in range(m):
        e[k] = 1.0
        M[:, k] = op.apply(e)
        e[k] = 0.0
    scale = np.max(np.abs(M)) if m else 0.0
    if np.max(np.abs(M - M.T)) > 1e-8 * (scale + 1.0):
        raise ValueError("operator is not symmetric")
    return M
