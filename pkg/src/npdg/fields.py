"""Neural fields with hand-written derivative services.

The field classes here expose everything the natural-gradient machinery needs
from a network: values, gradients with respect to the input, Laplacians, and
parameter-space JVPs/VJPs of both the value and the input gradient. All of it
is implemented as explicit layerwise tangent and cotangent sweeps over cached
forward traces; there is no autodiff tape anywhere.

Shapes. Batches are rows: ``X`` is ``(N, d_in)``. For scalar fields values are
``(N,)`` and input gradients ``(N, d_in)``; for vector fields they are
``(N, d_out)`` and ``(N, d_in, d_out)``. A single point may be passed as a
1-d array and results lose their batch axis accordingly.

Everything is float64.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tanh",
    "Softplus",
    "PReLU",
    "Mlp",
    "TruncatedField",
    "LinearField",
    "AnalyticField",
    "param_count",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "zeta",
    "zeta_grad",
]

# Threshold above which softplus is treated as exactly linear, in units of
# beta*x. Matches the customary numerically-stable implementation.
_SOFTPLUS_REVERT = 20.0


class Tanh:
    """Hyperbolic tangent activation."""

    id = 0

    def f(self, z):
        return np.tanh(z)

    def d1(self, z):
        t = np.tanh(z)
        return 1.0 - t * t

    def d2(self, z):
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)

    def d3(self, z):
        t = np.tanh(z)
        s = 1.0 - t * t
        return -2.0 * s * (1.0 - 3.0 * t * t)

    def __repr__(self):
        return "Tanh()"

    def __eq__(self, other):
        return isinstance(other, Tanh)


class Softplus:
    """Softplus with sharpness ``beta``; linear beyond beta*x > 20.

    f(x) = log(1 + exp(beta x)) / beta, with f(x) = x once beta*x exceeds the
    revert threshold. In the revert region the derivatives are (1, 0, 0).
    """

    id = 1

    def __init__(self, beta: float = 1.0):
        if not beta > 0:
            raise ValueError("softplus beta must be positive")
        self.beta = float(beta)

    def _sigmoid(self, t):
        e = np.exp(-np.abs(t))
        return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def f(self, z):
        t = self.beta * z
        rev = t > _SOFTPLUS_REVERT
        safe = np.where(rev, 0.0, t)
        return np.where(rev, z, np.log1p(np.exp(safe)) / self.beta)

    def d1(self, z):
        t = self.beta * z
        return np.where(t > _SOFTPLUS_REVERT, 1.0, self._sigmoid(t))

    def d2(self, z):
        t = self.beta * z
        s = self._sigmoid(t)
        return np.where(t > _SOFTPLUS_REVERT, 0.0, self.beta * s * (1.0 - s))

    def d3(self, z):
        t = self.beta * z
        s = self._sigmoid(t)
        out = self.beta * self.beta * s * (1.0 - s) * (1.0 - 2.0 * s)
        return np.where(t > _SOFTPLUS_REVERT, 0.0, out)

    def __repr__(self):
        return f"Softplus(beta={self.beta!r})"

    def __eq__(self, other):
        return isinstance(other, Softplus) and other.beta == self.beta


class PReLU:
    """Leaky ReLU with one learnable slope per hidden activation layer.

    The slopes live at the end of the flat parameter vector, one per hidden
    layer, initialized to 0.25. Second input derivatives vanish off the kink,
    so Laplacian queries are rejected for PReLU networks.
    """

    id = 2

    def __repr__(self):
        return "PReLU()"

    def __eq__(self, other):
        return isinstance(other, PReLU)


def param_count(d_in: int, d_h: int, d_out: int, n_l: int, activation=None) -> int:
    """Number of parameters of ``Mlp(d_in, d_h, d_out, n_l)`` by enumeration.

    Counts d_h*(d_in+1) for the first layer, d_h*(d_h+1) for each of the
    n_l-2 middle layers, d_out*(d_h+1) for the affine output layer, plus
    n_l-1 slope scalars for PReLU.
    """
    if n_l < 2:
        raise ValueError("n_l must be at least 2")
    m = d_h * (d_in + 1) + (n_l - 2) * d_h * (d_h + 1) + d_out * (d_h + 1)
    if isinstance(activation, PReLU):
        m += n_l - 1
    return m


def _layer_widths(d_in, d_h, d_out, n_l):
    return [d_in] + [d_h] * (n_l - 1) + [d_out]


def init_params(d_in, d_h, d_out, n_l, activation, rng) -> np.ndarray:
    """Per-layer uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and
    biases; PReLU slopes start at 0.25. Deterministic given the rng state."""
    widths = _layer_widths(d_in, d_h, d_out, n_l)
    gen = rng.generator if hasattr(rng, "generator") else rng
    chunks = []
    for k in range(1, n_l + 1):
        fan_in = widths[k - 1]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(gen.uniform(-bound, bound, size=widths[k] * fan_in))
        chunks.append(gen.uniform(-bound, bound, size=widths[k]))
    if isinstance(activation, PReLU):
        chunks.append(np.full(n_l - 1, 0.25))
    return np.concatenate(chunks)


def _bmm(T, M):
    # (N, i, a) @ (a, b) -> (N, i, b) through one BLAS call.
    n, i, a = T.shape
    return (np.ascontiguousarray(T).reshape(n * i, a) @ M).reshape(n, i, M.shape[1])


def _contract_ka(C, P):
    # einsum('nik,nia->ka', C, P) through one BLAS call.
    n, i, k = C.shape
    a = P.shape[2]
    return np.ascontiguousarray(C).reshape(n * i, k).T @ np.ascontiguousarray(P).reshape(n * i, a)


class Mlp:
    """Dense multilayer perceptron with a flat float64 parameter vector.

    Layer 1 maps d_in -> d_h, the n_l-2 middle layers map d_h -> d_h, and the
    final layer is affine d_h -> d_out. The activation is applied after every
    layer except the last.
    """

    def __init__(self, d_in, d_h, d_out, n_l, activation=None, params=None):
        if n_l < 2:
            raise ValueError("n_l must be at least 2")
        self.d_in = int(d_in)
        self.d_h = int(d_h)
        self.d_out = int(d_out)
        self.n_l = int(n_l)
        self.activation = activation if activation is not None else Tanh()
        self.widths = _layer_widths(self.d_in, self.d_h, self.d_out, self.n_l)
        self.n_params = param_count(self.d_in, self.d_h, self.d_out, self.n_l, self.activation)
        self._prelu = isinstance(self.activation, PReLU)
        # slice table into the flat vector: (W_k, b_k) pairs then slopes
        self._slices = []
        off = 0
        for k in range(1, self.n_l + 1):
            nw = self.widths[k] * self.widths[k - 1]
            self._slices.append((slice(off, off + nw), slice(off + nw, off + nw + self.widths[k])))
            off += nw + self.widths[k]
        self._slope_off = off
        if params is None:
            params = np.zeros(self.n_params)
        self.set_params(params)

    # -- parameter plumbing -------------------------------------------------

    def set_params(self, params):
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise ValueError("non-finite parameter vector")
        self.params = params

    def with_params(self, params) -> "Mlp":
        return Mlp(self.d_in, self.d_h, self.d_out, self.n_l, self.activation, params)

    @classmethod
    def initialized(cls, d_in, d_h, d_out, n_l, activation, rng) -> "Mlp":
        p = init_params(d_in, d_h, d_out, n_l, activation, rng)
        return cls(d_in, d_h, d_out, n_l, activation, p)

    def _unpack(self, vec):
        Ws, bs = [], []
        for k, (sw, sb) in enumerate(self._slices, start=1):
            Ws.append(vec[sw].reshape(self.widths[k], self.widths[k - 1]))
            bs.append(vec[sb])
        slopes = vec[self._slope_off:] if self._prelu else None
        return Ws, bs, slopes

    # -- evaluation ---------------------------------------------------------

    def _batched(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.d_in:
            raise ValueError(f"expected points in R^{self.d_in}, got shape {X.shape}")
        return X, single

    def bind(self, X, need: str = "grad") -> "MlpTrace":
        """Cache a forward trace at ``X`` for repeated jvp/vjp calls.

        need is one of 'value', 'grad', 'lap'; each level includes the
        previous one. The Laplacian chain requires a twice-differentiable
        activation and d_out = 1.
        """
        X, _ = self._batched(X)
        return MlpTrace(self, X, need)

    def value(self, X):
        X, single = self._batched(X)
        out = MlpTrace(self, X, "value").val
        return out[0] if single else out

    def input_gradient(self, X):
        X, single = self._batched(X)
        out = MlpTrace(self, X, "grad").grad
        return out[0] if single else out

    def input_laplacian(self, X):
        X, single = self._batched(X)
        out = MlpTrace(self, X, "lap").lap
        return out[0] if single else out

    def param_jvp(self, X, v, need: str = "grad"):
        """Directional derivative of (value, input_gradient) along ``v``."""
        X, single = self._batched(X)
        tv, tg = MlpTrace(self, X, need).jvp(v)
        if single:
            tv = tv[0]
            tg = None if tg is None else tg[0]
        return tv, tg

    def param_vjp(self, X, w_val=None, w_grad=None, w_lap=None):
        """Accumulate (dvalue/dparams)^T w_val + (dgrad/dparams)^T w_grad
        (+ the Laplacian term when w_lap is given) over the batch."""
        X, _ = self._batched(X)
        need = "lap" if w_lap is not None else ("grad" if w_grad is not None else "value")
        return MlpTrace(self, X, need).vjp(w_val=w_val, w_grad=w_grad, w_lap=w_lap)


class MlpTrace:
    """Forward pass of an Mlp on one batch with everything the tangent and
    cotangent sweeps reuse: pre-activations, activation derivatives, the
    input-gradient chain and (optionally) the Laplacian chain."""

    def __init__(self, mlp: Mlp, X, need):
        if need not in ("value", "grad", "lap"):
            raise ValueError(f"unknown trace level {need!r}")
        self.mlp = mlp
        self.need = need
        self.X = X
        L = mlp.n_l
        act = mlp.activation
        prelu = mlp._prelu
        if need == "lap":
            if prelu:
                raise ValueError("Laplacian is unsupported for PReLU activations")
            if mlp.d_out != 1:
                raise ValueError("Laplacian requires d_out = 1")
        Ws, bs, slopes = mlp._unpack(mlp.params)
        self.Ws, self.bs, self.slopes = Ws, bs, slopes

        N = X.shape[0]
        self.N = N
        A = X
        self.A = [X]          # A[k] activation output of layer k, A[0] = X
        self.Z = [None]       # pre-activations, 1-based
        self.D = [None]       # f'(Z_k) for hidden layers
        self.E = [None]
        self.F = [None]
        self.mask = [None]    # Z_k < 0, PReLU only
        self.PZ = [None]      # d(Z_k)/dx, (N, d_in, w_k)
        self.P = [None]       # d(A_k)/dx
        self.Q = [None]       # sum_x PZ_k^2, Laplacian chain
        self.SZ = [None]      # Lap Z_k
        self.S = [None]       # Lap A_k

        want_grad = need in ("grad", "lap")
        want_lap = need == "lap"
        P = None
        S = None
        for k in range(1, L + 1):
            W, b = Ws[k - 1], bs[k - 1]
            Z = A @ W.T + b
            self.Z.append(Z)
            if want_grad:
                if k == 1:
                    PZ = np.broadcast_to(W.T[None, :, :], (N, mlp.d_in, W.shape[0]))
                else:
                    PZ = _bmm(P, W.T)
                self.PZ.append(PZ)
            if want_lap:
                SZ = np.zeros((N, W.shape[0])) if k == 1 else S @ W.T
                Qk = np.einsum("nik,nik->nk", PZ, PZ) if k > 1 else np.sum(W.T * W.T, axis=0)[None, :] * np.ones((N, 1))
                self.SZ.append(SZ)
                self.Q.append(Qk)
            if k < L:
                if prelu:
                    a_k = slopes[k - 1]
                    m_k = Z < 0
                    D = np.where(m_k, a_k, 1.0)
                    A = np.where(m_k, a_k * Z, Z)
                    self.mask.append(m_k)
                    self.D.append(D)
                    self.E.append(None)
                    self.F.append(None)
                else:
                    D = act.d1(Z)
                    A = act.f(Z)
                    self.mask.append(None)
                    self.D.append(D)
                    self.E.append(act.d2(Z))
                    self.F.append(act.d3(Z) if want_lap else None)
                if want_grad:
                    P = PZ * D[:, None, :]
                    self.P.append(P)
                if want_lap:
                    S = D * SZ + self.E[k] * Qk
                    self.S.append(S)
            else:
                A = Z
                if want_grad:
                    P = PZ
                    self.P.append(P)
                if want_lap:
                    S = SZ
                    self.S.append(S)
            self.A.append(A)

        d_out = mlp.d_out
        self.val = A[:, 0] if d_out == 1 else A
        if want_grad:
            self.grad = P[:, :, 0] if d_out == 1 else P
        if want_lap:
            self.lap = S[:, 0]

    # -- tangent sweep ------------------------------------------------------

    def jvp(self, v, need_grad=None):
        """Tangents of (value, input_gradient) along the parameter direction
        ``v``. Returns (t_val, t_grad); t_grad is None when the trace or the
        caller asked for values only."""
        mlp = self.mlp
        if need_grad is None:
            need_grad = self.need in ("grad", "lap")
        elif need_grad and self.need == "value":
            raise ValueError("trace was bound without the gradient chain")
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != mlp.n_params:
            raise ValueError(f"expected direction of length {mlp.n_params}")
        tWs, tbs, tslopes = mlp._unpack(v)
        L = mlp.n_l
        N = self.N
        tA = None
        tP = None
        for k in range(1, L + 1):
            W = self.Ws[k - 1]
            tW, tb = tWs[k - 1], tbs[k - 1]
            tZ = self.A[k - 1] @ tW.T + tb
            if tA is not None:
                tZ = tZ + tA @ W.T
            if need_grad:
                if k == 1:
                    tPZ = np.broadcast_to(tW.T[None, :, :], (N, mlp.d_in, tW.shape[0]))
                else:
                    tPZ = _bmm(self.P[k - 1], tW.T)
                    tPZ += _bmm(tP, W.T)
            if k < L:
                D = self.D[k]
                if mlp._prelu:
                    ta = tslopes[k - 1]
                    m_k = self.mask[k]
                    tD = np.where(m_k, ta, 0.0)
                    tA = D * tZ + np.where(m_k, self.Z[k], 0.0) * ta
                else:
                    tD = self.E[k] * tZ
                    tA = D * tZ
                if need_grad:
                    tP = tPZ * D[:, None, :] + self.PZ[k] * tD[:, None, :]
            else:
                tA = tZ
                if need_grad:
                    tP = tPZ
        d_out = mlp.d_out
        t_val = tA[:, 0] if d_out == 1 else tA
        if not need_grad:
            return t_val, None
        t_grad = tP[:, :, 0] if d_out == 1 else tP
        return t_val, t_grad

    # -- cotangent sweep ----------------------------------------------------

    def vjp(self, w_val=None, w_grad=None, w_lap=None):
        """Pull cotangents on (value, input_gradient, Laplacian) back to a
        flat parameter cotangent. Each w_* may be None (treated as zero)."""
        mlp = self.mlp
        L = mlp.n_l
        N = self.N
        d_out = mlp.d_out
        use_grad = w_grad is not None
        use_lap = w_lap is not None
        if use_grad and self.need == "value":
            raise ValueError("trace was bound without the gradient chain")
        if use_lap and self.need != "lap":
            raise ValueError("trace was bound without the Laplacian chain")

        if w_val is None:
            Abar = np.zeros((N, d_out))
        else:
            w_val = np.asarray(w_val, dtype=np.float64)
            Abar = w_val[:, None] if d_out == 1 else w_val
        if use_grad:
            w_grad = np.asarray(w_grad, dtype=np.float64)
            Pbar = w_grad[:, :, None] if d_out == 1 else w_grad
        else:
            Pbar = None
        if use_lap:
            Sbar = np.asarray(w_lap, dtype=np.float64)[:, None]
        else:
            Sbar = None

        out = np.zeros(mlp.n_params)
        oWs, obs, _ = mlp._unpack(out)  # views into out
        oslopes = out[mlp._slope_off:] if mlp._prelu else None

        Zbar = Abar
        PZbar = Pbar
        SZbar = Sbar
        for k in range(L, 0, -1):
            if k < L:
                D = self.D[k]
                # reverse of the hidden-layer combination step
                Dbar = np.einsum("nik,nik->nk", Pbar, self.PZ[k]) if Pbar is not None else None
                if Sbar is not None:
                    d_add = Sbar * self.SZ[k]
                    Dbar = d_add if Dbar is None else Dbar + d_add
                    Qbar = Sbar * self.E[k]
                    Ebar = Sbar * self.Q[k]
                else:
                    Qbar = None
                    Ebar = None
                PZbar = Pbar * D[:, None, :] if Pbar is not None else None
                if Qbar is not None:
                    add = 2.0 * self.PZ[k] * Qbar[:, None, :]
                    PZbar = add if PZbar is None else PZbar + add
                SZbar = Sbar * D if Sbar is not None else None
                Zbar = Abar * D
                if mlp._prelu:
                    m_k = self.mask[k]
                    s = np.sum(np.where(m_k, self.Z[k], 0.0) * Abar)
                    if Dbar is not None:
                        s += np.sum(np.where(m_k, Dbar, 0.0))
                    oslopes[k - 1] += s
                else:
                    if Dbar is not None:
                        Zbar = Zbar + Dbar * self.E[k]
                    if Ebar is not None:
                        Zbar = Zbar + Ebar * self.F[k]
            # reverse of the affine step Z_k = A_{k-1} W_k^T + b_k
            W = self.Ws[k - 1]
            oWs[k - 1] += Zbar.T @ self.A[k - 1]
            obs[k - 1] += Zbar.sum(axis=0)
            if PZbar is not None:
                if k == 1:
                    oWs[0] += PZbar.sum(axis=0).T
                else:
                    oWs[k - 1] += _contract_ka(PZbar, self.P[k - 1])
            if SZbar is not None and k > 1:
                oWs[k - 1] += SZbar.T @ self.S[k - 1]
            if k > 1:
                Abar = Zbar @ W
                Pbar = _bmm(PZbar, W) if PZbar is not None else None
                Sbar = SZbar @ W if SZbar is not None else None
        return out


def zeta(X, a, b):
    """Distance-to-boundary factor min_k min(x_k - a_k, b_k - x_k)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    lo = X - a
    hi = b - X
    return np.minimum(lo.min(axis=1), hi.min(axis=1))


def zeta_grad(X, a, b):
    """Gradient of zeta. Ties go to the smallest coordinate index, lower face
    first; the kink set has measure zero under every sampling measure used."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    cols = np.empty((n, 2 * d))
    cols[:, 0::2] = X - a
    cols[:, 1::2] = b - X
    idx = np.argmin(cols, axis=1)
    g = np.zeros((n, d))
    coord = idx // 2
    sign = np.where(idx % 2 == 0, 1.0, -1.0)
    g[np.arange(n), coord] = sign
    return g


class TruncatedField:
    """Scalar field base(x) * zeta(x) vanishing on a box boundary.

    Used for the interior dual network on box domains; all parameter-space
    derivatives are forwarded to the base network with cotangents adjusted by
    the product rule.
    """

    def __init__(self, base: Mlp, a, b):
        if base.d_out != 1:
            raise ValueError("truncation requires a scalar base field")
        self.base = base
        self.a = np.broadcast_to(np.asarray(a, dtype=np.float64), (base.d_in,)).copy()
        self.b = np.broadcast_to(np.asarray(b, dtype=np.float64), (base.d_in,)).copy()
        if not np.all(self.a < self.b):
            raise ValueError("box must satisfy a < b")
        self.d_in = base.d_in
        self.d_out = 1

    @property
    def n_params(self):
        return self.base.n_params

    @property
    def params(self):
        return self.base.params

    def set_params(self, p):
        self.base.set_params(p)

    def with_params(self, p):
        return TruncatedField(self.base.with_params(p), self.a, self.b)

    def bind(self, X, need="grad"):
        if need == "lap":
            raise ValueError("Laplacian of a truncated field is unsupported")
        return TruncatedTrace(self, np.atleast_2d(np.asarray(X, dtype=np.float64)), need)

    def value(self, X):
        X2 = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = self.base.value(X2) * zeta(X2, self.a, self.b)
        return out[0] if np.asarray(X).ndim == 1 else out

    def input_gradient(self, X):
        X2 = np.atleast_2d(np.asarray(X, dtype=np.float64))
        z = zeta(X2, self.a, self.b)
        gz = zeta_grad(X2, self.a, self.b)
        out = z[:, None] * self.base.input_gradient(X2) + self.base.value(X2)[:, None] * gz
        return out[0] if np.asarray(X).ndim == 1 else out

    def input_laplacian(self, X):
        raise ValueError("Laplacian of a truncated field is unsupported")

    def param_jvp(self, X, v, need="grad"):
        return self.bind(X, need).jvp(v)

    def param_vjp(self, X, w_val=None, w_grad=None, w_lap=None):
        if w_lap is not None:
            raise ValueError("Laplacian of a truncated field is unsupported")
        need = "grad" if w_grad is not None else "value"
        return self.bind(X, need).vjp(w_val=w_val, w_grad=w_grad)


class TruncatedTrace:
    def __init__(self, field: TruncatedField, X, need):
        self.field = field
        self.inner = field.base.bind(X, need)
        self.z = zeta(X, field.a, field.b)
        self.gz = zeta_grad(X, field.a, field.b)
        self.val = self.inner.val * self.z
        if need in ("grad", "lap"):
            self.grad = self.z[:, None] * self.inner.grad + self.inner.val[:, None] * self.gz

    def jvp(self, v, need_grad=None):
        tv, tg = self.inner.jvp(v, need_grad=need_grad)
        if tg is None:
            return self.z * tv, None
        return self.z * tv, self.z[:, None] * tg + tv[:, None] * self.gz

    def vjp(self, w_val=None, w_grad=None, w_lap=None):
        if w_lap is not None:
            raise ValueError("Laplacian of a truncated field is unsupported")
        # adjoint of the product-rule jvp above
        wv = None
        wg = None
        if w_val is not None:
            wv = self.z * np.asarray(w_val, dtype=np.float64)
        if w_grad is not None:
            w_grad = np.asarray(w_grad, dtype=np.float64)
            extra = np.sum(w_grad * self.gz, axis=1)
            wv = extra if wv is None else wv + extra
            wg = self.z[:, None] * w_grad
        return self.inner.vjp(w_val=wv, w_grad=wg)


class LinearField:
    """Field linear in its parameters: u(x) = sum_k theta_k b_k(x).

    Each basis entry is a callable returning (values (N,), gradients (N, d)).
    Mainly for oracle tests and diagnostics where the Gram system can be
    assembled and solved densely by hand.
    """

    def __init__(self, d_in, basis, params=None):
        self.d_in = int(d_in)
        self.d_out = 1
        self.basis = list(basis)
        self.n_params = len(self.basis)
        if params is None:
            params = np.zeros(self.n_params)
        self.set_params(params)

    def set_params(self, p):
        p = np.asarray(p, dtype=np.float64).ravel()
        if p.size != self.n_params:
            raise ValueError("parameter length mismatch")
        self.params = p

    def with_params(self, p):
        return LinearField(self.d_in, self.basis, p)

    def _tableau(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        vals = np.empty((X.shape[0], self.n_params))
        grads = np.empty((X.shape[0], self.d_in, self.n_params))
        for k, fn in enumerate(self.basis):
            v, g = fn(X)
            vals[:, k] = v
            grads[:, :, k] = g
        return vals, grads

    def bind(self, X, need="grad"):
        if need == "lap":
            raise ValueError("LinearField has no Laplacian chain")
        return LinearTrace(self, X)

    def value(self, X):
        single = np.asarray(X).ndim == 1
        out = self._tableau(X)[0] @ self.params
        return out[0] if single else out

    def input_gradient(self, X):
        single = np.asarray(X).ndim == 1
        out = self._tableau(X)[1] @ self.params
        return out[0] if single else out

    def param_jvp(self, X, v, need="grad"):
        vals, grads = self._tableau(X)
        v = np.asarray(v, dtype=np.float64)
        return vals @ v, grads @ v

    def param_vjp(self, X, w_val=None, w_grad=None, w_lap=None):
        if w_lap is not None:
            raise ValueError("LinearField has no Laplacian chain")
        vals, grads = self._tableau(X)
        out = np.zeros(self.n_params)
        if w_val is not None:
            out += vals.T @ np.asarray(w_val, dtype=np.float64)
        if w_grad is not None:
            out += np.einsum("nik,ni->k", grads, np.asarray(w_grad, dtype=np.float64))
        return out


class LinearTrace:
    def __init__(self, field: LinearField, X):
        self.field = field
        self.vals, self.grads = field._tableau(X)
        self.val = self.vals @ field.params
        self.grad = self.grads @ field.params

    def jvp(self, v, need_grad=None):
        v = np.asarray(v, dtype=np.float64)
        tv = self.vals @ v
        if need_grad is False:
            return tv, None
        return tv, self.grads @ v

    def vjp(self, w_val=None, w_grad=None, w_lap=None):
        if w_lap is not None:
            raise ValueError("LinearField has no Laplacian chain")
        out = np.zeros(self.field.n_params)
        if w_val is not None:
            out += self.vals.T @ np.asarray(w_val, dtype=np.float64)
        if w_grad is not None:
            out += np.einsum("nik,ni->k", self.grads, np.asarray(w_grad, dtype=np.float64))
        return out


class AnalyticField:
    """Closed-form field handle (exact solutions, initial data, identity maps).

    Has no parameters; param_vjp returns an empty vector so the handle can sit
    anywhere a network does.
    """

    def __init__(self, d_in, value_fn, grad_fn, lap_fn=None, d_out=1):
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self._value = value_fn
        self._grad = grad_fn
        self._lap = lap_fn
        self.n_params = 0
        self.params = np.zeros(0)

    def value(self, X):
        single = np.asarray(X).ndim == 1
        out = self._value(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return out[0] if single else out

    def input_gradient(self, X):
        single = np.asarray(X).ndim == 1
        out = self._grad(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return out[0] if single else out

    def input_laplacian(self, X):
        if self._lap is None:
            raise ValueError("no Laplacian available for this analytic field")
        single = np.asarray(X).ndim == 1
        out = self._lap(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return out[0] if single else out

    def bind(self, X, need="grad"):
        return _AnalyticTrace(self, np.atleast_2d(np.asarray(X, dtype=np.float64)), need)

    def param_jvp(self, X, v, need="grad"):
        n = np.atleast_2d(np.asarray(X)).shape[0]
        tv = np.zeros(n) if self.d_out == 1 else np.zeros((n, self.d_out))
        tg = np.zeros((n, self.d_in)) if self.d_out == 1 else np.zeros((n, self.d_in, self.d_out))
        return tv, tg

    def param_vjp(self, X, w_val=None, w_grad=None, w_lap=None):
        return np.zeros(0)


class _AnalyticTrace:
    def __init__(self, field, X, need):
        self.field = field
        self.n = X.shape[0]
        self.val = field._value(X)
        if need in ("grad", "lap"):
            self.grad = field._grad(X)
        if need == "lap":
            if field._lap is None:
                raise ValueError("no Laplacian available for this analytic field")
            self.lap = field._lap(X)

    def jvp(self, v, need_grad=None):
        f = self.field
        tv = np.zeros(self.n) if f.d_out == 1 else np.zeros((self.n, f.d_out))
        if need_grad is False:
            return tv, None
        tg = np.zeros((self.n, f.d_in)) if f.d_out == 1 else np.zeros((self.n, f.d_in, f.d_out))
        return tv, tg

    def vjp(self, w_val=None, w_grad=None, w_lap=None):
        return np.zeros(0)


# -- checkpoint format ----------------------------------------------------
#
# magic "NPDG", version u32 = 1, activation id u32, softplus beta f64,
# n_l u32, d_in u32, d_h u32, d_out u32, m u64, then m little-endian f64.

_MAGIC = b"NPDG"
_VERSION = 1
_HEADER = "<4sIIdIIIIQ"


def save_checkpoint(field: Mlp, path):
    if isinstance(field, TruncatedField):
        field = field.base
    if not isinstance(field, Mlp):
        raise TypeError("only Mlp parameters are checkpointed")
    act = field.activation
    beta = act.beta if isinstance(act, Softplus) else 0.0
    header = struct.pack(
        _HEADER, _MAGIC, _VERSION, act.id, beta,
        field.n_l, field.d_in, field.d_h, field.d_out, field.n_params,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(field.params.astype("<f8").tobytes())


def load_checkpoint(path) -> Mlp:
    with open(path, "rb") as fh:
        raw = fh.read(struct.calcsize(_HEADER))
        if len(raw) != struct.calcsize(_HEADER):
            raise ValueError(f"{path}: not a checkpoint file")
        magic, version, act_id, beta, n_l, d_in, d_h, d_out, m = struct.unpack(_HEADER, raw)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        if act_id == 0:
            act = Tanh()
        elif act_id == 1:
            act = Softplus(beta)
        elif act_id == 2:
            act = PReLU()
        else:
            raise ValueError(f"{path}: unknown activation id {act_id}")
        expected = param_count(d_in, d_h, d_out, n_l, act)
        if m != expected:
            raise ValueError(f"{path}: parameter count {m} does not match architecture")
        params = np.frombuffer(fh.read(8 * m), dtype="<f8").astype(np.float64)
        if params.size != m:
            raise ValueError(f"{path}: truncated parameter block")
    return Mlp(d_in, d_h, d_out, n_l, act, params)
