"""Selective state-space scan (S6).

Per token the input chooses its own step size and read/write vectors::

    delta = softplus(x @ W_delta + b_delta)      (l, d), always > 0
    B     = x @ W_B + b_B                        (l, n)
    C     = x @ W_C + b_C                        (l, n)
    A_bar = exp(delta * A)                       (l, d, n), A diagonal per channel
    B_bar = (exp(delta*A) - 1) / (delta*A) * delta * B
    h_t   = A_bar_t * h_{t-1} + B_bar_t * x_t
    y_t   = <C_t, h_t> + D * x_t

The softplus on delta is not part of a bare "Linear(x)" projection; it is
what keeps the zero-order-hold step well defined (delta > 0).

All functions accept leading batch axes in front of ``(l, d)``.
"""
from dataclasses import dataclass, fields

import numpy as np

from .core import kernels
from .core.ops import DifferentiableOp, activation, as_tensor, linear, sigmoid

SERIES_THRESHOLD = 1e-6
PARALLEL_MIN_LEN = 32


@dataclass
class S6Params:
    A: np.ndarray        # (d, n), negative for stable decay
    D: np.ndarray        # (d,)
    W_delta: np.ndarray  # (d, d)
    b_delta: np.ndarray  # (d,)
    W_B: np.ndarray      # (d, n)
    b_B: np.ndarray      # (n,)
    W_C: np.ndarray      # (d, n)
    b_C: np.ndarray      # (n,)

    @property
    def d(self):
        return self.A.shape[0]

    @property
    def n(self):
        return self.A.shape[1]

    @classmethod
    def init(cls, d, n, rng, dt_min=1e-2, dt_max=1e-1):
        """A = -(1..n) on every channel; initial step sizes log-uniform in [dt_min, dt_max]."""
        A = -np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d))
        scale = 1.0 / np.sqrt(d)
        return cls(
            A=A,
            D=np.ones(d),
            W_delta=rng.standard_normal((d, d)) * scale * 0.1,
            b_delta=dt + np.log(-np.expm1(-dt)),  # inverse softplus
            W_B=rng.standard_normal((d, n)) * scale,
            b_B=np.zeros(n),
            W_C=rng.standard_normal((d, n)) * scale,
            b_C=np.zeros(n),
        )

    @classmethod
    def zeros(cls, d, n):
        return cls(A=-np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1)), D=np.zeros(d),
                   W_delta=np.zeros((d, d)), b_delta=np.zeros(d),
                   W_B=np.zeros((d, n)), b_B=np.zeros(n),
                   W_C=np.zeros((d, n)), b_C=np.zeros(n))

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]

    def arrays(self):
        return [getattr(self, k) for k in self.names()]

    def copy(self):
        return S6Params(*[a.copy() for a in self.arrays()])


@dataclass
class DiscretizedStep:
    A_bar: np.ndarray  # (..., l, d, n)
    B_bar: np.ndarray  # (..., l, d, n)


# ------------------------------------------------------------ projection


def project_inputs(x, params):
    """Input-dependent ``(delta, B, C)`` for tokens ``x`` of shape ``(..., l, d)``."""
    x = as_tensor(x)
    delta = activation(linear(x, params.W_delta, params.b_delta), "softplus")
    B = linear(x, params.W_B, params.b_B)
    C = linear(x, params.W_C, params.b_C)
    return delta, B, C


# -------------------------------------------------------- discretization


def _phi(z, tau=SERIES_THRESHOLD):
    """(exp(z) - 1) / z with the first-order series below ``tau``."""
    small = np.abs(z) < tau
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _phi_prime(z, tau=SERIES_THRESHOLD):
    # matches _phi piecewise: constant 1/2 on the series branch
    az = np.abs(z)
    mid = (az >= tau) & (az < 1e-3)
    big = az >= 1e-3
    safe = np.where(big, z, 1.0)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z ** 3 / 30.0
    return np.where(big, exact, np.where(mid, series, 0.5))


def zoh(a, b, delta, tau=SERIES_THRESHOLD):
    """Zero-order hold for scalar lanes (broadcasting): ``(A_bar, B_bar)``."""
    a, b, delta = (np.asarray(v, dtype=np.float64) for v in (a, b, delta))
    z = delta * a
    return np.exp(z), _phi(z, tau) * delta * b


def discretize(A, B, delta, tau=SERIES_THRESHOLD):
    """``A (d, n)``, ``B (..., l, n)``, ``delta (..., l, d)`` -> ``(..., l, d, n)`` steps."""
    A, B, delta = as_tensor(A), as_tensor(B), as_tensor(delta)
    A_bar, B_bar = zoh(A, B[..., None, :], delta[..., None], tau)
    return DiscretizedStep(A_bar, B_bar)


# ------------------------------------------------------------------ scans


def _flatten(step, C, x, h0):
    lead = x.shape[:-2]
    L, D = x.shape[-2:]
    S = step.A_bar.shape[-1]
    N = int(np.prod(lead, dtype=np.int64))
    a = np.ascontiguousarray(np.broadcast_to(step.A_bar, lead + (L, D, S)).reshape(N, L, D, S))
    u = np.ascontiguousarray(
        (np.broadcast_to(step.B_bar, lead + (L, D, S)) * x[..., None]).reshape(N, L, D, S))
    c = np.ascontiguousarray(np.broadcast_to(C, lead + (L, S)).reshape(N, L, S))
    if h0 is None:
        h0 = np.zeros((N, D, S))
    else:
        h0 = np.ascontiguousarray(np.broadcast_to(as_tensor(h0), lead + (D, S)).reshape(N, D, S))
    return lead, a, u, c, h0


def scan_sequential(step, C, D, x, h0=None):
    """Run the recurrence token by token. Returns ``y`` shaped like ``x``."""
    x = as_tensor(x)
    lead, a, u, c, h0 = _flatten(step, as_tensor(C), x, h0)
    _, y = kernels.scan_forward(a, u, c, h0)
    return y.reshape(x.shape) + as_tensor(D) * x


def _combine_into(a_hi, b_hi, a_lo, b_lo):
    # (a_hi, b_hi) o (a_lo, b_lo): apply lo first, then hi
    return a_hi * a_lo, a_hi * b_lo + b_hi


def associative_states(a, u, h0):
    """All hidden states via a Blelloch (up-sweep / down-sweep) scan over axis 1.

    ``a, u: (N, L, D, S)``. Pairs are padded to a power of two with the
    identity ``(1, 0)``; ``h0`` is folded into the first drive term.
    """
    N, L, D, S = a.shape
    P = 1 << max(0, (L - 1).bit_length())
    ta = np.ones((N, P, D, S))
    tb = np.zeros((N, P, D, S))
    ta[:, :L] = a
    tb[:, :L] = u
    tb[:, 0] = a[:, 0] * h0 + u[:, 0]
    ta[:, 0] = 1.0
    elem_a, elem_b = ta.copy(), tb.copy()

    s = 1
    while s < P:
        hi = slice(2 * s - 1, P, 2 * s)
        lo = slice(s - 1, P, 2 * s)
        ta[:, hi], tb[:, hi] = _combine_into(ta[:, hi], tb[:, hi], ta[:, lo], tb[:, lo])
        s *= 2

    ta[:, P - 1] = 1.0
    tb[:, P - 1] = 0.0
    s = P // 2
    while s >= 1:
        hi = slice(2 * s - 1, P, 2 * s)
        lo = slice(s - 1, P, 2 * s)
        left_a, left_b = ta[:, lo].copy(), tb[:, lo].copy()
        ta[:, lo], tb[:, lo] = ta[:, hi], tb[:, hi]
        ta[:, hi], tb[:, hi] = _combine_into(left_a, left_b, ta[:, hi], tb[:, hi])
        s //= 2

    # exclusive prefix -> inclusive state
    h = elem_a * tb + elem_b
    return h[:, :L]


def scan_parallel(step, C, D, x, h0=None, min_len=PARALLEL_MIN_LEN):
    """Same result as :func:`scan_sequential` via the associative composition.

    Sequences shorter than ``min_len`` take the sequential path.
    """
    x = as_tensor(x)
    if x.shape[-2] < min_len:
        return scan_sequential(step, C, D, x, h0)
    lead, a, u, c, h0 = _flatten(step, as_tensor(C), x, h0)
    h = associative_states(a, u, h0)
    y = np.einsum("nlds,nls->nld", h, c)
    return y.reshape(x.shape) + as_tensor(D) * x


# ------------------------------------------------------ forward / backward


def s6_forward(x, params, h0=None):
    """Full selective scan. Returns ``(y, cache)``; ``cache`` feeds :func:`s6_backward`."""
    x = as_tensor(x)
    pre = linear(x, params.W_delta, params.b_delta)
    delta = activation(pre, "softplus")
    B = linear(x, params.W_B, params.b_B)
    C = linear(x, params.W_C, params.b_C)
    z = delta[..., None] * params.A
    A_bar = np.exp(z)
    phi = _phi(z)
    B_bar = phi * delta[..., None] * B[..., None, :]
    step = DiscretizedStep(A_bar, B_bar)
    lead, a, u, c, h0f = _flatten(step, C, x, h0)
    h, ys = kernels.scan_forward(a, u, c, h0f)
    y = ys.reshape(x.shape) + params.D * x
    cache = dict(x=x, pre=pre, delta=delta, B=B, C=C, z=z, A_bar=A_bar, phi=phi,
                 B_bar=B_bar, h=h, h0=h0f, a=a, c=c, params=params)
    return y, cache


def s6_backward(cache, dy):
    """Reverse-mode pass. Returns ``(dx, grads)`` with ``grads`` an :class:`S6Params` of cotangents."""
    p = cache["params"]
    x = cache["x"]
    shape = x.shape
    L, Dm = shape[-2:]
    S = p.n
    N = cache["a"].shape[0]
    x3 = x.reshape(N, L, Dm)
    dy3 = np.ascontiguousarray(as_tensor(dy).reshape(N, L, Dm))
    h = cache["h"]
    A_bar = cache["a"]
    delta = cache["delta"].reshape(N, L, Dm)
    Bp = cache["B"].reshape(N, L, S)
    z = cache["z"].reshape(N, L, Dm, S)
    phi = cache["phi"].reshape(N, L, Dm, S)
    B_bar = np.broadcast_to(cache["B_bar"], shape[:-2] + (L, Dm, S)).reshape(N, L, Dm, S)

    dD = np.einsum("nld,nld->d", dy3, x3)
    dx = dy3 * p.D
    dC = np.einsum("nld,nlds->nls", dy3, h)

    g = kernels.scan_reverse(A_bar, dy3, cache["c"])
    h_prev = np.concatenate([cache["h0"][:, None], h[:, :-1]], axis=1)
    dA_bar = g * h_prev
    dB_bar = g * x3[..., None]
    dx = dx + np.einsum("nlds,nlds->nld", g, B_bar)

    Bb = Bp[:, :, None, :]
    dphi = dB_bar * delta[..., None] * Bb
    ddelta = np.einsum("nlds,nlds->nld", dB_bar, phi * Bb)
    dB = np.einsum("nlds,nlds->nls", dB_bar, phi * delta[..., None])
    dz = dA_bar * A_bar + dphi * _phi_prime(z)
    ddelta = ddelta + np.einsum("nlds,ds->nld", dz, p.A)
    dA = np.einsum("nlds,nld->ds", dz, delta)
    dpre = ddelta * sigmoid(cache["pre"].reshape(N, L, Dm))

    xf = x3.reshape(-1, Dm)
    dpre_f, dB_f, dC_f = dpre.reshape(-1, Dm), dB.reshape(-1, S), dC.reshape(-1, S)
    dx = dx + dpre @ p.W_delta.T + dB @ p.W_B.T + dC @ p.W_C.T
    grads = S6Params(
        A=dA, D=dD,
        W_delta=xf.T @ dpre_f, b_delta=dpre_f.sum(0),
        W_B=xf.T @ dB_f, b_B=dB_f.sum(0),
        W_C=xf.T @ dC_f, b_C=dC_f.sum(0),
    )
    return dx.reshape(shape), grads


def s6(x, params, h0=None):
    return s6_forward(x, params, h0)[0]


def s6_op():
    """Project -> discretize -> scan as a :class:`DifferentiableOp` over ``(x, *params)``."""
    def fwd(x, *arrays):
        return s6_forward(x, S6Params(*arrays))[0]

    def bwd(inputs, dy):
        _, cache = s6_forward(inputs[0], S6Params(*inputs[1:]))
        dx, grads = s6_backward(cache, dy)
        return (dx, *grads.arrays())

    return DifferentiableOp(fwd, bwd, name="s6")
