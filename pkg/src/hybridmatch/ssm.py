"""State-space machinery: ZOH discretisation, LTI scans, and the selective scan.

The LTI helpers (:func:`scan_recurrent`, :func:`ssm_kernel`, :func:`conv_kernel`)
work on plain arrays and accumulate in float64.  The selective scan is a
taped primitive with a hand-written backward pass so that it can sit inside
a trained network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError
from .numerics import Linear, Module, Tensor, ops, parameter, record


def zoh_discretize(delta, a, b):
    """Zero-order-hold discretisation of a diagonal SSM entry.

    Returns ``(a_bar, b_bar)`` with ``a_bar = exp(delta*a)`` and
    ``b_bar = (exp(delta*a) - 1) / (delta*a) * delta*b``.  When
    ``|delta*a| < 1e-6`` the series ``delta*b*(1 + delta*a/2)`` is used.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise DomainError("zoh_discretize: step size must be positive")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = delta * a
    a_bar = np.exp(da)
    small = np.abs(da) < 1e-6
    safe = np.where(small, 1.0, da)
    b_bar = np.where(small, delta * b * (1.0 + da / 2.0), np.expm1(safe) / safe * delta * b)
    if a_bar.ndim == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


@dataclass
class DiscreteSsm:
    """Diagonal discrete SSM.

    Each of ``a_bar``, ``b_bar``, ``c`` is either ``[N]`` (time-invariant) or
    ``[L, N]`` (one row per step).  Scalars are treated as ``N = 1``.
    """

    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.a_bar = np.atleast_1d(np.asarray(self.a_bar, dtype=np.float64))
        self.b_bar = np.atleast_1d(np.asarray(self.b_bar, dtype=np.float64))
        self.c = np.atleast_1d(np.asarray(self.c, dtype=np.float64))

    @property
    def time_invariant(self) -> bool:
        return self.a_bar.ndim == 1 and self.b_bar.ndim == 1 and self.c.ndim == 1

    def step(self, name: str, t: int) -> np.ndarray:
        v = getattr(self, name)
        return v if v.ndim == 1 else v[t]


def scan_recurrent(ssm: DiscreteSsm, x) -> np.ndarray:
    """Sequential recurrence ``h_t = a_bar*h_{t-1} + b_bar*x_t``, ``y_t = c . h_t``, ``h_0 = 0``."""
    x = np.asarray(x, dtype=np.float64)
    n = ssm.a_bar.shape[-1]
    h = np.zeros(n)
    y = np.empty(len(x))
    for t, xt in enumerate(x):
        h = ssm.step("a_bar", t) * h + ssm.step("b_bar", t) * xt
        y[t] = ssm.step("c", t) @ h
    return y


def ssm_kernel(ssm: DiscreteSsm, length: int) -> np.ndarray:
    """Convolution kernel ``(c.b_bar, c.a_bar.b_bar, ..., c.a_bar^(L-1).b_bar)``."""
    if not ssm.time_invariant:
        raise ContractError("ssm_kernel requires time-invariant parameters; use the selective scan")
    powers = ssm.a_bar[None, :] ** np.arange(length)[:, None]
    return powers @ (ssm.c * ssm.b_bar)


def conv_kernel(x, kernel) -> np.ndarray:
    """Causal convolution ``y_t = sum_k kernel[k] * x[t-k]`` truncated to ``len(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.convolve(x, np.asarray(kernel, dtype=np.float64))[: len(x)]


# -- selective scan -------------------------------------------------------------

def selective_scan(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor) -> Tensor:
    """Input-dependent diagonal scan.

    Shapes: ``u, delta`` ``[B, L, D]``; ``A`` ``[D, N]``; ``Bm, Cm`` ``[B, L, N]``.
    Per step ``a_bar = exp(delta*A)`` (exact) and ``b_bar = delta*B`` (Euler);
    ``h_t = a_bar*h_{t-1} + b_bar*u_t`` and ``y_t = h_t . C_t``.
    """
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, Bm.data, Cm.data
    batch, L, D = ud.shape
    dA = np.exp(dd[..., None] * Ad)
    du = dd * ud
    X = du[..., None] * Bd[:, :, None, :]
    hs = np.empty_like(X)
    h = np.zeros_like(X[:, 0])
    for t in range(L):
        h = dA[:, t] * h + X[:, t]
        hs[:, t] = h
    y = np.einsum("bldn,bln->bld", hs, Cd, optimize=True)

    def bw(gy):
        gC = np.einsum("bld,bldn->bln", gy, hs, optimize=True)
        dh = gy[..., None] * Cd[:, :, None, :]
        for t in range(L - 2, -1, -1):
            dh[:, t] += dA[:, t + 1] * dh[:, t + 1]
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        g_da = dh * h_prev * dA
        g_delta = (g_da * Ad).sum(-1)
        gA = np.einsum("bldn,bld->dn", g_da, dd, optimize=True)
        dhB = np.einsum("bldn,bln->bld", dh, Bd, optimize=True)
        g_delta += dhB * ud
        gu = dhB * dd
        gB = np.einsum("bldn,bld->bln", dh, du, optimize=True)
        return gu, g_delta, gA, gB, gC

    return record("selective_scan", y, (u, delta, A, Bm, Cm), bw)


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSsm(Module):
    """SSM whose step size and input/output projections depend on the token.

    ``A = -exp(a_log)`` is diagonal per (channel, state) and initialised to
    ``-(1..N)``.  ``delta = softplus(x W_delta + b_delta)`` with the bias set so
    the initial step sizes fall in ``[dt_min, dt_max]``.  There is no
    feed-through (``D x``) term.
    """

    def __init__(self, d_inner: int, rng: np.random.Generator, d_state: int = 16,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.d_inner = d_inner
        self.d_state = d_state
        self.a_log = parameter(np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1)))
        self.proj_delta = Linear(d_inner, d_inner, rng)
        self.proj_delta.weight.data *= 0.1
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_inner))
        self.proj_delta.bias.data = _inv_softplus(dt).astype(np.float32)
        self.proj_b = Linear(d_inner, d_state, rng, bias=False)
        self.proj_c = Linear(d_inner, d_state, rng, bias=False)

    def A(self) -> Tensor:
        return ops.neg(ops.exp(self.a_log))

    def delta(self, x: Tensor) -> Tensor:
        return ops.softplus(self.proj_delta(x))

    def forward(self, x: Tensor) -> Tensor:
        """``x`` is ``[L, D]`` or ``[B, L, D]``; output has the same shape."""
        unbatched = x.ndim == 2
        if unbatched:
            x = ops.reshape(x, (1,) + x.shape)
        y = selective_scan(x, self.delta(x), self.A(), self.proj_b(x), self.proj_c(x))
        return ops.reshape(y, y.shape[1:]) if unbatched else y


def scan_selective(params: SelectiveSsm, x: Tensor) -> Tensor:
    return params(x)
