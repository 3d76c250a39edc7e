"""State-space sequence machinery.

Continuous dynamics h' = A h + B x, y = C h + D x are discretized with the
zero-order hold rule (Abar = exp(dA), Bbar = phi1(dA) * dB, where
phi1(m) = (exp(m) - 1) / m) and unrolled as the linear recurrence
h_t = Abar h_{t-1} + Bbar x_t, y_t = C h_t + D x_t.

The selective variant recomputes (delta_t, B_t, C_t) from each input token
through learned projections (delta through a softplus to stay positive),
applies the same per-step discretization with a diagonal state matrix shared
across steps, and scans channelwise: each of the L feature channels carries
its own d_state-dimensional latent state. selective_scan_backward is the
exact reverse accumulation of that recurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.special import expit

SERIES_THRESHOLD = 1e-3
_PHI1_COEFF = [1.0 / math.factorial(k + 1) for k in range(6)]
# d/dm phi1(m) = (exp(m)(m - 1) + 1) / m^2; series coefficients k / (k+1)!
_PHI1P_COEFF = [k / math.factorial(k + 1) for k in range(1, 9)]
_PHI1P_THRESHOLD = 0.05


class EmptySequence(Exception):
    pass


def _phi1(m: np.ndarray) -> np.ndarray:
    """Elementwise (exp(m) - 1) / m with a 6-term series below the threshold."""
    m = np.asarray(m, dtype=float)
    small = np.abs(m) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, m)
    direct = np.expm1(safe) / safe
    series = np.zeros_like(m)
    for coeff in reversed(_PHI1_COEFF):
        series = series * m + coeff
    return np.where(small, series, direct)


def _phi1_prime(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    small = np.abs(m) < _PHI1P_THRESHOLD
    safe = np.where(small, 1.0, m)
    direct = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = np.zeros_like(m)
    for coeff in reversed(_PHI1P_COEFF):
        series = series * m + coeff
    return np.where(small, series, direct)


@dataclass(frozen=True)
class SSMParams:
    """Fixed (time-invariant) parameters: A (N,N), B (N,), C (N,), D scalar,
    step size delta. `diagonal` flags that A is diagonal and the fast
    elementwise path applies."""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float
    delta: float
    diagonal: bool = False

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(-1)
        C = np.asarray(self.C, dtype=float).reshape(-1)
        n = A.shape[0]
        if A.shape != (n, n) or B.shape != (n,) or C.shape != (n,):
            raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} C{C.shape}")
        if self.delta <= 0.0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B)) and np.all(np.isfinite(C))):
            raise ValueError("parameters must be finite")
        if self.diagonal and np.any(A != np.diag(np.diag(A))):
            raise ValueError("diagonal flag set but A has off-diagonal entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass
class SSMState:
    h: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.h)):
            raise ValueError("state must be finite")


def discretize_zoh(params: SSMParams):
    """Zero-order hold discretization.

    Returns (Abar, Bbar) with shapes (N, N) and (N, 1). Bbar is computed
    through the phi1 series when ||delta * A||_inf < SERIES_THRESHOLD, which
    also covers singular A; above the threshold the augmented-matrix
    exponential [[dA, dB], [0, 0]] supplies both factors at once.
    """
    dA = params.delta * params.A
    dB = params.delta * params.B
    if params.diagonal:
        a = np.diag(dA)
        return np.diag(np.exp(a)), (_phi1(a) * dB)[:, None]
    n = params.n
    norm = np.max(np.sum(np.abs(dA), axis=1)) if n else 0.0
    if norm < SERIES_THRESHOLD:
        Abar = expm(dA)
        phi = np.zeros_like(dA)
        term = np.eye(n)
        for coeff in _PHI1_COEFF:
            phi = phi + coeff * term
            term = term @ dA
        return Abar, (phi @ dB)[:, None]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = dA
    aug[:n, n] = dB
    E = expm(aug)
    return E[:n, :n], E[:n, n:]


def scan_recurrent(params: SSMParams, x, h0: SSMState | None = None) -> np.ndarray:
    """Run the discretized recurrence over a scalar input sequence."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == 0:
        raise EmptySequence("scan_recurrent needs a non-empty sequence")
    h = np.zeros(params.n) if h0 is None else h0.h.copy()
    if h.shape != (params.n,):
        raise ValueError(f"state size {h.shape} does not match N={params.n}")
    y = np.empty_like(x)
    if params.diagonal:
        # expression shapes mirror the selective scan so that a selective scan
        # with constant projections reproduces this path bit for bit
        a = np.diag(params.delta * params.A)
        abar = np.exp(a)
        g = params.delta * _phi1(a)
        for t in range(x.size):
            h = abar * h + g * params.B * x[t]
            y[t] = np.sum(h * params.C) + params.D * x[t]
        return y
    Abar, Bbar = discretize_zoh(params)
    bbar = Bbar[:, 0]
    for t in range(x.size):
        h = Abar @ h + bbar * x[t]
        y[t] = params.C @ h + params.D * x[t]
    return y


@dataclass(frozen=True)
class SelectiveParams:
    """Input-dependent scan parameters.

    Per-step quantities are produced from each L-dim token x_t:
      delta_t = softplus(x_t @ w_delta + b_delta)   (L,)
      B_t     = x_t @ w_b                            (d_state,)
      C_t     = x_t @ w_c                            (d_state,)
    A (L, d_state) holds the diagonal state coefficients per channel and is
    shared across steps, as is the feed-through D (L,).
    """
    w_delta: np.ndarray  # (L, L)
    b_delta: np.ndarray  # (L,)
    w_b: np.ndarray      # (L, d_state)
    w_c: np.ndarray      # (L, d_state)
    A: np.ndarray        # (L, d_state)
    D: np.ndarray        # (L,)

    def __post_init__(self):
        for name in ("w_delta", "b_delta", "w_b", "w_c", "A", "D"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        L = self.b_delta.shape[0]
        S = self.A.shape[1]
        if self.w_delta.shape != (L, L) or self.w_b.shape != (L, S) \
                or self.w_c.shape != (L, S) or self.A.shape != (L, S) \
                or self.D.shape != (L,):
            raise ValueError("inconsistent selective parameter shapes")

    @property
    def dim(self) -> int:
        return self.b_delta.shape[0]

    @property
    def d_state(self) -> int:
        return self.A.shape[1]


def _selective_forward(sel: SelectiveParams, x: np.ndarray):
    """Core scan over x (batch, steps, L). Returns (y, cache)."""
    B_, T, L = x.shape
    S = sel.d_state
    pre = x @ sel.w_delta + sel.b_delta  # (B, T, L)
    delta = np.logaddexp(0.0, pre)  # softplus keeps every step size positive
    Bm = x @ sel.w_b  # (B, T, S)
    Cm = x @ sel.w_c  # (B, T, S)
    m = delta[..., None] * sel.A  # (B, T, L, S)
    abar = np.exp(m)
    g = delta[..., None] * _phi1(m)  # ZOH input factor, per channel and state
    h = np.zeros((B_, L, S))
    hs = np.empty((B_, T, L, S))
    y = np.empty_like(x)
    for t in range(T):
        h = abar[:, t] * h + g[:, t] * Bm[:, t, None, :] * x[:, t, :, None]
        hs[:, t] = h
        y[:, t] = np.sum(h * Cm[:, t, None, :], axis=-1) + sel.D * x[:, t]
    cache = {"x": x, "pre": pre, "delta": delta, "Bm": Bm, "Cm": Cm,
             "m": m, "abar": abar, "g": g, "hs": hs}
    return y, cache


def _selective_backward(sel: SelectiveParams, cache, upstream: np.ndarray):
    """Reverse accumulation through the cached scan. Returns a dict of
    gradients for the inputs and every parameter."""
    x = cache["x"]
    B_, T, L = x.shape
    S = sel.d_state
    delta, Bm, Cm = cache["delta"], cache["Bm"], cache["Cm"]
    m, abar, g, hs = cache["m"], cache["abar"], cache["g"], cache["hs"]

    dx = np.zeros_like(x)
    dBm = np.zeros_like(Bm)
    dCm = np.zeros_like(Cm)
    ddelta = np.zeros_like(delta)
    dA = np.zeros_like(sel.A)
    dD = np.zeros_like(sel.D)
    phi1p = _phi1_prime(m)

    dh_next = np.zeros((B_, L, S))
    for t in range(T - 1, -1, -1):
        dy = upstream[:, t]  # (B, L)
        dD += np.sum(dy * x[:, t], axis=0)
        dx[:, t] += dy * sel.D
        dCm[:, t] = np.einsum("bl,bls->bs", dy, hs[:, t])
        dh = dy[..., None] * Cm[:, t, None, :] + dh_next  # (B, L, S)
        h_prev = hs[:, t - 1] if t > 0 else np.zeros((B_, L, S))
        dabar = dh * h_prev
        dG = dh * Bm[:, t, None, :] * x[:, t, :, None]
        dBm[:, t] = np.einsum("bls,bls,bl->bs", dh, g[:, t], x[:, t])
        dx[:, t] += np.einsum("bls,bls,bs->bl", dh, g[:, t], Bm[:, t])
        # Abar = exp(delta A): d/d delta = A Abar, d/dA = delta Abar
        # G = delta phi1(delta A): d/d delta = Abar, d/dA = delta^2 phi1'(m)
        ddelta[:, t] = np.einsum("bls,ls,bls->bl", dabar, sel.A, abar[:, t]) \
            + np.einsum("bls,bls->bl", dG, abar[:, t])
        dA += np.einsum("bls,bl,bls->ls", dabar, delta[:, t], abar[:, t]) \
            + np.einsum("bls,bl,bls->ls", dG, delta[:, t] ** 2, phi1p[:, t])
        dh_next = dh * abar[:, t]

    dpre = ddelta * expit(cache["pre"])  # softplus'
    dx += dpre @ sel.w_delta.T
    dx += dBm @ sel.w_b.T
    dx += dCm @ sel.w_c.T
    grads = {
        "x": dx,
        "w_delta": np.einsum("btl,btk->lk", x, dpre),
        "b_delta": np.sum(dpre, axis=(0, 1)),
        "w_b": np.einsum("btl,bts->ls", x, dBm),
        "w_c": np.einsum("btl,bts->ls", x, dCm),
        "A": dA,
        "D": dD,
    }
    return grads


def selective_scan(sel: SelectiveParams, x) -> np.ndarray:
    """Scan a (steps, L) token sequence; channels run independent recurrences."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptySequence(f"expected a non-empty (steps, L) sequence, got {x.shape}")
    y, _ = _selective_forward(sel, x[None])
    return y[0]


def selective_scan_batch(sel: SelectiveParams, x) -> np.ndarray:
    """Batched scan over (batch, steps, L); returns outputs plus the cache
    needed for the exact backward pass."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 3 or x.shape[1] == 0:
        raise EmptySequence(f"expected non-empty (batch, steps, L), got {x.shape}")
    return _selective_forward(sel, x)


def selective_scan_backward(sel: SelectiveParams, x, upstream):
    """Gradients of selective_scan for the inputs and all parameters.

    upstream carries dLoss/dy with the same (steps, L) shape as the output.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptySequence(f"expected a non-empty (steps, L) sequence, got {x.shape}")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    _, cache = _selective_forward(sel, x[None])
    grads = _selective_backward(sel, cache, upstream[None])
    grads["x"] = grads["x"][0]
    return grads
