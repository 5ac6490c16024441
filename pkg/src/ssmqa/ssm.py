"""Selective state-space sequence models.

The core recurrence is the discrete linear state update

    h_t = a_bar_t * h_{t-1} + b_bar_t * u_t ,    y_t = <C_t, h_t> + D * u_t

with input-dependent step size, input and output maps (the "selective"
part): per step t the block computes delta_t, B_t and C_t from the input,
discretizes the continuous pair (A, B_t) by zero-order hold, and runs the
scan. Three block variants are provided:

* ``diagonal``        - per-channel diagonal A over N state dims;
* ``scalar_per_head`` - one scalar decay per head shared across the head's
                        state dims, evaluated chunk-wise;
* ``swa_hybrid``      - sliding-window causal attention block, interleaved
                        with diagonal blocks in hybrid stacks.

The scan is exposed both as a sequential reference and as a parallel
associative scan over (multiplier, offset) pairs; both are deterministic
and agree to ~1e-13 at 64-bit. Gradients for the scan are analytic (the
adjoint is itself a reverse-time scan), so training does not pay for a
per-step autodiff graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    conv1d_causal,
    embedding,
    is_grad_enabled,
    matmul,
    rmsnorm,
    softmax,
)

__all__ = [
    "ModelConfig",
    "SsmBlockParams",
    "SwaBlockParams",
    "SpanHead",
    "SsmModel",
    "MODEL_PRESETS",
    "discretize_zoh",
    "scan_combine",
    "selective_scan",
    "selective_scan_sequential",
    "selective_scan_parallel",
    "ssd_scalar_head_scan",
    "ssm_block_forward",
    "sliding_window_attention",
]


# -- discretization ----------------------------------------------------------


def discretize_zoh(a: float, b: np.ndarray, delta: float):
    """Zero-order-hold discretization of the continuous pair (a, b).

    a_bar = exp(delta * a); b_bar = ((exp(delta * a) - 1) / a) * b, with the
    a -> 0 series limit b_bar = delta * b taken when |a| < 1e-12.
    """
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    b = np.asarray(b, dtype=np.float64)
    a_bar = math.exp(delta * a)
    if abs(a) < 1e-12:
        return a_bar, delta * b
    return a_bar, ((a_bar - 1.0) / a) * b


def scan_combine(p, q):
    """Associative combine for the recurrence h' = a*h + b.

    (a1, b1) then (a2, b2) composes to (a2*a1, a2*b1 + b2).
    """
    a1, b1 = p
    a2, b2 = q
    return a2 * a1, a2 * b1 + b2


# -- scan kernels (plain numpy) ----------------------------------------------


def _scan_states_sequential(a_bar: np.ndarray, x_in: np.ndarray) -> np.ndarray:
    states = np.empty_like(x_in)
    h = np.zeros_like(x_in[:, 0])
    for t in range(x_in.shape[1]):
        h *= a_bar[:, t]
        h += x_in[:, t]
        states[:, t] = h
    return states


def _scan_adjoint_sequential(a_bar: np.ndarray, e: np.ndarray) -> np.ndarray:
    # gh[t] = e[t] + a_bar[t+1] * gh[t+1]: the reverse-time companion scan
    gh_all = np.empty_like(e)
    T = e.shape[1]
    gh = e[:, T - 1].copy()
    gh_all[:, T - 1] = gh
    for t in range(T - 2, -1, -1):
        gh *= a_bar[:, t + 1]
        gh += e[:, t]
        gh_all[:, t] = gh
    return gh_all


def _scan_states_parallel(a_bar: np.ndarray, x_in: np.ndarray) -> np.ndarray:
    # Hillis-Steele doubling over the time axis; offsets converge to the
    # inclusive prefix composition applied to h_0 = 0.
    a = a_bar.copy()
    x = x_in.copy()
    T = x.shape[1]
    s = 1
    while s < T:
        x[:, s:] = x[:, s:] + a[:, s:] * x[:, :-s]
        a[:, s:] = a[:, s:] * a[:, :-s]
        s *= 2
    return x


_SCAN_KERNELS = {
    "sequential": _scan_states_sequential,
    "parallel": _scan_states_parallel,
}

_A_ZERO_TOL = 1e-12


# -- fused scan kernels (numba, optional) --------------------------------------
#
# The sequential scan and its adjoint touch [B,T,C,N]-sized data a couple
# dozen times when expressed as numpy temporaries; fusing them into one
# pass each is the difference between minutes and seconds for the toy
# training runs. The numpy forms above stay as the reference (and the
# fallback when numba is missing); results agree to rounding.

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def wrap(f):
            return f

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return wrap


@_njit(cache=True)
def _fused_scan_fwd(ud, dd, bd, cd, ad, dskip, a_bar, use_d):  # pragma: no cover - jitted
    # a_bar = exp(delta * A) is precomputed outside (numpy's SIMD exp);
    # loops run t-outer so every [b,t,c,n] access is contiguous
    B, T, C = ud.shape
    N = ad.shape[1]
    y = np.zeros((B, T, C), dtype=ud.dtype)
    states = np.empty((B, T, C, N), dtype=ud.dtype)
    coef = np.empty((B, T, C, N), dtype=ud.dtype)
    h = np.zeros((C, N), dtype=ud.dtype)
    for b in range(B):
        h[:, :] = 0.0
        for t in range(T):
            for c in range(C):
                delta = dd[b, t, c]
                u = ud[b, t, c]
                acc = 0.0
                for n in range(N):
                    a = ad[c, n]
                    ab = a_bar[b, t, c, n]
                    cf = delta if abs(a) < _A_ZERO_TOL else (ab - 1.0) / a
                    hv = ab * h[c, n] + cf * bd[b, t, n] * u
                    h[c, n] = hv
                    coef[b, t, c, n] = cf
                    states[b, t, c, n] = hv
                    acc += cd[b, t, n] * hv
                y[b, t, c] = acc + (dskip[c] * u if use_d else 0.0)
    return y, states, coef


@_njit(cache=True)
def _fused_scan_bwd(gy, ud, dd, bd, cd, ad, dskip, states, a_bar, coef, use_d):  # pragma: no cover - jitted
    B, T, C = ud.shape
    N = ad.shape[1]
    gu = np.zeros((B, T, C), dtype=ud.dtype)
    g_delta = np.zeros((B, T, C), dtype=ud.dtype)
    gB = np.zeros((B, T, N), dtype=ud.dtype)
    gC = np.zeros((B, T, N), dtype=ud.dtype)
    gA = np.zeros((C, N), dtype=ud.dtype)
    gD = np.zeros(C, dtype=ud.dtype)
    gh = np.zeros((C, N), dtype=ud.dtype)
    for b in range(B):
        gh[:, :] = 0.0
        for t in range(T - 1, -1, -1):
            for c in range(C):
                gy_el = gy[b, t, c]
                u = ud[b, t, c]
                delta = dd[b, t, c]
                gu_acc = dskip[c] * gy_el if use_d else 0.0
                gd_acc = 0.0
                for n in range(N):
                    a = ad[c, n]
                    ab = a_bar[b, t, c, n]
                    cf = coef[b, t, c, n]
                    ghv = gh[c, n] + gy_el * cd[b, t, n]
                    s_prev = states[b, t - 1, c, n] if t > 0 else 0.0
                    gC[b, t, n] += gy_el * states[b, t, c, n]
                    g_bb = ghv * u
                    gu_acc += ghv * cf * bd[b, t, n]
                    g_coef = g_bb * bd[b, t, n]
                    gB[b, t, n] += g_bb * cf
                    g_da = ghv * s_prev * ab
                    if abs(a) < _A_ZERO_TOL:
                        gd_acc += g_da * a + g_coef
                        gA[c, n] += g_da * delta
                    else:
                        gd_acc += g_da * a + g_coef * ab
                        gA[c, n] += g_da * delta + g_coef * (delta * ab - cf) / a
                    gh[c, n] = ghv * ab
                gu[b, t, c] = gu_acc
                g_delta[b, t, c] = gd_acc
                if use_d:
                    gD[c] += gy_el * u
    return gu, g_delta, gB, gC, gA, gD


def _as_batched(t: Tensor, rank: int):
    if t.ndim == rank:
        return t, False
    if t.ndim == rank - 1:
        return t.reshape((1,) + t.shape), True
    raise ShapeError(f"expected rank {rank} or {rank - 1}, got shape {t.shape}")


def selective_scan(
    u: Tensor,
    delta: Tensor,
    B_t: Tensor,
    C_t: Tensor,
    A: Tensor,
    D: Optional[Tensor] = None,
    method: str = "parallel",
) -> Tensor:
    """Selective scan over a batch of sequences.

    Shapes: ``u``/``delta`` are ``[B,T,C]`` (or ``[T,C]``), ``B_t``/``C_t``
    are ``[B,T,N]`` (shared across channels), ``A`` is ``[C,N]`` with
    negative entries, ``D`` is ``[C]``. Output matches ``u``. The state is
    zero at sequence start and the output at t depends only on inputs <= t.
    """
    if method not in _SCAN_KERNELS:
        raise ValueError(f"unknown scan method {method!r}")
    u3, squeezed = _as_batched(u, 3)
    d3, _ = _as_batched(delta, 3)
    b3, _ = _as_batched(B_t, 3)
    c3, _ = _as_batched(C_t, 3)
    Bsz, T, C = u3.shape
    N = A.shape[-1]
    if d3.shape != u3.shape:
        raise ShapeError(f"delta shape {delta.shape} must match u {u.shape}")
    if b3.shape != (Bsz, T, N) or c3.shape != (Bsz, T, N):
        raise ShapeError(
            f"B_t/C_t must be [B,T,N]={Bsz, T, N}, got {B_t.shape} and {C_t.shape}"
        )
    if A.shape != (C, N):
        raise ShapeError(f"A must be [C,N]=({C},{N}), got {A.shape}")
    if D is not None and D.shape != (C,):
        raise ShapeError(f"D must be [C]=({C},), got {D.shape}")

    ud, dd, bd, cd, ad = u3.data, d3.data, b3.data, c3.data, A.data
    dskip = D.data if D is not None else np.zeros(C, dtype=ud.dtype)
    fused = _HAVE_NUMBA and method == "sequential"
    if fused:
        a_bar = np.exp(dd[..., None] * ad)
        y, states, coef = _fused_scan_fwd(ud, dd, bd, cd, ad, dskip, a_bar,
                                          D is not None)
    else:
        dA = dd[..., None] * ad                   # [B,T,C,N]
        a_bar = np.exp(dA)
        small = np.abs(ad) < _A_ZERO_TOL
        if np.any(small):
            denom = np.where(small, 1.0, ad)
            delta_b = np.broadcast_to(dd[..., None], dA.shape)
            coef = np.where(small, delta_b, (a_bar - 1.0) / denom)
        else:
            coef = (a_bar - 1.0) / ad
        x_in = coef * bd[:, :, None, :] * ud[..., None]
        states = _SCAN_KERNELS[method](a_bar, x_in)
        y = np.einsum("btcn,btn->btc", states, cd)
        if D is not None:
            y = y + D.data * ud

    def bw(gy):
        gy = np.ascontiguousarray(gy if gy.ndim == 3 else gy[None])
        if _HAVE_NUMBA:
            gu, g_delta, gB, gC, gA, gD = _fused_scan_bwd(
                gy, ud, dd, bd, cd, ad, dskip, states, a_bar, coef,
                D is not None,
            )
        else:
            gC = np.einsum("btc,btcn->btn", gy, states)
            gu = gy * D.data if D is not None else np.zeros_like(ud)
            gD = (gy * ud).sum(axis=(0, 1)) if D is not None else None

            # adjoint of the scan is itself a reverse-time scan
            e = gy[..., None] * cd[:, :, None, :]
            gh = _scan_adjoint_sequential(a_bar, e)

            prev = np.empty_like(states)
            prev[:, 0] = 0.0
            prev[:, 1:] = states[:, :-1]
            b_bar = coef * bd[:, :, None, :]
            g_a_bar = gh * prev
            g_b_bar = gh * ud[..., None]
            gu += np.einsum("btcn,btcn->btc", gh, b_bar)
            g_coef = g_b_bar * bd[:, :, None, :]
            gB = np.einsum("btcn,btcn->btn", g_b_bar, coef)

            g_dA = g_a_bar * a_bar
            small = np.abs(ad) < _A_ZERO_TOL
            if np.any(small):
                denom = np.where(small, 1.0, ad)
                delta_b = np.broadcast_to(dd[..., None], g_dA.shape)
                dcoef_ddelta = np.where(small, 1.0, a_bar)
                dcoef_dA = np.where(
                    small, 0.0, (delta_b * a_bar) / denom - coef / denom
                )
                g_delta = (g_dA * ad + g_coef * dcoef_ddelta).sum(axis=-1)
                gA = (g_dA * delta_b + g_coef * dcoef_dA).sum(axis=(0, 1))
            else:
                g_delta = (g_dA * ad + g_coef * a_bar).sum(axis=-1)
                gA = (
                    g_dA * dd[..., None]
                    + g_coef * (dd[..., None] * a_bar - coef) / ad
                ).sum(axis=(0, 1))

        if squeezed:
            gu, g_delta, gB, gC = gu[0], g_delta[0], gB[0], gC[0]
        grads = [gu, g_delta, gB, gC, gA]
        if D is not None:
            grads.append(gD)
        return tuple(grads)

    out = y[0] if squeezed else y
    parents = (u, delta, B_t, C_t, A) if D is None else (u, delta, B_t, C_t, A, D)
    return Tensor._make(out, parents, bw)


def selective_scan_sequential(u, delta, B_t, C_t, A, D=None) -> Tensor:
    return selective_scan(u, delta, B_t, C_t, A, D, method="sequential")


def selective_scan_parallel(u, delta, B_t, C_t, A, D=None) -> Tensor:
    return selective_scan(u, delta, B_t, C_t, A, D, method="parallel")


def ssd_scalar_head_scan(
    u: np.ndarray,
    delta_h: np.ndarray,
    A_h: np.ndarray,
    B_t: np.ndarray,
    C_t: np.ndarray,
    D: Optional[np.ndarray],
    head_dim: int,
    chunk: int = 64,
) -> np.ndarray:
    """Chunk-wise scan for the scalar-per-head variant (inference path).

    One scalar decay per head and step is shared across that head's state
    dims, so within a chunk the recurrence collapses to a masked
    decay-weighted matmul plus a carried inter-chunk state. Matches the
    generic scan with the scalar-broadcast A to ~1e-13 at 64-bit.

    Shapes: ``u`` [B,T,C] with C = H*head_dim, ``delta_h`` [B,T,H],
    ``A_h`` [H] (negative), ``B_t``/``C_t`` [B,T,N], ``D`` [C] or None.
    """
    if chunk < 1:
        raise ValueError(f"chunk length must be >= 1, got {chunk}")
    Bsz, T, C = u.shape
    H = A_h.shape[0]
    if C % head_dim or C // head_dim != H:
        raise ShapeError(f"channels {C} not divisible into {H} heads of {head_dim}")
    N = B_t.shape[-1]
    P = head_dim
    uh = u.reshape(Bsz, T, H, P)
    dA = delta_h * A_h                                  # [B,T,H], log decay
    small = np.abs(A_h) < _A_ZERO_TOL
    coef = np.where(small, delta_h, np.expm1(dA) / np.where(small, 1.0, A_h))
    y = np.empty_like(uh)
    h_state = np.zeros((Bsz, H, P, N), dtype=u.dtype)
    for t0 in range(0, T, chunk):
        t1 = min(t0 + chunk, T)
        Tc = t1 - t0
        L = np.cumsum(dA[:, t0:t1], axis=1)             # [B,Tc,H]
        seg = L[:, :, None, :] - L[:, None, :, :]       # decay exponent i<-j
        tril = np.tril(np.ones((Tc, Tc), dtype=bool))
        M = np.exp(np.where(tril[None, :, :, None], seg, -np.inf))
        S0 = np.einsum("bin,bjn->bij", C_t[:, t0:t1], B_t[:, t0:t1])
        W = M * S0[:, :, :, None]                       # [B,Tc,Tc,H]
        Xd = coef[:, t0:t1, :, None] * uh[:, t0:t1]     # [B,Tc,H,P], ZOH input
        y_intra = np.einsum("bijh,bjhp->bihp", W, Xd)
        carry = np.einsum("bin,bhpn->bihp", C_t[:, t0:t1], h_state)
        y[:, t0:t1] = y_intra + np.exp(L)[..., None] * carry
        L_end = L[:, -1:, :]                            # [B,1,H]
        decay_to_end = np.exp(L_end - L)                # [B,Tc,H]
        h_state = np.exp(L_end[:, 0])[..., None, None] * h_state + np.einsum(
            "bjh,bjhp,bjn->bhpn", decay_to_end, Xd, B_t[:, t0:t1]
        )
    out = y.reshape(Bsz, T, C)
    if D is not None:
        out = out + D * u
    return out


# -- configuration ------------------------------------------------------------


VARIANTS = ("diagonal", "scalar_per_head", "swa_hybrid")

# Model-family presets. Families whose distinguishing machinery is out of
# scope here (mixture-of-experts, shared global attention, meta tokens) map
# onto the closest implemented variant; see README.
MODEL_PRESETS = {
    "mamba": dict(variant="diagonal"),
    "mamba2": dict(variant="scalar_per_head"),
    "falcon": dict(variant="diagonal"),
    "jamba": dict(variant="diagonal"),
    "zamba": dict(variant="hybrid", max_seq_len=4096),
    "samba": dict(variant="hybrid"),
    "hymba": dict(variant="hybrid"),
}


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    state_size: int = 16
    vocab_size: int = 256
    max_seq_len: int = 2048
    variant: str = "diagonal"      # diagonal | scalar_per_head | hybrid
    swa_window: int = 32
    n_heads: int = 4
    conv_width: int = 4
    expand: int = 2
    ssd_head_dim: int = 16
    ssd_chunk: int = 64
    scan_method: str = "sequential"
    dtype: str = "float64"
    preset_name: str = ""

    def __post_init__(self):
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.state_size < 1:
            raise ValueError("state size must be >= 1")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def layer_variants(self) -> list:
        """Per-layer block variants; hybrid interleaves SWA every other layer."""
        if self.variant == "hybrid":
            return [
                "swa_hybrid" if i % 2 == 1 else "diagonal"
                for i in range(self.n_layers)
            ]
        if self.variant not in ("diagonal", "scalar_per_head"):
            raise ValueError(f"unknown variant {self.variant!r}")
        return [self.variant] * self.n_layers

    @staticmethod
    def preset(name: str, **overrides) -> "ModelConfig":
        if name not in MODEL_PRESETS:
            raise ValueError(f"unknown model preset {name!r}")
        kwargs = dict(MODEL_PRESETS[name])
        kwargs.update(overrides)
        kwargs["preset_name"] = name
        return ModelConfig(**kwargs)

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class SsmBlockParams:
    """Parameters of one selective-SSM block (diagonal or scalar-per-head)."""

    name: str
    variant: str
    d_model: int
    d_inner: int
    state_size: int
    n_heads: int            # scalar_per_head only
    head_dim: int
    conv_width: int
    norm_g: Tensor = None
    in_proj: Tensor = None
    conv_w: Tensor = None
    conv_b: Tensor = None
    delta_proj: Tensor = None
    delta_bias: Tensor = None
    b_proj: Tensor = None
    c_proj: Tensor = None
    a_log: Tensor = None    # A = -exp(a_log) < 0, the stable pole
    d_skip: Tensor = None
    out_proj: Tensor = None

    def named(self) -> dict:
        return {
            f"{self.name}.{f}": getattr(self, f)
            for f in (
                "norm_g", "in_proj", "conv_w", "conv_b", "delta_proj",
                "delta_bias", "b_proj", "c_proj", "a_log", "d_skip", "out_proj",
            )
        }


@dataclass
class SwaBlockParams:
    """Parameters of one sliding-window attention block."""

    name: str
    d_model: int
    n_heads: int
    window: int
    norm_g: Tensor = None
    q_proj: Tensor = None
    k_proj: Tensor = None
    v_proj: Tensor = None
    o_proj: Tensor = None

    variant: str = "swa_hybrid"

    def named(self) -> dict:
        return {
            f"{self.name}.{f}": getattr(self, f)
            for f in ("norm_g", "q_proj", "k_proj", "v_proj", "o_proj")
        }


@dataclass
class SpanHead:
    """Two linear predictors producing start / end logits per position."""

    start_w: Tensor
    start_b: Tensor
    end_w: Tensor
    end_b: Tensor

    @staticmethod
    def build(d_model: int, seed: int, dtype=np.float64) -> "SpanHead":
        rng = np.random.default_rng(seed)
        k = 1.0 / math.sqrt(d_model)
        def t(a):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)
        return SpanHead(
            start_w=t(rng.uniform(-k, k, (d_model, 1))),
            start_b=t(np.zeros(1)),
            end_w=t(rng.uniform(-k, k, (d_model, 1))),
            end_b=t(np.zeros(1)),
        )

    def named(self) -> dict:
        return {
            "span_head.start_w": self.start_w,
            "span_head.start_b": self.start_b,
            "span_head.end_w": self.end_w,
            "span_head.end_b": self.end_b,
        }

    def logits(self, hidden: Tensor):
        """(start, end) logit tensors of shape [..., T] from hidden [..., T, d]."""
        s = (matmul(hidden, self.start_w) + self.start_b).reshape(hidden.shape[:-1])
        e = (matmul(hidden, self.end_w) + self.end_b).reshape(hidden.shape[:-1])
        return s, e


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def _init_ssm_block(name, variant, cfg: ModelConfig, rng, dtype) -> SsmBlockParams:
    d, din, N = cfg.d_model, cfg.d_inner, cfg.state_size
    K = cfg.conv_width
    H = din // cfg.ssd_head_dim if variant == "scalar_per_head" else 0
    if variant == "scalar_per_head" and din % cfg.ssd_head_dim:
        raise ValueError(f"d_inner {din} not divisible by head_dim {cfg.ssd_head_dim}")

    def par(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    kd = 1.0 / math.sqrt(d)
    ki = 1.0 / math.sqrt(din)
    # step sizes start log-uniform in [1e-3, 1e-1], standard for stable poles
    n_delta = H if variant == "scalar_per_head" else din
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), n_delta))
    if variant == "scalar_per_head":
        a_log = np.log(rng.uniform(1.0, 16.0, H))
        delta_proj = rng.uniform(-ki, ki, (din, H))
    else:
        a_log = np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (din, 1))
        delta_proj = rng.uniform(-ki, ki, (din, din))
    return SsmBlockParams(
        name=name,
        variant=variant,
        d_model=d,
        d_inner=din,
        state_size=N,
        n_heads=H,
        head_dim=cfg.ssd_head_dim,
        conv_width=K,
        norm_g=par(np.ones(d)),
        in_proj=par(rng.uniform(-kd, kd, (d, 2 * din))),
        conv_w=par(rng.uniform(-1.0 / math.sqrt(K), 1.0 / math.sqrt(K), (din, K))),
        conv_b=par(np.zeros(din)),
        delta_proj=par(delta_proj),
        delta_bias=par(_inv_softplus(dt)),
        b_proj=par(rng.uniform(-ki, ki, (din, N))),
        c_proj=par(rng.uniform(-ki, ki, (din, N))),
        a_log=par(a_log),
        d_skip=par(np.ones(din)),
        out_proj=par(rng.uniform(-ki, ki, (din, d))),
    )


def _init_swa_block(name, cfg: ModelConfig, rng, dtype) -> SwaBlockParams:
    d = cfg.d_model
    if d % cfg.n_heads:
        raise ValueError(f"d_model {d} not divisible by {cfg.n_heads} heads")
    k = 1.0 / math.sqrt(d)

    def par(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    return SwaBlockParams(
        name=name,
        d_model=d,
        n_heads=cfg.n_heads,
        window=cfg.swa_window,
        norm_g=par(np.ones(d)),
        q_proj=par(rng.uniform(-k, k, (d, d))),
        k_proj=par(rng.uniform(-k, k, (d, d))),
        v_proj=par(rng.uniform(-k, k, (d, d))),
        o_proj=par(rng.uniform(-k, k, (d, d))),
    )


# -- block forwards -----------------------------------------------------------


def _plain_linear(name: str, x: Tensor, weight: Tensor) -> Tensor:
    return matmul(x, weight)


def ssm_block_forward(
    x: Tensor,
    p: SsmBlockParams,
    linear: Optional[Callable] = None,
    scan_method: str = "sequential",
    ssd_chunk: int = 64,
) -> Tensor:
    """One selective-SSM block: norm, expand, causal conv, gate, scan, project.

    ``linear(name, x, weight)`` lets the caller wrap the in/out projections
    (LoRA); defaults to the bare matmul. Output position t depends only on
    inputs <= t.
    """
    if linear is None:
        linear = _plain_linear
    din = p.d_inner
    resid = x
    h = rmsnorm(x, p.norm_g)
    xz = linear(f"{p.name}.in_proj", h, p.in_proj)
    xp, z = xz[..., :din], xz[..., din:]
    xc = conv1d_causal(xp, p.conv_w, p.conv_b).silu()

    Bm = matmul(xc, p.b_proj)
    Cm = matmul(xc, p.c_proj)
    if p.variant == "scalar_per_head":
        H, P, N = p.n_heads, p.head_dim, p.state_size
        delta_h = (matmul(xc, p.delta_proj) + p.delta_bias).softplus()  # [.,T,H]
        A_h = -(p.a_log.exp())                                          # [H]
        if is_grad_enabled():
            # training path: broadcast the scalar decay and reuse the
            # generic differentiable scan
            lead = delta_h.shape[:-1]
            delta = (
                delta_h.reshape(lead + (H, 1)).expand(lead + (H, P)).reshape(lead + (din,))
            )
            A = A_h.reshape((H, 1, 1)).expand((H, P, N)).reshape((din, N))
            y = selective_scan(xc, delta, Bm, Cm, A, p.d_skip, method=scan_method)
        else:
            squeeze = xc.ndim == 2
            u3 = xc.data[None] if squeeze else xc.data
            d3 = delta_h.data[None] if squeeze else delta_h.data
            b3 = Bm.data[None] if squeeze else Bm.data
            c3 = Cm.data[None] if squeeze else Cm.data
            yd = ssd_scalar_head_scan(
                u3, d3, A_h.data, b3, c3, p.d_skip.data, P, chunk=ssd_chunk
            )
            y = Tensor(yd[0] if squeeze else yd)
    else:
        delta = (matmul(xc, p.delta_proj) + p.delta_bias).softplus()
        A = -(p.a_log.exp())
        y = selective_scan(xc, delta, Bm, Cm, A, p.d_skip, method=scan_method)

    y = y * z.silu()
    out = linear(f"{p.name}.out_proj", y, p.out_proj)
    return out + resid


def causal_window_mask(T: int, window: int) -> np.ndarray:
    """Boolean [T, T] visibility: position t sees max(0, t-W+1) .. t."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    return (j <= i) & (j >= i - window + 1)


def sliding_window_attention(
    x: Tensor,
    p: SwaBlockParams,
    linear: Optional[Callable] = None,
) -> Tensor:
    """Causal multi-head attention restricted to the last ``p.window`` positions."""
    if linear is None:
        linear = _plain_linear
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    Bsz, T, d = x.shape
    H = p.n_heads
    dh = d // H
    mask = causal_window_mask(T, p.window)

    def heads(t: Tensor) -> Tensor:
        return t.reshape((Bsz, T, H, dh)).transpose((0, 2, 1, 3))

    q = heads(linear(f"{p.name}.q_proj", x, p.q_proj))
    k = heads(linear(f"{p.name}.k_proj", x, p.k_proj))
    v = heads(linear(f"{p.name}.v_proj", x, p.v_proj))
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1, mask=mask)
    ctx = matmul(attn, v).transpose((0, 2, 1, 3)).reshape((Bsz, T, d))
    out = linear(f"{p.name}.o_proj", ctx, p.o_proj)
    return out.reshape((T, d)) if squeeze else out


def swa_block_forward(x: Tensor, p: SwaBlockParams, linear=None) -> Tensor:
    resid = x
    h = rmsnorm(x, p.norm_g)
    return sliding_window_attention(h, p, linear) + resid


# -- full model ----------------------------------------------------------------


class SsmModel:
    """Token embedding, a stack of blocks per the variant schedule, final
    norm and a tied output head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.dtype = config.np_dtype()
        rng = np.random.default_rng(seed)
        V, d = config.vocab_size, config.d_model
        self.embed = Tensor(
            rng.normal(0.0, 0.02, (V, d)).astype(self.dtype), requires_grad=True
        )
        self.blocks = []
        for i, variant in enumerate(config.layer_variants()):
            name = f"layer{i}"
            if variant == "swa_hybrid":
                self.blocks.append(_init_swa_block(name, config, rng, self.dtype))
            else:
                self.blocks.append(_init_ssm_block(name, variant, config, rng, self.dtype))
        self.final_norm = Tensor(np.ones(d, dtype=self.dtype), requires_grad=True)
        self.adapters: dict = {}
        self.span_head: Optional[SpanHead] = None
        self.training = False
        self._drop_rng: Optional[np.random.Generator] = None

    # -- bookkeeping -----------------------------------------------------

    def named_weights(self) -> dict:
        out = {"embed": self.embed}
        for b in self.blocks:
            out.update(b.named())
        out["final_norm"] = self.final_norm
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_weights().values())

    def train_mode(self, dropout_rng: Optional[np.random.Generator] = None) -> None:
        self.training = True
        self._drop_rng = dropout_rng

    def eval_mode(self) -> None:
        self.training = False
        self._drop_rng = None

    # -- forward ---------------------------------------------------------

    def _linear(self, name: str, x: Tensor, weight: Tensor) -> Tensor:
        ad = self.adapters.get(name)
        if ad is None:
            return matmul(x, weight)
        from .lora import lora_forward

        return lora_forward(x, weight, ad, training=self.training, rng=self._drop_rng)

    def _embed_rows(self, ids: np.ndarray) -> Tensor:
        e = embedding(self.embed, ids)
        ad = self.adapters.get("embed")
        if ad is not None:
            delta = matmul(embedding(ad.b_lora, ids), ad.a_lora)
            e = e + delta * ad.scaling
        return e

    def hidden(self, token_ids: np.ndarray) -> Tensor:
        """Final-norm hidden states [B,T,d] (or [T,d] for 1-D input)."""
        ids = np.asarray(token_ids)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        if ids.ndim != 2:
            raise ShapeError(f"token_ids must be [B,T] or [T], got {ids.shape}")
        T = ids.shape[1]
        if T > self.config.max_seq_len:
            raise ShapeError(
                f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}"
            )
        x = self._embed_rows(ids)
        for p in self.blocks:
            if p.variant == "swa_hybrid":
                x = swa_block_forward(x, p, self._linear)
            else:
                x = ssm_block_forward(
                    x, p, self._linear,
                    scan_method=self.config.scan_method,
                    ssd_chunk=self.config.ssd_chunk,
                )
        h = rmsnorm(x, self.final_norm)
        return h.reshape(h.shape[1:]) if squeeze else h

    def forward(self, token_ids: np.ndarray) -> Tensor:
        """Logits [B,T,V] with the output head tied to the embedding."""
        h = self.hidden(token_ids)
        logits = matmul(h, self.embed.swapaxes(0, 1))
        ad = self.adapters.get("embed")
        if ad is not None:
            logits = logits + matmul(
                matmul(h, ad.a_lora.swapaxes(0, 1)), ad.b_lora.swapaxes(0, 1)
            ) * ad.scaling
        return logits

    def attach_span_head(self, seed: int = 0) -> SpanHead:
        self.span_head = SpanHead.build(self.config.d_model, seed, self.dtype)
        return self.span_head

    def contextual_embeddings(self, token_ids: np.ndarray) -> np.ndarray:
        """Hidden-state embeddings for the embedding-based metric."""
        from .tensor import no_grad

        with no_grad():
            return self.hidden(np.asarray(token_ids)).data
