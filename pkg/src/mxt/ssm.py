"""Selective state-space scan: ZOH discretization, recurrence kernels, adjoint.

The continuous system h'(t) = A h(t) + B x(t), y(t) = C h(t) with diagonal A
discretizes under zero-order hold to the elementwise recurrence

    h_t = a_bar_t * h_{t-1} + b_bar_t * x_t,   y_t = sum_n c_t[n] * h_t[n]

with a_bar = exp(delta*a) and b_bar = (exp(delta*a) - 1)/a * b. Selectivity
makes delta, b, c functions of the input sequence while a stays a learned
per-(channel, state) constant, always negative via a = -exp(a_log).

Two forward kernels compute the same recurrence: a plain sequential loop (the
reference) and a chunked kernel that composes the per-step affine maps
(a, b) -> (a*a', a*b' + b) with a Hillis-Steele doubling pass inside each chunk
and carries the state across chunks. With chunk_len = 1 the chunked kernel
performs literally the sequential update, so the two match bit for bit there.

The backward pass reuses the same kernels: the adjoint of a linear recurrence
is the reversed recurrence lam_t = g_t + a_{t+1} * lam_{t+1}, after which
grad_a[t] = lam_t * h_{t-1} and grad_b[t] = lam_t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, NumericError, Tensor

# |delta*a| below this uses the truncated-series form of the ZOH gain
SERIES_BRANCH = 1e-8


# ---- ZOH discretization ------------------------------------------------------


def _zoh_gain_arrays(a: np.ndarray, delta: np.ndarray):
    """phi = (exp(delta*a) - 1)/a elementwise, with its partials.

    Returns (phi, dphi_da, dphi_ddelta) as broadcast arrays. Near delta*a = 0
    the quotient cancels catastrophically, so a three-term series
    phi = delta * (1 + x/2 + x^2/6), x = delta*a, takes over; its truncation
    error is O(x^3/24), far below 1e-12 relative at the 1e-8 branch point.
    """
    x = delta * a
    small = np.abs(x) < SERIES_BRANCH
    ex = np.exp(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi_main = np.expm1(x) / a
        dphi_da_main = (delta * ex - phi_main) / a
    phi_series = delta * (1.0 + x * (0.5 + x / 6.0))
    dphi_da_series = delta * delta * (0.5 + x / 3.0)
    phi = np.where(small, phi_series, phi_main)
    dphi_da = np.where(small, dphi_da_series, dphi_da_main)
    return phi, dphi_da, ex


def zoh_gain(a: Tensor, delta: Tensor) -> Tensor:
    """Differentiable phi(a, delta) = (exp(delta*a) - 1)/a with broadcasting."""
    if np.any(delta.data < 0):
        raise ContractError("zoh: delta must be >= 0")
    phi, dphi_da, ex = _zoh_gain_arrays(a.data, delta.data)

    def bwd(g, a=a, delta=delta):
        ga = T._unbroadcast(g * dphi_da, a.shape) if a.requires_grad else None
        gd = T._unbroadcast(g * ex, delta.shape) if delta.requires_grad else None
        return ga, gd

    return T._make(phi, (a, delta), bwd)


def discretize_zoh(a: Tensor, b: Tensor, delta: Tensor):
    """ZOH discretization of a diagonal system: (a_bar, b_bar).

    a_bar = exp(delta*a); b_bar = (exp(delta*a) - 1)/a * b. Accepts delta = 0
    (the limit: a_bar = 1, b_bar = 0); rejects delta < 0. All arguments
    broadcast elementwise.
    """
    if np.any(delta.data < 0):
        raise ContractError("discretize_zoh: delta must be >= 0")
    a_bar = T.exp(delta * a)
    b_bar = zoh_gain(a, delta) * b
    return a_bar, b_bar


# ---- recurrence kernels (plain numpy, time on axis 1) -------------------------


def recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """h_t = a_t * h_{t-1} + b_t with h_{-1} = 0, one step at a time."""
    h = np.empty_like(b)
    state = np.zeros(b.shape[:1] + b.shape[2:], dtype=b.dtype)
    for t in range(b.shape[1]):
        state = a[:, t] * state + b[:, t]
        h[:, t] = state
    return h


def recurrence_chunked(a: np.ndarray, b: np.ndarray, chunk_len: int) -> np.ndarray:
    """Same recurrence via per-chunk parallel composition plus a carried state.

    Within a chunk, (A, B)[t] accumulates the affine map of steps s..t through
    log2(chunk) doubling rounds; the chunk then applies its maps to the carry.
    """
    if chunk_len < 1:
        raise ContractError(f"chunk_len must be >= 1, got {chunk_len}")
    L = b.shape[1]
    h = np.empty_like(b)
    carry = np.zeros(b.shape[:1] + b.shape[2:], dtype=b.dtype)
    for s in range(0, L, chunk_len):
        e = min(s + chunk_len, L)
        A = a[:, s:e].copy()
        B = b[:, s:e].copy()
        d = 1
        n = e - s
        while d < n:
            # read old A and old B on the right-hand sides, then commit
            newA = A[:, d:] * A[:, :-d]
            B[:, d:] = B[:, d:] + A[:, d:] * B[:, :-d]
            A[:, d:] = newA
            d *= 2
        h[:, s:e] = A * carry[:, None] + B
        carry = h[:, e - 1]
    return h


def _first_nonfinite_step(h: np.ndarray) -> int:
    bad = ~np.isfinite(h)
    axes = (0,) + tuple(range(2, h.ndim))
    per_t = bad.any(axis=axes)
    return int(np.argmax(per_t))


def scan_recurrence(a_bar: Tensor, bx: Tensor, mode: str = "chunked", chunk_len: int = 64) -> Tensor:
    """Differentiable linear recurrence h_t = a_bar_t h_{t-1} + bx_t.

    Shapes (B, L, ...) with matching a_bar/bx; raises if any state comes out
    non-finite, naming the first offending timestep.
    """
    if a_bar.shape != bx.shape:
        raise DimensionError(f"scan: a_bar {a_bar.shape} vs bx {bx.shape}")
    if a_bar.ndim < 2 or a_bar.shape[1] < 1:
        raise DimensionError(f"scan needs (B, L, ...) with L >= 1, got {a_bar.shape}")
    if mode == "sequential":
        run = lambda a, b: recurrence_sequential(a, b)
    elif mode == "chunked":
        run = lambda a, b: recurrence_chunked(a, b, chunk_len)
    else:
        raise ContractError(f"unknown scan mode {mode!r}")
    h = run(a_bar.data, bx.data)
    if not np.isfinite(h).all():
        t = _first_nonfinite_step(h)
        raise NumericError(f"scan produced a non-finite state at timestep t={t}")

    def bwd(g, a_bar=a_bar, bx=bx):
        g = np.asarray(g)
        # lam_t = g_t + a_{t+1} lam_{t+1}: flip time, shift a by one, rescan
        af = np.flip(a_bar.data, 1)
        a_rev = np.concatenate([np.zeros_like(af[:, :1]), af[:, :-1]], axis=1)
        lam = np.flip(run(a_rev, np.flip(g, 1)), 1)
        gb = lam if bx.requires_grad else None
        ga = None
        if a_bar.requires_grad:
            h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
            ga = lam * h_prev
        return ga, gb

    return T._make(h, (a_bar, bx), bwd)


# ---- selective parameterization ------------------------------------------------


@dataclass
class SsmParams:
    """Learned weights of one selective scan over (B, L, E) sequences.

    a_log: (E, N) log-magnitudes of the always-negative decay a = -exp(a_log)
    dt_w, dt_b: (E, E), (E,) projection and bias behind softplus -> delta
    b_w, c_w: (E, N) input projections to the per-step b_t / readout c_t
    skip_d: optional (E,) direct feedthrough added as skip_d * x
    """

    a_log: Tensor
    dt_w: Tensor
    dt_b: Tensor
    b_w: Tensor
    c_w: Tensor
    skip_d: Tensor | None = None

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]

    def tensors(self):
        out = {"a_log": self.a_log, "dt_w": self.dt_w, "dt_b": self.dt_b,
               "b_w": self.b_w, "c_w": self.c_w}
        if self.skip_d is not None:
            out["skip_d"] = self.skip_d
        return out


def init_ssm_params(channels: int, state_dim: int, rng: np.random.Generator,
                    dtype=None, use_skip: bool = False) -> SsmParams:
    """Draw initial weights: a in [1, 16] pre-log, delta bias giving softplus
    outputs in [1e-3, 1e-1], small uniform projections."""
    dt = dtype or T.get_default_dtype()
    a0 = np.log(rng.uniform(1.0, 16.0, (channels, state_dim)))
    target_dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), channels))
    dt_b = np.log(np.expm1(target_dt))  # inverse softplus
    k = 1.0 / np.sqrt(channels)
    mk = lambda arr: Tensor(arr.astype(dt), requires_grad=True, dtype=dt)
    p = SsmParams(
        a_log=mk(a0),
        dt_w=mk(rng.uniform(-k, k, (channels, channels))),
        dt_b=mk(dt_b),
        b_w=mk(rng.uniform(-k, k, (channels, state_dim))),
        c_w=mk(rng.uniform(-k, k, (channels, state_dim))),
    )
    if use_skip:
        p.skip_d = mk(np.ones(channels))
    return p


def selective_discrete(x: Tensor, params: SsmParams):
    """Input-dependent discrete parameters for x of shape (B, L, E).

    Returns (a_bar, b_bar, c_seq): a_bar/b_bar (B, L, E, N), c_seq (B, L, N).
    """
    if x.ndim != 3:
        raise DimensionError(f"selective scan expects (B, L, E), got {x.shape}")
    bsz, L, E = x.shape
    if E != params.channels:
        raise DimensionError(f"x has {E} channels, params expect {params.channels}")
    N = params.state_dim
    delta = T.softplus(T.matmul(x, params.dt_w) + params.dt_b)  # (B, L, E)
    bt = T.matmul(x, params.b_w)   # (B, L, N)
    ct = T.matmul(x, params.c_w)   # (B, L, N)
    a = T.neg(T.exp(params.a_log))  # (E, N), strictly negative
    a4 = T.reshape(a, (1, 1, E, N))
    d4 = T.reshape(delta, (bsz, L, E, 1))
    b4 = T.reshape(bt, (bsz, L, 1, N))
    a_bar, b_bar = discretize_zoh(a4, b4, d4)
    return a_bar, b_bar, ct


def scan_with_params(x: Tensor, a_bar: Tensor, b_bar: Tensor, c_seq: Tensor,
                     skip_d: Tensor | None = None, mode: str = "chunked",
                     chunk_len: int = 64) -> Tensor:
    """Run the recurrence with explicit (frozen) discrete parameters.

    y is linear in x here, which the selective path deliberately is not.
    """
    bsz, L, E = x.shape
    bx = b_bar * T.reshape(x, (bsz, L, E, 1))
    h = scan_recurrence(a_bar, bx, mode=mode, chunk_len=chunk_len)
    y = T.sum_(h * T.reshape(c_seq, (bsz, L, 1, c_seq.shape[-1])), axis=-1)
    if skip_d is not None:
        y = y + x * skip_d
    return y


def scan_sequential(x: Tensor, params: SsmParams) -> Tensor:
    """Reference selective scan, stepping the recurrence one t at a time."""
    a_bar, b_bar, ct = selective_discrete(x, params)
    return scan_with_params(x, a_bar, b_bar, ct, params.skip_d, mode="sequential")


def scan_chunked(x: Tensor, params: SsmParams, chunk_len: int = 64) -> Tensor:
    """Chunk-parallel selective scan; equivalent to scan_sequential."""
    a_bar, b_bar, ct = selective_discrete(x, params)
    return scan_with_params(x, a_bar, b_bar, ct, params.skip_d,
                            mode="chunked", chunk_len=chunk_len)
