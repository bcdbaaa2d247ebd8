"""Network building blocks: layers plus the three sub-blocks of a hybrid module.

Spatial tensors are (B, C, H, W); sequence tensors are (B, L, C) with L = H*W
in raster (row-major) order. Convolutions are built from pad / strided-slice /
matmul tape ops, so they need no backward rules of their own.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .ssm import SsmParams, init_ssm_params, scan_chunked, scan_sequential
from .tensor import DimensionError, Tensor


class Module:
    """Minimal parameter container. Attributes that are Tensors, Modules, or
    lists of Modules are traversed in insertion order; names starting with an
    underscore are invisible to traversal (caches, config)."""

    def named_parameters(self, prefix: str = ""):
        for name, value in self.__dict__.items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, SsmParams):
                for sub, t in value.tensors().items():
                    yield f"{path}.{sub}", t
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_requires_grad(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, k: float, dtype) -> Tensor:
    return Tensor(rng.uniform(-k, k, shape).astype(dtype), requires_grad=True, dtype=dtype)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True, dtype=None):
        dtype = dtype or T.get_default_dtype()
        k = 1.0 / np.sqrt(cin)
        self.w = _uniform(rng, (cin, cout), k, dtype)
        self.b = _uniform(rng, (cout,), k, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, dtype=dtype)
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=-1, keepdims=True)
        xn = centered / T.sqrt(var + self._eps)
        return xn * self.gamma + self.beta


class ChannelLayerNorm(Module):
    """LayerNorm over the channel axis of (B, C, H, W)."""

    def __init__(self, channels: int, eps: float = 1e-5, dtype=None):
        self.ln = LayerNorm(channels, eps=eps, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = T.transpose(x, (0, 2, 3, 1))
        y = self.ln(y)
        return T.transpose(y, (0, 3, 1, 2))


class Conv2d(Module):
    """k x k convolution via im2col: gather the k^2 taps, one matmul.

    Weight layout (k*k*cin, cout); tap (dy, dx) occupies rows
    [(dy*k + dx)*cin, ...+cin), matching the concat order in forward.
    """

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, bias: bool = True, dtype=None):
        dtype = dtype or T.get_default_dtype()
        fan_in = cin * k * k
        kk = 1.0 / np.sqrt(fan_in)
        self.w = _uniform(rng, (fan_in, cout), kk, dtype)
        self.b = _uniform(rng, (cout,), kk, dtype) if bias else None
        self._k, self._stride, self._pad = k, stride, pad
        self._cin, self._cout = cin, cout

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"conv expects (B, C, H, W), got {x.shape}")
        bsz, c, h, w = x.shape
        if c != self._cin:
            raise DimensionError(f"conv expects {self._cin} channels, got {c}")
        k, s, p = self._k, self._stride, self._pad
        if p:
            x = T.pad(x, [(0, 0), (0, 0), (p, p), (p, p)])
        hp, wp = h + 2 * p, w + 2 * p
        oh = (hp - k) // s + 1
        ow = (wp - k) // s + 1
        taps = []
        for dy in range(k):
            for dx in range(k):
                taps.append(x[:, :, dy : dy + oh * s : s, dx : dx + ow * s : s])
        col = T.concat(taps, axis=1)                      # (B, k*k*cin, oh, ow)
        col = T.transpose(col, (0, 2, 3, 1))              # (B, oh, ow, k*k*cin)
        col = T.reshape(col, (bsz, oh * ow, k * k * self._cin))
        y = T.matmul(col, self.w)
        if self.b is not None:
            y = y + self.b
        y = T.reshape(y, (bsz, oh, ow, self._cout))
        return T.transpose(y, (0, 3, 1, 2))


class DepthwiseConv2d(Module):
    """Per-channel k x k convolution (stride 1): nine shifted multiply-adds."""

    def __init__(self, channels: int, rng: np.random.Generator, k: int = 3,
                 pad: int = 1, bias: bool = True, dtype=None):
        dtype = dtype or T.get_default_dtype()
        kk = 1.0 / np.sqrt(k * k)
        self.w = _uniform(rng, (k * k, channels), kk, dtype)
        self.b = _uniform(rng, (channels,), kk, dtype) if bias else None
        self._k, self._pad = k, pad
        self._channels = channels

    def forward(self, x: Tensor) -> Tensor:
        bsz, c, h, w = x.shape
        if c != self._channels:
            raise DimensionError(f"depthwise conv expects {self._channels} channels, got {c}")
        k, p = self._k, self._pad
        xp = T.pad(x, [(0, 0), (0, 0), (p, p), (p, p)]) if p else x
        oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
        y = None
        for dy in range(k):
            for dx in range(k):
                tap = self.w[dy * k + dx]                     # (C,)
                tap = T.reshape(tap, (1, c, 1, 1))
                term = xp[:, :, dy : dy + oh, dx : dx + ow] * tap
                y = term if y is None else y + term
        if self.b is not None:
            y = y + T.reshape(self.b, (1, c, 1, 1))
        return y


class CausalConv1d(Module):
    """Depthwise causal convolution over (B, L, C): position t sees t-k+1..t."""

    def __init__(self, channels: int, rng: np.random.Generator, k: int = 4, dtype=None):
        dtype = dtype or T.get_default_dtype()
        kk = 1.0 / np.sqrt(k)
        self.w = _uniform(rng, (k, channels), kk, dtype)
        self.b = _uniform(rng, (channels,), kk, dtype)
        self._k = k

    def forward(self, x: Tensor) -> Tensor:
        bsz, L, c = x.shape
        k = self._k
        xp = T.pad(x, [(0, 0), (k - 1, 0), (0, 0)])
        y = None
        for j in range(k):
            term = xp[:, j : j + L, :] * self.w[j]
            y = term if y is None else y + term
        return y + self.b


def positional_encoding(length: int, channels: int, dtype) -> np.ndarray:
    """Sinusoidal table (length, channels): even channels sin, odd cos, both
    at rate pos / 10000^(even_index/channels). Position 0 is exactly {0, 1}."""
    pe = np.zeros((length, channels), dtype=dtype)
    pos = np.arange(length, dtype=np.float64)[:, None]
    even = np.arange(0, channels, 2, dtype=np.float64)
    rate = pos / np.power(10000.0, even / channels)
    pe[:, 0::2] = np.sin(rate)
    pe[:, 1::2] = np.cos(rate[:, : channels // 2])
    return pe


# ---- the three sub-blocks -------------------------------------------------------


class Srsa(Module):
    """Spatial-reduced self-attention.

    Queries stay at full resolution; keys and values are adaptively pooled to
    a pooled_spatial^2 token grid, so attention cost is linear in H*W. A
    depthwise 3x3 on the full-resolution values re-injects local detail:

        out = LE(V) + softmax(Q K'^T [* 1/sqrt(d)]) V'
    """

    def __init__(self, channels: int, rng: np.random.Generator, pooled_spatial: int = 8,
                 heads: int = 1, scale_qk: bool = False, dtype=None):
        if channels % heads:
            raise DimensionError(f"channels {channels} not divisible by heads {heads}")
        self.norm = ChannelLayerNorm(channels, dtype=dtype)
        self.qkv = Conv2d(channels, 3 * channels, 1, rng, dtype=dtype)
        self.qkv_dw = DepthwiseConv2d(3 * channels, rng, dtype=dtype)
        self.local = DepthwiseConv2d(channels, rng, dtype=dtype)
        self._channels = channels
        self._pooled = pooled_spatial
        self._heads = heads
        self._scale = scale_qk

    def forward(self, x: Tensor) -> Tensor:
        bsz, c, h, w = x.shape
        hds = self._heads
        dh = c // hds
        s = self._pooled
        xn = self.norm(x)
        qkv = self.qkv_dw(self.qkv(xn))                    # (B, 3C, H, W)
        q, k, v = T.split(qkv, [c, c, c], axis=1)

        kp = T.adaptive_avg_pool2d(k, (s, s))              # (B, C, s, s)
        vp = T.adaptive_avg_pool2d(v, (s, s))

        def tokens(t, n):
            t = T.reshape(t, (bsz, c, n))                  # (B, C, n)
            t = T.transpose(t, (0, 2, 1))                  # (B, n, C)
            t = T.reshape(t, (bsz, n, hds, dh))
            return T.transpose(t, (0, 2, 1, 3))            # (B, heads, n, dh)

        qs = tokens(q, h * w)
        ks = tokens(kp, s * s)
        vs = tokens(vp, s * s)

        scores = T.matmul(qs, T.transpose(ks, (0, 1, 3, 2)))   # (B, heads, HW, s*s)
        if self._scale:
            scores = scores * (1.0 / np.sqrt(dh))
        att = T.softmax(scores, axis=-1)
        ctx = T.matmul(att, vs)                             # (B, heads, HW, dh)
        ctx = T.transpose(ctx, (0, 2, 1, 3))                # (B, HW, heads, dh)
        ctx = T.reshape(ctx, (bsz, h * w, c))
        ctx = T.transpose(ctx, (0, 2, 1))
        ctx = T.reshape(ctx, (bsz, c, h, w))
        return self.local(v) + ctx

    def attention_map(self, x: Tensor) -> Tensor:
        """The softmax weights, (B, heads, H*W, pooled^2); for inspection."""
        bsz, c, h, w = x.shape
        hds, dh, s = self._heads, c // self._heads, self._pooled
        xn = self.norm(x)
        qkv = self.qkv_dw(self.qkv(xn))
        q, k, _ = T.split(qkv, [c, c, c], axis=1)
        kp = T.adaptive_avg_pool2d(k, (s, s))

        def tokens(t, n):
            t = T.transpose(T.reshape(t, (bsz, c, n)), (0, 2, 1))
            return T.transpose(T.reshape(t, (bsz, n, hds, dh)), (0, 2, 1, 3))

        scores = T.matmul(tokens(q, h * w), T.transpose(tokens(kp, s * s), (0, 1, 3, 2)))
        if self._scale:
            scores = scores * (1.0 / np.sqrt(dh))
        return T.softmax(scores, axis=-1)


class MambaBlock(Module):
    """Selective-scan block over the raster-flattened image.

    (B, C, H, W) -> (B, L, C) row-major, plus a sinusoidal position table,
    layer norm, then two branches from the same normalized sequence: the scan
    body SSM(CausalConv(SiLU(Linear))) and a SiLU(Linear) gate. Their product
    goes through the output projection and back to (B, C, H, W).
    """

    def __init__(self, channels: int, rng: np.random.Generator, state_dim: int = 8,
                 expand: int = 2, conv_kernel: int = 4, chunk_len: int = 64,
                 use_pe: bool = True, silu_after_conv: bool = False,
                 use_skip: bool = False, dtype=None):
        dtype = dtype or T.get_default_dtype()
        inner = expand * channels
        self.norm = LayerNorm(channels, dtype=dtype)
        self.inp = Linear(channels, inner, rng, dtype=dtype)
        self.conv = CausalConv1d(inner, rng, k=conv_kernel, dtype=dtype)
        self.ssm = init_ssm_params(inner, state_dim, rng, dtype=dtype, use_skip=use_skip)
        self.gate = Linear(channels, inner, rng, dtype=dtype)
        self.out = Linear(inner, channels, rng, dtype=dtype)
        self._chunk = chunk_len
        self._use_pe = use_pe
        self._silu_after_conv = silu_after_conv
        self._dtype = dtype
        self._pe_cache: dict = {}

    def _pe(self, length: int, channels: int) -> Tensor:
        key = (length, channels)
        if key not in self._pe_cache:
            self._pe_cache[key] = Tensor(positional_encoding(length, channels, self._dtype))
        return self._pe_cache[key]

    def forward(self, x: Tensor, mode: str = "chunked") -> Tensor:
        bsz, c, h, w = x.shape
        L = h * w
        seq = T.transpose(T.reshape(x, (bsz, c, L)), (0, 2, 1))   # (B, L, C)
        if self._use_pe:
            seq = seq + self._pe(L, c)
        seq = self.norm(seq)
        body = T.silu(self.inp(seq))
        body = self.conv(body)
        if self._silu_after_conv:
            body = T.silu(body)
        if mode == "sequential":
            body = scan_sequential(body, self.ssm)
        else:
            body = scan_chunked(body, self.ssm, chunk_len=self._chunk)
        gate = T.silu(self.gate(seq))
        y = self.out(gate * body)                                  # (B, L, C)
        return T.reshape(T.transpose(y, (0, 2, 1)), (bsz, c, h, w))


class Gdfn(Module):
    """Gated depthwise feed-forward: pointwise expand to two lanes, depthwise
    3x3, gelu-gate one lane by the other, pointwise project back.

    With context_broadcast on (the CBFN variant), the per-sample channel mean
    of the result is added back everywhere, handing every pixel the global
    context at zero parameter cost.
    """

    def __init__(self, channels: int, rng: np.random.Generator, expansion: float = 2.66,
                 context_broadcast: bool = False, dtype=None):
        hidden = max(channels, int(round(expansion * channels)))
        self.norm = ChannelLayerNorm(channels, dtype=dtype)
        self.expand = Conv2d(channels, 2 * hidden, 1, rng, dtype=dtype)
        self.dw = DepthwiseConv2d(2 * hidden, rng, dtype=dtype)
        self.project = Conv2d(hidden, channels, 1, rng, dtype=dtype)
        self._hidden = hidden
        self._broadcast = context_broadcast

    def forward(self, x: Tensor) -> Tensor:
        y = self.dw(self.expand(self.norm(x)))
        gate, value = T.split(y, [self._hidden, self._hidden], axis=1)
        y = self.project(T.gelu(gate) * value)
        if self._broadcast:
            y = y + T.mean(y, axis=(2, 3), keepdims=True)
        return y
