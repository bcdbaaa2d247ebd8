"""The inpainting network: hybrid modules arranged in a three-level U-Net.

Input is 4 channels (masked RGB plus the mask, 1 = hole); output is RGB in
[0, 1] via a scaled tanh. Each stage stacks hybrid modules; a hybrid module
applies spatial-reduced attention, a selective-scan block, and a gated
feed-forward, each behind its own residual:

    f1 = f + SRSA(f);  f2 = f1 + Mamba(f1);  out = f2 + FFN(f2)

Encoder stages halve resolution and double channels with a stride-2 conv;
decoder stages upsample (nearest 2x + conv), fuse the encoder skip by
concat + 1x1 conv, then run their own hybrid stack.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .blocks import Conv2d, Gdfn, MambaBlock, Module, Srsa
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class ModelConfig:
    base_channels: int = 16
    hm_counts: tuple = (4, 6, 6, 8, 6, 6, 4)
    state_dim: int = 8
    pooled_spatial: int = 8
    heads: int = 1
    expand: int = 2
    conv_kernel: int = 4
    gdfn_expansion: float = 2.66
    scan_chunk: int = 64
    input_channels: int = 4
    output_channels: int = 3
    enable_mamba: bool = True
    enable_srsa: bool = True
    enable_ffn: bool = True
    use_cbfn: bool = True
    use_pe: bool = True
    scale_qk: bool = False
    silu_after_conv: bool = False
    use_skip_d: bool = False

    def __post_init__(self):
        self.hm_counts = tuple(int(c) for c in self.hm_counts)
        if len(self.hm_counts) % 2 != 1:
            raise ContractError(f"hm_counts must have odd length, got {self.hm_counts}")
        if any(c < 0 for c in self.hm_counts):
            raise ContractError("hm_counts entries must be >= 0")

    @property
    def levels(self) -> int:
        """Number of down/up steps (3 for the default 7-stage layout)."""
        return (len(self.hm_counts) - 1) // 2

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(str(c) for c in v)
            elif isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            else:
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "ModelConfig":
        kwargs = {}
        names = {f.name: f for f in fields(cls)}
        for key, raw in flat.items():
            if key not in names:
                raise ContractError(f"unknown model config key {key!r}")
            default = names[key].default
            try:
                if key == "hm_counts":
                    kwargs[key] = tuple(int(c) for c in str(raw).split(",") if c != "")
                elif isinstance(default, bool):
                    if str(raw).lower() not in ("true", "false", "1", "0"):
                        raise ContractError(f"bad boolean {raw!r} for {key}")
                    kwargs[key] = str(raw).lower() in ("true", "1")
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = raw
            except ValueError as err:
                if isinstance(err, ContractError):
                    raise
                raise ContractError(f"bad value {raw!r} for {key}")
        return cls(**kwargs)


class HybridModule(Module):
    """SRSA -> Mamba -> gated FFN, each sub-block behind its own residual."""

    def __init__(self, channels: int, cfg: ModelConfig, rng: np.random.Generator, dtype=None):
        if cfg.enable_srsa:
            self.srsa = Srsa(channels, rng, pooled_spatial=cfg.pooled_spatial,
                             heads=cfg.heads, scale_qk=cfg.scale_qk, dtype=dtype)
        if cfg.enable_mamba:
            self.mamba = MambaBlock(channels, rng, state_dim=cfg.state_dim,
                                    expand=cfg.expand, conv_kernel=cfg.conv_kernel,
                                    chunk_len=cfg.scan_chunk, use_pe=cfg.use_pe,
                                    silu_after_conv=cfg.silu_after_conv,
                                    use_skip=cfg.use_skip_d, dtype=dtype)
        if cfg.enable_ffn:
            self.ffn = Gdfn(channels, rng, expansion=cfg.gdfn_expansion,
                            context_broadcast=cfg.use_cbfn, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if hasattr(self, "srsa"):
            x = x + self.srsa(x)
        if hasattr(self, "mamba"):
            x = x + self.mamba(x)
        if hasattr(self, "ffn"):
            x = x + self.ffn(x)
        return x


class Stage(Module):
    """A stack of hybrid modules at one resolution."""

    def __init__(self, channels: int, count: int, cfg: ModelConfig,
                 rng: np.random.Generator, dtype=None):
        self.blocks = [HybridModule(channels, cfg, rng, dtype=dtype) for _ in range(count)]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class MxT(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self._cfg = cfg
        base = cfg.base_channels
        lv = cfg.levels
        self.embed = Conv2d(cfg.input_channels, base, 3, rng, pad=1, dtype=dtype)
        self.enc = [Stage(base * 2**i, cfg.hm_counts[i], cfg, rng, dtype=dtype) for i in range(lv)]
        self.down = [Conv2d(base * 2**i, base * 2**(i + 1), 3, rng, stride=2, pad=1, dtype=dtype)
                     for i in range(lv)]
        self.mid = Stage(base * 2**lv, cfg.hm_counts[lv], cfg, rng, dtype=dtype)
        self.up = [Conv2d(base * 2**(i + 1), base * 2**i, 3, rng, pad=1, dtype=dtype)
                   for i in reversed(range(lv))]
        self.fuse = [Conv2d(base * 2**(i + 1), base * 2**i, 1, rng, dtype=dtype)
                     for i in reversed(range(lv))]
        self.dec = [Stage(base * 2**i, cfg.hm_counts[2 * lv - i], cfg, rng, dtype=dtype)
                    for i in reversed(range(lv))]
        self.head = Conv2d(base, cfg.output_channels, 3, rng, pad=1, dtype=dtype)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def forward(self, x: Tensor) -> Tensor:
        cfg = self._cfg
        if x.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise DimensionError(
                f"expected (B, {cfg.input_channels}, H, W), got {x.shape}")
        div = 2 ** cfg.levels
        if x.shape[2] % div or x.shape[3] % div:
            raise DimensionError(
                f"spatial dims {x.shape[2]}x{x.shape[3]} must be divisible by {div}")
        f = self.embed(x)
        skips = []
        for stage, down in zip(self.enc, self.down):
            f = stage(f)
            skips.append(f)
            f = down(f)
        f = self.mid(f)
        for up, fuse, stage, skip in zip(self.up, self.fuse, self.dec, reversed(skips)):
            f = up(T.upsample_nearest2x(f))
            f = fuse(T.concat([f, skip], axis=1))
            f = stage(f)
        y = self.head(f)
        return (T.tanh(y) + 1.0) * 0.5


def prepare_input(i_gt: np.ndarray, mask: np.ndarray, dtype=None) -> np.ndarray:
    """(3,H,W) image in [0,1] + (1,H,W) mask (1 = hole) -> (4,H,W) model input:
    the masked image with the mask appended."""
    if i_gt.ndim != 3 or mask.ndim != 3 or mask.shape[0] != 1:
        raise DimensionError(f"prepare_input: got {i_gt.shape}, {mask.shape}")
    if i_gt.shape[1:] != mask.shape[1:]:
        raise DimensionError(f"image {i_gt.shape} vs mask {mask.shape}")
    dt = dtype or T.get_default_dtype()
    masked = i_gt * (1.0 - mask)
    return np.concatenate([masked, mask], axis=0).astype(dt)


def composite(out: np.ndarray, i_gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep known pixels from the ground truth, fill holes from the net."""
    return i_gt * (1.0 - mask) + out * mask


def _axis_positions(size: int, tile: int, stride: int) -> list:
    pos = list(range(0, size - tile + 1, stride))
    if pos[-1] != size - tile:
        pos.append(size - tile)
    return pos


def _tile_weights(tile: int, overlap: int, at_start: bool, at_end: bool, dtype) -> np.ndarray:
    """1D blending profile: flat 1 inside, a linear ramp over the overlap on
    any edge that meets another tile. Ramps never reach 0, so the accumulated
    weight is positive everywhere."""
    w = np.ones(tile, dtype=dtype)
    if overlap > 0:
        ramp = np.linspace(0.0, 1.0, overlap + 2, dtype=np.float64)[1:-1].astype(dtype)
        if not at_start:
            w[:overlap] = ramp
        if not at_end:
            w[tile - overlap:] = ramp[::-1]
    return w


def tiled_inference(model: MxT, i_in: np.ndarray, tile: int = 0, overlap: int = 16) -> np.ndarray:
    """Run the model over (4, H, W), optionally tile by tile.

    tile = 0 (or >= the whole image) runs one full pass. Otherwise square
    tiles of the given side cover the image with the given overlap; outputs
    are feather-blended with linear ramps and renormalized. overlap = 0
    degenerates to disjoint tiles copied verbatim, bit-equal to running each
    region independently.
    """
    if i_in.ndim != 3:
        raise DimensionError(f"tiled_inference expects (C, H, W), got {i_in.shape}")
    c, h, w = i_in.shape
    dt = model.embed.w.data.dtype
    div = 2 ** model.config.levels

    def run(patch: np.ndarray) -> np.ndarray:
        with T.no_grad():
            out = model(Tensor(patch[None], dtype=dt))
        return out.data[0]

    if tile <= 0 or (tile >= h and tile >= w):
        return run(i_in)
    if tile % div:
        raise ContractError(f"tile side {tile} must be divisible by {div}")
    if overlap < 0 or overlap >= tile:
        raise ContractError(f"overlap {overlap} must be in [0, tile)")
    if tile > h or tile > w:
        raise ContractError(f"tile {tile} exceeds image {h}x{w}")
    stride = tile - overlap
    out = np.zeros((model.config.output_channels, h, w), dtype=dt)
    acc = np.zeros((1, h, w), dtype=dt)
    ys = _axis_positions(h, tile, stride)
    xs = _axis_positions(w, tile, stride)
    for y0 in ys:
        wy = _tile_weights(tile, overlap, y0 == 0, y0 == h - tile, dt)
        for x0 in xs:
            wx = _tile_weights(tile, overlap, x0 == 0, x0 == w - tile, dt)
            w2d = (wy[:, None] * wx[None, :])[None]
            patch_out = run(i_in[:, y0 : y0 + tile, x0 : x0 + tile])
            out[:, y0 : y0 + tile, x0 : x0 + tile] += patch_out * w2d
            acc[:, y0 : y0 + tile, x0 : x0 + tile] += w2d
    return out / acc


def ablation_variant(cfg: ModelConfig, mamba: bool, srsa: bool, ffn: bool = True,
                     cbfn: bool | None = None) -> ModelConfig:
    """Convenience for the sub-block on/off grid."""
    return replace(cfg, enable_mamba=mamba, enable_srsa=srsa, enable_ffn=ffn,
                   use_cbfn=cfg.use_cbfn if cbfn is None else cbfn)


# ---- persistence ---------------------------------------------------------------


def save_model(path: str, model: MxT, extra_meta: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    width = "wide" if model.embed.w.data.dtype == np.float64 else "standard"
    meta = {f"model.{k}": v for k, v in model.config.to_flat().items()}
    meta["width"] = width
    meta.update(extra_meta or {})
    tensors = {f"model.{n}": p.data for n, p in model.named_parameters()}
    save_checkpoint(path, meta, tensors)


def load_model(path: str):
    """Rebuild an MxT from a checkpoint; returns (model, meta)."""
    from .checkpoint import SchemaError, load_checkpoint

    meta, tensors = load_checkpoint(path)
    cfg_flat = {k[len("model."):]: v for k, v in meta.items() if k.startswith("model.")}
    cfg = ModelConfig.from_flat(cfg_flat)
    if meta.get("width") not in ("standard", "wide"):
        raise SchemaError(f"{path}: missing or bad width {meta.get('width')!r}")
    dtype = np.float64 if meta["width"] == "wide" else np.float32
    model = MxT(cfg, np.random.default_rng(0), dtype=dtype)
    load_weights(model, tensors, prefix="model.", path=path)
    return model, meta


def load_weights(model: Module, tensors: dict, prefix: str = "model.", path: str = "?") -> None:
    from .checkpoint import SchemaError

    wanted = {prefix + n: p for n, p in model.named_parameters()}
    stored = {k: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(wanted) - set(stored))
    unknown = sorted(set(stored) - set(wanted))
    if missing or unknown:
        raise SchemaError(f"{path}: missing tensors {missing}, unknown tensors {unknown}")
    for name, p in wanted.items():
        arr = stored[name]
        if tuple(arr.shape) != p.shape:
            raise SchemaError(f"{path}: {name} has shape {arr.shape}, expected {p.shape}")
        if arr.dtype != p.data.dtype:
            raise SchemaError(f"{path}: {name} is {arr.dtype}, expected {p.data.dtype}")
        p.data = np.ascontiguousarray(arr)
