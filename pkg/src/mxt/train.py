"""Training loop: Adam, alternating discriminator/generator steps, resumable state.

Determinism contract: a run is fully determined by (model config, train config,
loss weights, width). Batch composition depends only on (seed, step), so a
checkpoint at step k resumed to step n is bit-identical to an uninterrupted
run to step n. The frozen feature extractor is rebuilt from its fixed seed and
is never serialized.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .blocks import Module
from .data import batch_at
from .losses import (
    EXTRACTOR_SEED,
    FeatureExtractor,
    LossWeights,
    PatchDiscriminator,
    discriminator_loss,
    generator_loss,
    masked_l1,
)
from .model import ModelConfig, MxT, load_weights
from .tensor import ContractError, NumericError, Tape, Tensor, no_grad

# fixed stream ids so model/disc init never collide with batch shuffling
_MODEL_STREAM = 1
_DISC_STREAM = 2


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    seed: int = 0
    iters: int = 2000
    log_every: int = 50
    checkpoint_every: int = 0
    # data source; recorded in checkpoints so a resumed run rebuilds the
    # exact same sample list
    data_dir: str = ""
    data_count: int = 8
    image_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")


def dataclass_flat(obj) -> dict:
    """Flatten a simple dataclass to str->str (bools as true/false)."""
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, bool):
            out[f.name] = "true" if v else "false"
        elif isinstance(v, float):
            out[f.name] = repr(v)
        else:
            out[f.name] = str(v)
    return out


def dataclass_unflat(cls, flat: dict):
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in flat.items():
        if key not in names:
            raise ContractError(f"unknown {cls.__name__} key {key!r}")
        default = names[key].default
        if isinstance(default, bool):
            if str(raw).lower() not in ("true", "false", "1", "0"):
                raise ContractError(f"bad boolean {raw!r} for {key}")
            kwargs[key] = str(raw).lower() in ("true", "1")
        elif isinstance(default, int):
            kwargs[key] = _cast(int, raw, key)
        elif isinstance(default, float):
            kwargs[key] = _cast(float, raw, key)
        else:
            kwargs[key] = str(raw)
    return cls(**kwargs)


def _cast(kind, raw, key):
    try:
        return kind(raw)
    except ValueError:
        raise ContractError(f"bad {kind.__name__} {raw!r} for {key}")


class Adam(object):
    """Moment estimates are keyed by parameter name so they survive a
    checkpoint round trip attached to the right tensors."""

    def __init__(self, module: Module, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(module.named_parameters())
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def moment_tensors(self, prefix: str) -> dict:
        out = {}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_moments(self, tensors: dict, prefix: str, path: str = "?"):
        from .checkpoint import SchemaError

        for kind, store in (("m", self.m), ("v", self.v)):
            for name in self.params:
                key = f"{prefix}.{kind}.{name}"
                if key not in tensors:
                    raise SchemaError(f"{path}: missing optimizer tensor {key}")
                arr = tensors[key]
                if arr.shape != store[name].shape or arr.dtype != store[name].dtype:
                    raise SchemaError(
                        f"{path}: optimizer tensor {key} has shape {arr.shape} "
                        f"{arr.dtype}, expected {store[name].shape} {store[name].dtype}")
                store[name] = np.ascontiguousarray(arr)


@dataclass
class TrainState:
    model: MxT
    tcfg: TrainConfig
    weights: LossWeights
    opt_g: Adam
    extractor: FeatureExtractor | None = None
    disc: PatchDiscriminator | None = None
    opt_d: Adam | None = None
    step: int = 0

    @property
    def width(self) -> str:
        return "wide" if self.model.embed.w.data.dtype == np.float64 else "standard"

    @property
    def dtype(self):
        return self.model.embed.w.data.dtype


def init_train_state(mcfg: ModelConfig, tcfg: TrainConfig,
                     weights: LossWeights | None = None,
                     width: str = "standard") -> TrainState:
    weights = weights if weights is not None else LossWeights()
    dtype = np.float64 if width == "wide" else np.float32
    model = MxT(mcfg, np.random.default_rng([tcfg.seed, _MODEL_STREAM]), dtype=dtype)
    opt_g = Adam(model, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    extractor = None
    if weights.style != 0 or weights.perceptual != 0:
        extractor = FeatureExtractor(seed=EXTRACTOR_SEED, dtype=dtype)
    disc = opt_d = None
    if weights.adversarial != 0:
        disc = PatchDiscriminator(np.random.default_rng([tcfg.seed, _DISC_STREAM]),
                                  dtype=dtype)
        opt_d = Adam(disc, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    return TrainState(model=model, tcfg=tcfg, weights=weights, opt_g=opt_g,
                      extractor=extractor, disc=disc, opt_d=opt_d)


def build_samples(tcfg: TrainConfig) -> list:
    """Materialize the training set a config describes (synthetic unless
    data_dir points at a directory of images)."""
    from .data import (
        BUCKET_CYCLE,
        ImageSample,
        MaskSpec,
        generate_irregular_mask,
        read_image,
        synthetic_dataset,
    )

    if not tcfg.data_dir:
        return synthetic_dataset(tcfg.data_count, tcfg.image_size,
                                 tcfg.image_size, seed=tcfg.seed)
    import os

    names = sorted(n for n in os.listdir(tcfg.data_dir)
                   if n.lower().endswith((".ppm", ".png")))
    if not names:
        raise ContractError(f"no .ppm/.png images in {tcfg.data_dir!r}")
    samples = []
    for i, name in enumerate(names):
        img = read_image(os.path.join(tcfg.data_dir, name))
        bucket = BUCKET_CYCLE[i % len(BUCKET_CYCLE)]
        spec = MaskSpec(bucket=bucket, seed=tcfg.seed * 100003 + i)
        res = generate_irregular_mask(spec, img.shape[1], img.shape[2])
        samples.append(ImageSample(i_gt=img, mask=res.mask, bucket=bucket))
    return samples


def _first_nonfinite(parts: dict) -> str | None:
    for name, value in parts.items():
        if not np.isfinite(value):
            return name
    return None


def train_step(state: TrainState, samples) -> dict:
    """One optimization step. All finiteness checks run before any parameter
    is touched, so a raised NumericError leaves the state at the last good
    step."""
    tc = state.tcfg
    batch = batch_at(samples, tc.batch_size, tc.seed, state.step, dtype=state.dtype)
    x = Tensor(batch.i_in)
    gt = Tensor(batch.i_gt)
    state.model.zero_grad()
    if state.disc is not None:
        state.disc.zero_grad()
    with Tape():
        out = state.model(x)
        d_loss = None
        if state.disc is not None:
            d_loss = discriminator_loss(state.disc, gt, out,
                                        mode=state.weights.adv_mode)
        g_loss, parts = generator_loss(out, gt, batch.mask, state.weights,
                                       state.extractor, state.disc)
        if d_loss is not None:
            parts["d_loss"] = float(d_loss.data)
        bad = _first_nonfinite(parts)
        if bad is not None:
            raise NumericError(
                f"non-finite loss term '{bad}' at step {state.step}")
        if d_loss is not None:
            d_loss.backward()
            state.opt_d.step()
        g_loss.backward()
        state.opt_g.step()
    state.step += 1
    return parts


def train_loop(state: TrainState, samples, target_steps: int,
               checkpoint_path: str | None = None, log_fn=None) -> dict:
    """Run until state.step == target_steps. On a numeric abort, the last good
    state is written to checkpoint_path (if set) before re-raising."""
    tc = state.tcfg
    parts: dict = {}
    while state.step < target_steps:
        try:
            parts = train_step(state, samples)
        except NumericError:
            if checkpoint_path:
                save_train_state(checkpoint_path, state)
                if log_fn:
                    log_fn(f"aborted; last good state (step {state.step}) "
                           f"saved to {checkpoint_path}")
            raise
        if log_fn and tc.log_every and state.step % tc.log_every == 0:
            shown = " ".join(f"{k}={v:.5f}" for k, v in sorted(parts.items()))
            log_fn(f"step={state.step} {shown}")
        if (checkpoint_path and tc.checkpoint_every
                and state.step % tc.checkpoint_every == 0):
            save_train_state(checkpoint_path, state)
    if checkpoint_path:
        save_train_state(checkpoint_path, state)
    return parts


def hole_l1(state: TrainState, samples) -> float:
    """Mean masked L1 over a full dataset pass (no gradients)."""
    vals = []
    with no_grad():
        for s in samples:
            x = Tensor(s.i_in[None].astype(state.dtype))
            gt = Tensor(s.i_gt[None].astype(state.dtype))
            out = state.model(x)
            vals.append(float(masked_l1(out, gt, s.mask[None]).data))
    return float(np.mean(vals))


# ---- persistence -----------------------------------------------------------------


def save_train_state(path: str, state: TrainState) -> None:
    from .checkpoint import save_checkpoint

    meta = {f"model.{k}": v for k, v in state.model.config.to_flat().items()}
    meta.update({f"train.{k}": v for k, v in dataclass_flat(state.tcfg).items()})
    meta.update({f"loss.{k}": v for k, v in dataclass_flat(state.weights).items()})
    meta["width"] = state.width
    meta["step"] = str(state.step)
    meta["opt_g.t"] = str(state.opt_g.t)
    tensors = {f"model.{n}": p.data for n, p in state.model.named_parameters()}
    tensors.update(state.opt_g.moment_tensors("opt_g"))
    if state.disc is not None:
        meta["opt_d.t"] = str(state.opt_d.t)
        tensors.update({f"disc.{n}": p.data
                        for n, p in state.disc.named_parameters()})
        tensors.update(state.opt_d.moment_tensors("opt_d"))
    save_checkpoint(path, meta, tensors)


def load_train_state(path: str) -> TrainState:
    from .checkpoint import SchemaError, load_checkpoint

    meta, tensors = load_checkpoint(path)
    if meta.get("width") not in ("standard", "wide"):
        raise SchemaError(f"{path}: missing or bad width {meta.get('width')!r}")

    def section(prefix):
        return {k[len(prefix):]: v for k, v in meta.items() if k.startswith(prefix)}

    mcfg = ModelConfig.from_flat(section("model."))
    tcfg = dataclass_unflat(TrainConfig, section("train."))
    weights = dataclass_unflat(LossWeights, section("loss."))
    state = init_train_state(mcfg, tcfg, weights, width=meta["width"])
    state.step = int(meta["step"])
    load_weights(state.model, tensors, prefix="model.", path=path)
    state.opt_g.load_moments(tensors, "opt_g", path)
    state.opt_g.t = int(meta["opt_g.t"])
    if state.disc is not None:
        if "opt_d.t" not in meta:
            raise SchemaError(f"{path}: adversarial config but no discriminator state")
        load_weights(state.disc, tensors, prefix="disc.", path=path)
        state.opt_d.load_moments(tensors, "opt_d", path)
        state.opt_d.t = int(meta["opt_d.t"])
    return state
