"""Optimizer and training-state behaviour, including exact resume."""

import os

import numpy as np
import pytest

import mxt.tensor as T
from mxt.blocks import Module
from mxt.data import synthetic_dataset
from mxt.losses import LossWeights
from mxt.model import ModelConfig
from mxt.tensor import NumericError, Tape, Tensor
from mxt.train import (
    Adam,
    TrainConfig,
    TrainState,
    dataclass_flat,
    dataclass_unflat,
    hole_l1,
    init_train_state,
    load_train_state,
    save_train_state,
    train_loop,
    train_step,
)


def tiny_cfg():
    return ModelConfig(base_channels=4, hm_counts=(1,) * 7, state_dim=2,
                       pooled_spatial=4, scan_chunk=16)


def l1_only():
    return LossWeights(l1=1.0, style=0.0, perceptual=0.0, adversarial=0.0)


class _Pair(Module):
    def __init__(self):
        self.a = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        self.b = Tensor(np.array([[0.5]]), requires_grad=True)


def test_adam_matches_reference_updates():
    mod = _Pair()
    opt = Adam(mod, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    # reference trackers
    ref = {n: p.data.copy() for n, p in mod.named_parameters()}
    m = {n: np.zeros_like(v) for n, v in ref.items()}
    v = {n: np.zeros_like(val) for n, val in ref.items()}
    rng = np.random.default_rng(0)
    for t in range(1, 6):
        grads = {n: rng.normal(size=val.shape) for n, val in ref.items()}
        for n, p in mod.named_parameters():
            p.grad = grads[n].copy()
        opt.step()
        for n in ref:
            m[n] = 0.9 * m[n] + 0.1 * grads[n]
            v[n] = 0.999 * v[n] + 0.001 * grads[n] ** 2
            mh = m[n] / (1 - 0.9**t)
            vh = v[n] / (1 - 0.999**t)
            ref[n] = ref[n] - 0.1 * mh / (np.sqrt(vh) + 1e-8)
    for n, p in mod.named_parameters():
        assert np.allclose(p.data, ref[n], atol=1e-14), n


def test_adam_skips_frozen_and_gradless():
    mod = _Pair()
    mod.b.requires_grad = False
    opt = Adam(mod, lr=0.5)
    before_a = mod.a.data.copy()
    before_b = mod.b.data.copy()
    mod.a.grad = np.ones(3)
    opt.step()
    assert not np.array_equal(mod.a.data, before_a)
    assert np.array_equal(mod.b.data, before_b)
    # no grad at all -> untouched
    mod2 = _Pair()
    opt2 = Adam(mod2, lr=0.5)
    snap = mod2.a.data.copy()
    opt2.step()
    assert np.array_equal(mod2.a.data, snap)


def test_dataclass_flat_roundtrip():
    tc = TrainConfig(lr=3e-4, batch_size=3, seed=7, iters=10)
    flat = dataclass_flat(tc)
    assert flat["lr"] == repr(3e-4)
    back = dataclass_unflat(TrainConfig, flat)
    assert back == tc
    lw = LossWeights(adversarial=0.0, composite=True)
    assert dataclass_unflat(LossWeights, dataclass_flat(lw)) == lw
    with pytest.raises(Exception):
        dataclass_unflat(TrainConfig, {"nope": "1"})


def test_training_reduces_l1():
    samples = synthetic_dataset(4, 16, 16, seed=3)
    tc = TrainConfig(lr=2e-3, batch_size=2, seed=1, log_every=0)
    state = init_train_state(tiny_cfg(), tc, l1_only())
    first = train_step(state, samples)["l1"]
    last = first
    for _ in range(24):
        last = train_step(state, samples)["l1"]
    assert last < first


def test_adversarial_setup_steps_both_optimizers():
    samples = synthetic_dataset(2, 16, 16, seed=4)
    weights = LossWeights(l1=1.0, style=0.0, perceptual=0.0, adversarial=0.001)
    tc = TrainConfig(batch_size=2, seed=2)
    state = init_train_state(tiny_cfg(), tc, weights)
    assert state.disc is not None and state.opt_d is not None
    parts = train_step(state, samples)
    assert "d_loss" in parts and "adversarial" in parts
    assert state.opt_g.t == 1 and state.opt_d.t == 1


def test_perceptual_terms_build_extractor():
    weights = LossWeights(l1=1.0, style=250.0, perceptual=0.1, adversarial=0.0)
    state = init_train_state(tiny_cfg(), TrainConfig(), weights)
    assert state.extractor is not None
    assert state.disc is None
    # extractor stays frozen
    assert all(not p.requires_grad for p in state.extractor.parameters())


def _all_tensors(state: TrainState) -> dict:
    out = {f"model.{n}": p.data for n, p in state.model.named_parameters()}
    out.update(state.opt_g.moment_tensors("opt_g"))
    if state.disc is not None:
        out.update({f"disc.{n}": p.data for n, p in state.disc.named_parameters()})
        out.update(state.opt_d.moment_tensors("opt_d"))
    return out


@pytest.mark.parametrize("width", ["standard", "wide"])
def test_resume_is_bit_exact(tmp_path, width):
    samples = synthetic_dataset(4, 16, 16, seed=5)
    weights = LossWeights(l1=1.0, style=0.0, perceptual=0.0, adversarial=0.001)

    def fresh():
        return init_train_state(tiny_cfg(), TrainConfig(batch_size=2, seed=9),
                                weights, width=width)

    straight = fresh()
    for _ in range(6):
        train_step(straight, samples)

    broken = fresh()
    for _ in range(3):
        train_step(broken, samples)
    path = str(tmp_path / f"state-{width}.ckpt")
    save_train_state(path, broken)
    resumed = load_train_state(path)
    assert resumed.step == 3 and resumed.width == width
    for _ in range(3):
        train_step(resumed, samples)

    a, b = _all_tensors(straight), _all_tensors(resumed)
    assert a.keys() == b.keys()
    for key in a:
        assert a[key].dtype == b[key].dtype, key
        assert np.array_equal(a[key], b[key]), f"{key} diverged after resume"


def test_save_load_save_is_byte_identical(tmp_path):
    samples = synthetic_dataset(2, 16, 16, seed=6)
    state = init_train_state(tiny_cfg(), TrainConfig(batch_size=2, seed=3), l1_only())
    train_step(state, samples)
    p1 = str(tmp_path / "a.ckpt")
    p2 = str(tmp_path / "b.ckpt")
    save_train_state(p1, state)
    reloaded = load_train_state(p1)
    save_train_state(p2, reloaded)
    with open(p1, "rb") as f1, open(p2, "rb") as f2:
        assert f1.read() == f2.read()


def test_numeric_abort_leaves_state_untouched(tmp_path):
    samples = synthetic_dataset(2, 16, 16, seed=7)
    state = init_train_state(tiny_cfg(), TrainConfig(batch_size=2, seed=4), l1_only())
    train_step(state, samples)
    snap = {n: p.data.copy() for n, p in state.model.named_parameters()}
    step_before = state.step
    # poison one weight so the forward pass goes non-finite
    state.model.embed.w.data[0, 0] = np.nan
    snap["embed.w"] = state.model.embed.w.data.copy()
    ckpt = str(tmp_path / "abort.ckpt")
    # either guard may fire first (softmax's NaN check or the loss-term check);
    # both are NumericError and both fire before any parameter update
    with pytest.raises(NumericError, match="NaN|non-finite"):
        train_loop(state, samples, target_steps=10, checkpoint_path=ckpt)
    assert state.step == step_before
    for n, p in state.model.named_parameters():
        assert np.array_equal(p.data, snap[n], equal_nan=True), n
    # the abort wrote the last good state
    assert os.path.exists(ckpt)
    recovered = load_train_state(ckpt)
    assert recovered.step == step_before


def test_first_nonfinite_names_the_bad_term():
    from mxt.train import _first_nonfinite
    assert _first_nonfinite({"l1": 0.5, "total": 1.0}) is None
    assert _first_nonfinite({"l1": 0.5, "style": float("inf")}) == "style"
    assert _first_nonfinite({"l1": float("nan")}) == "l1"


def test_train_loop_runs_to_target_and_checkpoints(tmp_path):
    samples = synthetic_dataset(2, 16, 16, seed=8)
    tc = TrainConfig(batch_size=2, seed=5, log_every=2, checkpoint_every=2)
    state = init_train_state(tiny_cfg(), tc, l1_only())
    lines = []
    ckpt = str(tmp_path / "loop.ckpt")
    parts = train_loop(state, samples, target_steps=4,
                       checkpoint_path=ckpt, log_fn=lines.append)
    assert state.step == 4
    assert "l1" in parts and "total" in parts
    assert any(line.startswith("step=2 ") for line in lines)
    assert load_train_state(ckpt).step == 4


def test_hole_l1_is_finite_and_positive():
    samples = synthetic_dataset(2, 16, 16, seed=9)
    state = init_train_state(tiny_cfg(), TrainConfig(), l1_only())
    val = hole_l1(state, samples)
    assert np.isfinite(val) and val > 0
