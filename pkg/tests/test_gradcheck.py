"""The FD machinery itself plus the named verification registry."""

import numpy as np
import pytest

from mxt.gradcheck import (
    STANDARD_BLOCKS,
    check_module_gradients,
    run_standard_check,
    run_standard_suite,
)


def test_registry_names_cover_required_surface():
    need = {"layer_norm", "srsa", "mamba_block", "gdfn", "cbfn", "ssm_scan"}
    assert need <= set(STANDARD_BLOCKS)
    assert any(n.startswith("loss_") for n in STANDARD_BLOCKS)
    # every term of the training objective has a named check
    for term in ("l1", "masked_l1", "style", "perceptual"):
        assert f"loss_{term}" in STANDARD_BLOCKS
    for mode in ("nonsat", "hinge"):
        assert f"loss_adv_g_{mode}" in STANDARD_BLOCKS
        assert f"loss_adv_d_{mode}" in STANDARD_BLOCKS


def test_unknown_block_name_raises():
    with pytest.raises(ValueError, match="unknown gradcheck block"):
        run_standard_check("nope")


def test_representative_checks_pass():
    assert run_standard_check("layer_norm")["worst"] < 1e-5
    assert run_standard_check("loss_masked_l1")["worst"] < 1e-5


def test_suite_respects_name_subset():
    got = dict(run_standard_suite(names=["loss_l1"]))
    assert list(got) == ["loss_l1"]
    assert got["loss_l1"]["worst"] < 1e-5


def test_check_input_flag_skips_input_slot():
    from mxt.blocks import ChannelLayerNorm

    x = np.random.default_rng(0).standard_normal((1, 3, 4, 4))
    full = check_module_gradients(ChannelLayerNorm(3, dtype=np.float64), x)
    assert "<input>" in full
    partial = check_module_gradients(ChannelLayerNorm(3, dtype=np.float64), x,
                                     check_input=False)
    assert "<input>" not in partial and "worst" in partial
