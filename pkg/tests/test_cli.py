"""End-to-end runs of every subcommand through main(), plus the config stack."""

import os

import numpy as np
import pytest

from mxt.cli import (
    build_configs,
    effective_config,
    main,
    scan_time_ratio,
)
from mxt.data import read_ppm, write_ppm, write_pgm
from mxt.tensor import ContractError

TINY = [
    "--set", "model.base_channels=4",
    "--set", "model.hm_counts=1,1,1,1,1,1,1",
    "--set", "model.state_dim=2",
    "--set", "model.pooled_spatial=4",
    "--set", "model.scan_chunk=16",
    "--set", "loss.style=0", "--set", "loss.perceptual=0",
    "--set", "loss.adversarial=0",
]


def _train_tiny(tmp_path, extra=()):
    ckpt = str(tmp_path / "tiny.ckpt")
    rc = main(["train", "--out", ckpt, "--iters", "2", "--synthetic", "2",
               "--image-size", "16", "--seed", "5", *TINY, *extra])
    assert rc == 0
    return ckpt


# ---- config stack ---------------------------------------------------------------


def test_precedence_defaults_file_env_flags(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.seed = 11\ntrain.lr=0.5  # comment\n\n# full-line comment\n")
    # file beats defaults
    flat = effective_config(str(cfg), {}, {})
    assert flat["train.seed"] == "11" and flat["train.lr"] == "0.5"
    # env beats file (seed only)
    flat = effective_config(str(cfg), {"MXT_SEED": "22"}, {})
    assert flat["train.seed"] == "22"
    # flags beat env
    flat = effective_config(str(cfg), {"MXT_SEED": "22"}, {"train.seed": "33"})
    assert flat["train.seed"] == "33"
    assert flat["train.lr"] == "0.5"


def test_config_rejects_unknown_keys_and_bad_env(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("train.nope=1\n")
    with pytest.raises(ContractError, match="unknown config key"):
        effective_config(str(cfg), {}, {})
    with pytest.raises(ContractError, match="MXT_SEED"):
        effective_config(None, {"MXT_SEED": "abc"}, {})
    with pytest.raises(ContractError, match="width"):
        effective_config(None, {}, {"width": "double"})


def test_build_configs_roundtrip():
    flat = effective_config(None, {}, {"model.base_channels": "8",
                                       "loss.adversarial": "0",
                                       "train.batch_size": "3"})
    mcfg, tcfg, weights, width = build_configs(flat)
    assert mcfg.base_channels == 8
    assert tcfg.batch_size == 3
    assert weights.adversarial == 0.0
    assert width == "standard"


# ---- exit codes -----------------------------------------------------------------


def test_usage_errors_exit_1(capsys):
    assert main(["train"]) == 1              # missing --out
    assert main(["no-such-command"]) == 1
    assert main([]) == 1
    assert main(["train", "--out", "x", "--set", "banana"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err.lower()


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "inpainting" in capsys.readouterr().out


def test_data_errors_exit_2(tmp_path, capsys):
    missing = str(tmp_path / "nope.ckpt")
    assert main(["infer", "--model", missing, "--image", "a.ppm",
                 "--mask", "b.pgm", "--out", "c.ppm"]) == 2
    # unknown config key
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("what=1\n")
    assert main(["train", "--out", str(tmp_path / "x.ckpt"),
                 "--config", str(cfg)]) == 2
    # malformed image file
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6 garbage")
    ckpt = _train_tiny(tmp_path)
    capsys.readouterr()
    rc = main(["infer", "--model", ckpt, "--image", str(bad),
               "--mask", str(bad), "--out", str(tmp_path / "o.ppm")])
    assert rc == 2
    assert "error" in capsys.readouterr().err


def test_gradcheck_failure_exits_3(capsys):
    # an impossible tolerance forces the numeric-failure path
    rc = main(["gradcheck", "--blocks", "loss_l1", "--tol", "1e-30"])
    assert rc == 3
    out = capsys.readouterr()
    assert "status=FAIL" in out.out
    assert "numeric failure" in out.err


# ---- subcommands ----------------------------------------------------------------


def test_train_echoes_sorted_config_and_writes_checkpoint(tmp_path, capsys):
    ckpt = _train_tiny(tmp_path)
    out = capsys.readouterr().out
    assert os.path.exists(ckpt)
    lines = out.splitlines()
    cfg_lines = [l for l in lines if "=" in l and not l.startswith(("step", "done"))]
    keys = [l.split("=", 1)[0] for l in cfg_lines if "." in l.split("=", 1)[0]]
    assert keys == sorted(keys) and "train.seed" in keys
    assert "train.seed=5" in out
    assert any(l.startswith("done step=2 hole_l1=") for l in lines)


def test_train_resume_continues(tmp_path, capsys):
    ckpt = _train_tiny(tmp_path)
    capsys.readouterr()
    rc = main(["train", "--out", ckpt, "--resume", ckpt, "--iters", "4"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "resumed from" in out and "at step 2" in out
    assert "done step=4" in out


def test_env_seed_feeds_training(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MXT_SEED", "77")
    ckpt = str(tmp_path / "env.ckpt")
    rc = main(["train", "--out", ckpt, "--iters", "1", "--synthetic", "2",
               "--image-size", "16", *TINY])
    assert rc == 0
    assert "train.seed=77" in capsys.readouterr().out


def test_infer_and_eval_roundtrip(tmp_path, capsys):
    ckpt = _train_tiny(tmp_path)
    rng = np.random.default_rng(0)
    img = rng.random((3, 16, 16))
    mask = np.zeros((1, 16, 16))
    mask[:, 5:9, 5:9] = 1.0
    write_ppm(str(tmp_path / "in.ppm"), img)
    write_pgm(str(tmp_path / "holes.pgm"), mask)
    out_path = str(tmp_path / "filled.ppm")
    rc = main(["infer", "--model", ckpt, "--image", str(tmp_path / "in.ppm"),
               "--mask", str(tmp_path / "holes.pgm"), "--out", out_path])
    assert rc == 0
    filled = read_ppm(out_path)
    assert filled.shape == (3, 16, 16)
    # composited output: known pixels byte-identical to the input file
    orig = read_ppm(str(tmp_path / "in.ppm"))
    known = mask[0] == 0
    assert np.array_equal(filled[:, known], orig[:, known])

    capsys.readouterr()
    rc = main(["eval", "--model", ckpt, "--synthetic", "2",
               "--image-size", "16", "--seed", "3", "--per-image"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "image=0" in out and "all" in out and "psnr" in out


def test_gradcheck_subset_passes(capsys):
    rc = main(["gradcheck", "--blocks", "layer_norm,loss_l1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "block=layer_norm" in out and "status=ok" in out
    assert "failures=0" in out


def test_scan_bench_reports_ratio(capsys):
    rc = main(["scan-bench", "--length", "64", "--repeats", "3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "L=64" in out and "L=128" in out and "ratio=" in out


def test_scan_time_ratio_function():
    t1, t2, ratio = scan_time_ratio(64, repeats=3)
    assert t1 > 0 and t2 > 0 and ratio == t2 / t1


def test_mask_gen_writes_masks_and_manifest(tmp_path, capsys):
    out_dir = str(tmp_path / "masks")
    rc = main(["mask-gen", "--out", out_dir, "--count", "2",
               "--bucket", "all", "--size", "32", "--seed", "1"])
    assert rc == 0
    names = sorted(os.listdir(out_dir))
    assert "manifest.txt" in names
    pgms = [n for n in names if n.endswith(".pgm")]
    assert len(pgms) == 6  # 2 per bucket
    manifest = open(os.path.join(out_dir, "manifest.txt")).read()
    assert "bucket=low" in manifest and "ratio=" in manifest
    assert "wrote 6 masks" in capsys.readouterr().out
    # every mask file parses back as binary
    from mxt.data import read_pgm
    m = read_pgm(os.path.join(out_dir, pgms[0]))
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_mask_gen_rejects_unknown_bucket(tmp_path):
    assert main(["mask-gen", "--out", str(tmp_path / "m"),
                 "--bucket", "huge"]) == 2
