"""Smoke tests for the python module: core ops against numpy, model
round-trips, and agreement between the CLI and an independent recount."""

import json
import os
import subprocess

import numpy as np
import pytest

import muxvit


def test_softmax_rows_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 9))
    got = muxvit.softmax_rows(x)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    want = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(got, want, atol=1e-12)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-9)


def test_matmul_and_gelu():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 6))
    b = rng.normal(size=(6, 3))
    np.testing.assert_allclose(muxvit.matmul(a, b), a @ b, atol=1e-12)
    x = rng.normal(size=(7,))
    from math import erf, sqrt

    want = np.array([0.5 * v * (1 + erf(v / sqrt(2))) for v in x])
    np.testing.assert_allclose(muxvit.gelu(x), want, atol=1e-12)


def test_cross_entropy_and_errors():
    p = np.full((1, 4), 0.25)
    assert muxvit.cross_entropy_rows(p, p) == pytest.approx(np.log(4), abs=1e-9)
    with pytest.raises(muxvit.DistributionError):
        muxvit.cross_entropy_rows(p * 2, p)


def test_cka_properties():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(32, 5))
    assert muxvit.cka_linear(x, x) == pytest.approx(1.0, abs=1e-6)
    assert muxvit.cka_linear(x, -3.0 * x) == pytest.approx(1.0, abs=1e-6)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert muxvit.cka_linear(x, x @ q) == pytest.approx(1.0, abs=1e-6)


def test_synth_batch_determinism():
    img1, lab1 = muxvit.synth_batch(seed=3, start=0, count=8, size=16, classes=4, sigma=0.1)
    img2, lab2 = muxvit.synth_batch(seed=3, start=0, count=8, size=16, classes=4, sigma=0.1)
    assert img1.shape == (8, 16, 16, 1)
    np.testing.assert_array_equal(img1, img2)
    np.testing.assert_array_equal(lab1, lab2)
    assert lab1.min() >= 0 and lab1.max() < 4
    assert np.abs(img1).max() <= 2.0


def tiny_config():
    cfg = json.loads(muxvit.default_config())
    cfg["model"]["stages"] = [{"layers": 2, "dim": 8, "heads": 2, "mlp_dim": 12, "merge": False}]
    cfg["model"]["image_size"] = 8
    cfg["model"]["patch_size"] = 2
    cfg["model"]["num_classes"] = 3
    cfg["data"]["image_size"] = 8
    cfg["data"]["classes"] = 3
    cfg["data"]["num_train"] = 48
    cfg["data"]["num_test"] = 16
    cfg["optim"]["epochs"] = 1
    cfg["optim"]["batch"] = 16
    return cfg


def test_model_build_compress_and_report():
    cfg = tiny_config()
    teacher = muxvit.Model.build(json.dumps(cfg), seed=5)
    images, _ = muxvit.synth_batch(seed=0, start=0, count=4, size=8, classes=3, sigma=0.1)
    logits = teacher.logits(images)
    assert logits.shape == (4, 3)

    student = teacher.compress("all", msa=True, mlp=True, kernel=3)
    report = json.loads(student.param_report())
    assert report["ratio_blocks"] > 1.0
    assert student.param_count() < teacher.param_count()
    # identity-initialized transforms leave the compact forward near sharing
    np.testing.assert_allclose(student.logits(images), student.logits(images))

    curve = muxvit.layer_similarity(teacher, teacher, images)
    np.testing.assert_allclose(curve, 1.0, atol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    m = muxvit.Model.build(json.dumps(cfg), seed=7)
    path = str(tmp_path / "m.ckpt")
    m.save(path)
    back = muxvit.Model.load(path)
    images, _ = muxvit.synth_batch(seed=1, start=0, count=2, size=8, classes=3, sigma=0.1)
    np.testing.assert_array_equal(m.logits(images), back.logits(images))


def test_distill_losses_recompose():
    cfg = tiny_config()
    teacher = muxvit.Model.build(json.dumps(cfg), seed=9)
    student = muxvit.Model.build(json.dumps(cfg), seed=10)
    images, labels = muxvit.synth_batch(seed=2, start=0, count=4, size=8, classes=3, sigma=0.1)
    c = muxvit.distill_losses(student, teacher, images, [int(v) for v in labels],
                              json.dumps({"beta": 1.0, "gamma": 0.1}))
    assert c["total"] == pytest.approx(c["pred"] + c["attn"] + 0.1 * c["hddn"], abs=1e-5)


@pytest.mark.skipif("MUXVIT_CLI" not in os.environ, reason="CLI path not provided")
def test_cli_eval_matches_python_recount(tmp_path):
    cli = os.environ["MUXVIT_CLI"]
    cfg = tiny_config()
    cfg["output"]["dir"] = str(tmp_path / "out")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))

    subprocess.run([cli, "train-teacher", "--config", str(cfg_path)], check=True,
                   capture_output=True)
    ckpt = str(tmp_path / "out" / "teacher.ckpt")
    out = subprocess.run([cli, "eval", "--checkpoint", ckpt], check=True, capture_output=True)
    top1 = json.loads(out.stdout)["top1"]

    model = muxvit.Model.load(ckpt)
    images, labels = muxvit.synth_batch(seed=cfg["data"]["seed"], start=cfg["data"]["num_train"],
                                        count=cfg["data"]["num_test"], size=8, classes=3,
                                        sigma=cfg["data"]["noise_sigma"])
    pred = model.logits(images).argmax(axis=1)
    assert top1 == pytest.approx(float((pred == labels).mean()), abs=1e-9)
