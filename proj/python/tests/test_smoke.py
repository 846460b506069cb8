import json
import pathlib

import numpy as np
import pytest

import capkit

TINY = [
    "resolution=16",
    "attack.iterations=4",
    "train.steps=10",
    "train.lr=0.001",
    "train.eval_draws=2",
    "generate.count=4",
    "model.levels=8,16",
    "model.mid=16",
    "model.time_dim=8",
    "model.embed_dim=16",
    "model.concept_dim=8",
    "pretrain.steps=20",
    "pretrain.identities=2",
    "pretrain.images=2",
    "schedule.steps=50",
    "extractor.width_divisor=8",
]


def test_config_round_trip():
    c = capkit.Config()
    c.apply(["attack.eta=0.03", "seed=5"])
    assert capkit.Config.parse(c.to_text()) == c
    assert c.get("attack.eta") == "0.03"
    assert any(k["name"] == "attack.ratio_points" for k in capkit.config_schema())
    with pytest.raises(ValueError):
        c.set("attack.loss", "gram")


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.uniform(size=(3, 5, 6)) * 65535) / 65535
    capkit.write_png(tmp_path / "a.png", img, 16)
    np.testing.assert_array_equal(capkit.read_image(tmp_path / "a.png"), img)


def test_gram_matches_numpy():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(4, 64))
    np.testing.assert_allclose(capkit.gram_matrix(f), f @ f.T / f.size, rtol=1e-12)


def test_consistency_is_zero_for_identical_images():
    img = np.full((3, 8, 8), 0.4)
    assert capkit.consistency_loss([img, img, img], ["extractor.width_divisor=16"]) == pytest.approx(0.0, abs=1e-15)


def test_forward_noise_formula():
    x0 = np.full((3, 4, 4), 0.5)
    eps = np.ones((3, 4, 4))
    out = capkit.forward_noise(x0, 100, eps)
    ab = np.prod(1 - np.linspace(1e-4, 0.02, 100))
    np.testing.assert_allclose(out, np.sqrt(ab) * 0.5 + np.sqrt(1 - ab), rtol=1e-9)


def test_protect_images_respects_budget(tmp_path):
    rng = np.random.default_rng(2)
    images = [rng.uniform(0.1, 0.9, size=(3, 16, 16)) for _ in range(3)]
    out = capkit.protect_images(images, TINY, cache_dir=tmp_path / "cache")
    assert len(out["perturbed"]) == 3
    assert len(out["trace"]) == 4
    assert out["max_perturbation"] <= 0.05 + 1e-12
    for x, y in zip(images, out["perturbed"]):
        assert np.abs(y - x).max() <= 0.05 + 1e-12


def test_run_and_replay(tmp_path):
    capkit.synth_dataset(tmp_path / "data", 1, 2, seed=3, size=16)
    rec = capkit.run("run", tmp_path / "data", TINY, run_root=tmp_path / "runs")
    assert rec.exit_code == 0
    assert rec.metrics["identities"][0]["identity"] == "id_00"
    again = capkit.replay(pathlib.Path(rec.dir) / "manifest.json", run_root=tmp_path / "runs")
    assert again.exit_code == 0
    a = (pathlib.Path(rec.dir) / "metrics.json").read_bytes()
    b = (pathlib.Path(again.dir) / "metrics.json").read_bytes()
    assert a == b
    manifest = json.loads((pathlib.Path(rec.dir) / "manifest.json").read_text())
    assert manifest["command"] == "run"


def test_dry_run_writes_only_the_manifest(tmp_path):
    capkit.synth_dataset(tmp_path / "data", 1, 2, seed=3, size=16)
    rec = capkit.run("run", tmp_path / "data", TINY, run_root=tmp_path / "runs", dry_run=True)
    assert sorted(p.name for p in pathlib.Path(rec.dir).iterdir()) == ["manifest.json", "status.json"]
