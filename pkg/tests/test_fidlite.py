"""Frozen feature extractor: asset integrity, shapes, rebuild path."""

import numpy as np
import pytest

from capsan.datasets import make_synthetic
from capsan.errors import ShapeMismatch
from capsan.fidlite import (
    ARCH,
    Extractor,
    _as_batch,
    default_asset_path,
    load_extractor,
    main,
    rebuild_asset,
    resize_nearest,
    train_extractor,
)


@pytest.fixture(scope="module")
def ext():
    return load_extractor()


def test_asset_exists_and_loads(ext):
    assert default_asset_path().exists()
    assert sorted(ext.weights) == [
        "conv1.b", "conv1.k", "conv2.b", "conv2.k",
        "fc1.b", "fc1.w", "fc2.b", "fc2.w",
    ]


def test_feature_shape_and_determinism(ext):
    images = np.random.default_rng(0).random((5, 1, 16, 16))
    a = ext.features(images)
    b = ext.features(images)
    assert a.shape == (5, ARCH["feature_dim"])
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_accepts_many_input_shapes(ext):
    rng = np.random.default_rng(1)
    img = rng.random((16, 16))
    assert ext.features(img).shape == (1, 32)
    assert ext.features(rng.random((3, 16, 16))).shape == (3, 32)
    assert ext.features(rng.random((3, 2, 16, 16))).shape == (3, 32)  # channel mean
    assert ext.features(rng.random((2, 1, 32, 32))).shape == (2, 32)  # resized
    with pytest.raises(ShapeMismatch):
        ext.features(rng.random(16))


def test_resize_nearest():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    up = resize_nearest(img, 8)
    assert up.shape == (1, 1, 8, 8)
    assert up[0, 0, 0, 0] == img[0, 0, 0, 0]
    assert up[0, 0, 7, 7] == img[0, 0, 3, 3]
    same = resize_nearest(img, 4)
    assert same is img  # no-op short circuit
    down = resize_nearest(up, 4)
    assert np.array_equal(down, img)


def test_as_batch_scales():
    x = np.zeros((2, 3, 16, 16))
    out = _as_batch(x)
    assert out.shape == (2, 1, 16, 16)


def test_holdout_accuracy_from_asset_config():
    from capsan.checkpoint import load_checkpoint

    _, config = load_checkpoint(default_asset_path())
    assert config["holdout_accuracy"] >= 0.9
    assert config["num_classes"] == ARCH["num_classes"]
    assert config["feature_dim"] == ARCH["feature_dim"]


def test_predicts_fresh_synthetic(ext):
    # the committed extractor generalizes to resampled shape data
    ds = make_synthetic(ARCH["num_classes"], 8, 16, seed=12345)
    acc = float(np.mean(ext.predict(ds.images) == ds.labels))
    assert acc >= 0.9


def test_features_separate_classes(ext):
    ds = make_synthetic(2, 32, 16, seed=99)
    feats = ext.features(ds.images)
    mu0 = feats[ds.labels == 0].mean(axis=0)
    mu1 = feats[ds.labels == 1].mean(axis=0)
    within = 0.5 * (feats[ds.labels == 0].std(axis=0).mean()
                    + feats[ds.labels == 1].std(axis=0).mean())
    assert np.linalg.norm(mu0 - mu1) > within


def test_tiny_rebuild_round_trip(tmp_path):
    path = tmp_path / "mini.capsan"
    config = rebuild_asset(path, seed=3, iterations=5)
    assert path.exists()
    assert config["iterations"] == 5
    mini = load_extractor(path)
    out = mini.features(np.zeros((2, 1, 16, 16)))
    assert out.shape == (2, 32)
    # deterministic retrain: same seed, same weights
    weights_a, _ = train_extractor(seed=3, iterations=5)
    weights_b, _ = train_extractor(seed=3, iterations=5)
    for k in weights_a:
        assert np.array_equal(weights_a[k], weights_b[k]), k


def test_cli_inspect_and_missing(tmp_path, capsys):
    assert main([]) == 0
    out = capsys.readouterr().out
    assert "holdout_accuracy" in out
    assert main(["--out", str(tmp_path / "absent.capsan")]) == 2


def test_extractor_struct():
    ext = Extractor(weights={})
    assert ext.weights == {}
