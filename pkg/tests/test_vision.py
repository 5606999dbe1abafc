import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from soilpick.vision import (FEATURE_VERSION, Confusion, DatasetSplit, LabeledImage, SegmenterModel, TrainConfig,
                             TrainingDiverged, apply_dihedral, augment, compute_features, confusion, dihedral, evaluate,
                             features_at, largest_remainder, load_dataset, resize_to_512, save_dataset, segment,
                             split_dataset, train)

masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


def separable_images(n, size=32, seed=0):
    """Blocky layouts whose two classes have disjoint colour bands."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        cells = rng.random((size // 8, size // 8)) < 0.5
        mask = np.kron(cells, np.ones((8, 8), dtype=np.uint8))
        soil = np.array([0.50, 0.33, 0.18]) + rng.uniform(-0.04, 0.04, (size, size, 3))
        rock = np.array([0.60, 0.60, 0.60]) + rng.uniform(-0.04, 0.04, (size, size, 3))
        out.append(LabeledImage(np.where(mask[..., None] == 1, soil, rock), mask))
    return out


# labeled images

def test_labeled_image_validation():
    with pytest.raises(ValueError):
        LabeledImage(np.zeros((4, 4, 3)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        LabeledImage(np.zeros((4, 4, 3)), np.full((4, 4), 2))


def test_resize_identity():
    rng = np.random.default_rng(0)
    img = LabeledImage(rng.random((512, 512, 3)), (rng.random((512, 512)) < 0.5))
    out = resize_to_512(img)
    assert out.rgb.tobytes() == img.rgb.tobytes() and out.mask.tobytes() == img.mask.tobytes()


def test_resize_constant_downsample():
    img = LabeledImage(np.full((1024, 1024, 3), 0.37), np.ones((1024, 1024)))
    out = resize_to_512(img)
    assert out.rgb.shape == (512, 512, 3)
    np.testing.assert_allclose(out.rgb, 0.37, atol=1e-12)


def test_resize_keeps_mask_binary():
    m = (np.indices((300, 200)).sum(axis=0) % 2).astype(np.uint8)
    out = resize_to_512(LabeledImage(np.zeros((300, 200, 3)), m))
    assert out.mask.shape == (512, 512)
    assert set(np.unique(out.mask)) <= {0, 1}


def test_resize_rejects_empty():
    with pytest.raises(ValueError):
        resize_to_512(LabeledImage(np.zeros((0, 4, 3)), np.zeros((0, 4))))


def test_resize_bilinear_gradient():
    # a linear ramp stays linear under bilinear resampling, away from the clamped edges
    ramp = np.linspace(0, 1, 256)
    img = LabeledImage(np.repeat(np.repeat(ramp[None, :, None], 256, 0), 3, 2), np.zeros((256, 256)))
    row = resize_to_512(img).rgb[100, 2:-2, 0]
    assert np.allclose(np.diff(row, 2), 0.0, atol=1e-12)


# splitting

def test_split_150_images():
    imgs = separable_images(150, size=8)
    s = split_dataset(imgs, seed=0)
    assert (len(s.train), len(s.validation), len(s.test)) == (105, 30, 15)


def test_split_deterministic_and_partition():
    imgs = separable_images(10, size=8)
    a, b = split_dataset(imgs, seed=3), split_dataset(imgs, seed=3)
    assert a.indices == b.indices
    idx = a.indices["train"] + a.indices["validation"] + a.indices["test"]
    assert sorted(idx) == list(range(10))


def test_split_all_train():
    s = split_dataset(separable_images(3, size=8), ratios=(1, 0, 0))
    assert len(s.train) == 3 and not s.validation and not s.test


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        split_dataset(separable_images(3, size=8), ratios=(0.5, 0.2, 0.2))


@given(st.integers(0, 500), st.lists(st.floats(0.01, 1), min_size=3, max_size=3))
def test_largest_remainder_sums(n, raw):
    ratios = [r / sum(raw) for r in raw]
    sizes = largest_remainder(n, ratios)
    assert sum(sizes) == n
    assert all(abs(s - r * n) < 1 for s, r in zip(sizes, ratios))


# augmentation

def test_dihedral_group_laws():
    rng = np.random.default_rng(1)
    a = rng.random((5, 5, 3))
    np.testing.assert_array_equal(dihedral(a, 0), a)
    x = a
    for _ in range(4):
        x = dihedral(x, 1)
    np.testing.assert_array_equal(x, a)
    np.testing.assert_array_equal(dihedral(dihedral(a, 4), 4), a)
    assert len({dihedral(a, g).tobytes() for g in range(8)}) == 8


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_augment_preserves_pixel_count(seed):
    img = separable_images(1, size=16, seed=seed % 100)[0]
    out = augment(img, np.random.default_rng(seed))
    assert out.mask.sum() == img.mask.sum()
    # image and mask move together
    assert sorted(map(tuple, out.rgb[out.mask == 1].round(12))) == sorted(map(tuple, img.rgb[img.mask == 1].round(12)))


def test_augment_rejects_non_square():
    with pytest.raises(ValueError):
        augment(LabeledImage(np.zeros((4, 5, 3)), np.zeros((4, 5))), np.random.default_rng(0))


# features

def test_feature_layout():
    rgb = np.zeros((5, 5, 3))
    rgb[2, 2] = [0.9, 0.0, 0.0]
    f = compute_features(rgb)
    assert f.shape == (5, 5, 13)
    np.testing.assert_allclose(f[2, 2, :3], [0.9, 0, 0])
    np.testing.assert_allclose(f[2, 2, 3], 0.1)  # 3x3 mean of red
    np.testing.assert_allclose(f[2, 2, 6], np.std([0.9] + [0] * 8))
    np.testing.assert_allclose(f[1, 2, 9], 0.45)  # vertical central difference (below minus above) / 2
    assert np.all(f[..., 12] == 1.0)


@given(st.integers(0, 1000), st.integers(0, 7))
@settings(max_examples=40)
def test_sampled_features_equal_full_map(seed, g):
    rng = np.random.default_rng(seed)
    rgb = rng.random((9, 9, 3)).astype(np.float32)
    full = compute_features(dihedral(rgb, g))
    r, c = rng.integers(0, 9, 30), rng.integers(0, 9, 30)
    assert features_at(rgb, r, c, g).tobytes() == full[r, c].tobytes()


# model

def test_zero_weights_tie_is_pickable():
    m = SegmenterModel.zeros()
    assert segment(m, np.random.default_rng(0).random((7, 9, 3))).all()


def test_model_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        SegmenterModel(np.full(13, np.nan))
    with pytest.raises(ValueError):
        SegmenterModel(np.zeros(13), threshold=1.0)
    m = SegmenterModel(np.arange(13) / 10.0, 0.4)
    m.save(tmp_path / "m.json")
    back = SegmenterModel.load(tmp_path / "m.json")
    assert back.weights.tobytes() == m.weights.tobytes() and back.threshold == 0.4
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["feature_version"] == FEATURE_VERSION
    d["feature_version"] = "other"
    with pytest.raises(ValueError):
        SegmenterModel.from_dict(d)


@pytest.fixture(scope="module")
def separable_split():
    imgs = separable_images(30, size=32)
    return split_dataset(imgs, seed=0)


@pytest.fixture(scope="module")
def separable_model(separable_split):
    return train(separable_split, TrainConfig(epochs=60, learning_rate=0.5, seed=0))


def test_training_on_separable_data(separable_split, separable_model):
    pooled = sum((confusion(separable_model.segment(im.rgb), im.mask) for im in separable_split.train), Confusion())
    assert pooled.metrics().accuracy >= 0.99
    st_ = separable_model.train_stats
    assert st_["final_loss"] <= st_["initial_loss"]
    hist = np.array(st_["loss_history"])
    k = max(1, len(hist) // 10)
    assert hist[-k:].mean() <= hist[:k].mean()


def test_held_out_iou(separable_model):
    for im in separable_images(5, size=32, seed=99):
        assert evaluate(separable_model.segment(im.rgb), im.mask).iou >= 0.95


def test_zero_learning_rate_keeps_zero_weights(separable_split):
    m = train(separable_split, TrainConfig(epochs=2, learning_rate=0.0))
    assert np.all(m.weights == 0.0)


def test_training_deterministic(separable_split):
    a = train(separable_split, TrainConfig(epochs=3, seed=4))
    b = train(separable_split, TrainConfig(epochs=3, seed=4))
    assert a.weights.tobytes() == b.weights.tobytes()


def test_augmented_sample_count(separable_split):
    m = train(separable_split, TrainConfig(epochs=3, batch_size=4, seed=1))
    assert m.train_stats["augmented_images"] == 3 * len(separable_split.train)
    assert m.train_stats["steps"] == 3 * -(-len(separable_split.train) // 4)


def test_divergence_is_reported(separable_split):
    with pytest.raises(TrainingDiverged):
        train(separable_split, TrainConfig(epochs=5, learning_rate=1e308))


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train(DatasetSplit([], [], []), TrainConfig())


def test_config_validation():
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"learning_rate": -1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_segment_is_pure(separable_model):
    img = separable_images(1, seed=5)[0].rgb
    assert separable_model.segment(img).tobytes() == separable_model.segment(img).tobytes()
    assert separable_model.segment(img).shape == img.shape[:2]


# metrics

def test_metrics_examples():
    truth = np.array([[1, 0], [1, 0]])
    m = evaluate(truth, truth)
    assert (m.accuracy, m.precision, m.recall, m.iou) == (1, 1, 1, 1)
    m = evaluate(np.zeros((2, 2)), truth)
    assert m.recall == 0 and m.iou == 0
    m = evaluate(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [1, 0]]))
    assert (m.accuracy, m.precision, m.recall) == (0.5, 0.5, 0.5)
    assert m.iou == pytest.approx(1 / 3)


def test_metrics_empty_positive_class():
    m = evaluate(np.zeros((3, 3)), np.zeros((3, 3)))
    assert (m.accuracy, m.precision, m.recall, m.iou) == (1, 1, 1, 1)
    m = evaluate(np.ones((3, 3)), np.zeros((3, 3)))
    assert m.precision == 0 and m.iou == 0 and m.recall == 0


def test_metrics_reject_shape_mismatch():
    with pytest.raises(ValueError):
        evaluate(np.zeros((2, 2)), np.zeros((2, 3)))


@given(masks.flatmap(lambda m: st.tuples(st.just(m), arrays(np.uint8, m.shape, elements=st.integers(0, 1)))))
def test_metric_bounds(pair):
    pred, truth = pair
    c = confusion(pred, truth)
    assert c.n == pred.size
    m = c.metrics()
    for v in (m.accuracy, m.precision, m.recall, m.iou):
        assert 0.0 <= v <= 1.0
    if c.tp > 0:
        assert m.iou <= min(m.precision, m.recall)


@given(masks.flatmap(lambda m: st.tuples(st.just(m), arrays(np.uint8, m.shape, elements=st.integers(0, 1)))),
       st.integers(0, 7))
def test_metrics_invariant_under_dihedral(pair, g):
    pred, truth = pair
    if pred.shape[0] != pred.shape[1]:
        pred, truth = pred[: min(pred.shape), : min(pred.shape)], truth[: min(pred.shape), : min(pred.shape)]
    assert evaluate(pred, truth) == evaluate(dihedral(pred, g), dihedral(truth, g))


# dataset files

def test_dataset_round_trip(tmp_path):
    imgs = separable_images(3, size=16)
    save_dataset(imgs, tmp_path)
    back = load_dataset(tmp_path)
    assert len(back) == 3
    for a, b in zip(imgs, back):
        np.testing.assert_array_equal(a.mask, b.mask)
        assert np.max(np.abs(a.rgb - b.rgb)) <= 0.5 / 255 + 1e-6
    assert json.loads((tmp_path / "manifest.json").read_text())["count"] == 3
