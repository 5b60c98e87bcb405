import numpy as np
import pytest
from scipy import stats

from speaker_naming.exceptions import LabelError, UnsupportedFormatError, UsageError
from speaker_naming.models import build_face_model, build_fused_model
from speaker_naming.rejection import (LinearMarginModel, MarginClassifier,
                                      build_variant_feature, make_pair_dataset,
                                      pair_accuracy, train_margin, variant_features)

SMALL = dict(input_shape=(3, 12, 10), conv=((4, 3, 3),), hidden=(16, 32))


def blobs(n, dim, gap, seed=0):
    rng = np.random.default_rng(seed)
    y = np.where(rng.random(n) < 0.5, 1, -1)
    x = rng.normal(size=(n, dim)) * 0.5
    x[:, 0] += gap * y
    return x, y


def test_pair_dataset_counts_and_labels():
    face_labels = np.repeat(np.arange(4), 3)
    audio_labels = np.repeat(np.arange(4), 6)
    audio = np.random.default_rng(0).normal(size=(24, 75))
    pairs = make_pair_dataset(face_labels, audio, audio_labels, 2.0, per_face=3, seed=1)
    assert len(pairs) == 12 * 9
    assert pairs.matched.sum() == 36
    np.testing.assert_array_equal(pairs.labels[pairs.matched], 1)
    np.testing.assert_array_equal(pairs.labels[~pairs.matched], -1)
    for sample in pairs:
        assert sample.face_subject == face_labels[sample.face_index]
        row = np.flatnonzero((audio == sample.audio).all(axis=1))[0]
        assert audio_labels[row] == sample.audio_subject


def test_negative_subjects_uniform():
    face_labels = np.zeros(1000, dtype=int)
    audio_labels = np.repeat(np.arange(5), 4)
    audio = np.arange(20.0)[:, None]
    pairs = make_pair_dataset(face_labels, audio, audio_labels, 10.0, per_face=1, seed=2)
    neg = pairs.audio_subject[~pairs.matched]
    assert len(neg) == 10_000 and not np.any(neg == 0)
    counts = np.bincount(neg, minlength=5)[1:]
    assert stats.chisquare(counts).pvalue > 0.001


def test_pair_dataset_deterministic():
    args = (np.repeat(np.arange(3), 2), np.eye(9), np.repeat(np.arange(3), 3))
    a = make_pair_dataset(*args, per_face=2, seed=5)
    b = make_pair_dataset(*args, per_face=2, seed=5)
    assert np.array_equal(a.audio, b.audio) and np.array_equal(a.face_index, b.face_index)


def test_separable_data_perfect_accuracy():
    x, y = blobs(400, 5, gap=4.0)
    model = train_margin(x, y, lam=1e-2, epochs=20)
    assert pair_accuracy(model, x, y) == 1.0


def test_objective_drops_by_half():
    x, y = blobs(600, 8, gap=1.5, seed=3)
    model = train_margin(x, y, lam=1e-2, epochs=20)
    assert model.history[0] == pytest.approx(1.0)
    assert model.history[-1] <= 0.5 * model.history[0]


def test_label_flip_negates_prediction():
    x, y = blobs(300, 4, gap=4.0, seed=4)
    m1 = train_margin(x, y, epochs=10)
    m2 = train_margin(x, -y, epochs=10)
    assert np.array_equal(np.sign(m1.margin(x)), -np.sign(m2.margin(x)))


def test_label_validation():
    with pytest.raises(LabelError):
        train_margin(np.ones((3, 2)), [0, 1, 1])
    with pytest.raises(LabelError):
        train_margin(np.ones((3, 2)), [1, 1, 1])


def test_margin_worked_example_and_linearity():
    m = LinearMarginModel(np.array([1.0, 1.0]), -1.0)
    assert m.margin(np.array([1.0, 1.0])) == 1.0
    rng = np.random.default_rng(5)
    m = LinearMarginModel(rng.normal(size=4), 0.0)
    x = rng.normal(size=4)
    for alpha in (-2.0, 0.5, 3.0):
        assert m.margin(alpha * x) == pytest.approx(alpha * m.margin(x))


def test_model_file_round_trip(tmp_path):
    x, y = blobs(100, 6, gap=2.0)
    model = train_margin(x, y, variant="B")
    path = tmp_path / "r.model"
    model.save(path, "speaker-naming test")
    back = LinearMarginModel.load(path)
    assert back.variant == "B" and back.lam == model.lam
    assert np.array_equal(back.margin(x), model.margin(x))
    path.write_bytes(b"NOTAMODEL" + bytes(40))
    with pytest.raises(UnsupportedFormatError):
        LinearMarginModel.load(path)


def test_variant_dimensions_and_shared_audio():
    rng = np.random.default_rng(6)
    face = build_face_model(3, **SMALL)
    fused = build_fused_model(3, warm_start=face)
    img, audio = rng.random((3, 12, 10)), rng.normal(size=75)
    a = build_variant_feature("A", face, fused, img, audio)
    b = build_variant_feature("B", face, fused, img, audio)
    c = build_variant_feature("C", face, fused, img, audio)
    assert a.shape == (16,) and b.shape == c.shape == (91,)
    assert np.array_equal(b[-75:], c[-75:])
    assert np.array_equal(c[:16], a)
    with pytest.raises(UsageError):
        build_variant_feature("B", None, fused, img, audio)
    with pytest.raises(UsageError):
        build_variant_feature("D", face, fused, img, audio)


def test_batched_features_match_single():
    rng = np.random.default_rng(7)
    face = build_face_model(3, **SMALL)
    fused = build_fused_model(3, warm_start=face)
    images, audio = rng.random((2, 3, 12, 10)), rng.normal(size=(5, 75))
    idx = np.array([0, 1, 1, 0, 1])
    batch = variant_features("C", face, fused, images, audio, idx)
    for k, i in enumerate(idx):
        np.testing.assert_allclose(batch[k], build_variant_feature("C", face, fused,
                                                                   images[i], audio[k]),
                                   atol=1e-12)


def test_margin_classifier_estimator():
    x, y = blobs(200, 3, gap=4.0, seed=8)
    names = np.where(y > 0, "match", "other")
    clf = MarginClassifier(epochs=10).fit(x, names)
    assert clf.score(x, names) == 1.0
    assert clf.get_params()["lam"] == 1e-2
