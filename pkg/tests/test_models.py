import numpy as np
import pytest

from speaker_naming.exceptions import ConsistencyError, DataError, UsageError
from speaker_naming.layers import DenseParams, ModelParams
from speaker_naming.models import (FaceNetClassifier, FusedNetClassifier, SpeakerNet,
                                   TrainingConfig, architecture_summary, build_face_model,
                                   build_fused_model, count_parameters, extract_feature,
                                   feature_shapes, pair_audio_indices, predict_identity, train)

from oracles import parameter_fixture

# Small architecture for anything that trains.
SMALL = dict(input_shape=(3, 12, 10), conv=((4, 3, 3),), hidden=(16, 32))


def blob_images(n_per_class, n_classes, shape, seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    protos = rng.random((n_classes, *shape))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = protos[labels] + rng.normal(0, noise, (len(labels), *shape))
    return np.clip(images, 0, 1), labels


def test_full_size_counts_match_fixture():
    fx = parameter_fixture()
    face = build_face_model(6, fan_in_power=1.0)
    fused = build_fused_model(6, fan_in_power=1.0)
    for model, key in ((face, "face"), (fused, "fused")):
        per_layer = {name: sum(a.size for a in block.arrays().values())
                     for name, block in model.params}
        assert per_layer == fx[key]
        assert count_parameters(model) == sum(fx[key].values())
    assert count_parameters(face) == 11_566_022
    assert count_parameters(fused) == 11_642_822


def test_count_small_cases():
    single = ModelParams(["dense1"], [DenseParams(np.zeros((10, 5)), np.zeros(5))])
    assert count_parameters(single) == 55
    assert count_parameters(None) == 0


def test_feature_shapes_full_network():
    shapes = feature_shapes(build_face_model(6))
    assert shapes == [(3, 50, 40), (48, 18, 13), (256, 7, 5), (8960,), (1024,), (2048,), (6,)]
    assert build_fused_model(6).spec.fused_dim == 9035


def test_architecture_summary_lists_total():
    text = architecture_summary(build_face_model(3, **SMALL))
    assert text.splitlines()[-1].split()[-1] == f"{count_parameters(build_face_model(3, **SMALL)):,d}"


def test_warm_start_copies_bitwise_and_keeps_source():
    face = build_face_model(3, seed=1, **SMALL)
    before = face.params.copy()
    fused = build_fused_model(3, seed=2, warm_start=face)
    flat = fused.spec.flat_dim
    for (name, a), (_, b) in zip(face.params.named_arrays(), fused.params.named_arrays()):
        if name == "dense1.weights":
            assert np.array_equal(a, b[:flat])
            assert np.any(b[flat:] != 0)
        else:
            assert np.array_equal(a, b)
    for (_, a), (_, b) in zip(before.named_arrays(), face.params.named_arrays()):
        assert np.array_equal(a, b)


def test_warm_start_rejects_mismatch():
    face = build_face_model(3, **SMALL)
    with pytest.raises(ConsistencyError):
        build_fused_model(4, warm_start=face)
    with pytest.raises(ConsistencyError):
        build_fused_model(3, warm_start=build_fused_model(3, **SMALL))


def test_zero_audio_rows_reproduce_face_scores():
    rng = np.random.default_rng(0)
    face = build_face_model(3, seed=3, **SMALL)
    fused = build_fused_model(3, warm_start=face, zero_audio_rows=True)
    images = rng.random((7, 3, 12, 10))
    audio = rng.normal(size=(7, 75))
    assert np.array_equal(face.predict_proba(images), fused.predict_proba(images, audio))


def test_zero_learning_rate_leaves_parameters_unchanged():
    images, labels = blob_images(4, 3, (3, 12, 10))
    model = build_face_model(3, **SMALL)
    out = train(model, images, labels, cfg=TrainingConfig(lr=0.0, epochs=1, n_classes=3))
    for (_, a), (_, b) in zip(model.params.named_arrays(), out.model.params.named_arrays()):
        assert np.array_equal(a, b)


def test_first_epoch_loss_near_chance():
    images, labels = blob_images(10, 6, (3, 50, 40), noise=0.05)
    model = build_face_model(6)
    out = train(model, images, labels,
                cfg=TrainingConfig(lr=0.0, epochs=1, n_classes=6, batch_size=60))
    assert abs(out.history[0] - np.log(6)) / np.log(6) < 0.1


def test_training_reduces_loss_and_is_deterministic():
    images, labels = blob_images(12, 3, (3, 12, 10))
    model = build_face_model(3, **SMALL)
    cfg = TrainingConfig(lr=3e-3, epochs=6, batch_size=12, n_classes=3)
    a = train(model, images, labels, cfg=cfg)
    b = train(model, images, labels, cfg=cfg)
    assert a.history[-1] < a.history[0]
    assert a.history == b.history
    assert a.model.to_bytes() == b.model.to_bytes()


def test_lr_decay_validation():
    with pytest.raises(ValueError):
        TrainingConfig(lr_decay=0.0)
    with pytest.raises(ValueError):
        TrainingConfig(epochs=0)


def test_extract_feature_dimension_and_sign():
    rng = np.random.default_rng(1)
    face = build_face_model(6)
    f = extract_feature(face, rng.random((3, 50, 40)))
    assert f.shape == (1024,) and np.all(f >= 0)
    fused = build_fused_model(6, warm_start=face)
    g = extract_feature(fused, rng.random((3, 50, 40)), rng.normal(size=75))
    assert g.shape == (1024,) and np.all(g >= 0)


def test_audio_usage_errors():
    face = build_face_model(3, **SMALL)
    fused = build_fused_model(3, warm_start=face)
    img = np.zeros((1, 3, 12, 10))
    with pytest.raises(UsageError):
        face.predict_proba(img, np.zeros((1, 75)))
    with pytest.raises(UsageError):
        fused.predict_proba(img)
    with pytest.raises(UsageError):
        fused.predict_proba(img, np.zeros((1, 74)))


def test_predict_identity_breaks_ties_low():
    face = build_face_model(3, **SMALL)
    for block in face.params.dense_blocks[-1:]:
        block.weights[...] = 0.0
        block.bias[...] = 0.0
    idx, probs = predict_identity(face, np.zeros((3, 12, 10)))
    assert idx == 0
    np.testing.assert_allclose(probs, 1 / 3)


def test_save_load_round_trip(tmp_path):
    face = build_face_model(3, seed=4, **SMALL)
    fused = build_fused_model(3, warm_start=face)
    fused.audio_mean = np.arange(75.0)
    path = tmp_path / "m.bin"
    fused.save(path, {"seed": 4})
    loaded, meta = SpeakerNet.load(path)
    assert meta["seed"] == 4
    assert loaded.to_bytes({"seed": 4}) == fused.to_bytes({"seed": 4})
    assert np.array_equal(loaded.audio_mean, fused.audio_mean)


def test_pair_audio_indices_same_subject():
    face_labels = np.array([0, 1, 1, 2])
    audio_labels = np.array([0, 0, 1, 1, 2, 2, 2])
    idx = pair_audio_indices(face_labels, audio_labels, 2, seed=0)
    assert idx.shape == (4, 2)
    for row, s in zip(idx, face_labels):
        assert len(set(row)) == 2 and np.all(audio_labels[row] == s)
    with pytest.raises(DataError):
        pair_audio_indices(face_labels, audio_labels, 3)


def test_estimators_fit_predict_and_params():
    images, labels = blob_images(10, 3, (3, 12, 10), noise=0.05)
    names = np.array(["ann", "bob", "cy"])[labels]
    clf = FaceNetClassifier(epochs=8, batch_size=10, lr=3e-3, **SMALL)
    assert clf.get_params()["epochs"] == 8
    clf.fit(images, names)
    assert clf.score(images, names) > 0.9
    assert clf.transform(images).shape == (30, 16)

    audio = np.random.default_rng(2).normal(size=(30, 75))
    X = np.hstack([images.reshape(30, -1), audio])
    fused = FusedNetClassifier(epochs=2, batch_size=10, lr=3e-3, warm_start=clf, **SMALL)
    fused.fit(X, names)
    assert fused.predict(X).shape == (30,)
    assert set(fused.get_params()) >= {"warm_start", "finetune_lr_factor", "audio_dim"}
