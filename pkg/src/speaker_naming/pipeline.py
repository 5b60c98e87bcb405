"""End-to-end orchestration: data loading, the four training stages, evaluation.

The command-line tool and the synthetic end-to-end checks both run through
these functions, so a single code path produces every reported number.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .audio import MfccConfig, utterance_features
from .data import (Manifest, SynthConfig, SynthDataset, load_manifest, read_pnm, read_wav,
                   resize_bilinear, synth_dataset)
from .exceptions import DataError
from .models import (FACE_EPOCHS, FACE_INPUT, FINETUNE_EPOCHS, FINETUNE_LR_FACTOR, SpeakerNet,
                     TrainingConfig, build_face_model, build_fused_model, pair_audio_indices,
                     train)
from .naming import SpeakingFrame, evaluate_naming, name_frames
from .rejection import (LinearMarginModel, PairSet, make_pair_dataset, pair_accuracy,
                        train_margin, variant_features)

log = logging.getLogger(__name__)

PAIRS_PER_FACE = 5


@dataclass
class Split:
    """Faces, audio summaries and speaking frames of one dataset split."""

    classes: list[str]
    images: np.ndarray
    image_labels: np.ndarray
    audio: np.ndarray
    audio_labels: np.ndarray
    frames: list[SpeakingFrame] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def _summaries(waves, mfcc: MfccConfig) -> np.ndarray:
    if not waves:
        return np.zeros((0, 3 * mfcc.n_coeffs))
    return np.stack([utterance_features(w, mfcc) for w in waves])


def split_from_synth(ds: SynthDataset, which: str, mfcc: MfccConfig | None = None) -> Split:
    """In-memory split of a synthetic dataset; test splits carry the frames."""
    mfcc = mfcc or MfccConfig()
    part = ds.train if which == "train" else ds.test
    frames = []
    if which == "test":
        audio = _summaries([f.audio for f in ds.frames], mfcc)
        frames = [SpeakingFrame(f.frame_id, f.timestamp, f.faces, list(range(len(f.faces))),
                                a, f.speaker_index, f.speaker_label)
                  for f, a in zip(ds.frames, audio)]
    return Split(list(ds.classes), part.images, part.image_labels,
                 _summaries(part.waves, mfcc), part.wave_labels, frames)


def _load_face(man: Manifest, rec, input_shape) -> np.ndarray:
    img = read_pnm(man.resolve(rec.path), to_rgb=input_shape[0] == 3)
    if img.shape[1:] != tuple(input_shape[1:]):
        img = resize_bilinear(img, *input_shape[1:])
    return img


def split_from_manifest(path, mfcc: MfccConfig | None = None,
                        input_shape=FACE_INPUT) -> Split:
    """Load a manifest. Faces without a frame id form the classification set;
    faces with one are speaking-frame candidates."""
    mfcc = mfcc or MfccConfig()
    man = load_manifest(path)
    solo = [r for r in man.faces.values() if r.frame_id is None]
    framed_utts = {fr.utterance_id for fr in man.frames}
    utts = [r for r in man.utterances.values() if r.record_id not in framed_utts]
    images = (np.stack([_load_face(man, r, input_shape) for r in solo]) if solo
              else np.zeros((0, *input_shape)))
    labels = np.array([man.class_index(r.subject) for r in solo], dtype=np.int64)
    audio = _summaries([read_wav(man.resolve(r.path)) for r in utts], mfcc)
    audio_labels = np.array([man.class_index(r.subject) for r in utts], dtype=np.int64)

    frames = []
    for fr in man.frames:
        faces = np.stack([_load_face(man, man.faces[f], input_shape) for f in fr.face_ids])
        utt = man.utterances[fr.utterance_id]
        a = utterance_features(read_wav(man.resolve(utt.path)), mfcc)
        speaker = identity = None
        if fr.speaker_face_id is not None:
            speaker = fr.face_ids.index(fr.speaker_face_id)
            identity = man.class_index(man.faces[fr.speaker_face_id].subject)
        frames.append(SpeakingFrame(fr.frame_id, fr.timestamp, faces,
                                    list(range(len(fr.face_ids))), a, speaker, identity))
    return Split(list(man.classes), images, labels, audio, audio_labels, frames)


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


def fit_face(split: Split, cfg: TrainingConfig, fan_in_power=0.5):
    """Train the face-alone network from scratch. Returns (model, loss history)."""
    if len(split.images) == 0:
        raise DataError("no training faces")
    model = build_face_model(split.n_classes, cfg.seed, fan_in_power=fan_in_power)
    result = train(model, split.images, split.image_labels, None, cfg)
    return result.model, result.history


def matched_pairs(split: Split, per_face=PAIRS_PER_FACE, seed=0):
    """Face index and audio rows pairing each face with same-subject audio."""
    idx = pair_audio_indices(split.image_labels, split.audio_labels, per_face, seed)
    face_index = np.repeat(np.arange(len(split.images)), per_face)
    return face_index, split.audio[idx.reshape(-1)]


def fit_fused(face_model: SpeakerNet, split: Split, cfg: TrainingConfig,
              fan_in_power=0.5, per_face=PAIRS_PER_FACE):
    """Warm-start the fused network from ``face_model`` and fine-tune it on
    matched face-audio pairs at ``cfg.lr``. Returns (model, loss history)."""
    face_index, audio = matched_pairs(split, per_face, cfg.seed)
    model = build_fused_model(split.n_classes, cfg.seed, face_model,
                              fan_in_power=fan_in_power)
    scale = audio.std(axis=0)
    model.audio_mean = audio.mean(axis=0)
    model.audio_scale = np.where(scale > 0, scale, 1.0)
    result = train(model, split.images[face_index], split.image_labels[face_index],
                   audio, cfg)
    return result.model, result.history


def pair_set(split: Split, seed=0, per_face=PAIRS_PER_FACE, negatives_per_positive=1.0) -> PairSet:
    return make_pair_dataset(split.image_labels, split.audio, split.audio_labels,
                             negatives_per_positive, per_face, seed)


def pair_features(variant, face_model, fused_model, split: Split, pairs: PairSet,
                  cache: dict | None = None) -> np.ndarray:
    return variant_features(variant, face_model, fused_model, split.images,
                            pairs.audio, pairs.face_index, cache)


def fit_rejection(variant, face_model, fused_model, split: Split, lam=1e-2, epochs=20,
                  seed=0, per_face=PAIRS_PER_FACE, negatives_per_positive=1.0,
                  cache: dict | None = None) -> LinearMarginModel:
    pairs = pair_set(split, seed, per_face, negatives_per_positive)
    feats = pair_features(variant, face_model, fused_model, split, pairs, cache)
    return train_margin(feats, pairs.labels, lam, epochs, seed, variant=variant)


def rejection_accuracy(margin_model: LinearMarginModel, face_model, fused_model,
                       split: Split, seed=0, per_face=PAIRS_PER_FACE, negatives_per_positive=1.0,
                       cache: dict | None = None) -> float:
    pairs = pair_set(split, seed, per_face, negatives_per_positive)
    feats = pair_features(margin_model.variant, face_model, fused_model, split, pairs, cache)
    return pair_accuracy(margin_model, feats, pairs.labels)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def confusion_matrix(truth, pred, n_classes) -> np.ndarray:
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (np.asarray(truth), np.asarray(pred)), 1)
    return out


def classify(model: SpeakerNet, split: Split, seed=0) -> np.ndarray:
    """Predicted class per face. A fused model sees each face with one
    randomly chosen same-subject utterance."""
    audio = None
    if model.is_fused:
        idx = pair_audio_indices(split.image_labels, split.audio_labels, 1, seed)[:, 0]
        audio = split.audio[idx]
    return np.argmax(model.predict_proba(split.images, audio), axis=1)


def face_accuracy(model: SpeakerNet, split: Split, seed=0) -> tuple[float, np.ndarray]:
    pred = classify(model, split, seed)
    conf = confusion_matrix(split.image_labels, pred, split.n_classes)
    return float(np.mean(pred == split.image_labels)), conf


# ---------------------------------------------------------------------------
# synthetic end-to-end run
# ---------------------------------------------------------------------------


@dataclass
class SyntheticRun:
    seed: int
    face_model: SpeakerNet
    fused_model: SpeakerNet
    margin_model: LinearMarginModel
    train: Split
    test: Split
    face_accuracy: float
    fused_accuracy: float
    naming_accuracy: float
    face_history: list[float]
    fused_history: list[float]


def run_synthetic(seed=0, synth=None, lr=1e-3, face_epochs=FACE_EPOCHS,
                  finetune_lr_factor=None, finetune_epochs=None, svm_lambda=1e-2,
                  threshold=0.0) -> SyntheticRun:
    """Generate data, train all four stages and score the test split."""
    factor = FINETUNE_LR_FACTOR if finetune_lr_factor is None else finetune_lr_factor
    ft_epochs = FINETUNE_EPOCHS if finetune_epochs is None else finetune_epochs
    ds = synth_dataset(synth or SynthConfig(seed=seed))
    train_split = split_from_synth(ds, "train")
    test_split = split_from_synth(ds, "test")
    n = train_split.n_classes

    face, face_hist = fit_face(train_split, TrainingConfig(lr=lr, epochs=face_epochs,
                                                           seed=seed, n_classes=n))
    log.info("seed %d face model trained", seed)
    fused, fused_hist = fit_fused(face, train_split,
                                  TrainingConfig(lr=lr * factor, epochs=ft_epochs,
                                                 seed=seed, n_classes=n))
    log.info("seed %d fused model trained", seed)
    margin = fit_rejection("C", face, fused, train_split, svm_lambda, seed=seed)
    results = name_frames(face, fused, margin, test_split.frames, threshold)
    naming = evaluate_naming(results, test_split.frames, n)
    return SyntheticRun(seed, face, fused, margin, train_split, test_split,
                        face_accuracy(face, test_split, seed)[0],
                        face_accuracy(fused, test_split, seed)[0],
                        naming.accuracy, face_hist, fused_hist)
