"""Matched/non-matched classification of face-audio pairs.

Three feature variants feed a linear margin classifier:

* ``A``: the 1024-D fused feature of the face-audio network;
* ``B``: the 1024-D face feature of the face-alone network, then the 75-D
  audio vector (1099-D);
* ``C``: the fused feature, then the audio vector (1099-D).

The classifier minimizes ``lam/2 * |w|^2 + mean(hinge)`` by stochastic
subgradient steps of size ``1 / (lam * t)`` (Pegasos), after z-scoring every
feature with training-set statistics.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import (DataError, DimensionError, LabelError, ParseError,
                         UnsupportedFormatError, UsageError)
from .models import SpeakerNet, pair_audio_indices

VARIANTS = ("A", "B", "C")
PAIR_BATCH = 512


@dataclass(frozen=True)
class PairSample:
    face_index: int
    audio: np.ndarray
    face_subject: int
    audio_subject: int

    @property
    def matched(self) -> bool:
        return self.face_subject == self.audio_subject


@dataclass
class PairSet:
    """Column-wise storage of many pairs; iterating yields :class:`PairSample`."""

    face_index: np.ndarray
    audio: np.ndarray
    face_subject: np.ndarray
    audio_subject: np.ndarray

    def __len__(self):
        return len(self.face_index)

    def __iter__(self):
        for i in range(len(self)):
            yield PairSample(int(self.face_index[i]), self.audio[i],
                             int(self.face_subject[i]), int(self.audio_subject[i]))

    @property
    def matched(self) -> np.ndarray:
        return self.face_subject == self.audio_subject

    @property
    def labels(self) -> np.ndarray:
        """+1 for matched pairs, -1 otherwise."""
        return np.where(self.matched, 1, -1)


def make_pair_dataset(face_labels, audio, audio_labels, negatives_per_positive=1.0,
                      per_face=5, seed=0) -> PairSet:
    """Pair every face with ``per_face`` same-subject audio vectors and with
    ``round(per_face * negatives_per_positive)`` vectors of other subjects.

    The subject of each negative is drawn uniformly from the other subjects,
    then the vector uniformly from that subject's pool.
    """
    face_labels = np.asarray(face_labels, dtype=np.int64)
    audio = np.asarray(audio, dtype=np.float64)
    audio_labels = np.asarray(audio_labels, dtype=np.int64)
    subjects = np.unique(audio_labels)
    if len(subjects) < 2:
        raise DataError("need at least two subjects")
    missing = set(np.unique(face_labels)) - set(subjects)
    if missing:
        raise DataError(f"subjects {sorted(missing)} have no audio")
    rng = np.random.default_rng(seed)
    pos = pair_audio_indices(face_labels, audio_labels, per_face, rng)
    n_neg = int(round(per_face * negatives_per_positive))
    pools = {int(s): np.flatnonzero(audio_labels == s) for s in subjects}

    face_idx, audio_idx = [], []
    for i, s in enumerate(face_labels):
        face_idx += [i] * per_face
        audio_idx += list(pos[i])
        others = subjects[subjects != s]
        for subj in rng.choice(others, n_neg):
            face_idx.append(i)
            audio_idx.append(int(rng.choice(pools[int(subj)])))
    face_idx = np.asarray(face_idx, dtype=np.int64)
    audio_idx = np.asarray(audio_idx, dtype=np.int64)
    return PairSet(face_idx, audio[audio_idx], face_labels[face_idx], audio_labels[audio_idx])


# ---------------------------------------------------------------------------
# linear margin model
# ---------------------------------------------------------------------------


@dataclass
class LinearMarginModel:
    w: np.ndarray
    b: float = 0.0
    lam: float = 1e-4
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    variant: str = "C"
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.w)):
            raise ValueError("weights must be finite")
        if self.mean is None:
            self.mean = np.zeros_like(self.w)
        if self.scale is None:
            self.scale = np.ones_like(self.w)

    @property
    def dim(self) -> int:
        return self.w.size

    def margin(self, x) -> np.ndarray | float:
        """Signed score ``w . z(x) + b``; positive means matched."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"feature has {x.shape[-1]} entries, model expects {self.dim}")
        out = ((x - self.mean) / self.scale) @ self.w + self.b
        return float(out) if x.ndim == 1 else out

    # -- persistence: magic, version, variant, dim, lam, mean, scale, w, b --

    def to_bytes(self, header: str = "") -> bytes:
        buf = io.BytesIO()
        text = header.encode()
        buf.write(b"SNMARGIN")
        buf.write(struct.pack("<IH", 1, len(text)))
        buf.write(text)
        buf.write(self.variant.encode()[:1])
        buf.write(struct.pack("<Id", self.dim, self.lam))
        for arr in (self.mean, self.scale, self.w):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        buf.write(struct.pack("<d", self.b))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LinearMarginModel":
        if data[:8] != b"SNMARGIN":
            raise UnsupportedFormatError("not a margin model file (bad magic)")
        try:
            version, hlen = struct.unpack_from("<IH", data, 8)
            if version != 1:
                raise UnsupportedFormatError(f"margin model version={version}")
            pos = 14 + hlen
            variant = data[pos:pos + 1].decode()
            dim, lam = struct.unpack_from("<Id", data, pos + 1)
            pos += 13
            arrays = []
            for _ in range(3):
                arrays.append(np.frombuffer(data, "<f8", dim, pos).astype(np.float64))
                pos += 8 * dim
            (b,) = struct.unpack_from("<d", data, pos)
        except (struct.error, ValueError) as exc:
            if isinstance(exc, UnsupportedFormatError):
                raise
            raise ParseError("truncated margin model file") from exc
        mean, scale, w = arrays
        return cls(w, b, lam, mean, scale, variant)

    def save(self, path, header: str = "") -> None:
        Path(path).write_bytes(self.to_bytes(header))

    @classmethod
    def load(cls, path) -> "LinearMarginModel":
        return cls.from_bytes(Path(path).read_bytes())


def margin(model: LinearMarginModel, x):
    return model.margin(x)


@numba.njit(cache=True)
def _pegasos_epoch(Z, y, v, order, lam, t):
    """One pass of projected subgradient steps, updating ``v`` in place."""
    radius = 1.0 / np.sqrt(lam)
    d = Z.shape[1]
    for i in order:
        t += 1
        eta = 1.0 / (lam * t)
        score = 0.0
        for j in range(d):
            score += v[j] * Z[i, j]
        shrink = 1.0 - 1.0 / t
        norm2 = 0.0
        for j in range(d):
            v[j] *= shrink
            if y[i] * score < 1.0:
                v[j] += eta * y[i] * Z[i, j]
            norm2 += v[j] * v[j]
        if norm2 > radius * radius:
            scale = radius / np.sqrt(norm2)
            for j in range(d):
                v[j] *= scale
    return t


def _objective(Z, y, w, b, lam):
    hinge = np.maximum(0.0, 1.0 - y * (Z @ w + b))
    return 0.5 * lam * (w @ w + b * b) + hinge.mean()


def train_margin(features, labels, lam=1e-2, epochs=20, seed=0, standardize=True,
                 variant="C") -> LinearMarginModel:
    """Pegasos training on labels in {+1, -1}.

    The offset is learned as the weight of a constant feature, so it shares the
    regularizer. ``history`` holds the objective at the start and after every
    epoch.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionError(f"features {X.shape} and labels {y.shape} disagree")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise LabelError("labels must be +1 or -1")
    if len(np.unique(y)) < 2:
        raise LabelError("both classes must be present")
    if not lam > 0 or epochs < 1:
        raise ValueError("lam must be positive and epochs at least 1")

    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Z = np.hstack([(X - mean) / scale, np.ones((len(X), 1))])

    rng = np.random.default_rng(seed)
    v = np.zeros(Z.shape[1])
    history = [_objective(Z[:, :-1], y, v[:-1], v[-1], lam)]
    t = 0
    for _ in range(epochs):
        t = _pegasos_epoch(Z, y, v, rng.permutation(len(Z)), lam, t)
        history.append(_objective(Z[:, :-1], y, v[:-1], v[-1], lam))
    return LinearMarginModel(v[:-1].copy(), float(v[-1]), lam, mean, scale, variant, history)


class MarginClassifier(ClassifierMixin, BaseEstimator):
    """sklearn wrapper around :func:`train_margin` for binary labels."""

    def __init__(self, lam=1e-2, epochs=20, random_state=0, standardize=True, variant="C"):
        self.lam = lam
        self.epochs = epochs
        self.random_state = random_state
        self.standardize = standardize
        self.variant = variant

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise LabelError("need exactly two classes")
        signs = np.where(y == self.classes_[1], 1.0, -1.0)
        self.model_ = train_margin(X, signs, self.lam, self.epochs, self.random_state,
                                   self.standardize, self.variant)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.margin(X)

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


# ---------------------------------------------------------------------------
# variant features
# ---------------------------------------------------------------------------


def _required(variant, face_model, fused_model):
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    if variant in ("A", "C") and fused_model is None:
        raise UsageError(f"variant {variant} needs the fused model")
    if variant == "B" and face_model is None:
        raise UsageError("variant B needs the face model")


def build_variant_feature(variant, face_model: SpeakerNet | None,
                          fused_model: SpeakerNet | None, face, audio75) -> np.ndarray:
    """Feature vector of one face-audio pair; network features come first."""
    face = np.asarray(face, dtype=np.float64)
    audio75 = np.asarray(audio75, dtype=np.float64).reshape(1, -1)
    return variant_features(variant, face_model, fused_model, face[None], audio75)[0]


def variant_features(variant, face_model, fused_model, images, audio,
                     face_index=None, conv_cache: dict | None = None) -> np.ndarray:
    """Variant features for many pairs.

    ``face_index`` maps each pair to a row of ``images`` (default: one image
    per pair). Convolution features are computed once per image and can be
    shared across calls through ``conv_cache`` keyed by model id.
    """
    _required(variant, face_model, fused_model)
    images = np.asarray(images, dtype=np.float64)
    audio = np.asarray(audio, dtype=np.float64)
    if face_index is None:
        face_index = np.arange(len(images))
    if len(face_index) != len(audio):
        raise DimensionError(f"{len(face_index)} pairs but {len(audio)} audio vectors")
    cache = {} if conv_cache is None else conv_cache

    def conv_of(model):
        key = id(model)
        if key not in cache:
            cache[key] = model.conv_features(images)
        return cache[key]

    def head(model, with_audio):
        conv = conv_of(model)
        out = []
        for s in range(0, len(face_index), PAIR_BATCH):
            idx = face_index[s:s + PAIR_BATCH]
            a = audio[s:s + PAIR_BATCH] if with_audio else None
            out.append(model.head(conv[idx], a, stop_after=1))
        return np.concatenate(out) if out else np.zeros((0, model.spec.hidden[0]))

    if variant == "A":
        return head(fused_model, True)
    if variant == "B":
        return np.hstack([head(face_model, False), audio])
    return np.hstack([head(fused_model, True), audio])


def pair_accuracy(model: LinearMarginModel, features, labels) -> float:
    pred = np.where(model.margin(np.asarray(features)) > 0, 1, -1)
    return float(np.mean(pred == np.asarray(labels)))
