"""Face-alone and face-audio networks, training, and sklearn estimators.

The face network maps a 3x50x40 image through two convolution blocks
(48 maps at 15x15, 256 maps at 5x4) to a 256x7x5 = 8960 feature vector, then
through rectified dense layers of 1024 and 2048 units to the softmax. The
fused network stacks the 75-D utterance vector onto the 8960 convolution
features, so its first dense layer reads 9035 inputs and its 1024-D output is
the fused feature.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import serialization
from .audio import N_SUMMARY
from .exceptions import (ConsistencyError, DataError, DivergenceError,
                         UsageError)
from .layers import (Adam, ConvBlockParams, DenseParams, ModelParams, MomentumSGD,
                     NetSpec, backward_pass, conv_features, cross_entropy,
                     dense_stack, forward, init_params, init_weights, one_hot,
                     softmax)
from .validation import check_images, check_stacked

log = logging.getLogger(__name__)

FACE_INPUT = (3, 50, 40)
FACE_CONV = ((48, 15, 15), (256, 5, 4))
FACE_HIDDEN = (1024, 2048)
EVAL_BATCH = 128
FACE_EPOCHS = 6
# Fine-tuning runs at this fraction of the base learning rate for this many
# passes over the matched face-audio pairs.
FINETUNE_LR_FACTOR = 0.3
FINETUNE_EPOCHS = 1


def face_net_spec(n_classes, input_shape=FACE_INPUT, conv=FACE_CONV,
                  hidden=FACE_HIDDEN) -> NetSpec:
    return NetSpec(input_shape, conv, hidden, n_classes, audio_dim=0)


def fused_net_spec(n_classes, input_shape=FACE_INPUT, conv=FACE_CONV,
                   hidden=FACE_HIDDEN, audio_dim=N_SUMMARY) -> NetSpec:
    return NetSpec(input_shape, conv, hidden, n_classes, audio_dim=audio_dim)


def _spec_to_dict(spec: NetSpec) -> dict:
    return {"input_shape": list(spec.input_shape), "conv": [list(c) for c in spec.conv],
            "hidden": list(spec.hidden), "n_classes": spec.n_classes,
            "audio_dim": spec.audio_dim}


@dataclass
class SpeakerNet:
    """A network architecture together with its parameters.

    Fused networks also carry the per-dimension mean and scale used to
    standardize raw audio vectors before they enter the first dense layer.
    """

    spec: NetSpec
    params: ModelParams
    audio_mean: np.ndarray | None = None
    audio_scale: np.ndarray | None = None

    def __post_init__(self):
        expected = init_shapes(self.spec)
        if self.params.shapes() != expected:
            raise ConsistencyError("parameters do not match the architecture")
        if self.is_fused:
            if self.audio_mean is None:
                self.audio_mean = np.zeros(self.spec.audio_dim)
            if self.audio_scale is None:
                self.audio_scale = np.ones(self.spec.audio_dim)

    @property
    def is_fused(self) -> bool:
        return self.spec.audio_dim > 0

    def _check_audio(self, audio, n):
        if self.is_fused and audio is None:
            raise UsageError("fused model needs an audio vector per face")
        if not self.is_fused and audio is not None:
            raise UsageError("face-alone model takes no audio input")
        if audio is None:
            return None
        audio = np.asarray(audio, dtype=np.float64).reshape(n, -1)
        if audio.shape[1] != self.spec.audio_dim:
            raise UsageError(
                f"audio has {audio.shape[1]} entries, model expects {self.spec.audio_dim}")
        return (audio - self.audio_mean) / self.audio_scale

    def conv_features(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = [conv_features(self.params, images[i:i + EVAL_BATCH])
               for i in range(0, len(images), EVAL_BATCH)]
        return np.concatenate(out) if out else np.zeros((0, self.spec.flat_dim))

    def head(self, conv_flat, audio=None, stop_after=None) -> np.ndarray:
        """Dense layers applied to precomputed convolution features."""
        conv_flat = np.asarray(conv_flat, dtype=np.float64)
        audio = self._check_audio(audio, len(conv_flat))
        return dense_stack(self.params, conv_flat, audio, stop_after=stop_after)

    def predict_proba(self, images, audio=None) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        audio = self._check_audio(audio, len(images))
        out = []
        for i in range(0, len(images), EVAL_BATCH):
            flat = conv_features(self.params, images[i:i + EVAL_BATCH])
            a = None if audio is None else audio[i:i + EVAL_BATCH]
            out.append(softmax(dense_stack(self.params, flat, a)))
        return np.concatenate(out)

    def features(self, images, audio=None) -> np.ndarray:
        """Rectified output of the first dense layer (the 1024-D feature)."""
        images = np.asarray(images, dtype=np.float64)
        audio = self._check_audio(audio, len(images))
        out = []
        for i in range(0, len(images), EVAL_BATCH):
            flat = conv_features(self.params, images[i:i + EVAL_BATCH])
            a = None if audio is None else audio[i:i + EVAL_BATCH]
            out.append(dense_stack(self.params, flat, a, stop_after=1))
        return np.concatenate(out)

    # -- persistence ------------------------------------------------------

    def to_bytes(self, meta: dict | None = None) -> bytes:
        arrays = self.params.named_arrays()
        if self.is_fused:
            arrays = arrays + [("audio.mean", self.audio_mean),
                               ("audio.scale", self.audio_scale)]
        meta = dict(meta or {})
        meta["architecture"] = _spec_to_dict(self.spec)
        return serialization.dumps(arrays, meta)

    def save(self, path, meta: dict | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(meta))

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["SpeakerNet", dict]:
        arrays, meta = serialization.loads(data)
        spec = NetSpec(**meta["architecture"])
        named = dict(arrays)
        names = spec.layer_names()
        blocks = []
        for i, name in enumerate(names):
            if i < len(spec.conv):
                blocks.append(ConvBlockParams(named[f"{name}.kernels"], named[f"{name}.bias"]))
            else:
                blocks.append(DenseParams(named[f"{name}.weights"], named[f"{name}.bias"]))
        net = cls(spec, ModelParams(names, blocks),
                  named.get("audio.mean"), named.get("audio.scale"))
        return net, meta

    @classmethod
    def load(cls, path) -> tuple["SpeakerNet", dict]:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_shapes(spec: NetSpec) -> list:
    shapes = []
    in_maps = spec.input_shape[0]
    for name, (maps, kh, kw) in zip(spec.layer_names(), spec.conv):
        shapes += [(f"{name}.kernels", (maps, in_maps, kh, kw)), (f"{name}.bias", (maps,))]
        in_maps = maps
    dense_names = spec.layer_names()[len(spec.conv):]
    for name, (d_in, d_out) in zip(dense_names, spec.dense_dims()):
        shapes += [(f"{name}.weights", (d_in, d_out)), (f"{name}.bias", (d_out,))]
    return shapes


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_face_model(n_classes: int, seed=0, input_shape=FACE_INPUT, conv=FACE_CONV,
                     hidden=FACE_HIDDEN, init_mode="gaussian",
                     fan_in_power=0.5) -> SpeakerNet:
    spec = face_net_spec(n_classes, input_shape, conv, hidden)
    return SpeakerNet(spec, init_params(spec, seed, init_mode, fan_in_power))


def build_fused_model(n_classes: int, seed=0, warm_start: SpeakerNet | None = None,
                      input_shape=FACE_INPUT, conv=FACE_CONV, hidden=FACE_HIDDEN,
                      audio_dim=N_SUMMARY, init_mode="gaussian", fan_in_power=0.5,
                      zero_audio_rows=False) -> SpeakerNet:
    """Fused network, optionally warm-started from a trained face network.

    With ``warm_start`` every face-network array is copied bit-exactly into
    the fused network; only the ``audio_dim`` new input rows of the first dense
    layer are drawn fresh (same scheme and fan-in as the rest of that layer).
    ``zero_audio_rows`` sets those rows to zero instead, which makes the fused
    network reproduce the face network exactly.
    """
    if warm_start is not None:
        ws = warm_start.spec
        if warm_start.is_fused:
            raise ConsistencyError("warm start must be a face-alone model")
        if ws.n_classes != n_classes:
            raise ConsistencyError(
                f"warm start has {ws.n_classes} classes, expected {n_classes}")
        input_shape, conv, hidden = ws.input_shape, ws.conv, ws.hidden
    spec = fused_net_spec(n_classes, input_shape, conv, hidden, audio_dim)
    params = init_params(spec, seed, init_mode, fan_in_power)
    if warm_start is None:
        if zero_audio_rows:
            params.dense_blocks[0].weights[spec.flat_dim:] = 0.0
        return SpeakerNet(spec, params)

    src = warm_start.params
    blocks = []
    for i, (mine, theirs) in enumerate(zip(params.blocks, src.blocks)):
        if i == len(spec.conv):
            weights = np.empty_like(mine.weights)
            weights[:spec.flat_dim] = theirs.weights
            if zero_audio_rows:
                weights[spec.flat_dim:] = 0.0
            else:
                rng = np.random.default_rng([int(seed), 75])
                weights[spec.flat_dim:] = init_weights(
                    rng, (audio_dim, weights.shape[1]), spec.fused_dim,
                    init_mode, fan_in_power)
            blocks.append(type(mine)(weights, theirs.bias.copy()))
        else:
            blocks.append(type(mine)(**{k: v.copy() for k, v in theirs.arrays().items()}))
    return SpeakerNet(spec, ModelParams(list(params.names), blocks))


def count_parameters(model) -> int:
    """Total number of weight and bias entries."""
    if model is None:
        return 0
    if isinstance(model, SpeakerNet):
        model = model.params
    return sum(a.size for _, a in model.named_arrays())


def architecture_summary(model: SpeakerNet) -> str:
    """Plain-text table: layer, parameter shapes, parameter count."""
    lines = [f"{'layer':<10}{'shapes':<36}{'params':>12}"]
    for name, block in model.params:
        shapes = ", ".join("x".join(map(str, a.shape)) for a in block.arrays().values())
        n = sum(a.size for a in block.arrays().values())
        lines.append(f"{name:<10}{shapes:<36}{n:>12,d}")
    lines.append(f"{'total':<10}{'':<36}{count_parameters(model):>12,d}")
    return "\n".join(lines)


def feature_shapes(model: SpeakerNet) -> list[tuple[int, ...]]:
    """Shape after every stage: input, each block, flatten, each dense layer."""
    spec = model.spec
    shapes: list[tuple[int, ...]] = list(spec.feature_shapes())
    shapes.append((spec.flat_dim,))
    shapes += [(d_out,) for _, d_out in spec.dense_dims()]
    return shapes


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = FACE_EPOCHS
    momentum: float = 0.9
    seed: int = 0
    n_classes: int = 6
    optimizer: str = "adam"
    # the learning rate is multiplied by this factor after every epoch
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr must be non-negative; batch size and epochs positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")


@dataclass
class TrainResult:
    model: SpeakerNet
    history: list[float] = field(default_factory=list)


def train(model: SpeakerNet, images, labels, audio=None,
          cfg: TrainingConfig | None = None, callback=None) -> TrainResult:
    """Shuffled mini-batch training of the mean cross-entropy.

    ``labels`` are class indices. ``audio`` (raw 75-D vectors, one per image)
    is required for fused models and is standardized with the model's stored
    statistics. Returns a new model; ``model`` itself is left untouched.
    """
    cfg = cfg or TrainingConfig(n_classes=model.spec.n_classes)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if n == 0:
        raise DataError("empty training set")
    if len(labels) != n:
        raise DataError(f"{n} images but {len(labels)} labels")
    audio = model._check_audio(audio, n)
    targets = one_hot(labels, model.spec.n_classes)

    if cfg.optimizer == "adam":
        opt = Adam(cfg.lr)
    else:
        opt = MomentumSGD(cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    params = model.params.copy()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = cfg.lr * cfg.lr_decay ** (epoch - 1)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            a = None if audio is None else audio[idx]
            probs, trace = forward(params, images[idx], a)
            loss = cross_entropy(probs, targets[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}")
            grads, _ = backward_pass(params, trace, targets[idx])
            if cfg.lr > 0:
                opt.update_(params, grads)
            total += loss * len(idx)
        history.append(total / n)
        if not np.isfinite(history[-1]):
            raise DivergenceError(f"non-finite loss in epoch {epoch}")
        log.info("epoch %d mean loss %.6f", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    trained = SpeakerNet(model.spec, params, model.audio_mean, model.audio_scale)
    return TrainResult(trained, history)


def extract_feature(model: SpeakerNet, face, audio=None) -> np.ndarray:
    """1024-D first-dense-layer feature of one face (and audio vector)."""
    face = np.asarray(face, dtype=np.float64)
    single = face.ndim == 3
    out = model.features(face[None] if single else face,
                         None if audio is None else np.atleast_2d(audio))
    return out[0] if single else out


def predict_identity(model: SpeakerNet, face, audio=None) -> tuple[int, np.ndarray]:
    """Class index with the highest probability (lowest index on ties)."""
    face = np.asarray(face, dtype=np.float64)
    probs = model.predict_proba(face[None] if face.ndim == 3 else face,
                                None if audio is None else np.atleast_2d(audio))[0]
    return int(np.argmax(probs)), probs


def pair_audio_indices(face_labels, audio_labels, per_face: int = 5, seed=0) -> np.ndarray:
    """For each face pick ``per_face`` distinct audio indices of the same subject.

    Returns an ``(n_faces, per_face)`` index array into ``audio_labels``.
    """
    face_labels = np.asarray(face_labels)
    audio_labels = np.asarray(audio_labels)
    rng = np.random.default_rng(seed)
    pools = {s: np.flatnonzero(audio_labels == s) for s in np.unique(face_labels)}
    for s, pool in pools.items():
        if len(pool) < per_face:
            raise DataError(
                f"subject {s!r} has {len(pool)} audio samples, need {per_face}")
    return np.stack([rng.choice(pools[s], per_face, replace=False) for s in face_labels]) \
        if len(face_labels) else np.zeros((0, per_face), dtype=np.int64)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


class FaceNetClassifier(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Face-alone convolutional classifier.

    ``X`` is an image batch ``(n, 3, 50, 40)`` or the same images flattened to
    rows. ``transform`` returns the 1024-D face feature.
    """

    def __init__(self, input_shape=FACE_INPUT, conv=FACE_CONV, hidden=FACE_HIDDEN,
                 lr=1e-3, batch_size=64, epochs=FACE_EPOCHS, momentum=0.9, optimizer="adam",
                 init_mode="gaussian", fan_in_power=0.5, random_state=0):
        self.input_shape = input_shape
        self.conv = conv
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.momentum = momentum
        self.optimizer = optimizer
        self.init_mode = init_mode
        self.fan_in_power = fan_in_power
        self.random_state = random_state

    def _training_config(self, lr=None) -> TrainingConfig:
        return TrainingConfig(lr=self.lr if lr is None else lr, batch_size=self.batch_size,
                              epochs=self.epochs, momentum=self.momentum,
                              seed=self.random_state, n_classes=len(self.classes_),
                              optimizer=self.optimizer)

    def _encode(self, y):
        self.classes_, encoded = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise DataError("need at least two classes")
        return encoded

    def fit(self, X, y):
        images = check_images(X, self.input_shape)
        encoded = self._encode(y)
        model = build_face_model(len(self.classes_), self.random_state, self.input_shape,
                                 self.conv, self.hidden, self.init_mode, self.fan_in_power)
        result = train(model, images, encoded, None, self._training_config())
        self.model_ = result.model
        self.loss_history_ = result.history
        return self

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        return check_images(X, self.input_shape), None

    def predict_proba(self, X):
        images, audio = self._inputs(X)
        return self.model_.predict_proba(images, audio)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X):
        images, audio = self._inputs(X)
        return self.model_.features(images, audio)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X)


class FusedNetClassifier(FaceNetClassifier):
    """Face-audio classifier over rows ``[flattened image, 75-D audio vector]``.

    When ``warm_start`` is a fitted :class:`FaceNetClassifier`, its parameters
    seed the network and training runs at ``lr * finetune_lr_factor``.
    Audio columns are standardized with training-set statistics.
    """

    def __init__(self, input_shape=FACE_INPUT, conv=FACE_CONV, hidden=FACE_HIDDEN,
                 lr=1e-3, batch_size=64, epochs=1, momentum=0.9, optimizer="adam",
                 init_mode="gaussian", fan_in_power=0.5, random_state=0,
                 audio_dim=N_SUMMARY, warm_start=None, finetune_lr_factor=FINETUNE_LR_FACTOR,
                 standardize_audio=True):
        super().__init__(input_shape, conv, hidden, lr, batch_size, epochs, momentum,
                         optimizer, init_mode, fan_in_power, random_state)
        self.audio_dim = audio_dim
        self.warm_start = warm_start
        self.finetune_lr_factor = finetune_lr_factor
        self.standardize_audio = standardize_audio

    def fit(self, X, y):
        images, audio = check_stacked(X, self.input_shape, self.audio_dim)
        encoded = self._encode(y)
        source = None
        lr = self.lr
        if self.warm_start is not None:
            check_is_fitted(self.warm_start, "model_")
            if not np.array_equal(self.warm_start.classes_, self.classes_):
                raise ConsistencyError("warm-start model was trained on other classes")
            source = self.warm_start.model_
            lr = self.lr * self.finetune_lr_factor
        model = build_fused_model(len(self.classes_), self.random_state, source,
                                  self.input_shape, self.conv, self.hidden, self.audio_dim,
                                  self.init_mode, self.fan_in_power)
        if self.standardize_audio:
            scale = audio.std(axis=0)
            model.audio_mean = audio.mean(axis=0)
            model.audio_scale = np.where(scale > 0, scale, 1.0)
        result = train(model, images, encoded, audio, self._training_config(lr))
        self.model_ = result.model
        self.loss_history_ = result.history
        return self

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        return check_stacked(X, self.input_shape, self.audio_dim)
