"""Forward and reverse-mode layers for the convolutional speaker networks.

A network is a stack of convolution blocks followed by dense layers. Every
convolution block computes ``relu(avgpool2(relu(conv(x) + b)))`` with a valid
(unpadded, stride 1) correlation. The flattened output of the last block may be
concatenated with an audio feature vector before the dense stack. Every dense
layer but the last applies a rectifier; the last one produces logits for the
softmax.

All batched functions take a leading batch axis. Images are ``(B, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConsistencyError, DimensionError, LabelError
from .tensor import Tensor

CE_FLOOR = 1e-12
BIAS_INIT = 0.01


@dataclass
class ConvBlockParams:
    kernels: Tensor  # (out_maps, in_maps, kh, kw)
    bias: Tensor  # (out_maps,)

    def __post_init__(self):
        if self.kernels.ndim != 4 or min(self.kernels.shape) <= 0:
            raise DimensionError(
                f"kernels must be a positive 4-D tensor, got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.kernels.shape[0]} output maps")

    def arrays(self):
        return {"kernels": self.kernels, "bias": self.bias}


@dataclass
class DenseParams:
    weights: Tensor  # (in_dim, out_dim)
    bias: Tensor  # (out_dim,)

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise DimensionError(
                f"weights must be 2-D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[1]} outputs")

    def arrays(self):
        return {"weights": self.weights, "bias": self.bias}


Block = ConvBlockParams | DenseParams


@dataclass
class ModelParams:
    """Ordered parameter blocks: convolution blocks first, then dense layers.

    The same container holds gradients (``GradientSet``) and optimizer state.
    """

    names: list[str]
    blocks: list[Block]

    def __post_init__(self):
        if len(self.names) != len(self.blocks):
            raise ConsistencyError("names and blocks differ in length")
        seen_dense = False
        for name, block in zip(self.names, self.blocks):
            if isinstance(block, DenseParams):
                seen_dense = True
            elif seen_dense:
                raise ConsistencyError(
                    f"convolution block {name!r} follows a dense layer")

    def __len__(self):
        return len(self.blocks)

    def __iter__(self) -> Iterator[tuple[str, Block]]:
        return iter(zip(self.names, self.blocks))

    @property
    def conv_blocks(self) -> list[ConvBlockParams]:
        return [b for b in self.blocks if isinstance(b, ConvBlockParams)]

    @property
    def dense_blocks(self) -> list[DenseParams]:
        return [b for b in self.blocks if isinstance(b, DenseParams)]

    def named_arrays(self) -> list[tuple[str, Tensor]]:
        """Flat ``(layer.field, array)`` list in storage order."""
        out = []
        for name, block in self:
            for key, arr in block.arrays().items():
                out.append((f"{name}.{key}", arr))
        return out

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, a.shape) for n, a in self.named_arrays()]

    def map(self, fn) -> "ModelParams":
        """New container with ``fn`` applied to every array."""
        blocks = []
        for block in self.blocks:
            arrays = {k: fn(v) for k, v in block.arrays().items()}
            blocks.append(type(block)(**arrays))
        return ModelParams(list(self.names), blocks)

    def zip_map(self, other: "ModelParams", fn) -> "ModelParams":
        check_congruent(self, other)
        blocks = []
        for mine, theirs in zip(self.blocks, other.blocks):
            a, b = mine.arrays(), theirs.arrays()
            blocks.append(type(mine)(**{k: fn(a[k], b[k]) for k in a}))
        return ModelParams(list(self.names), blocks)

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def count(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


GradientSet = ModelParams


def check_congruent(a: ModelParams, b: ModelParams) -> None:
    if a.shapes() != b.shapes():
        raise ConsistencyError(
            f"parameter sets are not shape-congruent: {a.shapes()} vs {b.shapes()}")


@dataclass(frozen=True)
class NetSpec:
    """Architecture description.

    Attributes:
        input_shape: ``(channels, height, width)`` of the image input.
        conv: one ``(out_maps, kh, kw)`` triple per convolution block.
        hidden: widths of the rectified dense layers.
        n_classes: width of the softmax layer.
        audio_dim: length of the audio vector stacked onto the flattened
            convolution output; 0 for a face-only network.
    """

    input_shape: tuple[int, int, int]
    conv: tuple[tuple[int, int, int], ...]
    hidden: tuple[int, ...]
    n_classes: int
    audio_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv", tuple(tuple(int(v) for v in c) for c in self.conv))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        self.validate()

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise DimensionError(f"bad input shape {self.input_shape}")
        if self.n_classes < 2:
            raise DimensionError("need at least two classes")
        if self.audio_dim < 0:
            raise DimensionError("audio_dim must be non-negative")
        for c in self.conv:
            if len(c) != 3 or min(c) <= 0:
                raise DimensionError(f"bad convolution spec {c}")
        if not self.hidden:
            raise DimensionError("need at least one hidden dense layer")
        # widths must strictly grow between consecutive hidden layers
        for a, b in zip(self.hidden, self.hidden[1:]):
            if not a < b:
                raise DimensionError(
                    f"hidden widths must strictly increase, got {self.hidden}")
        self.feature_shapes()

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """Map shapes after each convolution block, input first."""
        shapes = [self.input_shape]
        c, h, w = self.input_shape
        for maps, kh, kw in self.conv:
            if kh > h or kw > w:
                raise DimensionError(
                    f"kernel {kh}x{kw} larger than input {h}x{w}")
            h, w = (h - kh + 1) // 2, (w - kw + 1) // 2
            if h <= 0 or w <= 0:
                raise DimensionError("feature map vanishes after pooling")
            c = maps
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.feature_shapes()[-1]))

    @property
    def fused_dim(self) -> int:
        return self.flat_dim + self.audio_dim

    def dense_dims(self) -> list[tuple[int, int]]:
        dims = [self.fused_dim, *self.hidden, self.n_classes]
        return list(zip(dims[:-1], dims[1:]))

    def layer_names(self) -> list[str]:
        names = [f"conv{i + 1}" for i in range(len(self.conv))]
        names += [f"dense{i + 1}" for i in range(len(self.hidden))]
        return names + ["softmax"]


def _truncated_normal(rng: np.random.Generator, shape) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 1.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 1.0
    return out


def init_weights(rng: np.random.Generator, shape, fan_in: int,
                 mode: str = "gaussian", fan_in_power: float = 1.0) -> np.ndarray:
    """Draw weights in [-1, 1] and divide by the fan-in of the unit they feed.

    ``mode="gaussian"`` draws a standard normal truncated to [-1, 1];
    ``mode="uniform"`` draws uniformly from [-1, 1].
    """
    if mode == "gaussian":
        raw = _truncated_normal(rng, shape)
    elif mode == "uniform":
        raw = rng.uniform(-1.0, 1.0, size=shape)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return raw / float(fan_in) ** fan_in_power


def init_params(spec: NetSpec, seed: int | np.random.Generator = 0,
                mode: str = "gaussian", fan_in_power: float = 1.0) -> ModelParams:
    """Initialize every block of ``spec``; biases are exactly 0.01."""
    rng = np.random.default_rng(seed)
    blocks: list[Block] = []
    in_maps = spec.input_shape[0]
    for maps, kh, kw in spec.conv:
        fan_in = in_maps * kh * kw
        kernels = init_weights(rng, (maps, in_maps, kh, kw), fan_in, mode, fan_in_power)
        blocks.append(ConvBlockParams(kernels, np.full(maps, BIAS_INIT)))
        in_maps = maps
    for d_in, d_out in spec.dense_dims():
        weights = init_weights(rng, (d_in, d_out), d_in, mode, fan_in_power)
        blocks.append(DenseParams(weights, np.full(d_out, BIAS_INIT)))
    return ModelParams(spec.layer_names(), blocks)


# ---------------------------------------------------------------------------
# convolution block
# ---------------------------------------------------------------------------

def _as_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C,H,W) or (B,C,H,W) input, got {x.shape}")


# Internally maps are channel-last (B, H, W, C) so im2col rows and matmul
# outputs need no transposes; the public layout is (B, C, H, W).

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, h, w, c = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (b, ho, wo, c, kh, kw)
    return win.reshape(b * ho * wo, c * kh * kw)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int) -> np.ndarray:
    b, h, w, c = x_shape
    ho, wo = h - kh + 1, w - kw + 1
    dcols = dcols.reshape(b, ho, wo, c, kh, kw)
    dx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + ho, j:j + wo, :] += dcols[..., i, j]
    return dx


def avg_pool2(a: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 mean over the last two axes; odd edges are dropped."""
    *lead, h, w = a.shape
    hp, wp = h // 2, w // 2
    a = a[..., :2 * hp, :2 * wp]
    return a.reshape(*lead, hp, 2, wp, 2).mean(axis=(-3, -1))


def _pool_hw(a: np.ndarray) -> np.ndarray:
    b, h, w, c = a.shape
    hp, wp = h // 2, w // 2
    a = a[:, :2 * hp, :2 * wp, :]
    return a.reshape(b, hp, 2, wp, 2, c).mean(axis=(2, 4))


def _pool_hw_backward(dp: np.ndarray, in_shape) -> np.ndarray:
    b, hp, wp, c = dp.shape
    da = np.zeros(in_shape)
    view = da[:, :2 * hp, :2 * wp, :].reshape(b, hp, 2, wp, 2, c)
    view[...] = 0.25 * dp[:, :, None, :, None, :]
    return da


def _conv_block(x: np.ndarray, p: ConvBlockParams):
    """Channel-last block forward on ``(B, H, W, C)`` input."""
    b, h, w, c = x.shape
    maps, in_maps, kh, kw = p.kernels.shape
    if c != in_maps:
        raise DimensionError(
            f"input has {c} channels but kernels expect {in_maps}")
    if kh > h or kw > w:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = h - kh + 1, w - kw + 1
    cols = _im2col(x, kh, kw)
    z = (cols @ p.kernels.reshape(maps, -1).T + p.bias).reshape(b, ho, wo, maps)
    pooled = _pool_hw(np.maximum(z, 0.0))
    y = np.maximum(pooled, 0.0)
    cache = {"x_shape": x.shape, "cols": cols, "z_pos": z > 0,
             "pooled_pos": pooled > 0}
    return y, cache


def _conv_block_backward(dy, cache, p, need_input_grad):
    maps, in_maps, kh, kw = p.kernels.shape
    dp = dy * cache["pooled_pos"]
    z_pos = cache["z_pos"]
    dz = _pool_hw_backward(dp, z_pos.shape) * z_pos
    dz2 = dz.reshape(-1, maps)
    d_kernels = (dz2.T @ cache["cols"]).reshape(p.kernels.shape)
    d_bias = dz2.sum(axis=0)
    dx = None
    if need_input_grad:
        dcols = dz2 @ p.kernels.reshape(maps, -1)
        dx = _col2im(dcols, cache["x_shape"], kh, kw)
    return dx, ConvBlockParams(d_kernels, d_bias)


def _to_hwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_chw(x):
    return x.transpose(0, 3, 1, 2)


def conv_block_forward(x: Tensor, p: ConvBlockParams) -> Tensor:
    """``relu(avgpool2(relu(valid_corr(x, K) + b)))`` for one image or a batch."""
    xb, single = _as_batch(x)
    y, _ = _conv_block(_to_hwc(xb), p)
    y = np.ascontiguousarray(_to_chw(y))
    return y[0] if single else y


def conv_block_backward(dy: Tensor, x: Tensor, p: ConvBlockParams):
    """Gradients of ``sum(dy * conv_block_forward(x, p))``.

    Returns ``(dx, ConvBlockParams)`` in the public ``(C, H, W)`` layout.
    """
    xb, single = _as_batch(x)
    dyb, _ = _as_batch(dy)
    _, cache = _conv_block(_to_hwc(xb), p)
    dx, grads = _conv_block_backward(_to_hwc(dyb), cache, p, True)
    dx = np.ascontiguousarray(_to_chw(dx))
    return (dx[0] if single else dx), grads


# ---------------------------------------------------------------------------
# dense layers, softmax, loss
# ---------------------------------------------------------------------------

def dense_forward(f: Tensor, p: DenseParams, apply_nonlinearity: bool = True) -> Tensor:
    """``relu(f @ W + b)``, or the affine map alone for the logit layer."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != p.weights.shape[0]:
        raise DimensionError(
            f"input dimension {f.shape[-1]} does not match weights {p.weights.shape}")
    z = f @ p.weights + p.bias
    return np.maximum(z, 0.0) if apply_nonlinearity else z


def dense_backward(dy: np.ndarray, f: np.ndarray, out: np.ndarray,
                   p: DenseParams, apply_nonlinearity: bool):
    """Batched dense gradients; ``out`` is the forward output of the layer."""
    dz = dy * (out > 0) if apply_nonlinearity else dy
    d_weights = f.T @ dz
    d_bias = dz.sum(axis=0)
    df = dz @ p.weights.T
    return df, DenseParams(d_weights, d_bias)


def softmax(z: Tensor) -> Tensor:
    """Softmax along the last axis, computed after subtracting the row max."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_one_hot(t: np.ndarray) -> None:
    ok = np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=-1) == 1)
    if not ok:
        raise LabelError("target is not one-hot")


def cross_entropy(p: Tensor, t: Tensor) -> float:
    """Negative log-likelihood ``-sum(t * ln(max(p, 1e-12)))``.

    For a batch (2-D input) the mean over rows is returned.
    """
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"probabilities {p.shape} vs targets {t.shape}")
    _check_one_hot(t)
    losses = -np.sum(t * np.log(np.maximum(p, CE_FLOOR)), axis=-1)
    return float(np.mean(losses))


def one_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# whole network
# ---------------------------------------------------------------------------

@dataclass
class ActivationTrace:
    """Everything a forward pass leaves behind for ``backward_pass``."""

    params_id: int
    shapes: list
    conv_caches: list[dict] = field(default_factory=list)
    dense_inputs: list[np.ndarray] = field(default_factory=list)
    dense_outputs: list[np.ndarray] = field(default_factory=list)
    flat_dim: int = 0
    probs: np.ndarray | None = None

    @property
    def n_layers(self) -> int:
        return len(self.conv_caches) + len(self.dense_inputs)


def conv_features(params: ModelParams, images: np.ndarray,
                  trace: ActivationTrace | None = None) -> np.ndarray:
    """Flattened output of the convolution stack, shape ``(B, flat_dim)``."""
    x = _to_hwc(images)
    for block in params.conv_blocks:
        x, cache = _conv_block(x, block)
        if trace is not None:
            trace.conv_caches.append(cache)
    # flatten in (C, H, W) order
    return np.ascontiguousarray(_to_chw(x)).reshape(x.shape[0], -1)


def _audio_block(conv_flat: np.ndarray, audio, params: ModelParams):
    d_in = params.dense_blocks[0].weights.shape[0]
    audio_dim = d_in - conv_flat.shape[1]
    if audio_dim < 0:
        raise DimensionError(
            f"convolution output {conv_flat.shape[1]} exceeds dense input {d_in}")
    if audio_dim == 0:
        if audio is not None and np.asarray(audio).size:
            raise DimensionError("network takes no audio input")
        return None
    if audio is None:
        raise DimensionError(f"network expects {audio_dim}-D audio input")
    audio = np.asarray(audio, dtype=np.float64).reshape(conv_flat.shape[0], -1)
    if audio.shape[1] != audio_dim:
        raise DimensionError(
            f"audio has {audio.shape[1]} entries, network expects {audio_dim}")
    return audio


def stack_inputs(conv_flat: np.ndarray, audio: np.ndarray | None,
                 params: ModelParams) -> np.ndarray:
    """Concatenate convolution features and audio into the dense input."""
    audio = _audio_block(conv_flat, audio, params)
    if audio is None:
        return conv_flat
    return np.concatenate([conv_flat, audio], axis=1)


def fused_dense_forward(conv_flat: np.ndarray, audio: np.ndarray | None,
                        p: DenseParams, apply_nonlinearity: bool = True) -> np.ndarray:
    """First dense layer over ``[conv_flat, audio]`` without concatenating.

    The image and audio rows of ``W`` are applied as two products, so zero audio
    rows leave the image path bit-identical to a network without audio.
    """
    d = conv_flat.shape[1]
    z = conv_flat @ p.weights[:d]
    if audio is not None:
        z = z + audio @ p.weights[d:]
    z = z + p.bias
    return np.maximum(z, 0.0) if apply_nonlinearity else z


def dense_stack(params: ModelParams, conv_flat: np.ndarray, audio=None,
                trace: ActivationTrace | None = None,
                stop_after: int | None = None) -> np.ndarray:
    """Run the dense layers; ``stop_after=k`` returns the output of layer ``k``."""
    audio = _audio_block(conv_flat, audio, params)
    dense = params.dense_blocks
    h = None
    for i, block in enumerate(dense):
        last = i == len(dense) - 1
        if i == 0:
            out = fused_dense_forward(conv_flat, audio, block, not last)
            if trace is not None:
                trace.dense_inputs.append(
                    conv_flat if audio is None else np.concatenate([conv_flat, audio], axis=1))
        else:
            out = dense_forward(h, block, apply_nonlinearity=not last)
            if trace is not None:
                trace.dense_inputs.append(h)
        if trace is not None:
            trace.dense_outputs.append(out)
        h = out
        if stop_after is not None and i + 1 == stop_after:
            return h
    return h


def forward(params: ModelParams, images: np.ndarray,
            audio: np.ndarray | None = None):
    """Batched forward pass. Returns ``(probabilities, ActivationTrace)``."""
    images, _ = _as_batch(images)
    trace = ActivationTrace(params_id=id(params), shapes=params.shapes())
    flat = conv_features(params, images, trace)
    trace.flat_dim = flat.shape[1]
    logits = dense_stack(params, flat, audio, trace)
    trace.probs = softmax(logits)
    return trace.probs, trace


def backward_pass(params: ModelParams, trace: ActivationTrace, t: np.ndarray,
                  need_input_grad: bool = False):
    """Gradients of the mean cross-entropy over the batch in ``trace``.

    Returns ``(GradientSet, d_features)`` where ``d_features`` is the gradient
    with respect to the stacked dense input (convolution features plus audio).
    With ``need_input_grad`` the image gradient is returned as a third item.
    """
    if trace.params_id != id(params) or trace.shapes != params.shapes():
        raise ConsistencyError("trace was not produced by these parameters")
    if trace.n_layers != len(params):
        raise ConsistencyError(
            f"trace has {trace.n_layers} layers, model has {len(params)}")
    t = np.asarray(t, dtype=np.float64).reshape(trace.probs.shape)
    _check_one_hot(t)
    batch = t.shape[0]
    grad = (trace.probs - t) / batch

    dense = params.dense_blocks
    dense_grads = [None] * len(dense)
    for i in range(len(dense) - 1, -1, -1):
        last = i == len(dense) - 1
        grad, dense_grads[i] = dense_backward(
            grad, trace.dense_inputs[i], trace.dense_outputs[i], dense[i],
            apply_nonlinearity=not last)
    d_features = grad

    convs = params.conv_blocks
    conv_grads = [None] * len(convs)
    dx = None
    if convs:
        _, hp, wp, maps = trace.conv_caches[-1]["pooled_pos"].shape
        dx = d_features[:, :trace.flat_dim].reshape(batch, maps, hp, wp)
        dx = _to_hwc(dx)
        for i in range(len(convs) - 1, -1, -1):
            want = i > 0 or need_input_grad
            dx, conv_grads[i] = _conv_block_backward(
                dx, trace.conv_caches[i], convs[i], want)
        if dx is not None:
            dx = np.ascontiguousarray(_to_chw(dx))
    grads = ModelParams(list(params.names), conv_grads + dense_grads)
    if need_input_grad:
        return grads, d_features, dx
    return grads, d_features


def loss_and_grads(params: ModelParams, images, audio, targets):
    probs, trace = forward(params, images, audio)
    loss = cross_entropy(probs, targets)
    grads, _ = backward_pass(params, trace, targets)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
    """Plain gradient step ``theta - lr * g``; returns a new container."""
    return params.zip_map(grads, lambda p, g: p - lr * g)


class MomentumSGD:
    """SGD with classical momentum; ``momentum=0`` reduces to ``sgd_step``."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: ModelParams | None = None

    def update_(self, params: ModelParams, grads: GradientSet) -> None:
        """In-place variant of :meth:`step`."""
        check_congruent(params, grads)
        if self.velocity is None:
            self.velocity = grads.map(np.zeros_like)
        for (_, p), (_, g), (_, v) in zip(params.named_arrays(), grads.named_arrays(),
                                          self.velocity.named_arrays()):
            if self.momentum:
                v *= self.momentum
                v += g
                p -= self.lr * v
            else:
                p -= self.lr * g

    def step(self, params: ModelParams, grads: GradientSet) -> ModelParams:
        out = params.copy()
        self.update_(out, grads)
        return out


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, b1, b2, step, eps):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) + eps)


class Adam:
    """Adam with bias correction; moment estimates are kept per array."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: ModelParams | None = None
        self.v: ModelParams | None = None

    def update_(self, params: ModelParams, grads: GradientSet) -> None:
        """In-place variant of :meth:`step`."""
        check_congruent(params, grads)
        if self.m is None:
            self.m = grads.map(np.zeros_like)
            self.v = grads.map(np.zeros_like)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for (_, p), (_, g), (_, m), (_, v) in zip(
                params.named_arrays(), grads.named_arrays(),
                self.m.named_arrays(), self.v.named_arrays()):
            _adam_kernel(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                         m.reshape(-1), v.reshape(-1), b1, b2, step, self.eps)

    def step(self, params: ModelParams, grads: GradientSet) -> ModelParams:
        out = params.copy()
        self.update_(out, grads)
        return out
