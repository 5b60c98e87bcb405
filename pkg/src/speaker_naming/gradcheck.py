"""Finite-difference verification of every backward pass.

Each check compares analytic gradients with central differences and reports
the norm-wise relative error per parameter block.
"""

from __future__ import annotations

import numpy as np

from .layers import (ConvBlockParams, DenseParams, ModelParams, NetSpec,
                     backward_pass, conv_block_backward, conv_block_forward,
                     cross_entropy, dense_backward, dense_forward, forward,
                     init_params, one_hot, softmax)
from .tensor import finite_diff_grad, relative_error

REDUCED_FUSED = NetSpec((1, 10, 8), ((2, 3, 3),), (8, 12), n_classes=3, audio_dim=5)


def _randomize(params: ModelParams, rng, scale=0.5) -> ModelParams:
    return params.map(lambda a: rng.normal(0.0, scale, a.shape))


def check_conv_block(seed: int, h: float = 1e-5) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    x = rng.random((2, 6, 7))
    p = ConvBlockParams(rng.normal(0, 0.5, (3, 2, 3, 2)), rng.normal(0, 0.2, 3))
    r = rng.normal(size=conv_block_forward(x, p).shape)
    dx, g = conv_block_backward(r, x, p)

    def loss(xx, kk, bb):
        return float(np.sum(r * conv_block_forward(xx, ConvBlockParams(kk, bb))))

    return {
        "conv.kernels": relative_error(g.kernels, finite_diff_grad(lambda k: loss(x, k, p.bias), p.kernels, h)),
        "conv.bias": relative_error(g.bias, finite_diff_grad(lambda b: loss(x, p.kernels, b), p.bias, h)),
        "conv.input": relative_error(dx, finite_diff_grad(lambda xx: loss(xx, p.kernels, p.bias), x, h)),
    }


def check_dense(seed: int, h: float = 1e-5) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(3, 5))
    p = DenseParams(rng.normal(0, 0.5, (5, 4)), rng.normal(0, 0.2, 4))
    out = {}
    for relu in (True, False):
        r = rng.normal(size=(3, 4))
        y = dense_forward(f, p, relu)
        df, g = dense_backward(r, f, y, p, relu)

        def loss(ff, w, b):
            return float(np.sum(r * dense_forward(ff, DenseParams(w, b), relu)))

        tag = "dense" if relu else "logits"
        out[f"{tag}.weights"] = relative_error(g.weights, finite_diff_grad(lambda w: loss(f, w, p.bias), p.weights, h))
        out[f"{tag}.bias"] = relative_error(g.bias, finite_diff_grad(lambda b: loss(f, p.weights, b), p.bias, h))
        out[f"{tag}.input"] = relative_error(df, finite_diff_grad(lambda ff: loss(ff, p.weights, p.bias), f, h))
    return out


def check_softmax_ce(seed: int, h: float = 1e-5) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    z = rng.normal(size=5)
    t = one_hot([int(rng.integers(5))], 5)[0]
    analytic = softmax(z) - t
    numeric = finite_diff_grad(lambda zz: cross_entropy(softmax(zz), t), z, h)
    return {"softmax_ce.logits": relative_error(analytic, numeric)}


def check_network(seed: int, spec: NetSpec = REDUCED_FUSED, h: float = 1e-5,
                  batch: int = 2) -> dict[str, float]:
    """Every parameter block, the stacked feature input and the image input."""
    rng = np.random.default_rng(seed)
    params = _randomize(init_params(spec, seed), rng)
    images = rng.random((batch, *spec.input_shape))
    audio = rng.normal(size=(batch, spec.audio_dim)) if spec.audio_dim else None
    targets = one_hot(rng.integers(spec.n_classes, size=batch), spec.n_classes)
    _, trace = forward(params, images, audio)
    grads, d_feat, d_img = backward_pass(params, trace, targets, need_input_grad=True)

    report = {}
    for (name, arr), (_, g) in zip(params.named_arrays(), grads.named_arrays()):
        def loss(v, name=name):
            trial = params.copy()
            dict(trial.named_arrays())[name][...] = v
            return cross_entropy(forward(trial, images, audio)[0], targets)
        report[f"net.{name}"] = relative_error(g, finite_diff_grad(loss, arr, h))
    report["net.images"] = relative_error(
        d_img, finite_diff_grad(lambda x: cross_entropy(forward(params, x, audio)[0], targets), images, h))
    if audio is not None:
        report["net.audio"] = relative_error(
            d_feat[:, trace.flat_dim:],
            finite_diff_grad(lambda a: cross_entropy(forward(params, images, a)[0], targets), audio, h))
    return report


def run_suite(seeds=range(10), h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per check over all seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for check in (check_conv_block, check_dense, check_softmax_ce, check_network):
            for key, err in check(seed, h=h).items():
                worst[key] = max(worst.get(key, 0.0), err)
    return worst
