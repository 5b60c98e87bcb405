"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError


def check_images(X, input_shape) -> np.ndarray:
    """Return ``X`` as a float64 ``(n, C, H, W)`` batch.

    Accepts an image batch of the right shape or a 2-D matrix holding one
    flattened ``(C, H, W)`` image per row.
    """
    input_shape = tuple(input_shape)
    X = np.asarray(X)
    if X.ndim == 4:
        if X.shape[1:] != input_shape:
            raise DimensionError(f"images have shape {X.shape[1:]}, expected {input_shape}")
        X = check_array(X.reshape(X.shape[0], -1), dtype=np.float64)
    else:
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != int(np.prod(input_shape)):
            raise DimensionError(
                f"rows have {X.shape[1]} values, expected {int(np.prod(input_shape))}")
    return X.reshape(-1, *input_shape)


def check_stacked(X, input_shape, audio_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Split rows of ``[flattened image, audio vector]`` into two arrays."""
    X = check_array(X, dtype=np.float64)
    d = int(np.prod(input_shape))
    if X.shape[1] != d + audio_dim:
        raise DimensionError(
            f"rows have {X.shape[1]} values, expected {d} image + {audio_dim} audio")
    return X[:, :d].reshape(-1, *input_shape), np.ascontiguousarray(X[:, d:])


def stack_face_audio(images, audio) -> np.ndarray:
    """Build the 2-D input of the fused estimator from images and audio rows."""
    images = np.asarray(images, dtype=np.float64)
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim == 1:
        audio = audio[None]
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] != audio.shape[0]:
        raise DimensionError(
            f"{images.shape[0]} images but {audio.shape[0]} audio vectors")
    return np.hstack([images.reshape(images.shape[0], -1), audio])


def check_audio_vectors(A, dim: int) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[None]
    A = check_array(A, dtype=np.float64)
    if A.shape[1] != dim:
        raise DimensionError(f"audio vectors have {A.shape[1]} entries, expected {dim}")
    return A
