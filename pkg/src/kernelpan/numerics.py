"""Dense float32 tensors, stable activations and the kernel/feature product.

Tensors are plain row-major ``numpy.float32`` arrays. No views or implicit
broadcasting are relied upon beyond what each function documents.
"""

from __future__ import annotations

import json
import os
from typing import Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor dimensions do not agree."""


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    """Returns `x` as a C-contiguous float32 array, validating its rank."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected rank {ndim}, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"{name}: every dimension must be >= 1, got {arr.shape}")
    return arr


def mask_logits(kernels: np.ndarray, features: np.ndarray) -> np.ndarray:
    """1x1 convolution of per-image kernels with a feature map.

    Args:
        kernels: [B, N, C] kernel vectors.
        features: [B, C, H, W] feature map.

    Returns:
        [B, N, H, W] logits, ``out[b,n] = sum_c kernels[b,n,c] * features[b,c]``.
    """
    kernels = as_tensor(kernels, 3, "kernels")
    features = as_tensor(features, 4, "features")
    if kernels.shape[0] != features.shape[0]:
        raise ShapeError(
            f"batch axis mismatch: kernels axis 0 = {kernels.shape[0]}, "
            f"features axis 0 = {features.shape[0]}")
    if kernels.shape[2] != features.shape[1]:
        raise ShapeError(
            f"channel axis mismatch: kernels axis 2 = {kernels.shape[2]}, "
            f"features axis 1 = {features.shape[1]}")
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    out = np.matmul(kernels, flat)
    return out.reshape(b, kernels.shape[1], h, w)


def stable_sigmoid(x) -> np.ndarray:
    """Elementwise logistic function that never overflows."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def stable_softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def binarize(logits) -> np.ndarray:
    """1.0 where sigmoid(logit) > 0.5, i.e. logit > 0 (strict), else 0.0."""
    logits = np.asarray(logits)
    return (logits > 0).astype(DTYPE)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> np.ndarray:
    """Normalizes over the last axis, then applies a per-channel affine."""
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean(np.square(x - mean), axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * scale + shift


# Tensor files: a JSON manifest next to a raw little-endian float32 blob.


def save_tensor(path: str, tensor, name: str | None = None) -> str:
    """Writes `<path>` (manifest) and a sibling `.bin` file; returns the path."""
    tensor = np.ascontiguousarray(tensor, dtype="<f4")
    base = os.path.splitext(path)[0]
    bin_name = (name or os.path.basename(base)) + ".bin"
    directory = os.path.dirname(path) or "."
    with open(os.path.join(directory, bin_name), "wb") as f:
        f.write(tensor.tobytes(order="C"))
    manifest = {"dtype": "f32", "shape": list(tensor.shape), "file": bin_name}
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True)
    return path


def read_tensor_entry(directory: str, entry: dict) -> np.ndarray:
    """Loads one manifest entry ``{"dtype","shape","file"}`` from `directory`."""
    if entry.get("dtype") != "f32":
        raise ValueError(f"unsupported dtype {entry.get('dtype')!r}")
    shape = tuple(int(d) for d in entry["shape"])
    raw = np.fromfile(os.path.join(directory, entry["file"]), dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if raw.size != expected:
        raise ShapeError(
            f"{entry['file']}: holds {raw.size} floats, shape {list(shape)} "
            f"needs {expected}")
    return raw.astype(DTYPE).reshape(shape)


def load_tensor(path: str) -> np.ndarray:
    with open(path) as f:
        entry = json.load(f)
    return read_tensor_entry(os.path.dirname(path) or ".", entry)


def check_shape(arr: np.ndarray, shape: Sequence[int], name: str) -> None:
    if tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"{name}: expected shape {list(shape)}, got {list(arr.shape)}")
