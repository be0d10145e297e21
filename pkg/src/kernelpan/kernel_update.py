"""Kernel initialization and iterative kernel updates.

One update stage turns the previous mask logits and kernels into new kernels
and new predictions:

    group features -> gated kernel update -> kernel self-attention + FFN
    -> mask head (kernel FFN, then 1x1 conv with F) and class head.

Kernels are replicated per batch element; nothing is shared across images.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

from kernelpan import half
from kernelpan.numerics import (DTYPE, ShapeError, as_tensor, binarize,
                                layer_norm, mask_logits, read_tensor_entry,
                                relu, stable_sigmoid, stable_softmax)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    num_updates: int = 4
    num_kernels: int = 100
    channels: int = 64
    heads: int = 8
    num_classes: int = 19
    thing_classes: int = 8
    ffn_ratio: int = 4

    def __post_init__(self):
        if self.num_updates < 1:
            raise ConfigError("num_updates must be >= 1")
        if self.channels % self.heads:
            raise ConfigError(
                f"channels ({self.channels}) not divisible by heads ({self.heads})")
        if not 0 <= self.thing_classes <= self.num_classes:
            raise ConfigError("thing_classes must lie in [0, num_classes]")
        if self.num_kernels < self.num_classes - self.thing_classes:
            raise ConfigError("need at least one kernel per stuff class")

    @property
    def stuff_classes(self) -> int:
        return self.num_classes - self.thing_classes

    @property
    def ffn_channels(self) -> int:
        return self.ffn_ratio * self.channels


@dataclass(frozen=True)
class Linear:
    """Affine map ``x @ weight.T + bias`` over the last axis."""
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, n: int) -> "Linear":
        return cls(np.eye(n, dtype=DTYPE), np.zeros(n, DTYPE))

    @classmethod
    def zeros(cls, n_out: int, n_in: int) -> "Linear":
        return cls(np.zeros((n_out, n_in), DTYPE), np.zeros(n_out, DTYPE))

    @classmethod
    def random(cls, n_out: int, n_in: int, rng: np.random.Generator) -> "Linear":
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, (n_out, n_in)).astype(DTYPE)
        b = rng.uniform(-bound, bound, n_out).astype(DTYPE)
        return cls(w, b)


def ffn_stack(layers: Sequence[Linear], x: np.ndarray) -> np.ndarray:
    """Linear layers with ReLU between them (none after the last)."""
    for i, layer in enumerate(layers):
        x = layer(x)
        if i < len(layers) - 1:
            x = relu(x)
    return x


@dataclass(frozen=True)
class KernelUpdateWeights:
    psi1: Linear
    psi2: Linear
    gate_f: Linear
    gate_k: Linear
    attn_q: Linear
    attn_k: Linear
    attn_v: Linear
    attn_out: Linear
    ffn_in: Linear
    ffn_out: Linear
    norm1_scale: np.ndarray
    norm1_shift: np.ndarray
    norm2_scale: np.ndarray
    norm2_shift: np.ndarray
    head_mask: tuple[Linear, ...]
    # last layer emits num_classes + 1 logits; the extra one is "no object"
    head_cls: tuple[Linear, ...]


@dataclass(frozen=True)
class InitStageWeights:
    conv: Linear  # 1x1 conv with batch norm folded in
    kernels: np.ndarray  # [N, C]
    aux_conv: Linear | None = None
    aux_kernels: np.ndarray | None = None  # [num_classes, C]


def random_stage_weights(cfg: PipelineConfig,
                         rng: np.random.Generator) -> KernelUpdateWeights:
    c, c_ff = cfg.channels, cfg.ffn_channels
    lin = lambda o, i: Linear.random(o, i, rng)
    return KernelUpdateWeights(
        psi1=lin(c, c), psi2=lin(c, c), gate_f=lin(c, c), gate_k=lin(c, c),
        attn_q=lin(c, c), attn_k=lin(c, c), attn_v=lin(c, c), attn_out=lin(c, c),
        ffn_in=lin(c_ff, c), ffn_out=lin(c, c_ff),
        norm1_scale=np.ones(c, DTYPE), norm1_shift=np.zeros(c, DTYPE),
        norm2_scale=np.ones(c, DTYPE), norm2_shift=np.zeros(c, DTYPE),
        head_mask=(lin(c, c), lin(c, c)),
        head_cls=(lin(c, c), lin(cfg.num_classes + 1, c)),
    )


def random_init_weights(cfg: PipelineConfig, rng: np.random.Generator,
                        with_aux: bool = True) -> InitStageWeights:
    c = cfg.channels
    conv = Linear.random(c, c, rng)
    kernels = rng.normal(0.0, 1.0 / np.sqrt(c), (cfg.num_kernels, c)).astype(DTYPE)
    if not with_aux:
        return InitStageWeights(conv, kernels)
    aux_conv = Linear.random(c, c, rng)
    aux_kernels = rng.normal(0.0, 1.0 / np.sqrt(c),
                             (cfg.num_classes, c)).astype(DTYPE)
    return InitStageWeights(conv, kernels, aux_conv, aux_kernels)


def _conv1x1(layer: Linear, features: np.ndarray) -> np.ndarray:
    # [B,C,H,W] -> channels last -> affine -> back
    x = np.moveaxis(features, 1, -1)
    return np.ascontiguousarray(np.moveaxis(layer(x), -1, 1), dtype=DTYPE)


def init_stage(features: np.ndarray, w: InitStageWeights, with_aux: bool = False):
    """Produces the shared feature map F, initial masks M0 and optional M_seg.

    Returns:
        (F [B,C,H,W], M0 [B,N,H,W], M_seg [B,N_c,H,W] or None).
    """
    features = as_tensor(features, 4, "features")
    if features.shape[1] != w.conv.in_features:
        raise ShapeError(
            f"features axis 1 = {features.shape[1]}, conv expects {w.conv.in_features}")
    fmap = relu(_conv1x1(w.conv, features))
    batch = features.shape[0]
    k0 = np.broadcast_to(w.kernels, (batch,) + w.kernels.shape)
    m0 = mask_logits(k0, fmap)
    m_seg = None
    if with_aux:
        if w.aux_conv is None or w.aux_kernels is None:
            raise ConfigError("auxiliary head requested but weights are missing")
        aux_f = relu(_conv1x1(w.aux_conv, features))
        aux_k = np.broadcast_to(w.aux_kernels, (batch,) + w.aux_kernels.shape)
        m_seg = mask_logits(aux_k, aux_f)
    return fmap, m0, m_seg


@dataclass
class OverflowReport:
    """(b, n, c) triples whose binary16 group feature became infinite."""
    entries: list[tuple[int, int, int]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def assemble_group_features(mask_logits_prev: np.ndarray, features: np.ndarray,
                            mode: str = "normalized", precision: str = "f32",
                            chunk: int = 4096):
    """Pools features under each binarized mask.

    ``baseline`` sums features over the mask pixels. ``normalized`` divides the
    binary mask by its pixel count first, giving the masked mean; an empty mask
    yields a zero vector.

    With ``precision="f16sim"`` the computation follows a mixed-precision
    matmul: mask weights and features are rounded to binary16, products are
    accumulated in float32 sequentially over pixels in row-major order, and the
    result is stored as binary16. Entries that end up infinite are listed in
    the overflow report.

    Returns:
        (group features [B,N,C], OverflowReport)
    """
    masks = as_tensor(mask_logits_prev, 4, "mask_logits_prev")
    features = as_tensor(features, 4, "features")
    if masks.shape[0] != features.shape[0] or masks.shape[2:] != features.shape[2:]:
        raise ShapeError(
            f"mask logits {list(masks.shape)} and features {list(features.shape)} "
            "disagree on batch or spatial axes")
    if mode not in ("baseline", "normalized"):
        raise ValueError(f"unknown mode {mode!r}")
    b, n, h, w = masks.shape
    c = features.shape[1]
    s = binarize(masks).reshape(b, n, h * w)
    if mode == "normalized":
        area = s.sum(axis=-1, keepdims=True)
        s = np.divide(s, area, out=np.zeros_like(s), where=area > 0)
    f = features.reshape(b, c, h * w)

    if precision == "f32":
        out = np.matmul(s, np.swapaxes(f, 1, 2)).astype(DTYPE)
        return out, OverflowReport()
    if precision != "f16sim":
        raise ValueError(f"unknown precision {precision!r}")

    s16, _, _ = half.round_half(s)
    f16, _, _ = half.round_half(f)
    acc = np.zeros((b, n, c), DTYPE)
    # the cumulative sum runs strictly left to right, so the float32 order is fixed
    for start in range(0, h * w, chunk):
        stop = min(start + chunk, h * w)
        prod = s16[:, :, None, start:stop] * f16[:, None, :, start:stop]
        prod[..., 0] += acc
        acc = np.cumsum(prod, axis=-1, dtype=DTYPE)[..., -1]
    out, overflow, _ = half.round_half(acc)
    report = OverflowReport([tuple(int(i) for i in idx) for idx in np.argwhere(overflow)])
    return out, report


def adaptive_update(group_feats: np.ndarray, kernels_prev: np.ndarray,
                    w: KernelUpdateWeights) -> np.ndarray:
    group_feats = as_tensor(group_feats, 3, "group_feats")
    kernels_prev = as_tensor(kernels_prev, 3, "kernels_prev")
    if group_feats.shape != kernels_prev.shape:
        raise ShapeError(
            f"group features {list(group_feats.shape)} vs kernels "
            f"{list(kernels_prev.shape)}")
    if group_feats.shape[-1] != w.psi1.in_features:
        raise ShapeError(
            f"channel axis = {group_feats.shape[-1]}, weights expect {w.psi1.in_features}")
    a = w.psi1(group_feats)
    b = w.psi2(kernels_prev)
    joint = a * b
    gate_f = stable_sigmoid(w.gate_f(joint))
    gate_k = stable_sigmoid(w.gate_k(joint))
    return (gate_f * a + gate_k * b).astype(DTYPE)


def multi_head_attention(x: np.ndarray, w: KernelUpdateWeights,
                         heads: int) -> np.ndarray:
    bsz, n, c = x.shape
    if c % heads:
        raise ConfigError(f"channels ({c}) not divisible by heads ({heads})")
    d = c // heads

    def split(t):
        return t.reshape(bsz, n, heads, d).transpose(0, 2, 1, 3)

    q, k, v = split(w.attn_q(x)), split(w.attn_k(x)), split(w.attn_v(x))
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d)
    attn = stable_softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(bsz, n, c)
    return w.attn_out(ctx)


def kernel_interaction(kernels: np.ndarray, w: KernelUpdateWeights,
                       heads: int) -> np.ndarray:
    """Post-norm transformer block over the N kernels of each image."""
    kernels = as_tensor(kernels, 3, "kernels")
    x1 = layer_norm(kernels + multi_head_attention(kernels, w, heads),
                    w.norm1_scale, w.norm1_shift)
    hidden = relu(w.ffn_in(x1))
    out = layer_norm(x1 + w.ffn_out(hidden), w.norm2_scale, w.norm2_shift)
    return out.astype(DTYPE)


class StageOutput(NamedTuple):
    masks: np.ndarray  # [B, N, H, W] logits
    probs: np.ndarray  # [B, N, num_classes]
    class_logits: np.ndarray  # [B, N, num_classes + 1]


def predict_heads(kernels: np.ndarray, features: np.ndarray,
                  w: KernelUpdateWeights) -> StageOutput:
    """Mask logits and class probabilities from updated kernels.

    Class probabilities are a softmax over the real classes only; the no-object
    logit is kept in ``class_logits`` for training.
    """
    kernels = as_tensor(kernels, 3, "kernels")
    mask_kernels = ffn_stack(w.head_mask, kernels).astype(DTYPE)
    masks = mask_logits(mask_kernels, features)
    logits = ffn_stack(w.head_cls, kernels).astype(DTYPE)
    probs = stable_softmax(logits[..., :-1], axis=-1).astype(DTYPE)
    return StageOutput(masks, probs, logits)


@dataclass
class PipelineOutput:
    features: np.ndarray
    initial_masks: np.ndarray
    stages: list[StageOutput]
    aux_seg: np.ndarray | None = None
    kernels: list[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> StageOutput:
        return self.stages[-1]


def run_pipeline(features: np.ndarray, init_weights: InitStageWeights,
                 stage_weights: Sequence[KernelUpdateWeights], cfg: PipelineConfig,
                 with_aux: bool = False) -> PipelineOutput:
    """Initial masks followed by ``cfg.num_updates`` kernel update stages.

    Every stage's prediction is kept (training supervises all of them); the last
    one is the inference output.
    """
    if len(stage_weights) != cfg.num_updates:
        raise ConfigError(
            f"got {len(stage_weights)} stage weights for {cfg.num_updates} updates")
    fmap, masks, m_seg = init_stage(features, init_weights, with_aux)
    kernels = np.repeat(init_weights.kernels[None], fmap.shape[0], axis=0)
    out = PipelineOutput(fmap, masks, [], m_seg)
    for w in stage_weights:
        group, _ = assemble_group_features(masks, fmap, "normalized", "f32")
        kernels = adaptive_update(group, kernels, w)
        kernels = kernel_interaction(kernels, w, cfg.heads)
        stage = predict_heads(kernels, fmap, w)
        out.stages.append(stage)
        out.kernels.append(kernels)
        masks = stage.masks
    return out


# Weight bundles: <dir>/config.json + <dir>/manifest.json + one .bin per tensor.

_MATRIX_FIELDS = ("psi1", "psi2", "gate_f", "gate_k", "attn_q", "attn_k",
                  "attn_v", "attn_out", "ffn_in", "ffn_out")
_VECTOR_FIELDS = ("norm1_scale", "norm1_shift", "norm2_scale", "norm2_shift")


def _flatten(init: InitStageWeights, stages: Sequence[KernelUpdateWeights]):
    named = {"init.conv.weight": init.conv.weight, "init.conv.bias": init.conv.bias,
             "init.kernels": init.kernels}
    if init.aux_conv is not None:
        named["init.aux_conv.weight"] = init.aux_conv.weight
        named["init.aux_conv.bias"] = init.aux_conv.bias
        named["init.aux_kernels"] = init.aux_kernels
    for i, st in enumerate(stages):
        p = f"stage{i}."
        for name in _MATRIX_FIELDS:
            lin = getattr(st, name)
            named[p + name + ".weight"] = lin.weight
            named[p + name + ".bias"] = lin.bias
        for name in _VECTOR_FIELDS:
            named[p + name] = getattr(st, name)
        for head in ("head_mask", "head_cls"):
            for j, lin in enumerate(getattr(st, head)):
                named[f"{p}{head}.{j}.weight"] = lin.weight
                named[f"{p}{head}.{j}.bias"] = lin.bias
    return named


def save_bundle(directory: str, cfg: PipelineConfig, init: InitStageWeights,
                stages: Sequence[KernelUpdateWeights]) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {}
    for name, arr in _flatten(init, stages).items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fname = name + ".bin"
        with open(os.path.join(directory, fname), "wb") as f:
            f.write(arr.tobytes())
        manifest[name] = {"dtype": "f32", "shape": list(arr.shape), "file": fname}
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump({"tensors": manifest}, f, indent=1, sort_keys=True)
    with open(os.path.join(directory, "config.json"), "w") as f:
        json.dump({fl.name: getattr(cfg, fl.name) for fl in fields(cfg)}, f,
                  indent=1, sort_keys=True)


def _expected_shapes(cfg: PipelineConfig, entries: dict) -> dict:
    c, c_ff, n = cfg.channels, cfg.ffn_channels, cfg.num_kernels
    exp = {"init.conv.weight": [c, c], "init.conv.bias": [c], "init.kernels": [n, c]}
    if "init.aux_kernels" in entries:
        exp.update({"init.aux_conv.weight": [c, c], "init.aux_conv.bias": [c],
                    "init.aux_kernels": [cfg.num_classes, c]})
    for i in range(cfg.num_updates):
        p = f"stage{i}."
        for name in _MATRIX_FIELDS:
            o, k = {"ffn_in": (c_ff, c), "ffn_out": (c, c_ff)}.get(name, (c, c))
            exp[p + name + ".weight"] = [o, k]
            exp[p + name + ".bias"] = [o]
        for name in _VECTOR_FIELDS:
            exp[p + name] = [c]
    return exp


def _head_layers(entries, prefix, in_dim, out_dim):
    depth = 0
    while f"{prefix}.{depth}.weight" in entries:
        depth += 1
    if depth == 0:
        raise ShapeError(f"{prefix}: no layers in bundle")
    dims = []
    for j in range(depth):
        o, i = entries[f"{prefix}.{j}.weight"]["shape"]
        dims.append((o, i))
    if dims[0][1] != in_dim or dims[-1][0] != out_dim:
        raise ShapeError(f"{prefix}: maps {dims[0][1]} -> {dims[-1][0]}, "
                         f"expected {in_dim} -> {out_dim}")
    for (o_prev, _), (_, i_next) in zip(dims, dims[1:]):
        if o_prev != i_next:
            raise ShapeError(f"{prefix}: inner widths {o_prev} and {i_next} disagree")
    for j, (o, _) in enumerate(dims):
        if entries[f"{prefix}.{j}.bias"]["shape"] != [o]:
            raise ShapeError(f"{prefix}.{j}.bias: expected shape [{o}]")
    return depth


def load_bundle(directory: str):
    """Loads and validates a weight bundle.

    Every tensor shape is checked against the config before any data is read.

    Returns:
        (PipelineConfig, InitStageWeights, list of KernelUpdateWeights)
    """
    with open(os.path.join(directory, "config.json")) as f:
        cfg = PipelineConfig(**json.load(f))
    with open(os.path.join(directory, "manifest.json")) as f:
        entries = json.load(f)["tensors"]
    for name, shape in _expected_shapes(cfg, entries).items():
        if name not in entries:
            raise ShapeError(f"bundle is missing tensor {name}")
        if list(entries[name]["shape"]) != shape:
            raise ShapeError(
                f"{name}: expected shape {shape}, got {entries[name]['shape']}")
    depths = []
    for i in range(cfg.num_updates):
        depths.append((
            _head_layers(entries, f"stage{i}.head_mask", cfg.channels, cfg.channels),
            _head_layers(entries, f"stage{i}.head_cls", cfg.channels,
                         cfg.num_classes + 1)))

    get = lambda name: read_tensor_entry(directory, entries[name])
    lin = lambda p: Linear(get(p + ".weight"), get(p + ".bias"))
    init = InitStageWeights(lin("init.conv"), get("init.kernels"))
    if "init.aux_kernels" in entries:
        init = InitStageWeights(init.conv, init.kernels, lin("init.aux_conv"),
                                get("init.aux_kernels"))
    stages = []
    for i, (dm, dc) in enumerate(depths):
        p = f"stage{i}."
        kw = {name: lin(p + name) for name in _MATRIX_FIELDS}
        kw.update({name: get(p + name) for name in _VECTOR_FIELDS})
        kw["head_mask"] = tuple(lin(f"{p}head_mask.{j}") for j in range(dm))
        kw["head_cls"] = tuple(lin(f"{p}head_cls.{j}") for j in range(dc))
        stages.append(KernelUpdateWeights(**kw))
    return cfg, init, stages
