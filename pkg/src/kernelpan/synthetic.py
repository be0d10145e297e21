"""Synthetic scenes with features for which ideal kernels are known.

Stuff classes fill horizontal bands; thing shapes (rectangles and ellipses)
are painted on top without overlapping each other. Every segment owns one
feature channel: the feature at a pixel is ``scale * e_k`` for its segment
``k`` plus Gaussian noise, so the kernel ``e_n - sum_{m != n} e_m`` separates
segment ``n`` from the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kernelpan.kernel_update import (DTYPE, InitStageWeights, KernelUpdateWeights,
                                     Linear, PipelineConfig, adaptive_update,
                                     kernel_interaction)
from kernelpan.postprocess import PostprocConfig
from kernelpan.scene import GroundTruthScene, Segment

SHAPES = ("rect", "ellipse")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 64
    width: int = 128
    num_things: int = 4
    num_stuff: int = 2
    thing_classes: int = 3  # thing class ids are 0..thing_classes-1
    shapes: tuple[str, ...] = SHAPES
    seed: int = 0
    channels: int = 16
    noise: float = 0.0
    embed_scale: float = 6.0
    max_retries: int = 200

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError("scene must be at least 2x2")
        if self.num_things < 0 or self.num_stuff < 0:
            raise ValueError("segment counts must be nonnegative")
        if self.num_things + self.num_stuff < 1:
            raise ValueError("need at least one segment")
        if self.num_things and self.thing_classes < 1:
            raise ValueError("things need at least one thing class")
        if self.num_stuff > self.height:
            raise ValueError("more stuff bands than rows")
        if self.channels < self.num_things + self.num_stuff:
            raise ValueError(
                f"{self.channels} channels cannot embed "
                f"{self.num_things + self.num_stuff} segments")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(bad)}; choose from {SHAPES}")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        object.__setattr__(self, "shapes", tuple(self.shapes))

    @property
    def num_classes(self) -> int:
        return self.thing_classes + self.num_stuff

    def class_table(self) -> tuple[bool, ...]:
        return (True,) * self.thing_classes + (False,) * self.num_stuff


def _shape_mask(kind, top, left, h, w, height, width):
    mask = np.zeros((height, width), bool)
    if kind == "rect":
        mask[top:top + h, left:left + w] = True
        return mask
    rr, cc = np.mgrid[0:h, 0:w]
    ry, rx = h / 2.0, w / 2.0
    inside = ((rr + 0.5 - ry) / ry) ** 2 + ((cc + 0.5 - rx) / rx) ** 2 <= 1.0
    mask[top:top + h, left:left + w] = inside
    return mask


def generate_synthetic_scene(spec: SyntheticSceneSpec):
    """Builds a scene and its [C, H, W] float32 features; deterministic per seed.

    Segments are listed things first, then stuff bands top to bottom.

    Raises:
        GenerationError: when a shape cannot be placed within the retry budget.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    bounds = np.linspace(0, h, spec.num_stuff + 1).round().astype(int)
    bands = []
    for j in range(spec.num_stuff):
        band = np.zeros((h, w), bool)
        band[bounds[j]:bounds[j + 1]] = True
        bands.append(band)

    taken = np.zeros((h, w), bool)
    things = []
    lo = max(2, min(h, w) // 8)
    hi = max(lo + 1, min(h, w) // 3)
    for _ in range(spec.num_things):
        for _attempt in range(spec.max_retries):
            sh = int(rng.integers(lo, hi + 1))
            sw = int(rng.integers(lo, hi + 1))
            sh, sw = min(sh, h), min(sw, w)
            top = int(rng.integers(0, h - sh + 1))
            left = int(rng.integers(0, w - sw + 1))
            kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
            mask = _shape_mask(kind, top, left, sh, sw, h, w)
            if not mask.any() or (mask & taken).any():
                continue
            if any(not (b & ~(taken | mask)).any() for b in bands):
                continue  # would swallow a whole stuff band
            break
        else:
            raise GenerationError(
                f"could not place thing {len(things)} after {spec.max_retries} tries")
        taken |= mask
        things.append(Segment(int(rng.integers(spec.thing_classes)), True, mask))

    stuff = [Segment(spec.thing_classes + j, False, b & ~taken)
             for j, b in enumerate(bands)]
    scene = GroundTruthScene(h, w, tuple(things + stuff))

    owner = scene.owner_map()
    emb = np.zeros((spec.channels, h, w), np.float64)
    rows, cols = np.nonzero(owner >= 0)
    emb[owner[rows, cols], rows, cols] = spec.embed_scale
    noise = rng.standard_normal((spec.channels, h, w)) * spec.noise
    return scene, (emb + noise).astype(DTYPE)


def postproc_config(spec: SyntheticSceneSpec, **kw) -> PostprocConfig:
    return PostprocConfig(class_table=spec.class_table(), **kw)


def oracle_pipeline_config(scene: GroundTruthScene, spec: SyntheticSceneSpec,
                           num_updates: int = 4, heads: int | None = None,
                           ffn_ratio: int = 1) -> PipelineConfig:
    """One kernel per segment; head count defaults to the largest divisor <= 4."""
    if heads is None:
        heads = max(d for d in (1, 2, 4) if spec.channels % d == 0)
    return PipelineConfig(num_updates=num_updates, num_kernels=len(scene.segments),
                          channels=spec.channels, heads=heads,
                          num_classes=spec.num_classes,
                          thing_classes=spec.thing_classes, ffn_ratio=ffn_ratio)


def _passthrough_stage(c: int, c_ff: int) -> KernelUpdateWeights:
    """Stage whose kernel update returns the previous kernels, then layer norms."""
    zeros = Linear.zeros(c, c)
    gate = lambda b: Linear(np.zeros((c, c), DTYPE), np.full(c, b, DTYPE))  # noqa: E731
    return KernelUpdateWeights(
        psi1=zeros, psi2=Linear.identity(c), gate_f=gate(-20.0), gate_k=gate(20.0),
        attn_q=zeros, attn_k=zeros, attn_v=zeros, attn_out=zeros,
        ffn_in=Linear.zeros(c_ff, c), ffn_out=Linear.zeros(c, c_ff),
        norm1_scale=np.ones(c, DTYPE), norm1_shift=np.zeros(c, DTYPE),
        norm2_scale=np.ones(c, DTYPE), norm2_shift=np.zeros(c, DTYPE),
        head_mask=(zeros,), head_cls=(Linear.zeros(1, c),))


def oracle_weights(scene: GroundTruthScene, spec: SyntheticSceneSpec,
                   cfg: PipelineConfig, beta: float = 1.0, logit: float = 10.0):
    """Hand-built weights under which the pipeline reproduces the scene.

    The init stage keeps features as they are and uses the separating kernels.
    Each update stage passes kernels through unchanged apart from its layer
    norms. Since all kernels hold the same multiset of values, the norms act
    on every kernel as one shared affine map, and each stage's heads undo it
    with a two-parameter least-squares fit. The class head gives `logit` to
    the segment's class and 0 to every other class and to "no object".

    Returns:
        (InitStageWeights, list of KernelUpdateWeights)
    """
    n, c = len(scene.segments), cfg.channels
    if cfg.num_kernels != n or c != spec.channels:
        raise ValueError("pipeline config does not match the scene")
    k0 = np.zeros((n, c), np.float64)
    k0[:, :n] = -beta
    k0[np.arange(n), np.arange(n)] = beta
    init = InitStageWeights(Linear.identity(c), k0.astype(DTYPE))

    classes = np.array([s.class_id for s in scene.segments])
    # logit_c = logit/(2 beta) * sum over channels of class c, plus a bias that
    # cancels the -beta entries
    w_cls = np.zeros((cfg.num_classes + 1, c))
    for m, cls in enumerate(classes):
        w_cls[cls, m] = logit / (2.0 * beta)
    counts = np.bincount(classes, minlength=cfg.num_classes + 1)
    b_cls = counts * (logit / 2.0)
    b_cls[-1] = 0.0

    stages = []
    kernels = init.kernels[None]
    for _ in range(cfg.num_updates):
        base = _passthrough_stage(c, cfg.ffn_channels)
        kernels = adaptive_update(np.zeros_like(kernels), kernels, base)
        kernels = kernel_interaction(kernels, base, cfg.heads)
        x = kernels[0].astype(np.float64).reshape(-1)
        design = np.stack([x, np.ones_like(x)], axis=1)
        (alpha, shift), *_ = np.linalg.lstsq(design, k0.reshape(-1), rcond=None)
        mask_head = Linear((alpha * np.eye(c)).astype(DTYPE), np.full(c, shift, DTYPE))
        cls_head = Linear((w_cls * alpha).astype(DTYPE),
                          (b_cls + shift * w_cls.sum(axis=1)).astype(DTYPE))
        stages.append(KernelUpdateWeights(**{**base.__dict__, "head_mask": (mask_head,),
                                             "head_cls": (cls_head,)}))
    return init, stages
