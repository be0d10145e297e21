"""Training objectives with analytic gradients.

Every loss returns a `LossValue` holding the scalar and the gradient with
respect to its direct tensor input. Values are computed in float64 so the
finite-difference checks in `kernelpan.gradcheck` can resolve small errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from kernelpan.kernel_update import PipelineConfig, StageOutput
from kernelpan.matching import Assignment, assign_targets
from kernelpan.scene import IGNORE_LABEL, GroundTruthScene

DICE_EPS = 1e-3


@dataclass(frozen=True)
class LossWeights:
    mask: float = 1.0
    dice: float = 4.0
    cls: float = 2.0
    rank: float = 0.1
    seg: float = 1.0
    inst: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    temperature: float = 0.3
    bootstrap_fraction: float = 0.15
    small_instance_weight: float = 3.0
    small_instance_area: int = 4096
    samples_per_segment: int = 8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss setting {f.name} must be nonnegative")
        if self.temperature == 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.bootstrap_fraction <= 1:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")
        if self.samples_per_segment < 1:
            raise ValueError("samples_per_segment must be >= 1")


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray
    degenerate: bool = False


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _log_softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _pair(logits, target):
    x = np.asarray(logits, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"logits {x.shape} and target {g.shape} differ in shape")
    return x, g


def dice_loss(logits, target, eps: float = DICE_EPS) -> LossValue:
    """``1 - (2 sum(m g) + eps) / (sum(m) + sum(g) + eps)`` with ``m = sigmoid(x)``."""
    x, g = _pair(logits, target)
    m = _sigmoid(x)
    num = 2.0 * np.sum(m * g) + eps
    den = np.sum(m) + np.sum(g) + eps
    dm = -2.0 * g / den + num / den**2
    return LossValue(float(1.0 - num / den), dm * m * (1.0 - m))


def mask_bce_loss(logits, target) -> LossValue:
    """Per-pixel mean binary cross-entropy on logits."""
    x, g = _pair(logits, target)
    n = max(x.size, 1)
    value = np.sum(_softplus(x) - g * x) / n
    return LossValue(float(value), (_sigmoid(x) - g) / n)


def softmax_focal_loss(logits, targets, gamma: float = 2.0,
                       alpha: float = 0.25) -> LossValue:
    """Mean over rows of ``-alpha (1 - p_t)^gamma log p_t`` with softmax p.

    Args:
        logits: [N, K] scores.
        targets: [N] target class per row.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise ValueError(f"expected logits [N,K] and targets [N], got {z.shape}, {t.shape}")
    n = z.shape[0]
    if n == 0:
        return LossValue(0.0, np.zeros_like(z), True)
    logp = _log_softmax(z, axis=1)
    p = np.exp(logp)
    rows = np.arange(n)
    lq = logp[rows, t]
    q = p[rows, t]
    one_minus = np.clip(1.0 - q, 0.0, None)
    terms = -alpha * one_minus**gamma * lq
    # d term / d z_k = c * (delta_kt - p_k) with c = q * d term / dq
    c = -alpha * one_minus**gamma
    if gamma != 0:
        safe = one_minus > 0
        c = c + np.where(safe, alpha * gamma * np.where(safe, one_minus, 1.0)**(gamma - 1)
                         * q * lq, 0.0)
    onehot = np.zeros_like(z)
    onehot[rows, t] = 1.0
    grad = c[:, None] * (onehot - p) / n
    return LossValue(float(terms.mean()), grad)


def classification_targets(assignment: Assignment, gt: GroundTruthScene,
                           num_predictions: int, no_object: int) -> np.ndarray:
    """Matched predictions target their segment's class, the rest `no_object`."""
    t = np.full(num_predictions, no_object, dtype=np.int64)
    for pred, seg in assignment.pairs:
        t[pred] = gt.segments[seg].class_id
    return t


def focal_cls_loss(class_logits, assignment: Assignment, gt: GroundTruthScene,
                   weights: LossWeights = LossWeights()) -> LossValue:
    """Focal loss over ``N_c + 1`` logits; the last index means "no object"."""
    z = np.asarray(class_logits, dtype=np.float64)
    targets = classification_targets(assignment, gt, z.shape[0], z.shape[1] - 1)
    return softmax_focal_loss(z, targets, weights.focal_gamma, weights.focal_alpha)


def rank_targets(assignment: Assignment, gt: GroundTruthScene) -> np.ndarray:
    """Prediction index owning each pixel, -1 where no segment is assigned."""
    owner = gt.owner_map()
    lut = np.full(len(gt.segments) + 1, -1, dtype=np.int64)
    for pred, seg in assignment.pairs:
        lut[seg] = pred
    return lut[owner]  # owner -1 reads the trailing -1


def rank_loss(masks, assignment: Assignment, gt: GroundTruthScene) -> LossValue:
    """Per-pixel cross-entropy across the N mask logits.

    The target at a pixel is the prediction assigned to the segment owning it;
    unowned pixels are skipped and the mean runs over supervised pixels.
    """
    x = np.asarray(masks, dtype=np.float64)
    target = rank_targets(assignment, gt)
    if x.shape[1:] != target.shape:
        raise ValueError(f"masks {x.shape} do not match scene {target.shape}")
    sel = target >= 0
    count = int(sel.sum())
    grad = np.zeros_like(x)
    if count == 0:
        return LossValue(0.0, grad, True)
    cols = x[:, sel]  # [N, P]
    logp = _log_softmax(cols, axis=0)
    t = target[sel]
    idx = np.arange(t.size)
    value = -logp[t, idx].sum() / count
    d = np.exp(logp)
    d[t, idx] -= 1.0
    grad[:, sel] = d / count
    return LossValue(float(value), grad)


def seg_pixel_weights(gt: GroundTruthScene, weights: LossWeights) -> np.ndarray:
    """Pixels of thing segments smaller than the area threshold get the boost."""
    pw = np.ones((gt.height, gt.width))
    for s in gt.segments:
        if s.is_thing and s.area < weights.small_instance_area:
            pw[s.mask] = weights.small_instance_weight
    return pw


def bootstrapped_seg_loss(seg_logits, semantic_map, weights: LossWeights = LossWeights(),
                          pixel_weights=None) -> LossValue:
    """Weighted cross-entropy averaged over the hardest fraction of pixels.

    Args:
        seg_logits: [N_c, H, W] semantic logits.
        semantic_map: [H, W] class per pixel, IGNORE_LABEL where unlabelled.
        pixel_weights: optional [H, W] factors (see `seg_pixel_weights`).

    Returns:
        The mean of the top ``ceil(fraction * valid)`` weighted losses. If every
        pixel is ignored the value is 0 and `degenerate` is set.
    """
    x = np.asarray(seg_logits, dtype=np.float64)
    sem = np.asarray(semantic_map, dtype=np.int64)
    if x.ndim != 3 or x.shape[1:] != sem.shape:
        raise ValueError(f"seg logits {x.shape} do not match semantic map {sem.shape}")
    pw = np.ones(sem.shape) if pixel_weights is None else np.asarray(pixel_weights, np.float64)
    grad = np.zeros_like(x)
    valid = sem != IGNORE_LABEL
    if not valid.any():
        return LossValue(0.0, grad, True)
    if sem[valid].max() >= x.shape[0] or sem[valid].min() < 0:
        raise ValueError("semantic map holds a class outside the logits")
    cols = x[:, valid]
    t = sem[valid]
    idx = np.arange(t.size)
    logp = _log_softmax(cols, axis=0)
    w = pw[valid]
    per_pixel = -w * logp[t, idx]
    k = max(1, math.ceil(weights.bootstrap_fraction * t.size))
    top = np.argsort(-per_pixel, kind="stable")[:k]
    value = per_pixel[top].sum() / k
    d = np.exp(logp[:, top])
    d[t[top], np.arange(k)] -= 1.0
    sub = np.zeros_like(cols)
    sub[:, top] = d * (w[top] / k)
    grad[:, valid] = sub
    return LossValue(float(value), grad)


def sample_segment_pixels(gt: GroundTruthScene, rng, per_segment: int = 8):
    """Up to `per_segment` distinct pixels from each segment.

    Each segment draws from its own stream keyed by its first pixel, and the
    result is ordered by pixel index, so the sample set does not depend on the
    order of the segment list.

    Returns:
        (flat pixel indices [A], segment index per sample [A]).
    """
    if isinstance(rng, np.random.Generator):
        base = int(rng.integers(2**63))
    else:
        base = int(rng)
    picks, labels = [], []
    for i, s in enumerate(gt.segments):
        pix = np.flatnonzero(s.mask.reshape(-1))
        if pix.size == 0:
            continue
        seg_rng = np.random.default_rng([base, int(pix[0])])
        chosen = seg_rng.choice(pix, size=min(per_segment, pix.size), replace=False)
        picks.append(chosen)
        labels.append(np.full(chosen.size, i))
    if not picks:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    pix, labels = np.concatenate(picks), np.concatenate(labels)
    order = np.argsort(pix)
    return pix[order], labels[order]


def contrastive_loss(samples, labels, tau: float = 0.3) -> LossValue:
    """Supervised contrastive loss on sampled feature vectors.

    ``sum_a -1/|P(a)| sum_{p in P(a)} log(exp(s_ap) / sum_{b != a} exp(s_ab))``
    with ``s = z_a . z_b / tau`` on L2-normalized rows. Anchors with no
    positive are skipped.

    Args:
        samples: [A, C] raw feature vectors.
        labels: [A] segment membership.
    """
    x = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    a = x.shape[0]
    if a < 2:
        return LossValue(0.0, np.zeros_like(x), True)
    norm = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    z = x / norm
    s = z @ z.T / tau
    eye = np.eye(a, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    npos = pos.sum(axis=1)
    anchors = npos > 0
    if not anchors.any():
        return LossValue(0.0, np.zeros_like(x), True)

    masked = np.where(eye, -np.inf, s)
    row_max = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - row_max)
    denom = e.sum(axis=1, keepdims=True)
    lse = (row_max + np.log(denom))[:, 0]
    pos_mean = np.where(pos, s, 0.0).sum(axis=1) / np.maximum(npos, 1)
    value = float(np.sum((lse - pos_mean)[anchors]))

    g = e / denom - pos / np.maximum(npos, 1)[:, None]
    g[~anchors] = 0.0
    dz = (g + g.T) @ z / tau
    dx = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norm
    return LossValue(value, dx)


def instance_discrimination_loss(features, gt: GroundTruthScene, tau: float = 0.3,
                                 sampler_seed=0, per_segment: int = 8) -> LossValue:
    """Contrastive loss on pixels sampled from each GT segment.

    The gradient has the shape of `features` ([C, H, W]) and is nonzero only at
    sampled pixels.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3 or f.shape[1:] != (gt.height, gt.width):
        raise ValueError(f"features {f.shape} do not match scene {(gt.height, gt.width)}")
    pix, labels = sample_segment_pixels(gt, sampler_seed, per_segment)
    flat = f.reshape(f.shape[0], -1)
    res = contrastive_loss(flat[:, pix].T, labels, tau)
    grad = np.zeros_like(flat)
    np.add.at(grad.T, pix, res.grad)
    return LossValue(res.value, grad.reshape(f.shape), res.degenerate)


@dataclass
class LossBreakdown:
    total: float
    terms: dict[str, float]
    assignment: Assignment

    def to_json(self) -> dict:
        return {"total": self.total, "terms": dict(self.terms),
                "pairs": [list(p) for p in self.assignment.pairs]}


def total_loss(stages: Sequence[StageOutput], gt: GroundTruthScene, cfg: PipelineConfig,
               weights: LossWeights = LossWeights(), aux_seg=None, features=None,
               sampler_seed=0, batch_index: int = 0) -> LossBreakdown:
    """Weighted sum of all training terms for one image of the batch.

    The assignment is computed once on the final stage and reused for every
    stage. Mask, dice, classification and rank terms are summed over stages;
    the semantic term uses `aux_seg` ([B, N_c, H, W]) and the contrastive term
    uses `features` ([B, C, H, W]), each once when given. The breakdown lists
    unweighted terms.
    """
    b = batch_index
    final = stages[-1]
    assignment = assign_targets(final.masks[b], final.probs[b], gt, cfg, weights)
    terms = dict.fromkeys(("mask", "dice", "cls", "rank", "seg", "inst"), 0.0)
    for st in stages:
        masks = st.masks[b]
        if assignment.pairs:
            bce = [mask_bce_loss(masks[p], gt.segments[g].mask).value
                   for p, g in assignment.pairs]
            dice = [dice_loss(masks[p], gt.segments[g].mask).value
                    for p, g in assignment.pairs]
            terms["mask"] += float(np.mean(bce))
            terms["dice"] += float(np.mean(dice))
        terms["cls"] += focal_cls_loss(st.class_logits[b], assignment, gt, weights).value
        terms["rank"] += rank_loss(masks, assignment, gt).value
    if aux_seg is not None:
        terms["seg"] = bootstrapped_seg_loss(aux_seg[b], gt.semantic_map, weights,
                                             seg_pixel_weights(gt, weights)).value
    if features is not None:
        terms["inst"] = instance_discrimination_loss(
            features[b], gt, weights.temperature, sampler_seed,
            weights.samples_per_segment).value
    total = sum(getattr(weights, k) * v for k, v in terms.items())
    return LossBreakdown(float(total), terms, assignment)
