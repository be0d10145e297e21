"""Prediction-to-ground-truth assignment.

Stuff segments go to a reserved tail block of kernels (one per stuff class).
Thing segments are matched to the remaining kernels with a minimum-cost
bipartite assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kernelpan.kernel_update import PipelineConfig
from kernelpan.scene import GroundTruthScene


class AssignmentError(ValueError):
    pass


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (pred, gt segment)
    unmatched: list[int] = field(default_factory=list)

    def gt_to_pred(self) -> dict[int, int]:
        return {g: p for p, g in self.pairs}

    def pred_to_gt(self) -> dict[int, int]:
        return dict(self.pairs)


def _augmenting_path_solve(a: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row of `a` (n x m, n <= m) to a column.

    Shortest augmenting paths with row/column potentials; the inner scans over
    columns are vectorized. Returns the column chosen for each row.
    """
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row on column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def _column_rows(cost: np.ndarray) -> np.ndarray:
    """Row assigned to each column of a rows >= columns matrix."""
    if cost.shape[1] == 0:
        return np.zeros(0, dtype=np.int64)
    return _augmenting_path_solve(cost.T)


def assignment_total(cost: np.ndarray, rows_for_cols) -> float:
    """Sum of the chosen entries, accumulated in column order."""
    total = 0.0
    for j, r in enumerate(rows_for_cols):
        total += float(cost[r, j])
    return total


def hungarian_assign(cost, tol: float = 1e-9) -> Assignment:
    """Column-complete minimum-cost assignment of a [rows, cols] matrix.

    Among optimal assignments (totals within `tol` relative), the one whose row
    sequence listed by column ``(r_0, r_1, ...)`` is lexicographically smallest
    is returned. Pairs are reported as (row, column) sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise AssignmentError(f"cost must be a matrix, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_rows < n_cols:
        raise AssignmentError(f"need rows >= columns, got {n_rows} x {n_cols}")
    if not np.all(np.isfinite(cost)):
        raise AssignmentError("cost matrix has non-finite entries")

    rows = _column_rows(cost)
    best = assignment_total(cost, rows)
    slack = tol * max(1.0, abs(best))

    free_rows = list(range(n_rows))
    fixed = []
    fixed_total = 0.0
    for j in range(n_cols):
        rest_cols = list(range(j + 1, n_cols))
        chosen = int(rows[j])
        for r in free_rows:
            if r >= chosen:
                break
            others = [q for q in free_rows if q != r]
            sub = cost[np.ix_(others, rest_cols)]
            sub_rows = _column_rows(sub)
            total = fixed_total + cost[r, j] + assignment_total(sub, sub_rows)
            if total <= best + slack:
                chosen = r
                rows[j + 1:] = np.asarray(others)[sub_rows]
                break
        fixed.append(chosen)
        fixed_total += cost[chosen, j]
        free_rows.remove(chosen)

    pairs = sorted((r, j) for j, r in enumerate(fixed))
    used = set(fixed)
    return Assignment(pairs, [r for r in range(n_rows) if r not in used])


def _sigmoid64(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def matching_cost(masks, probs, gt: GroundTruthScene, gt_indices, weights,
                  pred_indices=None, dice_eps: float = 1e-3) -> np.ndarray:
    """Cost of pairing each prediction with each listed GT segment.

    ``cost[i, j] = -w.cls * p_i[c_j] + w.mask * BCE(M_i, G_j) + w.dice * dice(M_i, G_j)``
    with BCE averaged per pixel and dice in its smoothed form.

    Args:
        masks: [N, H, W] mask logits.
        probs: [N, K] class probabilities.
        gt_indices: GT segment indices (columns).
        weights: LossWeights.
        pred_indices: prediction indices (rows); all predictions when None.
    """
    masks = np.asarray(masks, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if pred_indices is None:
        pred_indices = np.arange(masks.shape[0])
    pred_indices = np.asarray(pred_indices, dtype=np.int64)
    x = masks[pred_indices].reshape(len(pred_indices), -1)
    g = np.stack([gt.segments[j].mask.reshape(-1) for j in gt_indices]).astype(np.float64) \
        if len(gt_indices) else np.zeros((0, x.shape[1]))
    classes = np.array([gt.segments[j].class_id for j in gt_indices], dtype=np.int64)

    npix = x.shape[1]
    bce = (_softplus(x).sum(axis=1, keepdims=True) - x @ g.T) / npix
    m = _sigmoid64(x)
    inter = m @ g.T
    denom = m.sum(axis=1, keepdims=True) + g.sum(axis=1)[None, :] + dice_eps
    dice = 1.0 - (2.0 * inter + dice_eps) / denom
    cls = -probs[pred_indices][:, classes]
    return weights.cls * cls + weights.mask * bce + weights.dice * dice


def fixed_stuff_assign(gt: GroundTruthScene, cfg: PipelineConfig) -> Assignment:
    """Stuff class ``thing_classes + j`` goes to kernel ``N - N_stuff + j``.

    Classes ``[0, thing_classes)`` are things and the rest are stuff; the
    thing-eligible kernels are the prefix ``[0, N - N_stuff)``.
    """
    n_stuff = cfg.stuff_classes
    base = cfg.num_kernels - n_stuff
    pairs = []
    seen = set()
    for idx in gt.stuff_indices:
        cls = gt.segments[idx].class_id
        j = cls - cfg.thing_classes
        if not 0 <= j < n_stuff:
            raise AssignmentError(f"class {cls} is not a stuff class")
        if cls in seen:
            raise AssignmentError(f"stuff class {cls} appears twice")
        seen.add(cls)
        pairs.append((base + j, idx))
    pairs.sort()
    return Assignment(pairs, [])


def assign_targets(masks, probs, gt: GroundTruthScene, cfg: PipelineConfig,
                   weights) -> Assignment:
    """Full assignment: fixed stuff reservation plus matched things."""
    stuff = fixed_stuff_assign(gt, cfg)
    n_free = cfg.num_kernels - cfg.stuff_classes
    things = gt.thing_indices
    if len(things) > n_free:
        raise AssignmentError(
            f"{len(things)} thing segments but only {n_free} thing-eligible kernels")
    pairs = list(stuff.pairs)
    if things:
        cost = matching_cost(masks, probs, gt, things, weights,
                             pred_indices=np.arange(n_free))
        matched = hungarian_assign(cost)
        pairs += [(r, things[j]) for r, j in matched.pairs]
    pairs.sort()
    used = {p for p, _ in pairs}
    return Assignment(pairs, [i for i in range(cfg.num_kernels) if i not in used])
