"""Panoptic quality between predicted and ground-truth label maps.

A segment is the set of pixels sharing one panoptic id. A prediction matches a
GT segment of the same class when their IoU exceeds 0.5, which makes matches
unique. Pixels that are void in the GT are left out of the union, and a
prediction lying mostly in GT void is not counted as a false positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kernelpan.postprocess import PanopticLabelMap, PostprocConfig

IOU_THRESHOLD = 0.5


@dataclass
class SegmentMatching:
    """Per-image segment statistics needed for PQ."""
    gt_area: dict[int, int]
    pred_area: dict[int, int]
    matches: list[tuple[int, int, float]]  # (pred id, gt id, IoU)
    pred_void_overlap: dict[int, int]
    offset: int

    def class_of(self, seg_id: int) -> int:
        return seg_id // self.offset

    def per_class_matches(self) -> dict[int, list[tuple[int, int, float]]]:
        out: dict[int, list] = {}
        for m in self.matches:
            out.setdefault(self.class_of(m[1]), []).append(m)
        return out


def match_segments_iou(pred: PanopticLabelMap, gt: PanopticLabelMap,
                       cfg: PostprocConfig | None = None) -> SegmentMatching:
    """Finds same-class (pred, gt) segment pairs with IoU > 0.5."""
    if pred.ids.shape != gt.ids.shape:
        raise ValueError(f"label maps differ in shape: {pred.ids.shape} vs {gt.ids.shape}")
    if pred.offset != gt.offset or pred.void_id != gt.void_id:
        raise ValueError("label maps use different id encodings")
    if cfg is not None and (cfg.offset != gt.offset or cfg.void_id != gt.void_id):
        raise ValueError("config encoding differs from the label maps")
    void = int(gt.void_id)
    p = pred.ids.reshape(-1).astype(np.uint64)
    g = gt.ids.reshape(-1).astype(np.uint64)

    def areas(ids):
        vals, counts = np.unique(ids, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts) if v != void}

    gt_area, pred_area = areas(g), areas(p)
    pair, counts = np.unique((g << np.uint64(32)) | p, return_counts=True)
    inter = {(int(k >> np.uint64(32)), int(k & np.uint64(0xFFFFFFFF))): int(c)
             for k, c in zip(pair, counts)}
    void_overlap = {pid: inter.get((void, pid), 0) for pid in pred_area}

    matches = []
    for (gid, pid), n in inter.items():
        if gid == void or pid == void:
            continue
        if gid // gt.offset != pid // gt.offset:
            continue
        union = pred_area[pid] + gt_area[gid] - n - void_overlap[pid]
        iou = n / union
        if iou > IOU_THRESHOLD:
            matches.append((pid, gid, iou))
    matches.sort(key=lambda m: (m[1], m[0]))
    return SegmentMatching(gt_area, pred_area, matches, void_overlap, gt.offset)


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        den = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / den if den else 0.0

    @property
    def pq(self) -> float:
        den = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / den if den else 0.0

    def merge(self, other: "ClassStats") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    pq_th: float
    pq_st: float
    per_class: dict[int, ClassStats]
    thing_classes: frozenset[int] = frozenset()
    empty: bool = False

    def to_json(self) -> dict:
        rows = []
        for c in sorted(self.per_class):
            s = self.per_class[c]
            rows.append({"class": c, "is_thing": c in self.thing_classes,
                         "pq": s.pq, "sq": s.sq, "rq": s.rq,
                         "tp": s.tp, "fp": s.fp, "fn": s.fn})
        return {"pq": self.pq, "sq": self.sq, "rq": self.rq, "pq_th": self.pq_th,
                "pq_st": self.pq_st, "empty": self.empty, "per_class": rows}


def _image_stats(m: SegmentMatching) -> dict[int, ClassStats]:
    stats: dict[int, ClassStats] = {}
    get = lambda c: stats.setdefault(c, ClassStats())  # noqa: E731
    matched_gt = {gid for _, gid, _ in m.matches}
    matched_pred = {pid for pid, _, _ in m.matches}
    for pid, gid, iou in m.matches:
        s = get(m.class_of(gid))
        s.tp += 1
        s.iou_sum += iou
    for gid in m.gt_area:
        if gid not in matched_gt:
            get(m.class_of(gid)).fn += 1
    for pid, area in m.pred_area.items():
        if pid in matched_pred:
            continue
        if m.pred_void_overlap[pid] / area > 0.5:
            continue  # mostly on unlabelled ground truth
        get(m.class_of(pid)).fp += 1
    return stats


def _mean(values) -> float:
    values = list(values)
    return float(sum(values) / len(values)) if values else 0.0


def panoptic_quality(matchings, thing_classes=None) -> PQResult:
    """PQ, SQ and RQ per class and averaged over the classes that occur.

    Args:
        matchings: one `SegmentMatching` or a sequence of them (one per image).
        thing_classes: class ids counted as things for the split. When None,
            a class is a thing if any of its GT segments has a nonzero
            instance index.
    """
    if isinstance(matchings, SegmentMatching):
        matchings = [matchings]
    acc = PQAccumulator()
    for m in matchings:
        acc.add_matching(m)
    return acc.result(thing_classes)


@dataclass
class PQAccumulator:
    """Sums per-class counts across images; merging is associative."""
    per_class: dict[int, ClassStats] = field(default_factory=dict)
    seen_things: set[int] = field(default_factory=set)

    def add_matching(self, m: SegmentMatching) -> None:
        for c, s in _image_stats(m).items():
            self.per_class.setdefault(c, ClassStats()).merge(s)
        for gid in m.gt_area:
            if gid % m.offset:
                self.seen_things.add(m.class_of(gid))

    def add(self, pred: PanopticLabelMap, gt: PanopticLabelMap,
            cfg: PostprocConfig | None = None) -> None:
        self.add_matching(match_segments_iou(pred, gt, cfg))

    def merge(self, other: "PQAccumulator") -> None:
        for c, s in other.per_class.items():
            self.per_class.setdefault(c, ClassStats()).merge(s)
        self.seen_things |= other.seen_things

    def result(self, thing_classes=None) -> PQResult:
        things = frozenset(self.seen_things if thing_classes is None else thing_classes)
        present = {c: s for c, s in sorted(self.per_class.items()) if s.present}
        if not present:
            return PQResult(0.0, 0.0, 0.0, 0.0, 0.0, {}, things, empty=True)
        return PQResult(
            pq=_mean(s.pq for s in present.values()),
            sq=_mean(s.sq for s in present.values()),
            rq=_mean(s.rq for s in present.values()),
            pq_th=_mean(s.pq for c, s in present.items() if c in things),
            pq_st=_mean(s.pq for c, s in present.items() if c not in things),
            per_class=present, thing_classes=things)


def evaluate(pred: PanopticLabelMap, gt: PanopticLabelMap,
             cfg: PostprocConfig | None = None) -> PQResult:
    """PQ for one image; the thing/stuff split follows ``cfg.class_table`` if set."""
    things = None
    if cfg is not None and cfg.class_table:
        things = {c for c, t in enumerate(cfg.class_table) if t}
    return panoptic_quality(match_segments_iou(pred, gt, cfg), things)
