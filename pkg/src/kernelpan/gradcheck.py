"""Central finite-difference checks for the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from kernelpan import losses
from kernelpan.matching import Assignment
from kernelpan.scene import GroundTruthScene, Segment

_TINY = 1e-300


def finite_diff_check(loss_fn: Callable[[np.ndarray], float], x, grad,
                      h: float = 1e-3, coords=None) -> float:
    """Max relative gap between `grad` and central differences of `loss_fn`.

    The error is ``max|g - n| / max(|g|_inf, |n|_inf)`` over the probed
    coordinates (all of them by default); identical zero gradients give 0.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    coords = np.asarray(list(coords), dtype=np.int64)
    numeric = np.empty(coords.size)
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(x)
        flat[i] = orig - h
        down = loss_fn(x)
        flat[i] = orig
        numeric[k] = (up - down) / (2.0 * h)
    analytic = grad[coords]
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    gap = np.abs(analytic - numeric).max(initial=0.0)
    if gap == 0.0:
        return 0.0
    return float(gap / max(scale, _TINY))


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def to_json(self) -> dict:
        return {"name": self.name, "instances": self.instances,
                "max_error": self.max_error, "tolerance": self.tolerance,
                "passed": self.passed}


def random_scene(rng: np.random.Generator, height: int, width: int,
                 num_segments: int, num_classes: int = 4,
                 unlabeled: float = 0.15) -> GroundTruthScene:
    """Random partition of a small grid into labelled segments.

    Every segment gets at least one pixel; a fraction of pixels is left
    unlabeled. Even-numbered segments are things.
    """
    owner = rng.integers(0, num_segments, (height, width))
    forced = rng.permutation(height * width)[:num_segments]
    owner.reshape(-1)[forced] = np.arange(num_segments)
    labeled = rng.random((height, width)) >= unlabeled
    labeled.reshape(-1)[forced] = True
    segs = []
    for i in range(num_segments):
        mask = (owner == i) & labeled
        segs.append(Segment(int(rng.integers(0, num_classes)), i % 2 == 0, mask))
    return GroundTruthScene(height, width, tuple(segs))


def _dice_suite(rng, n):
    err = 0.0
    for _ in range(n):
        x = rng.normal(0, 2, (4, 4))
        g = rng.random((4, 4)) < 0.5
        err = max(err, finite_diff_check(lambda v: losses.dice_loss(v, g).value,
                                         x, losses.dice_loss(x, g).grad))
    return err


def _bce_suite(rng, n):
    err = 0.0
    for _ in range(n):
        x = rng.normal(0, 2, (4, 4))
        g = rng.random((4, 4)) < 0.5
        err = max(err, finite_diff_check(lambda v: losses.mask_bce_loss(v, g).value,
                                         x, losses.mask_bce_loss(x, g).grad))
    return err


def _focal_suite(rng, n):
    err = 0.0
    for _ in range(n):
        z = rng.normal(0, 1.5, (3, 4))
        t = rng.integers(0, 4, 3)
        err = max(err, finite_diff_check(lambda v: losses.softmax_focal_loss(v, t).value,
                                         z, losses.softmax_focal_loss(z, t).grad))
    return err


def _rank_suite(rng, n):
    err = 0.0
    for _ in range(n):
        scene = random_scene(rng, 4, 4, 3)
        pred = rng.permutation(3)
        asg = Assignment([(int(pred[g]), g) for g in range(3)], [])
        x = rng.normal(0, 2, (3, 4, 4))
        err = max(err, finite_diff_check(
            lambda v: losses.rank_loss(v, asg, scene).value,
            x, losses.rank_loss(x, asg, scene).grad))
    return err


def _inst_suite(rng, n):
    err = 0.0
    for _ in range(n):
        scene = random_scene(rng, 6, 6, 3, unlabeled=0.0)
        f = rng.normal(0, 1, (8, 6, 6))
        seed = int(rng.integers(2**31))
        res = losses.instance_discrimination_loss(f, scene, 0.3, seed)
        # only sampled pixels influence the loss
        pix, _ = losses.sample_segment_pixels(scene, seed)
        sampled = np.zeros((8, 36), bool)
        sampled[:, pix] = True
        err = max(err, finite_diff_check(
            lambda v: losses.instance_discrimination_loss(v, scene, 0.3, seed).value,
            f, res.grad, coords=np.flatnonzero(sampled)))
    return err


SUITES = {
    "dice": (_dice_suite, 1e-4),
    "bce": (_bce_suite, 1e-4),
    "focal": (_focal_suite, 1e-4),
    "rank": (_rank_suite, 1e-4),
    "instance_discrimination": (_inst_suite, 1e-3),
}


def run_suites(seed: int = 0, instances: int = 50, names=None) -> list[SuiteResult]:
    """Runs each gradient suite on `instances` random problems."""
    out = []
    for name in names or SUITES:
        fn, tol = SUITES[name]
        rng = np.random.default_rng([seed, list(SUITES).index(name)])
        out.append(SuiteResult(name, instances, fn(rng, instances), tol))
    return out
