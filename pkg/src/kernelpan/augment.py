"""Scale, flip and instance-aware crop for (scene, image) pairs.

Images are float arrays shaped [C, H, W]. Masks are resampled with nearest
neighbours and images bilinearly. Pixels added by padding belong to no
segment, so they carry the ignore label in the semantic map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kernelpan.scene import GroundTruthScene, Segment


@dataclass(frozen=True)
class AugConfig:
    scale_min: float = 0.5
    scale_max: float = 2.1
    crop_h: int = 512
    crop_w: int = 1024
    max_attempts: int = 10
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.crop_h < 1 or self.crop_w < 1:
            raise ValueError("crop size must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")


@dataclass(frozen=True)
class CropWindow:
    top: int
    left: int
    height: int
    width: int

    def contains(self, row: int, col: int) -> bool:
        """Closed pixel bounds: the last row/column of the window counts."""
        return (self.top <= row <= self.top + self.height - 1
                and self.left <= col <= self.left + self.width - 1)


@dataclass
class CropResult:
    window: CropWindow
    scene: GroundTruthScene
    image: np.ndarray
    attempts: int
    accepted: bool


def mask_centroid(mask) -> tuple[int, int] | None:
    """Mean foreground coordinate, rounded half away from zero."""
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        return None
    # coordinates are nonnegative, so half-away-from-zero is floor(v + 0.5)
    r = int(np.floor(rows.sum() / rows.size + 0.5))
    c = int(np.floor(cols.sum() / cols.size + 0.5))
    return r, c


def thing_centroids(scene: GroundTruthScene) -> list[tuple[int, int]]:
    out = []
    for i in scene.thing_indices:
        c = mask_centroid(scene.segments[i].mask)
        if c is not None:
            out.append(c)
    return out


def _image(image, scene: GroundTruthScene) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1:] != (scene.height, scene.width):
        raise ValueError(
            f"image {image.shape} does not match scene {(scene.height, scene.width)}")
    return image


def _rebuild(scene: GroundTruthScene, masks, height: int, width: int) -> GroundTruthScene:
    segs = tuple(Segment(s.class_id, s.is_thing, m)
                 for s, m in zip(scene.segments, masks) if m.any())
    return GroundTruthScene(height, width, segs)


def pad_to(scene: GroundTruthScene, image, height: int, width: int):
    """Pads bottom/right up to at least (height, width); no-op when large enough."""
    image = _image(image, scene)
    h, w = max(height, scene.height), max(width, scene.width)
    if (h, w) == (scene.height, scene.width):
        return scene, image
    out = np.zeros(image.shape[:1] + (h, w), dtype=image.dtype)
    out[:, :scene.height, :scene.width] = image
    masks = []
    for s in scene.segments:
        m = np.zeros((h, w), bool)
        m[:scene.height, :scene.width] = s.mask
        masks.append(m)
    return _rebuild(scene, masks, h, w), out


def crop(scene: GroundTruthScene, image, window: CropWindow):
    """Cuts the window out of scene and image; segments left empty are dropped."""
    image = _image(image, scene)
    rs = slice(window.top, window.top + window.height)
    cs = slice(window.left, window.left + window.width)
    if rs.stop > scene.height or cs.stop > scene.width or window.top < 0 or window.left < 0:
        raise ValueError(f"{window} exceeds a {scene.height}x{scene.width} scene")
    masks = [s.mask[rs, cs] for s in scene.segments]
    return (_rebuild(scene, masks, window.height, window.width),
            np.ascontiguousarray(image[:, rs, cs]))


def _sample_window(rng, height, width, crop_h, crop_w) -> CropWindow:
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    return CropWindow(top, left, crop_h, crop_w)


def instance_aware_crop(scene: GroundTruthScene, image, cfg: AugConfig,
                        rng: np.random.Generator) -> CropResult:
    """Samples windows until one contains a thing centroid.

    Windows are uniform over valid top-left corners. After `max_attempts`
    misses the last sampled window is used as is.
    """
    scene, image = pad_to(scene, image, cfg.crop_h, cfg.crop_w)
    centroids = thing_centroids(scene)
    window, accepted, attempts = None, False, 0
    while attempts < cfg.max_attempts:
        window = _sample_window(rng, scene.height, scene.width, cfg.crop_h, cfg.crop_w)
        attempts += 1
        if any(window.contains(r, c) for r, c in centroids):
            accepted = True
            break
    cropped, img = crop(scene, image, window)
    return CropResult(window, cropped, img, attempts, accepted)


def random_crop(scene: GroundTruthScene, image, cfg: AugConfig,
                rng: np.random.Generator) -> CropResult:
    """Single uniform window with no content check."""
    scene, image = pad_to(scene, image, cfg.crop_h, cfg.crop_w)
    window = _sample_window(rng, scene.height, scene.width, cfg.crop_h, cfg.crop_w)
    accepted = any(window.contains(r, c) for r, c in thing_centroids(scene))
    cropped, img = crop(scene, image, window)
    return CropResult(window, cropped, img, 1, accepted)


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def _bilinear_axis(n_out: int, n_in: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(scene: GroundTruthScene, image, height: int, width: int):
    """Nearest-neighbour masks, bilinear image (half-pixel centres)."""
    image = _image(image, scene)
    if height < 1 or width < 1:
        raise ValueError("resize target must be at least 1x1")
    ri = _nearest_index(height, scene.height)
    ci = _nearest_index(width, scene.width)
    masks = [s.mask[ri[:, None], ci[None, :]] for s in scene.segments]

    r0, r1, fr = _bilinear_axis(height, scene.height)
    c0, c1, fc = _bilinear_axis(width, scene.width)
    img = image.astype(np.float64)
    top = img[:, r0] * (1 - fr)[:, None] + img[:, r1] * fr[:, None]
    out = top[:, :, c0] * (1 - fc) + top[:, :, c1] * fc
    return _rebuild(scene, masks, height, width), out.astype(image.dtype)


def flip(scene: GroundTruthScene, image):
    """Left-right mirror of masks and image."""
    image = _image(image, scene)
    masks = [s.mask[:, ::-1].copy() for s in scene.segments]
    return (_rebuild(scene, masks, scene.height, scene.width),
            np.ascontiguousarray(image[:, :, ::-1]))


def scale_and_flip(scene: GroundTruthScene, image, cfg: AugConfig,
                   rng: np.random.Generator):
    """Random uniform rescale, then a left-right flip with `flip_prob`.

    Returns:
        (scene, image, scale, flipped).
    """
    scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    h = max(1, int(round(scene.height * scale)))
    w = max(1, int(round(scene.width * scale)))
    if (h, w) != (scene.height, scene.width):
        scene, image = resize(scene, image, h, w)
    flipped = bool(rng.random() < cfg.flip_prob)
    if flipped:
        scene, image = flip(scene, image)
    return scene, image, scale, flipped


def augment(scene: GroundTruthScene, image, cfg: AugConfig,
            rng: np.random.Generator) -> CropResult:
    """Full training transform: scale, flip, then instance-aware crop."""
    scene, image, _, _ = scale_and_flip(scene, image, cfg, rng)
    return instance_aware_crop(scene, image, cfg, rng)


def single_thing_scene(height: int = 64, width: int = 64, top: int = 4, left: int = 4,
                       size: int = 3, thing_class: int = 0,
                       stuff_class: int = 1) -> GroundTruthScene:
    """One small square thing on a stuff background (used for crop statistics)."""
    thing = np.zeros((height, width), bool)
    thing[top:top + size, left:left + size] = True
    return GroundTruthScene(height, width, (Segment(thing_class, True, thing),
                                            Segment(stuff_class, False, ~thing)))


def crop_acceptance_stats(scene: GroundTruthScene, cfg: AugConfig, trials: int,
                          seed: int = 0) -> dict:
    """Fraction of windows containing a thing centroid, aware vs single draw."""
    image = np.zeros((1, scene.height, scene.width), np.float32)
    rng_a = np.random.default_rng([seed, 0])
    rng_b = np.random.default_rng([seed, 1])
    hits_a = hits_b = attempts = max_seen = 0
    for _ in range(trials):
        a = instance_aware_crop(scene, image, cfg, rng_a)
        hits_a += a.accepted
        attempts += a.attempts
        max_seen = max(max_seen, a.attempts)
        hits_b += random_crop(scene, image, cfg, rng_b).accepted
    return {"trials": trials,
            "instance_aware_rate": hits_a / trials,
            "random_rate": hits_b / trials,
            "mean_attempts": attempts / trials,
            "max_attempts_used": max_seen,
            "max_attempts": cfg.max_attempts}
