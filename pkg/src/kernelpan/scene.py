"""Ground-truth scenes: labelled binary segments over an image grid."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from kernelpan.postprocess import PanopticLabelMap, PostprocConfig, encode_panoptic_id

IGNORE_LABEL = 255


@dataclass(frozen=True)
class Segment:
    class_id: int
    is_thing: bool
    mask: np.ndarray  # [H, W] bool

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True)
class GroundTruthScene:
    height: int
    width: int
    segments: tuple[Segment, ...]

    def __post_init__(self):
        segs = tuple(Segment(int(s.class_id), bool(s.is_thing),
                             np.asarray(s.mask, dtype=bool)) for s in self.segments)
        cover = np.zeros((self.height, self.width), np.int32)
        for s in segs:
            if s.mask.shape != (self.height, self.width):
                raise ValueError(
                    f"segment mask {s.mask.shape} does not match "
                    f"{(self.height, self.width)}")
            cover += s.mask
        if cover.size and cover.max(initial=0) > 1:
            raise ValueError("segment masks overlap")
        object.__setattr__(self, "segments", segs)

    @property
    def semantic_map(self) -> np.ndarray:
        """Per-pixel class id; unlabelled pixels carry IGNORE_LABEL."""
        sem = np.full((self.height, self.width), IGNORE_LABEL, np.int32)
        for s in self.segments:
            sem[s.mask] = s.class_id
        return sem

    @property
    def thing_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.segments) if s.is_thing]

    @property
    def stuff_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.segments) if not s.is_thing]

    def owner_map(self) -> np.ndarray:
        """Index of the segment owning each pixel, -1 where unlabelled."""
        owner = np.full((self.height, self.width), -1, np.int64)
        for i, s in enumerate(self.segments):
            owner[s.mask] = i
        return owner

    def to_label_map(self, cfg: PostprocConfig) -> PanopticLabelMap:
        """Things get instance indices 1, 2, ... in segment order; stuff gets 0."""
        ids = np.full((self.height, self.width), cfg.void_id, np.uint32)
        inst = 0
        for s in self.segments:
            if s.is_thing:
                inst += 1
            ids[s.mask] = encode_panoptic_id(s.class_id, inst if s.is_thing else 0, cfg)
        return PanopticLabelMap(ids, cfg.offset, cfg.void_id)

    def reordered(self, order) -> "GroundTruthScene":
        return GroundTruthScene(self.height, self.width,
                                tuple(self.segments[i] for i in order))

    def save(self, path: str) -> None:
        """JSON listing of segments; each mask is a raw u8 grid next to it."""
        directory = os.path.dirname(path) or "."
        stem = os.path.splitext(os.path.basename(path))[0]
        entries = []
        for i, s in enumerate(self.segments):
            fname = f"{stem}_mask{i:03d}.u8"
            with open(os.path.join(directory, fname), "wb") as f:
                f.write(s.mask.astype(np.uint8).tobytes())
            entries.append({"class_id": s.class_id, "is_thing": s.is_thing,
                            "mask_file": fname})
        with open(path, "w") as f:
            json.dump({"height": self.height, "width": self.width,
                       "segments": entries}, f, indent=1)

    @classmethod
    def load(cls, path: str) -> "GroundTruthScene":
        directory = os.path.dirname(path) or "."
        with open(path) as f:
            doc = json.load(f)
        h, w = int(doc["height"]), int(doc["width"])
        segs = []
        for e in doc["segments"]:
            raw = np.fromfile(os.path.join(directory, e["mask_file"]), dtype=np.uint8)
            if raw.size != h * w:
                raise ValueError(f"{e['mask_file']}: {raw.size} bytes for {h}x{w}")
            segs.append(Segment(int(e["class_id"]), bool(e["is_thing"]),
                                raw.reshape(h, w) != 0))
        return cls(h, w, tuple(segs))
