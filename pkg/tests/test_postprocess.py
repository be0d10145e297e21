import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kernelpan.postprocess import (VOID_ID, EncodingError, PanopticLabelMap,
                                   PostprocConfig, baseline_postprocess,
                                   decode_panoptic_id, encode_panoptic_id,
                                   optimized_postprocess, random_postproc_inputs)


def pixel_oracle(masks, p, cfg):
    """Pixel-by-pixel simulation with python scalars (float32 where it matters)."""
    n, h, w = masks.shape
    scores = [float(np.float32(max(p[i]))) for i in range(n)]
    labels = [int(np.argmax(p[i])) for i in range(n)]
    keep = [i for i in range(n) if scores[i] >= cfg.score_threshold]
    one = np.float32(1.0)

    def prob(i, y, x):
        return one / (one + np.exp(-masks[i, y, x]))

    owner = {}
    for y in range(h):
        for x in range(w):
            best, best_v = None, None
            for i in keep:
                v = np.float32(scores[i]) * prob(i, y, x)
                if best is None or v > best_v:
                    best, best_v = i, v
            owner[y, x] = best
    out = np.full((h, w), cfg.void_id, np.uint32)
    for i in keep:
        won = [k for k, o in owner.items() if o == i]
        orig = sum(1 for y in range(h) for x in range(w) if prob(i, y, x) >= 0.5)
        if orig == 0 or len(won) / orig < cfg.overlap_threshold:
            continue
        inst = i + 1 if cfg.class_table[labels[i]] else 0
        for y, x in won:
            out[y, x] = labels[i] * cfg.offset + inst
    return out


def test_encode_examples():
    cfg = PostprocConfig()
    assert encode_panoptic_id(3, 7, cfg) == 3007
    assert encode_panoptic_id(0, 1, cfg) == 1
    for c in range(20):
        for i in range(100):
            assert decode_panoptic_id(encode_panoptic_id(c, i, cfg), cfg) == (c, i)
    with pytest.raises(EncodingError):
        encode_panoptic_id(1, 1000, cfg)
    with pytest.raises(EncodingError):
        decode_panoptic_id(VOID_ID, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        PostprocConfig(score_threshold=1.5)
    with pytest.raises(ValueError):
        PostprocConfig(overlap_threshold=0.0)


def test_single_dominant_mask():
    cfg = PostprocConfig(class_table=(True, False))
    m = np.full((1, 3, 3), 10.0, np.float32)
    p = np.array([[1.0, 0.0]], np.float32)
    for fn in (baseline_postprocess, optimized_postprocess):
        assert np.all(fn(m, p, cfg).ids == 1)


def test_all_scores_filtered():
    cfg = PostprocConfig(class_table=(True, True))
    m = np.full((2, 3, 3), 10.0, np.float32)
    p = np.full((2, 2), 0.0, np.float32)
    for fn in (baseline_postprocess, optimized_postprocess):
        assert np.all(fn(m, p, cfg).ids == VOID_ID)


def test_single_stuff_mask():
    cfg = PostprocConfig(class_table=(True, True, False))
    m = np.full((1, 4, 4), 5.0, np.float32)
    p = np.array([[0.0, 0.0, 1.0]], np.float32)
    assert np.all(optimized_postprocess(m, p, cfg).ids == 2000)


def test_pixel_oracle_fixed_seed():
    rng = np.random.default_rng(42)
    cfg = PostprocConfig(class_table=(True, False, True))
    m, p = random_postproc_inputs(3, 3, 4, 4, rng)
    expected = pixel_oracle(m, p, cfg)
    np.testing.assert_array_equal(baseline_postprocess(m, p, cfg).ids, expected)
    np.testing.assert_array_equal(optimized_postprocess(m, p, cfg).ids, expected)


def test_pixel_oracle_many():
    rng = np.random.default_rng(43)
    for _ in range(60):
        n, nc = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        cfg = PostprocConfig(score_threshold=float(rng.choice([0.0, 0.3])),
                             overlap_threshold=float(rng.choice([0.4, 0.6, 1.0])),
                             class_table=tuple(rng.random(nc) < 0.5))
        m, p = random_postproc_inputs(n, nc, int(rng.integers(2, 7)),
                                      int(rng.integers(2, 7)), rng)
        np.testing.assert_array_equal(baseline_postprocess(m, p, cfg).ids,
                                      pixel_oracle(m, p, cfg))


def test_ties_go_to_lowest_index():
    cfg = PostprocConfig(overlap_threshold=0.1, class_table=(True,))
    m = np.zeros((3, 2, 2), np.float32)
    p = np.ones((3, 1), np.float32)
    for fn in (baseline_postprocess, optimized_postprocess):
        assert np.all(fn(m, p, cfg).ids == 1)


def test_sort_flag_changes_nothing():
    rng = np.random.default_rng(44)
    cfg = PostprocConfig(class_table=(True, False, True, False))
    for _ in range(20):
        m, p = random_postproc_inputs(6, 4, 8, 8, rng)
        assert baseline_postprocess(m, p, cfg, True) == baseline_postprocess(m, p, cfg)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.integers(1, 16), st.integers(1, 16),
       st.sampled_from([0.0, 0.3]), st.sampled_from([0.4, 0.6, 1.0]),
       st.integers(1, 4), st.sampled_from([1, 7, 64, 1024]), st.integers(0, 2**31))
def test_equivalence_property(n, nc, h, w, ds, do, threads, block, seed):
    rng = np.random.default_rng(seed)
    cfg = PostprocConfig(ds, do, class_table=tuple(rng.random(nc) < 0.5))
    m, p = random_postproc_inputs(n, nc, h, w, rng, logit_scale=float(rng.uniform(0.5, 8)))
    assert optimized_postprocess(m, p, cfg, threads, block) == baseline_postprocess(m, p, cfg)


def test_partition_property():
    rng = np.random.default_rng(45)
    cfg = PostprocConfig(overlap_threshold=0.4, class_table=(True,) * 4)
    m, p = random_postproc_inputs(6, 4, 10, 10, rng)
    ids = optimized_postprocess(m, p, cfg).ids
    scores, keep = p.max(axis=1), np.flatnonzero(p.max(axis=1) >= 0.3)
    probs = 1 / (1 + np.exp(-m[keep]))
    mask_id = keep[(scores[keep, None, None] * probs).argmax(axis=0)]
    for v in np.unique(ids):
        if v == VOID_ID:
            continue
        n = v % cfg.offset - 1  # all classes are things here
        np.testing.assert_array_equal(ids == v, mask_id == n)


def test_raising_overlap_threshold_never_adds_pixels():
    rng = np.random.default_rng(46)
    for _ in range(30):
        m, p = random_postproc_inputs(5, 3, 8, 8, rng)
        for ds in (0.0, 0.3):
            prev = None
            for do in (0.2, 0.4, 0.6, 0.8, 1.0):
                cfg = PostprocConfig(ds, do, class_table=(True, False, True))
                nonvoid = optimized_postprocess(m, p, cfg).ids != VOID_ID
                if prev is not None:
                    assert not (nonvoid & ~prev).any()
                prev = nonvoid


def test_raising_score_threshold_can_add_pixels():
    # Mask 0 (score 0.25) wins pixel 1 but fails the overlap test, leaving it
    # void. Dropping mask 0 by score hands pixel 1 to mask 1, which passes.
    m = np.array([[[10.0, 10.0]], [[10.0, -1.0]]], np.float32)
    p = np.array([[0.25, 0.25, 0.25, 0.25], [0.1, 0.9, 0.0, 0.0]], np.float32)
    low = PostprocConfig(0.2, 0.6, class_table=(True,) * 4)
    high = PostprocConfig(0.3, 0.6, class_table=(True,) * 4)
    for fn in (baseline_postprocess, optimized_postprocess):
        assert fn(m, p, low).ids.tolist() == [[1002, VOID_ID]]
        assert fn(m, p, high).ids.tolist() == [[1002, 1002]]


def test_offset_too_small_for_instances():
    cfg = PostprocConfig(offset=2, class_table=(True,))
    m = np.zeros((3, 2, 2), np.float32)
    m[2] = 10.0
    p = np.ones((3, 1), np.float32)
    with pytest.raises(EncodingError):
        optimized_postprocess(m, p, cfg)


def test_input_validation():
    cfg = PostprocConfig(class_table=(True, False))
    with pytest.raises(ValueError):
        optimized_postprocess(np.zeros((2, 3, 3)), np.zeros((3, 2)), cfg)
    with pytest.raises(ValueError):
        baseline_postprocess(np.zeros((2, 3, 3)), np.zeros((2, 3)), cfg)


def test_label_map_file_format(tmp_path):
    ids = np.arange(12, dtype=np.uint32).reshape(3, 4)
    ids[0, 0] = VOID_ID
    lm = PanopticLabelMap(ids, 1000, VOID_ID)
    lm.save(str(tmp_path / "m.json"))
    import json
    header = json.load(open(tmp_path / "m.json"))
    assert header["width"] == 4 and header["height"] == 3
    assert header["void_id"] == 4294967295 and header["offset"] == 1000
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw == ids.astype("<u4").tobytes()
    assert PanopticLabelMap.load(str(tmp_path / "m.json")) == lm
