from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from popcft.datagen import FrameSequence
from popcft.preprocess import (
    DiffImage,
    MaskSpec,
    patchify,
    read_diff_cache,
    round_half_away,
    sample_mask,
    stack_diffs,
    to_grayscale,
    unpatchify,
    write_diff_cache,
)


def px(r, g, b):
    return np.array([[[r, g, b]]], dtype=np.uint8)


def exact_luma(r, g, b):
    v = Fraction(299, 1000) * r + Fraction(587, 1000) * g + Fraction(114, 1000) * b
    return int(v + Fraction(1, 2))  # floor(v + 1/2), v >= 0


def test_grayscale_examples():
    assert to_grayscale(px(255, 255, 255))[0, 0] == 255
    assert to_grayscale(px(0, 0, 0))[0, 0] == 0
    assert to_grayscale(px(255, 0, 0))[0, 0] == 76


def test_grayscale_red_agrees_with_pil():
    pil = np.asarray(Image.fromarray(px(255, 0, 0)).convert("L"))
    assert pil[0, 0] == to_grayscale(px(255, 0, 0))[0, 0] == 76


def test_grayscale_matches_exact_rational_rounding(rng):
    colors = rng.integers(0, 256, size=(2000, 3))
    img = colors.astype(np.uint8).reshape(1, -1, 3)
    got = to_grayscale(img)[0]
    expected = [exact_luma(*c) for c in colors.tolist()]
    assert got.tolist() == expected
    # PIL's fixed-point luma differs from exact rounding by at most one level
    pil = np.asarray(Image.fromarray(img).convert("L"))[0].astype(int)
    assert np.max(np.abs(pil - got.astype(int))) <= 1


def seq_from_gray(levels, h=4, w=4):
    frames = np.stack([np.full((h, w, 3), v, dtype=np.uint8) for v in levels])
    return FrameSequence("s", "t", frames, (), "unlabeled")


def test_identical_frames_give_zero_diff():
    d = stack_diffs(seq_from_gray([37, 37, 37, 37]))
    assert d.raw.dtype == np.uint8 and not d.raw.any()
    assert not d.channels.any()


def test_constant_step_in_last_frame():
    d = stack_diffs(seq_from_gray([0, 0, 0, 10]))
    np.testing.assert_array_equal(d.channels[0], 0)
    np.testing.assert_array_equal(d.channels[1], 0)
    np.testing.assert_array_equal(d.channels[2], np.float32(10) / np.float32(255))


def test_swapping_first_two_frames_changes_only_channel_one():
    a = stack_diffs(seq_from_gray([10, 50, 120, 200]))
    b = stack_diffs(seq_from_gray([50, 10, 120, 200]))
    np.testing.assert_array_equal(a.raw[0], b.raw[0])
    assert not np.array_equal(a.raw[1], b.raw[1])
    np.testing.assert_array_equal(a.raw[2], b.raw[2])


def test_frame_count_mismatch_rejected():
    with pytest.raises(ValueError):
        FrameSequence("s", "t", np.zeros((3, 4, 4, 3), np.uint8))


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(-40, 40))
def test_luminance_offset_invariance(seed, offset):
    rng = np.random.default_rng(seed)
    gray = rng.integers(50, 200, size=(4, 6, 6)).astype(np.int64)
    frames = np.repeat(gray[..., None], 3, axis=-1).astype(np.uint8)
    shifted = np.repeat((gray + offset)[..., None], 3, axis=-1).astype(np.uint8)
    a = stack_diffs(FrameSequence("s", "t", frames, (), "unlabeled"))
    b = stack_diffs(FrameSequence("s", "t", shifted, (), "unlabeled"))
    np.testing.assert_array_equal(a.raw, b.raw)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_diff_range_and_zero_channels(seed):
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(4, 5, 5, 3)).astype(np.uint8)
    frames[2] = frames[1]
    d = stack_diffs(FrameSequence("s", "t", frames, (), "unlabeled"))
    c = d.channels
    assert c.min() >= 0 and c.max() <= 1
    assert not c[1].any()
    gray = to_grayscale(frames)
    for k in (0, 2):
        assert (not c[k].any()) == np.array_equal(gray[k], gray[k + 1])


@pytest.mark.parametrize("size,p,n", [(64, 8, 64), (224, 16, 196)])
def test_patch_counts(size, p, n):
    grid = patchify(np.zeros((3, size, size)), p)
    assert grid.num_patches == n


def test_patchify_roundtrip_and_order(rng):
    img = rng.random((3, 16, 24))
    grid = patchify(img, 8)
    np.testing.assert_array_equal(unpatchify(grid), img)
    # patch 1 is the top row, second column
    np.testing.assert_array_equal(grid.patches[1], img[:, 0:8, 8:16].transpose(1, 2, 0))


def test_patchify_rejects_non_divisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((3, 10, 16)), 8)


def test_mask_counts(rng):
    assert len(sample_mask(196, 0.75, rng)) == 147
    assert len(sample_mask(64, 0.75, rng)) == 48
    assert len(sample_mask(64, 0.0, rng)) == 0
    assert sample_mask(64, 1.0, rng).masked_indices == tuple(range(64))


def test_mask_ratio_validated(rng):
    with pytest.raises(ValueError):
        sample_mask(10, 1.5, rng)


def test_mask_deterministic_and_set_equality():
    a = sample_mask(50, 0.5, np.random.default_rng(9))
    b = sample_mask(50, 0.5, np.random.default_rng(9))
    assert a == b
    assert MaskSpec((3, 1, 2), 0.5, 6) == MaskSpec((1, 2, 3), 0.5, 6)


def test_mask_marginal_frequency():
    rng = np.random.default_rng(0)
    n = 64
    hits = np.zeros(n)
    for _ in range(10_000):
        hits += sample_mask(n, 0.75, rng).as_bool()
    freq = hits / 10_000
    assert np.all(np.abs(freq - 0.75) <= 0.02)


def test_round_half_away():
    assert round_half_away(2.5) == 3
    assert round_half_away(-2.5) == -3
    assert round_half_away(0.75 * 196) == 147


def test_diff_cache_roundtrip(tmp_path, rng):
    raw = rng.integers(0, 256, size=(3, 8, 8)).astype(np.uint8)
    d = DiffImage(raw, "seq-1", "t")
    write_diff_cache(tmp_path, "train", [d])
    back = read_diff_cache(tmp_path, "train", "seq-1")
    assert np.max(np.abs(back - raw / 255.0)) <= 1 / 65535
