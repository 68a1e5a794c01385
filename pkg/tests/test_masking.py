import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bwsft.core import Example, RngStream, mask_to_str, partition
from bwsft.masking import (MaskSpec, build_blockwise_mask, build_classical_mask, build_leaky_suffix_mask,
                           build_mask, build_noisy_prefix_mask, ensure_min_one, mismatch_probabilities,
                           sample_masks)

EX = Example([9, 9], [0, 1, 2, 3])
PART = partition(EX, 2)
N = 100_000


def band(p, n=N):
    return 4 * math.sqrt(p * (1 - p) / n)


def test_classical_full_rate_masks_everything():
    m = build_classical_mask(EX, 1.0, RngStream(0))
    assert mask_to_str(m) == "001111"


def test_classical_tiny_rate_masks_last_token():
    m = build_classical_mask(EX, 1e-12, RngStream(0))
    assert mask_to_str(m) == "000001"


def test_classical_empirical_rate():
    masks = sample_masks("classical", partition((0, 4), 4), N, RngStream(1).generator(), pi=0.5)
    # forced last-token mask when all four survive adds 1/16 * 1/4
    expected = 0.5 + 0.5 ** 4 / 4
    assert abs(masks.mean() - expected) < 4 * math.sqrt(0.25 / (4 * N))
    per_pos = masks.mean(axis=0)
    assert np.all(np.abs(per_pos[:3] - 0.5) < band(0.5))
    assert abs(per_pos[3] - (0.5 + 0.5 ** 4)) < band(0.5 + 0.5 ** 4)


def test_blockwise_geometry():
    m = build_blockwise_mask(EX, PART, 2, 1e-12, RngStream(0))
    assert mask_to_str(m[:4]) == "0000"
    m1 = build_blockwise_mask(EX, PART, 1, 1.0, RngStream(0))
    assert mask_to_str(m1) == "001111"


def test_blockwise_min_one_on_last_active():
    m = build_blockwise_mask(EX, PART, 1, 1e-12, RngStream(0))
    assert mask_to_str(m) == "000111"


def test_noisy_prefix_extremes():
    for k in range(20):
        full = build_noisy_prefix_mask(EX, PART, 2, 0.5, 1.0, RngStream(k))
        assert mask_to_str(full[2:4]) == "11"
    a1 = [build_noisy_prefix_mask(EX, PART, 1, 0.5, r, RngStream(5)) for r in (0.0, 0.4, 1.0)]
    assert all(np.array_equal(a1[0], m) for m in a1)


def test_leaky_suffix_extremes():
    for k in range(20):
        vis = build_leaky_suffix_mask(EX, PART, 1, 0.5, 0.0, RngStream(k))
        assert mask_to_str(vis[4:]) == "00"
    last = [build_leaky_suffix_mask(EX, PART, 2, 0.5, r, RngStream(5)) for r in (0.0, 0.3, 1.0)]
    assert all(np.array_equal(last[0], m) for m in last)


@given(seed=st.integers(0, 2**32), a=st.integers(1, 3), pi=st.floats(1e-3, 1.0))
@settings(max_examples=60, deadline=None)
def test_reductions_bit_exact(seed, a, pi):
    ex = Example([1, 2, 3], [0, 1, 2, 3, 0, 1])
    part = partition(ex, 2)
    base = build_blockwise_mask(ex, part, a, pi, RngStream(seed, ("m",)))
    assert np.array_equal(build_noisy_prefix_mask(ex, part, a, pi, 0.0, RngStream(seed, ("m",))), base)
    assert np.array_equal(build_leaky_suffix_mask(ex, part, a, pi, 1.0, RngStream(seed, ("m",))), base)


@given(seed=st.integers(0, 2**32), lc=st.integers(0, 4), lr=st.integers(1, 9), B=st.integers(1, 4),
       pi=st.floats(1e-3, 1.0), mode=st.sampled_from(["classical", "blockwise", "noisy_prefix", "leaky_suffix"]))
@settings(max_examples=80, deadline=None)
def test_instruction_never_masked_and_region_nonempty(seed, lc, lr, B, pi, mode):
    part = partition((lc, lr), B)
    g = RngStream(seed).generator()
    a = int(g.integers(1, part.num_blocks + 1))
    masks = sample_masks(mode, part, 8, g, a=a, pi=pi, pi_prefix=0.5, pi_suffix=0.5)
    assert masks.shape == (8, lc + lr)
    assert not masks[:, :lc].any()
    region = slice(lc, lc + lr) if mode == "classical" else part.block_slice(a)
    assert masks[:, region].any(axis=1).all()
    if mode == "blockwise":
        assert not masks[:, part.prefix_slice(a)].any()
        assert masks[:, part.suffix_slice(a)].all()


@pytest.mark.parametrize("mode", ["classical", "blockwise", "noisy_prefix", "leaky_suffix"])
def test_single_builder_matches_batch_row(mode):
    ex = Example([1, 2], [0, 1, 2, 3, 0])
    part = partition(ex, 2)
    g1 = RngStream(11).generator()
    g2 = RngStream(11).generator()
    batch = sample_masks(mode, part, 3, g1, a=2, pi=0.4, pi_prefix=0.3, pi_suffix=0.6)
    spec = MaskSpec(mode, pi=0.4, pi_prefix=0.3, pi_suffix=0.6, a=2)
    singles = [build_mask(spec, ex, part, g2) for _ in range(3)]
    np.testing.assert_array_equal(batch, np.stack(singles))


def test_ensure_min_one():
    m = np.zeros(6, dtype=np.int8)
    assert mask_to_str(ensure_min_one(m, {3, 4})) == "000100"
    m2 = np.array([0, 0, 1, 0, 0, 0], dtype=np.int8)
    assert mask_to_str(ensure_min_one(m2, {3, 4})) == "001000"
    assert mask_to_str(ensure_min_one(m, {5})) == "000010"
    with pytest.raises(ValueError):
        ensure_min_one(m, set())


def test_mismatch_probabilities_examples():
    assert mismatch_probabilities((2, 2), pi=0.5) == (0.75, 0.75)
    assert mismatch_probabilities((3, 2), pi=0.0) == (0.0, 1.0)
    part = partition((0, 8), 2)
    for pi in (0.1, 0.5, 0.9):
        assert mismatch_probabilities(part, 1, pi)[0] == 0.0


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec("span")
    with pytest.raises(ValueError):
        MaskSpec("blockwise", pi=0.0)
    with pytest.raises(ValueError):
        MaskSpec("noisy_prefix", pi_prefix=1.5)
    with pytest.raises(IndexError):
        build_blockwise_mask(EX, PART, 3, 0.5, RngStream(0))


def test_default_pi_draw_in_range():
    spec = MaskSpec("blockwise", a=1)
    g = RngStream(4).generator()
    for _ in range(50):
        m = build_mask(spec, EX, PART, g)
        assert m[4:].all()


def test_event_probability_prefix_corruption():
    part = partition((0, 8), 2)
    a, pi = 3, 0.3
    masks = sample_masks("classical", part, N, RngStream(2).generator(), pi=pi)
    hit = masks[:, part.prefix_slice(a)].any(axis=1).mean()
    p, _ = mismatch_probabilities(part, a, pi)
    assert abs(hit - p) < band(p)
