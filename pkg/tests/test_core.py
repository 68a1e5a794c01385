import numpy as np
import pytest
from hypothesis import given, strategies as st

from bwsft.core import (BlockPartition, DiffusionSchedule, Example, RngStream, Vocab, mask_to_str,
                        partition, region_sizes, str_to_mask)


def test_partition_even_split():
    ex = Example([7, 8], [0, 1, 2, 3])
    part = partition(ex, 2)
    assert part.num_blocks == 2
    assert part.block_indices(1) == (3, 4)
    assert part.block_indices(2) == (5, 6)


def test_partition_four_block_geometry():
    assert partition((0, 128), 32).num_blocks == 4


def test_partition_ragged_tail():
    part = partition((0, 5), 2)
    assert part.num_blocks == 3
    assert part.block_len(3) == 1


@pytest.mark.parametrize("a, expected", [(1, (0, 2, 2)), (2, (2, 2, 0))])
def test_region_sizes_even(a, expected):
    assert region_sizes(partition((3, 4), 2), a) == expected


def test_region_sizes_ragged():
    assert region_sizes(partition((0, 5), 2), 3) == (4, 1, 0)


def test_partition_rejects_bad_inputs():
    with pytest.raises(ValueError):
        partition((2, 4), 0)
    with pytest.raises(ValueError):
        partition((2, 0), 2)
    with pytest.raises(ValueError):
        Example([1], [])
    with pytest.raises(IndexError):
        region_sizes(partition((0, 4), 2), 3)


@given(lc=st.integers(0, 6), lr=st.integers(1, 40), B=st.integers(1, 12))
def test_partition_is_bijection(lc, lr, B):
    part = partition((lc, lr), B)
    covered = [i for a in range(1, part.num_blocks + 1) for i in part.block_indices(a)]
    assert covered == list(range(lc + 1, lc + lr + 1))
    for a in range(1, part.num_blocks + 1):
        idx = part.block_indices(a)
        assert all(j - i == 1 for i, j in zip(idx, idx[1:]))
        if a < part.num_blocks:
            assert len(idx) == B
        pre, blk, suf = region_sizes(part, a)
        assert pre + blk + suf == lr
        assert part.prefix_indices(a) + idx + part.suffix_indices(a) == tuple(range(lc + 1, lc + lr + 1))


def test_vocab_mask_token():
    v = Vocab(5)
    assert v.mask_token_id == 5
    with pytest.raises(ValueError):
        Vocab(1)
    with pytest.raises(ValueError):
        v.validate([0, 5])


def test_schedule_normalisation():
    s = DiffusionSchedule([1, 2, 3, 4])
    assert s.Z == 10
    np.testing.assert_allclose(s.probs, [0.1, 0.2, 0.3, 0.4])
    u = DiffusionSchedule.uniform(4)
    assert u.Z == 4 and np.allclose(u.probs, 0.25)
    assert abs(DiffusionSchedule.harmonic(7).probs.sum() - 1) < 1e-12
    with pytest.raises(ValueError):
        DiffusionSchedule([0, 0])


def test_schedule_sampling_frequencies():
    s = DiffusionSchedule([1, 2, 3, 4])
    g = RngStream(3, ("t",)).generator()
    draws = np.array([s.sample_step(g) for _ in range(20000)])
    freq = np.bincount(draws, minlength=5)[1:] / len(draws)
    se = np.sqrt(s.probs * (1 - s.probs) / len(draws))
    assert np.all(np.abs(freq - s.probs) < 4 * se)


def test_rng_stream_keys():
    a = RngStream(7, (1, 2, "mask")).generator().random(5)
    b = RngStream(7, (1, 2, "mask")).generator().random(5)
    c = RngStream(7, (1, 3, "mask")).generator().random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(RngStream(7).child(1, 2, "mask").generator().random(5), a)


def test_mask_string_roundtrip():
    m = np.array([0, 1, 1, 0], dtype=np.int8)
    assert mask_to_str(m) == "0110"
    np.testing.assert_array_equal(str_to_mask("0110"), m)
    with pytest.raises(ValueError):
        str_to_mask("012")
