import math

import numpy as np
import pytest

from bwsft.core import Example, RngStream, partition
from bwsft.decode import (DecodeConfig, EnumerationBudgetError, decode_batch, decode_block, decode_sequence,
                          elbo_bound_check, exact_block_nll)
from bwsft.model import TabularDenoiser

M3 = 3  # mask id for V = 3


def hand_table(ctx, i, t):
    if ctx == (0, M3, M3) and t == 2:
        return {1: [0.2, 0.7, 0.1], 2: [0.1, 0.1, 0.8]}.get(i, [1 / 3] * 3)
    if ctx == (0, M3, 2) and t == 1:
        return {1: [0.5, 0.2, 0.3]}.get(i, [1 / 3] * 3)
    return [1 / 3] * 3


def test_two_step_decode_matches_hand_simulation():
    model = TabularDenoiser(3, fn=hand_table)
    cfg = DecodeConfig(2, 2, suffix="truncate", num_steps=2)
    block, trace = decode_block(model, [0], 2, cfg)
    # round 1 at t=2: position 3 is most confident (0.8) -> token 2
    # round 2 at t=1: position 2 -> token 0 with 0.5
    assert block.tolist() == [0, 2]
    assert trace.records == [(1, 1, 3, 2, pytest.approx(0.8)), (1, 2, 2, 0, pytest.approx(0.5))]


def test_uniform_model_tie_breaking():
    cfg = DecodeConfig(3, 3, num_steps=3)
    block, trace = decode_block(TabularDenoiser(4, scale=0.0), [1, 2], 3, cfg)
    assert trace.records[0][2] == 3 and trace.records[0][3] == 0
    assert block.tolist() == [0, 0, 0]
    assert [r[2] for r in trace.records] == [3, 4, 5]


def test_block_of_one_is_argmax():
    model = TabularDenoiser(5, seed=3)
    cfg = DecodeConfig(1, 1, num_steps=4)
    block, _ = decode_block(model, [2, 4], 1, cfg)
    p = model.predict(np.array([[2, 4, 5]]), 4)[0, 2]
    assert block[0] == int(np.argmax(p))


def test_parallel_commits_follow_schedule():
    cfg = DecodeConfig(4, 4, steps_per_block=2, num_steps=4)
    _, trace = decode_block(TabularDenoiser(4, seed=1), [0], 4, cfg)
    steps = [r[1] for r in trace.records]
    assert steps.count(1) == 2 and steps.count(2) == 2
    assert sorted(trace.block_positions(1)) == [2, 3, 4, 5]
    assert all(0 < r[4] <= 1 for r in trace.records)


def test_prefix_with_mask_token_rejected():
    with pytest.raises(ValueError):
        decode_block(TabularDenoiser(3), [0, 3], 2, DecodeConfig(2, 2))


def test_sequence_block_geometry():
    model = TabularDenoiser(4, seed=8)
    out, trace = decode_sequence(model, [1, 2, 3], DecodeConfig(2, 6, num_steps=2), with_trace=True)
    assert len(out) == 6
    for a in (1, 2, 3):
        assert sorted(trace.block_positions(a)) == [3 + 2 * (a - 1) + 1, 3 + 2 * a]
    single, tr1 = decode_sequence(model, [1, 2, 3], DecodeConfig(2, 2, num_steps=2), with_trace=True)
    assert {r[0] for r in tr1.records} == {1}


def test_ragged_final_block():
    out, trace = decode_sequence(TabularDenoiser(4, seed=2), [1], DecodeConfig(4, 6), with_trace=True)
    assert len(out) == 6
    assert sorted(trace.block_positions(2)) == [6, 7]


def test_batch_matches_single_and_blocks_in_order():
    model = TabularDenoiser(4, seed=5)
    prompts = np.array([[0, 1], [2, 3], [1, 1]])
    cfg = DecodeConfig(2, 4, num_steps=2)
    batch = decode_batch(model, prompts, cfg)
    for n in range(3):
        assert np.array_equal(batch[n], decode_sequence(model, prompts[n], cfg))
    # committed positions of block 1 are all recorded before any block-2 record
    _, traces = decode_batch(model, prompts, cfg, with_trace=True)
    for tr in traces:
        blocks = [r[0] for r in tr.records]
        assert blocks == sorted(blocks)


def test_random_order_rule_is_seeded():
    model = TabularDenoiser(4, seed=5)
    cfg = DecodeConfig(3, 3, commit_rule="random_order")
    a = decode_sequence(model, [0], cfg, RngStream(4).generator(), with_trace=True)[1].records
    b = decode_sequence(model, [0], cfg, RngStream(4).generator(), with_trace=True)[1].records
    assert a == b


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(0, 4)
    with pytest.raises(ValueError):
        DecodeConfig(2, 4, commit_rule="greedy")
    with pytest.raises(ValueError):
        DecodeConfig(2, 4, suffix="drop")
    assert DecodeConfig(3, 6).steps_per_block == 3


def test_block_nll_single_token():
    model = TabularDenoiser(4, seed=1)
    p = model.predict(np.array([[2, 4]]), 1)[0, 1, 3]
    assert exact_block_nll(model, [2], [3]) == pytest.approx(-math.log(p), abs=1e-12)


def test_block_nll_uniform():
    assert exact_block_nll(TabularDenoiser(5, scale=0.0), [1], [0, 3]) == pytest.approx(2 * math.log(5))


def _p(model, z, t, i, v):
    return model.predict(np.array([z]), t)[0, i, v]


@pytest.mark.parametrize("seed", range(100))
def test_block_nll_two_orders_by_hand(seed):
    V = 3
    model = TabularDenoiser(V, seed=seed, scale=2.0)
    g = np.random.default_rng(seed)
    c, b1, b2 = (int(v) for v in g.integers(0, V, 3))
    M = V
    first = _p(model, [c, M, M], 2, 1, b1) * _p(model, [c, b1, M], 1, 2, b2)
    second = _p(model, [c, M, M], 2, 2, b2) * _p(model, [c, M, b2], 1, 1, b1)
    assert exact_block_nll(model, [c], [b1, b2]) == pytest.approx(-math.log((first + second) / 2), abs=1e-10)
    # two-step absorbing chain: each masked position unmasks w.p. 1/2 at t=2, the rest at t=1
    chain = 0.25 * (_p(model, [c, M, M], 2, 1, b1) * _p(model, [c, M, M], 2, 2, b2)
                    + _p(model, [c, M, M], 2, 1, b1) * _p(model, [c, b1, M], 1, 2, b2)
                    + _p(model, [c, M, M], 2, 2, b2) * _p(model, [c, M, b2], 1, 1, b1)
                    + _p(model, [c, M, M], 1, 1, b1) * _p(model, [c, M, M], 1, 2, b2))
    assert exact_block_nll(model, [c], [b1, b2], "chain") == pytest.approx(-math.log(chain), abs=1e-10)


def test_enumeration_budget():
    with pytest.raises(EnumerationBudgetError):
        exact_block_nll(TabularDenoiser(4), [0], [0, 1, 2, 3])
    with pytest.raises(EnumerationBudgetError):
        exact_block_nll(TabularDenoiser(6), [0], [0, 1])


def test_bound_uniform_tight_and_single_token():
    ex = Example((1,), (0, 2, 4, 1))
    part = partition(ex, 2)
    rep = elbo_bound_check(TabularDenoiser(5, scale=0.0), ex, part, 2)
    assert rep.gap == pytest.approx(0.0, abs=1e-12) and rep.nll == pytest.approx(2 * math.log(5))
    ex1 = Example((1, 2), (3,))
    rep1 = elbo_bound_check(TabularDenoiser(4, seed=7), ex1, partition(ex1, 1), 1)
    assert rep1.gap == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_bound_holds_on_random_tables(seed):
    g = np.random.default_rng(seed)
    V = int(g.integers(2, 6))
    k = int(g.integers(1, 4))
    ex = Example(tuple(int(v) for v in g.integers(0, V, 2)), tuple(int(v) for v in g.integers(0, V, 2 * k)))
    part = partition(ex, k)
    rep = elbo_bound_check(TabularDenoiser(V, seed=seed, scale=float(g.uniform(0.5, 3))), ex, part,
                           int(g.integers(1, 3)))
    assert rep.gap >= -1e-9
