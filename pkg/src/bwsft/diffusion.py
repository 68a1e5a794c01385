"""Absorbing forward kernel, per-step losses, full t-sums and the sampled estimators.

Default kernel ("mask"): z_t is the clean sequence with the mask token placed
wherever the already-drawn mask vector is 1, so E over z_t is exact and t only
selects the step weight and the model's time input.

"faithful" kernel: prefix clean, suffix masked, active-block tokens masked
i.i.d. with probability t/T.  Expectations over z_t are then computed by
enumerating all 2^|I_a| block patterns (small blocks) or by Monte-Carlo.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .core import BlockPartition, DiffusionSchedule, Example, NoisedState, RngStream
from .masking import build_blockwise_mask, sample_pi
from .model import ce_closure

__all__ = [
    "LossBreakdown",
    "forward_noise",
    "block_local_loss",
    "classical_loss",
    "blockwise_loss_fullsum",
    "faithful_block_states",
    "single_t_estimate",
    "block_importance_gradient",
    "fixed_block_masks",
    "weighted_ce",
    "weighted_ce_grad",
    "ENUM_MAX_BLOCK",
    "ENUM_MAX_VOCAB",
]

ENUM_MAX_BLOCK = 3
ENUM_MAX_VOCAB = 5


def _gen(rng):
    return rng.generator() if isinstance(rng, RngStream) else rng


@dataclass
class LossBreakdown:
    total: float
    per_position: dict = field(default_factory=dict)  # 1-based position -> nll
    supervised_count: int = 0
    step: int = 0
    weight: float = 1.0


def forward_noise(example: Example, mask: np.ndarray, t: int, mask_token_id: int) -> NoisedState:
    x = example.tokens
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise ValueError(f"mask length {mask.shape} does not match sequence length {x.shape}")
    z = np.where(mask.astype(bool), mask_token_id, x)
    return NoisedState(z, int(t))


def _check_vocab(model, example: Example):
    if max(example.instruction + example.response) >= model.vocab_size:
        raise ValueError("example token ids exceed the model vocabulary")


def block_local_loss(model, example: Example, noised: NoisedState, block: slice | BlockPartition,
                     a: int | None = None) -> LossBreakdown:
    """Cross-entropy summed over the positions of the block that are masked in ``noised``."""
    _check_vocab(model, example)
    if isinstance(block, BlockPartition):
        block = block.block_slice(a)
    x = example.tokens
    z = np.asarray(noised.tokens)
    lp = model.log_probs(z[None, :], noised.step)[0]
    if lp.shape[-1] != model.vocab_size:
        raise ValueError("model output does not match vocabulary size")
    per = {}
    for i in range(block.start, block.stop):
        if z[i] == model.vocab_size:
            per[i + 1] = float(-lp[i, x[i]])
    return LossBreakdown(float(sum(per.values())), per, len(per), noised.step, 1.0)


def weighted_ce(model, tokens: np.ndarray, steps: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> float:
    """sum_n,i weights[n,i] * -log p(targets[n,i] | tokens[n], steps[n])."""
    lp = model.log_probs(tokens, steps)
    tgt = np.where(weights != 0, targets, 0)
    picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
    return float(-(weights * picked).sum())


def weighted_ce_grad(model, tokens, steps, targets, weights):
    return model.loss_and_grad(tokens, steps, ce_closure(targets, weights))


def _stack_steps(z: np.ndarray, schedule: DiffusionSchedule):
    T = schedule.T
    return np.repeat(z[None, :], T, axis=0), np.arange(1, T + 1), np.array(schedule.weights)


def classical_loss(model, example: Example, mask: np.ndarray, schedule: DiffusionSchedule) -> float:
    """sum_t w_t * CE over every masked response position (z_t fixed by the mask)."""
    _check_vocab(model, example)
    z = forward_noise(example, mask, 1, model.vocab_size).tokens
    tokens, steps, w = _stack_steps(z, schedule)
    sup = (np.asarray(mask) == 1)
    sup[: example.prompt_len] = False
    weights = w[:, None] * sup[None, :]
    return weighted_ce(model, tokens, steps, np.broadcast_to(example.tokens, tokens.shape), weights)


def faithful_block_states(part: BlockPartition, a: int, t: int, T: int):
    """All active-block mask patterns under the faithful kernel with their probabilities.

    Yields (mask over the full sequence, probability).  Prefix clean, suffix masked.
    """
    blk = part.block_slice(a)
    k = blk.stop - blk.start
    rate = t / T
    base = np.zeros(part.length, dtype=np.int8)
    base[blk.stop:] = 1
    for bits in itertools.product((0, 1), repeat=k):
        n1 = sum(bits)
        prob = rate ** n1 * (1 - rate) ** (k - n1)
        if prob == 0:
            continue
        m = base.copy()
        m[blk] = bits
        yield m, prob


def _faithful_rows(example, part, a, schedule, rng, draws, exact):
    blk = part.block_slice(a)
    k = blk.stop - blk.start
    rows, steps, wts = [], [], []
    for t in range(1, schedule.T + 1):
        w_t = schedule.weight(t)
        if exact:
            for m, prob in faithful_block_states(part, a, t, schedule.T):
                rows.append(m)
                steps.append(t)
                wts.append(w_t * prob)
        else:
            g = _gen(rng)
            for _ in range(draws):
                m = np.zeros(part.length, dtype=np.int8)
                m[blk.stop:] = 1
                m[blk] = g.random(k) < t / schedule.T
                rows.append(m)
                steps.append(t)
                wts.append(w_t / draws)
    return np.array(rows), np.array(steps), np.array(wts)


def _block_rows_weights(example, masks, blk, row_w, mask_id):
    x = example.tokens
    tokens = np.where(masks.astype(bool), mask_id, x[None, :])
    sup = np.zeros_like(masks, dtype=np.float64)
    sup[:, blk] = masks[:, blk]
    return tokens, sup * np.asarray(row_w)[:, None]


def blockwise_loss_fullsum(model, example: Example, part: BlockPartition, a: int, pi: float | None,
                           schedule: DiffusionSchedule, rng=None, *, mask: np.ndarray | None = None,
                           kernel: str = "mask", draws: int = 64, exact: bool | None = None) -> float:
    """sum_t w_t E_{z_t}[block-local loss] for active block ``a``."""
    _check_vocab(model, example)
    blk = part.block_slice(a)
    if kernel == "mask":
        if mask is None:
            g = _gen(rng)
            mask = build_blockwise_mask(example, part, a, sample_pi(g) if pi is None else pi, g)
        masks, steps, w = _stack_steps(np.asarray(mask, dtype=np.int8), schedule)
    elif kernel == "faithful":
        if exact is None:
            exact = (blk.stop - blk.start) <= ENUM_MAX_BLOCK and model.vocab_size <= ENUM_MAX_VOCAB
        masks, steps, w = _faithful_rows(example, part, a, schedule, rng, draws, exact)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    tokens, weights = _block_rows_weights(example, masks, blk, w, model.vocab_size)
    return weighted_ce(model, tokens, steps, np.broadcast_to(example.tokens, tokens.shape), weights)


def single_t_estimate(model, example: Example, part: BlockPartition, a: int, schedule: DiffusionSchedule,
                      rng, *, mask: np.ndarray | None = None, pi: float | None = None) -> tuple[float, int]:
    """Draw t ~ w/Z and return (Z * block-local loss at t, t)."""
    g = _gen(rng)
    if mask is None:
        mask = build_blockwise_mask(example, part, a, sample_pi(g) if pi is None else pi, g)
    t = schedule.sample_step(g)
    z = forward_noise(example, mask, t, model.vocab_size)
    return schedule.Z * block_local_loss(model, example, z, part, a).total, t


def fixed_block_masks(example: Example, part: BlockPartition, pi: float, stream: RngStream) -> np.ndarray:
    """One blockwise mask per block, each from its own keyed stream; shape (M, L)."""
    return np.stack([build_blockwise_mask(example, part, a, pi, stream.child("block-mask", a))
                     for a in range(1, part.num_blocks + 1)])


def _check_rho(rho, M):
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (M,):
        raise ValueError(f"rho must have {M} entries")
    if np.any(rho <= 0):
        raise ValueError("rho must put positive mass on every block")
    if abs(rho.sum() - 1) > 1e-12:
        raise ValueError("rho must sum to 1")
    return rho


def block_gradient_at(model, example, part, a, t, mask):
    """Gradient of the block-local loss at a fixed (a, t, mask)."""
    blk = part.block_slice(a)
    tokens, weights = _block_rows_weights(example, np.asarray(mask)[None, :], blk, [1.0], model.vocab_size)
    return weighted_ce_grad(model, tokens, np.array([t]), example.tokens[None, :], weights)


def block_importance_gradient(model, example: Example, part: BlockPartition, rho, schedule: DiffusionSchedule,
                              rng, masks: np.ndarray, *, cache: dict | None = None):
    """Draw a ~ rho, t ~ w/Z and return (gradient estimate, a, t).

    ``masks[a-1]`` is the fixed mask of block ``a``, so the z_t expectation is
    degenerate and the estimate is (Z / rho(a)) * grad of the block-local loss.
    ``cache`` may memoise the deterministic per-(a, t) gradient.
    """
    rho = _check_rho(rho, part.num_blocks)
    g = _gen(rng)
    a = int(min(np.searchsorted(np.cumsum(rho), g.random(), side="right"), len(rho) - 1)) + 1
    t = schedule.sample_step(g)
    key = (a, t)
    if cache is not None and key in cache:
        grad = cache[key]
    else:
        grad = block_gradient_at(model, example, part, a, t, masks[a - 1])[1]
        if cache is not None:
            cache[key] = grad
    return (schedule.Z / rho[a - 1]) * grad, a, t
