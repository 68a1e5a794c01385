"""Gradient-bias measurements and unbiasedness certification."""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .core import BlockPartition, DiffusionSchedule, Example, RngStream
from .decode import _check_budget
from .diffusion import (_block_rows_weights, block_importance_gradient, fixed_block_masks,
                        weighted_ce_grad)
from .masking import mismatch_probabilities, sample_masks

__all__ = [
    "clean_block_gradient",
    "classical_gradient_mean",
    "bias_curve",
    "BiasReport",
    "certify_unbiasedness",
    "CertificationReport",
    "exact_blockwise_gradient",
]


def _stream(rng):
    return rng.generator() if isinstance(rng, RngStream) else rng


def _schedule_for(model, schedule):
    if schedule is not None:
        return schedule
    return DiffusionSchedule.uniform(getattr(getattr(model, "config", None), "num_steps", 1))


def _block_grad_for_masks(model, example, part, a, masks, schedule):
    """Gradient of sum_t w_t * active-block CE for each mask row (deduplicated)."""
    blk = part.block_slice(a)
    T = schedule.T
    w = np.array(schedule.weights)
    out = np.empty((len(masks), model.num_params))
    seen: dict[bytes, np.ndarray] = {}
    for n, m in enumerate(masks):
        key = m.tobytes()
        if key not in seen:
            rows = np.repeat(m[None, :], T, axis=0)
            tokens, weights = _block_rows_weights(example, rows, blk, w, model.vocab_size)
            seen[key] = weighted_ce_grad(model, tokens, np.arange(1, T + 1),
                                         np.broadcast_to(example.tokens, tokens.shape), weights)[1]
        out[n] = seen[key]
    return out


def _exact_order_grad(model, example, part, a):
    blk = part.block_slice(a)
    x = example.tokens
    prefix, b = x[:blk.start], x[blk]
    k = len(b)
    _check_budget(model, k)
    pad = part.length - blk.stop
    mask_id = model.vocab_size
    orders = list(itertools.permutations(range(k)))
    states, steps, tgt_pos = [], [], []
    for sigma in orders:
        revealed = np.zeros(k, dtype=bool)
        for j in sigma:
            blk_tok = np.where(revealed, b, mask_id)
            states.append(np.concatenate([prefix, blk_tok, np.full(pad, mask_id)]))
            steps.append(int(k - revealed.sum()))
            tgt_pos.append(blk.start + j)
            revealed[j] = True
    states = np.array(states)
    steps = np.array(steps)
    lp = model.log_probs(states, steps)
    picked = np.array([lp[n, p, x[p]] for n, p in enumerate(tgt_pos)]).reshape(len(orders), k)
    post = softmax(picked.sum(axis=1))
    weights = np.zeros(states.shape)
    for n, p in enumerate(tgt_pos):
        weights[n, p] = post[n // k]
    targets = np.broadcast_to(x, states.shape)
    return weighted_ce_grad(model, states, steps, targets, weights)[1]


def clean_block_gradient(model, example: Example, part: BlockPartition, a: int, mode: str = "surrogate",
                         schedule: DiffusionSchedule | None = None) -> np.ndarray:
    """Gradient of the clean active-block loss.

    ``mode="exact"``: gradient of the uniform-order enumeration NLL.
    ``mode="surrogate"``: block fully masked, prefix clean, suffix masked,
    summed over the schedule (the blockwise surrogate at pi = 1).
    """
    if mode == "exact":
        return _exact_order_grad(model, example, part, a)
    if mode != "surrogate":
        raise ValueError(f"unknown mode {mode!r}")
    m = np.zeros(part.length, dtype=np.int8)
    m[part.block_slice(a).start:] = 1
    return _block_grad_for_masks(model, example, part, a, m[None, :], _schedule_for(model, schedule))[0]


def classical_gradient_mean(model, example: Example, part: BlockPartition, a: int, pi: float, N: int, rng,
                            schedule: DiffusionSchedule | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo mean and standard error of the classical gradient on block ``a``'s loss terms."""
    if N < 1:
        raise ValueError("N must be >= 1")
    masks = sample_masks("classical", part, N, _stream(rng), pi=pi)
    uniq, counts = np.unique(masks, axis=0, return_counts=True)
    grads = _block_grad_for_masks(model, example, part, a, uniq, _schedule_for(model, schedule))
    if len(uniq) == 1:
        return grads[0].copy(), np.zeros_like(grads[0])
    w = counts / N
    mean = w @ grads
    var = (counts @ (grads - mean) ** 2) / (N - 1)
    return mean, np.sqrt(var / N)


@dataclass
class BiasReport:
    a: int
    pis: list = field(default_factory=list)
    bias_norm: list = field(default_factory=list)
    se_norm: list = field(default_factory=list)
    p_prefix: list = field(default_factory=list)
    p_suffix: list = field(default_factory=list)
    n: int = 0

    @property
    def studentized(self) -> list:
        return [b / s if s > 0 else (math.inf if b > 0 else 0.0) for b, s in zip(self.bias_norm, self.se_norm)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a", "pi", "bias_norm", "se_norm", "studentized", "p_prefix_corrupt", "p_suffix_leak", "n"])
        for row in zip(self.pis, self.bias_norm, self.se_norm, self.studentized, self.p_prefix, self.p_suffix):
            w.writerow([self.a] + [repr(float(v)) for v in row] + [self.n])
        return buf.getvalue()


def bias_curve(model, example: Example, part: BlockPartition, a: int, pi_grid, N: int, rng,
               schedule: DiffusionSchedule | None = None, clean: np.ndarray | None = None) -> BiasReport:
    """Bias norm of the classical mean gradient against the clean surrogate gradient, per pi.

    ``se_norm`` is sqrt(sum of squared per-coordinate standard errors), the
    norm a zero-bias estimate would show from sampling noise alone.
    """
    schedule = _schedule_for(model, schedule)
    if clean is None:
        clean = clean_block_gradient(model, example, part, a, "surrogate", schedule)
    base = _stream(rng) if not isinstance(rng, RngStream) else None
    report = BiasReport(a=a, n=N)
    for k, pi in enumerate(pi_grid):
        if not 0 < pi < 1:
            raise ValueError("pi grid must lie in (0, 1)")
        g = rng.child("bias", k).generator() if isinstance(rng, RngStream) else base
        mean, se = classical_gradient_mean(model, example, part, a, pi, N, g, schedule)
        p_pre, p_suf = mismatch_probabilities(part, a, pi)
        report.pis.append(float(pi))
        report.bias_norm.append(float(np.linalg.norm(mean - clean)))
        report.se_norm.append(float(np.sqrt((se ** 2).sum())))
        report.p_prefix.append(p_pre)
        report.p_suffix.append(p_suf)
    return report


def exact_blockwise_gradient(model, example: Example, part: BlockPartition, schedule: DiffusionSchedule,
                             masks: np.ndarray) -> tuple[float, np.ndarray]:
    """Gradient of sum_a sum_t w_t * block-local loss, all (a, t) rows in one backward pass."""
    rows, steps, weights = [], [], []
    x = example.tokens
    for a in range(1, part.num_blocks + 1):
        blk = part.block_slice(a)
        for t in range(1, schedule.T + 1):
            m = masks[a - 1]
            rows.append(np.where(m.astype(bool), model.vocab_size, x))
            steps.append(t)
            w = np.zeros(part.length)
            w[blk] = schedule.weight(t) * m[blk]
            weights.append(w)
    rows = np.array(rows)
    return weighted_ce_grad(model, rows, np.array(steps), np.broadcast_to(x, rows.shape), np.array(weights))


@dataclass
class CertificationReport:
    rho: tuple
    n: int
    max_abs_z: float
    threshold: float
    status: str  # "pass", "fail", "insufficient_power"
    exact: np.ndarray = field(repr=False, default=None)
    mean: np.ndarray = field(repr=False, default=None)
    se: np.ndarray = field(repr=False, default=None)
    block_counts: tuple = ()

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_csv_row(self) -> list:
        return ["|".join(f"{r:.6g}" for r in self.rho), self.n, repr(self.max_abs_z), self.threshold, self.status]


CERT_HEADER = ["rho", "n", "max_abs_z", "threshold", "status"]


def certify_unbiasedness(model, example: Example, part: BlockPartition, rho, schedule: DiffusionSchedule,
                         N: int, stream: RngStream, *, pi: float = 0.5, masks: np.ndarray | None = None,
                         threshold: float = 4.0, min_draws: int = 1000,
                         roundoff: float = 1e-9) -> CertificationReport:
    """Studentized comparison of N importance-weighted draws against the exhaustive (a, t) sum."""
    if part.num_blocks < 2:
        raise ValueError("certification needs at least two blocks")
    if masks is None:
        masks = fixed_block_masks(example, part, pi, stream.child("masks"))
    _, exact = exact_blockwise_gradient(model, example, part, schedule, masks)
    g = stream.child("draws").generator()
    cache: dict = {}
    total = np.zeros_like(exact)
    total_sq = np.zeros_like(exact)
    counts = np.zeros(part.num_blocks, dtype=np.int64)
    for _ in range(N):
        est, a, _t = block_importance_gradient(model, example, part, rho, schedule, g, masks, cache=cache)
        total += est
        total_sq += est * est
        counts[a - 1] += 1
    mean = total / N
    var = np.maximum(total_sq / N - mean * mean, 0.0) * N / max(N - 1, 1)
    se = np.sqrt(var / N)
    dev = mean - exact
    # structurally-zero coordinates carry only rounding noise; floor their scale
    floor = roundoff * max(float(np.abs(exact).max()), 1.0)
    z = dev / np.sqrt(se * se + floor * floor)
    max_z = float(np.max(np.abs(z)))
    if N < min_draws:
        status = "insufficient_power"
    else:
        status = "pass" if max_z <= threshold else "fail"
    return CertificationReport(tuple(float(r) for r in np.asarray(rho)), N, max_z, threshold, status,
                               exact, mean, se, tuple(int(c) for c in counts))
