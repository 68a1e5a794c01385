"""Mask builders for classical, blockwise and the two ablation variants.

Every builder consumes exactly one uniform per response position, in position
order, then thresholds it against the rate of the region the position falls in.
That makes ``noisy_prefix(pi_prefix=0)`` and ``leaky_suffix(pi_suffix=1)``
bit-identical to the plain blockwise mask under the same stream.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import _kernels
from .core import BlockPartition, Example, RngStream, partition as make_partition, region_sizes

MODES = ("classical", "blockwise", "noisy_prefix", "leaky_suffix")
PI_RANGE = (1e-3, 1.0)

__all__ = [
    "MODES",
    "MaskSpec",
    "sample_pi",
    "build_classical_mask",
    "build_blockwise_mask",
    "build_noisy_prefix_mask",
    "build_leaky_suffix_mask",
    "build_mask",
    "sample_masks",
    "ensure_min_one",
    "mismatch_probabilities",
    "supervision_region",
]


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def _check_rate(name, value, low_open=False):
    if low_open and not 0 < value <= 1:
        raise ValueError(f"{name} must be in (0, 1], got {value}")
    if not 0 <= value <= 1:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class MaskSpec:
    mode: str
    pi: float | None = None
    pi_prefix: float = 0.0
    pi_suffix: float = 1.0
    a: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if self.pi is not None:
            _check_rate("pi", self.pi, low_open=True)
        _check_rate("pi_prefix", self.pi_prefix)
        _check_rate("pi_suffix", self.pi_suffix)


def sample_pi(rng, low: float = PI_RANGE[0], high: float = PI_RANGE[1]) -> float:
    return float(_generator(rng).uniform(low, high))


def supervision_region(part: BlockPartition, mode: str, a: int | None) -> slice:
    """Full-sequence slice that receives loss and the min-one rule."""
    if mode == "classical":
        return slice(part.prompt_len, part.length)
    if a is None:
        raise ValueError(f"mode {mode!r} needs an active block")
    return part.block_slice(a)


def _rates(mode, pi, pi_prefix, pi_suffix):
    if mode == "classical":
        return 0.0, pi, 0.0
    if mode == "blockwise":
        return 0.0, pi, 1.0
    if mode == "noisy_prefix":
        return pi_prefix, pi, 1.0
    return 0.0, pi, pi_suffix


def sample_masks(mode: str, part: BlockPartition, n: int, rng, *, a=None, pi=None,
                 pi_prefix: float = 0.0, pi_suffix: float = 1.0) -> np.ndarray:
    """Draw ``n`` masks at once; returns an (n, L) int8 array.

    ``a`` and ``pi`` may be scalars or per-row arrays.  Row ``k`` equals what
    the single-mask builder would return as the ``k``-th call on the same
    generator.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    g = _generator(rng)
    u = g.random((n, part.response_len))
    pi_arr = np.broadcast_to(np.asarray(pi, dtype=np.float64), (n,))
    if np.any(pi_arr <= 0) or np.any(pi_arr > 1):
        raise ValueError("pi must be in (0, 1]")
    if mode == "classical":
        starts = np.full(n, part.prompt_len)
        stops = np.full(n, part.length)
    else:
        a_arr = np.broadcast_to(np.asarray(a, dtype=np.int64), (n,))
        if np.any(a_arr < 1) or np.any(a_arr > part.num_blocks):
            raise IndexError(f"active block outside 1..{part.num_blocks}")
        bounds = np.asarray(part.bounds)
        starts = bounds[a_arr - 1, 0]
        stops = bounds[a_arr - 1, 1]
    r_pre, _, r_suf = _rates(mode, 0.5, pi_prefix, pi_suffix)
    return _kernels.threshold_regions(u, part.prompt_len, starts, stops, r_pre, pi_arr, r_suf)


def _single(mode, example, part, a, pi, rng, pi_prefix=0.0, pi_suffix=1.0):
    if part is None:
        part = make_partition(example, max(len(example.response), 1))
    if example is not None and (example.prompt_len, example.response_len) != (part.prompt_len, part.response_len):
        raise ValueError("partition does not match example geometry")
    _check_rate("pi", pi, low_open=True)
    return sample_masks(mode, part, 1, rng, a=a, pi=pi, pi_prefix=pi_prefix, pi_suffix=pi_suffix)[0]


def build_classical_mask(example: Example, pi: float, rng) -> np.ndarray:
    """Bernoulli(pi) over the whole response; min-one on its last token."""
    return _single("classical", example, None, None, pi, rng)


def build_blockwise_mask(example: Example, part: BlockPartition, a: int, pi: float, rng) -> np.ndarray:
    return _single("blockwise", example, part, a, pi, rng)


def build_noisy_prefix_mask(example: Example, part: BlockPartition, a: int, pi: float,
                            pi_prefix: float, rng) -> np.ndarray:
    _check_rate("pi_prefix", pi_prefix)
    return _single("noisy_prefix", example, part, a, pi, rng, pi_prefix=pi_prefix)


def build_leaky_suffix_mask(example: Example, part: BlockPartition, a: int, pi: float,
                            pi_suffix: float, rng) -> np.ndarray:
    _check_rate("pi_suffix", pi_suffix)
    return _single("leaky_suffix", example, part, a, pi, rng, pi_suffix=pi_suffix)


def build_mask(spec: MaskSpec, example: Example, part: BlockPartition, rng) -> np.ndarray:
    g = _generator(rng)
    pi = spec.pi if spec.pi is not None else sample_pi(g)
    if spec.mode == "classical":
        return build_classical_mask(example, pi, g)
    return _single(spec.mode, example, part, spec.a, pi, g,
                   pi_prefix=spec.pi_prefix, pi_suffix=spec.pi_suffix)


def ensure_min_one(mask: np.ndarray, region: Iterable[int]) -> np.ndarray:
    """Force the last position of ``region`` (1-based indices) when none is masked."""
    idx = sorted(int(i) for i in region)
    if not idx:
        raise ValueError("supervision region is empty")
    out = np.array(mask, dtype=np.int8, copy=True)
    zero_based = np.asarray(idx) - 1
    if not out[zero_based].any():
        out[zero_based[-1]] = 1
    return out


def mismatch_probabilities(part_or_sizes, a: int | None = None, pi: float = 0.5) -> tuple[float, float]:
    """Probabilities that classical masking corrupts the prefix / leaks the suffix of block ``a``.

    Accepts a partition plus ``a``, or a ``(n_prefix, n_suffix)`` pair.
    """
    if not 0 <= pi <= 1:
        raise ValueError("pi must be in [0, 1]")
    if isinstance(part_or_sizes, BlockPartition):
        n_pre, _, n_suf = region_sizes(part_or_sizes, a)
    else:
        n_pre, n_suf = part_or_sizes
    return 1.0 - (1.0 - pi) ** n_pre, 1.0 - pi ** n_suf
