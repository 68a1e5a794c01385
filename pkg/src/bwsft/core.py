"""Shared domain types: vocabularies, examples, block geometry, schedules, keyed RNG.

Positions are stored 0-based; anything reported to a user (index sets, dumps)
is 1-based.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Vocab",
    "Example",
    "BlockPartition",
    "NoisedState",
    "DiffusionSchedule",
    "RngStream",
    "partition",
    "region_sizes",
    "mask_to_str",
    "str_to_mask",
]


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary needs at least 2 real tokens, got {self.size}")

    @property
    def mask_token_id(self) -> int:
        return self.size

    def validate(self, tokens: Sequence[int]) -> None:
        arr = np.asarray(tokens)
        if arr.size and (arr.min() < 0 or arr.max() >= self.size):
            raise ValueError("token ids must lie in [0, V)")


@dataclass(frozen=True)
class Example:
    """An instruction/response pair of token ids."""

    instruction: tuple[int, ...]
    response: tuple[int, ...]

    def __init__(self, instruction: Sequence[int], response: Sequence[int]):
        object.__setattr__(self, "instruction", tuple(int(v) for v in instruction))
        object.__setattr__(self, "response", tuple(int(v) for v in response))
        if len(self.response) < 1:
            raise ValueError("response must contain at least one token")

    @property
    def prompt_len(self) -> int:
        return len(self.instruction)

    @property
    def response_len(self) -> int:
        return len(self.response)

    def __len__(self) -> int:
        return len(self.instruction) + len(self.response)

    @property
    def tokens(self) -> np.ndarray:
        return np.array(self.instruction + self.response, dtype=np.int64)


@dataclass(frozen=True)
class BlockPartition:
    """Fixed-size decomposition of the response of an example.

    ``bounds[m]`` holds the 0-based half-open ``(start, stop)`` of block ``m + 1``
    in full-sequence coordinates.  Only the last block may be short.
    """

    prompt_len: int
    response_len: int
    block_size: int
    bounds: tuple[tuple[int, int], ...]

    @property
    def num_blocks(self) -> int:
        return len(self.bounds)

    @property
    def length(self) -> int:
        return self.prompt_len + self.response_len

    def _check(self, a: int) -> None:
        if not 1 <= a <= self.num_blocks:
            raise IndexError(f"active block {a} outside 1..{self.num_blocks}")

    def block_slice(self, a: int) -> slice:
        self._check(a)
        start, stop = self.bounds[a - 1]
        return slice(start, stop)

    def prefix_slice(self, a: int) -> slice:
        self._check(a)
        return slice(self.prompt_len, self.bounds[a - 1][0])

    def suffix_slice(self, a: int) -> slice:
        self._check(a)
        return slice(self.bounds[a - 1][1], self.length)

    def block_len(self, a: int) -> int:
        s = self.block_slice(a)
        return s.stop - s.start

    # 1-based index sets, as reported externally
    def block_indices(self, a: int) -> tuple[int, ...]:
        s = self.block_slice(a)
        return tuple(range(s.start + 1, s.stop + 1))

    def prefix_indices(self, a: int) -> tuple[int, ...]:
        s = self.prefix_slice(a)
        return tuple(range(s.start + 1, s.stop + 1))

    def suffix_indices(self, a: int) -> tuple[int, ...]:
        s = self.suffix_slice(a)
        return tuple(range(s.start + 1, s.stop + 1))


def partition(example: Example | tuple[int, int], B: int) -> BlockPartition:
    """Split the response into ``ceil(L_r / B)`` contiguous blocks.

    ``example`` may also be a ``(L_c, L_r)`` pair when only geometry matters.
    """
    if isinstance(example, Example):
        lc, lr = example.prompt_len, example.response_len
    else:
        lc, lr = (int(v) for v in example)
    if B < 1:
        raise ValueError("block size must be >= 1")
    if lr < 1:
        raise ValueError("cannot partition an empty response")
    M = math.ceil(lr / B)
    bounds = tuple((lc + m * B, lc + min((m + 1) * B, lr)) for m in range(M))
    return BlockPartition(lc, lr, B, bounds)


def region_sizes(part: BlockPartition, a: int) -> tuple[int, int, int]:
    """(|prefix|, |block|, |suffix|) for active block ``a``; sums to L_r."""
    p, b, s = part.prefix_slice(a), part.block_slice(a), part.suffix_slice(a)
    return p.stop - p.start, b.stop - b.start, s.stop - s.start


@dataclass(frozen=True)
class NoisedState:
    tokens: np.ndarray
    step: int

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class DiffusionSchedule:
    weights: tuple[float, ...]

    def __init__(self, weights: Sequence[float]):
        w = tuple(float(v) for v in weights)
        if not w:
            raise ValueError("schedule needs at least one step")
        if any(v < 0 or not math.isfinite(v) for v in w):
            raise ValueError("weights must be finite and nonnegative")
        if sum(w) <= 0:
            raise ValueError("weights must have positive total mass")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, T: int) -> "DiffusionSchedule":
        return cls([1.0] * T)

    @classmethod
    def harmonic(cls, T: int) -> "DiffusionSchedule":
        """omega_t = 1/t, the weighting of the linear absorbing ELBO."""
        return cls([1.0 / t for t in range(1, T + 1)])

    @property
    def T(self) -> int:
        return len(self.weights)

    @property
    def Z(self) -> float:
        return math.fsum(self.weights)

    @property
    def probs(self) -> np.ndarray:
        w = np.array(self.weights)
        return w / self.Z

    def weight(self, t: int) -> float:
        return self.weights[t - 1]

    def sample_step(self, rng: np.random.Generator) -> int:
        # inverse-CDF on a single uniform keeps consumption at one draw per call
        cdf = np.cumsum(self.probs)
        return int(min(np.searchsorted(cdf, rng.random(), side="right"), self.T - 1)) + 1


def _tag_hash(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag
    return zlib.crc32(tag.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Counter-style keyed randomness.

    Every ``(seed, key)`` pair maps to its own Philox stream, so draws never
    depend on call order across keys.
    """

    seed: int
    key: tuple = field(default=())

    def child(self, *key) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def generator(self) -> np.random.Generator:
        words = [_tag_hash(k) & 0xFFFFFFFF for k in self.key]
        ss = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(words))
        return np.random.Generator(np.random.Philox(ss))


def mask_to_str(mask: np.ndarray) -> str:
    return "".join("1" if v else "0" for v in np.asarray(mask).ravel())


def str_to_mask(text: str) -> np.ndarray:
    if set(text) - {"0", "1"}:
        raise ValueError("mask string must contain only 0/1")
    return np.array([c == "1" for c in text], dtype=np.int8)
