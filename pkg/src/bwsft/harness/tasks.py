"""Synthetic instruction/response corpora with cross-block structure."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..core import Example, RngStream

GENERATORS = ("copy_blocks", "modular_chain", "digit_sum")


@dataclass(frozen=True)
class SyntheticTask:
    generator: str = "copy_blocks"
    vocab_size: int = 16
    prompt_len: int = 8
    response_len: int = 16
    block_size: int = 4
    n_train: int = 2048
    n_test: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("split sizes must be >= 1")
        if self.prompt_len < 1 or self.response_len < 1 or self.block_size < 1:
            raise ValueError("lengths must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocabulary too small")
        if self.vocab_size ** self.prompt_len < self.n_train + self.n_test:
            raise ValueError("vocabulary too small for the requested number of distinct prompts")


def respond(task: SyntheticTask, c: np.ndarray) -> np.ndarray:
    """The unique correct response to instruction ``c``."""
    V, B, Lr = task.vocab_size, task.block_size, task.response_len
    Lc = len(c)
    if task.generator == "copy_blocks":
        # response block k repeats instruction block k (cyclically over instruction blocks)
        n_cb = -(-Lc // B)
        out = []
        for k in range(-(-Lr // B)):
            blk = c[(k % n_cb) * B:(k % n_cb + 1) * B]
            out.extend(np.resize(blk, B))
        return np.array(out[:Lr], dtype=np.int64)
    if task.generator == "modular_chain":
        # r^(1) = c^(1); r^(k+1) = (r^(k) + c^(k+1)) mod V, blockwise and elementwise
        n_cb = -(-Lc // B)
        prev = None
        out = []
        for k in range(-(-Lr // B)):
            cb = np.resize(c[(k % n_cb) * B:(k % n_cb + 1) * B], B)
            cur = cb.copy() if prev is None else (prev + cb) % V
            out.extend(cur)
            prev = cur
        return np.array(out[:Lr], dtype=np.int64)
    # digit_sum: running sum of the instruction read cyclically
    idx = np.arange(Lr) % Lc
    return np.cumsum(c[idx]) % V


def generate_corpus(task: SyntheticTask) -> tuple[list[Example], list[Example]]:
    """Deterministic train/test split with no prompt shared between them."""
    g = RngStream(task.seed, ("corpus", task.generator)).generator()
    need = task.n_train + task.n_test
    seen: set[tuple] = set()
    prompts = []
    while len(prompts) < need:
        batch = g.integers(0, task.vocab_size, size=(2 * (need - len(prompts)), task.prompt_len))
        for row in batch:
            key = tuple(int(v) for v in row)
            if key not in seen:
                seen.add(key)
                prompts.append(row)
                if len(prompts) == need:
                    break
    examples = [Example(c, respond(task, c)) for c in prompts]
    return examples[:task.n_train], examples[task.n_train:]


def write_corpus(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"instruction": list(ex.instruction), "response": list(ex.response)}) + "\n")


def read_corpus(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(Example(rec["instruction"], rec["response"]))
    return out


def as_arrays(examples) -> tuple[np.ndarray, np.ndarray]:
    return (np.array([ex.instruction for ex in examples], dtype=np.int64),
            np.array([ex.response for ex in examples], dtype=np.int64))
