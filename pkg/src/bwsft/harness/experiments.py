"""Block-size consistency grid and the prefix/suffix ablation sweeps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .tasks import SyntheticTask, generate_corpus
from .training import RunMetrics, TrainConfig, train

AXES = ("prefix", "suffix")


@dataclass
class GridResult:
    sizes: tuple
    seeds: tuple
    acc: np.ndarray  # (seed, B_train, B_infer)

    @property
    def mean(self) -> np.ndarray:
        return self.acc.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        n = self.acc.shape[0]
        if n < 2:
            return np.zeros(self.acc.shape[1:])
        return self.acc.std(axis=0, ddof=1) / math.sqrt(n)

    def diagonal_mean(self) -> float:
        return float(np.mean(np.diag(self.mean)))

    def off_diagonal_mean(self) -> float:
        m = self.mean
        off = ~np.eye(len(self.sizes), dtype=bool)
        return float(m[off].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["b_train", "b_infer", "mean_acc", "se", "seeds", *[f"seed_{s}" for s in self.seeds]])
        mean, se = self.mean, self.se
        for i, bt in enumerate(self.sizes):
            for j, bi in enumerate(self.sizes):
                w.writerow([bt, bi, repr(float(mean[i, j])), repr(float(se[i, j])), len(self.seeds),
                            *[repr(float(v)) for v in self.acc[:, i, j]]])
        return buf.getvalue()


def blocksize_grid(task: SyntheticTask, sizes=(2, 4, 8), seeds=(0, 1, 2), *, steps: int = 2000,
                   lr: float = 3e-3, batch_size: int = 32, num_steps: int = 4, log=None) -> GridResult:
    """Train one blockwise model per (seed, B_train); decode with every B_infer."""
    sizes = tuple(int(s) for s in sizes)
    for s in sizes:
        if s < 1 or task.response_len % s:
            raise ValueError(f"block size {s} does not divide the response length {task.response_len}")
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    acc = np.full((len(seeds), len(sizes), len(sizes)), np.nan)
    for k, seed in enumerate(seeds):
        # corpus follows the seed so replicates differ in data as well as init
        t = SyntheticTask(**{**task.__dict__, "seed": seed})
        corpus = generate_corpus(t)
        for i, bt in enumerate(sizes):
            cfg = TrainConfig("blockwise", block_size=bt, batch_size=batch_size, steps=steps, lr=lr,
                              num_steps=num_steps, seed=seed)
            _, _, finals = train(t, cfg, corpus=corpus, eval_blocks=sizes)
            for j, bi in enumerate(sizes):
                acc[k, i, j] = finals[bi]
            if log:
                log(f"seed {seed} B_train {bt}: " + " ".join(f"{b}:{finals[b]:.3f}" for b in sizes))
    if np.isnan(acc).any():
        raise RuntimeError("block-size grid is incomplete")
    return GridResult(sizes, tuple(seeds), acc)


def _ablation_config(axis: str, rate: float, base: TrainConfig) -> TrainConfig:
    if not 0.0 <= rate <= 1.0:
        raise ValueError("ablation rates must lie in [0, 1]")
    if axis == "prefix":
        if rate == 0.0:
            return TrainConfig(**{**base.__dict__, "objective": "blockwise"})
        return TrainConfig(**{**base.__dict__, "objective": "noisy_prefix", "pi_prefix": rate})
    if axis == "suffix":
        if rate == 1.0:
            return TrainConfig(**{**base.__dict__, "objective": "blockwise"})
        return TrainConfig(**{**base.__dict__, "objective": "leaky_suffix", "pi_suffix": rate})
    raise ValueError(f"unknown ablation axis {axis!r}")


@dataclass
class AblationResult:
    axis: str
    rates: tuple
    runs: dict = field(default_factory=dict)  # rate -> RunMetrics

    def final_accuracies(self) -> dict:
        return {r: self.runs[r].final_acc for r in self.rates}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "rate", "objective_path", "final_acc", "final_loss_ema"])
        for r in self.rates:
            m: RunMetrics = self.runs[r]
            path = "blockwise" if (self.axis, r) in (("prefix", 0.0), ("suffix", 1.0)) else f"{self.axis}_ablation"
            w.writerow([self.axis, repr(float(r)), path, repr(m.final_acc), repr(m.rows[-1]["loss_ema"])])
        return buf.getvalue()


def ablation_sweep(task: SyntheticTask, axis: str, rates, *, seed: int = 0, steps: int = 2000,
                   lr: float = 3e-3, batch_size: int = 32, block_size: int | None = None,
                   num_steps: int = 4, log=None) -> AblationResult:
    """One training run per rate; the identity rates go through the plain blockwise path."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}")
    rates = tuple(float(r) for r in rates)
    base = TrainConfig("blockwise", block_size=block_size or task.block_size, batch_size=batch_size,
                       steps=steps, lr=lr, num_steps=num_steps, seed=seed)
    configs = [_ablation_config(axis, r, base) for r in rates]
    corpus = generate_corpus(task)
    out = AblationResult(axis, rates)
    for r, cfg in zip(rates, configs):
        _, metrics, _ = train(task, cfg, corpus=corpus)
        out.runs[r] = metrics
        if log:
            log(f"{axis} rate {r}: acc {metrics.final_acc:.4f}")
    return out
