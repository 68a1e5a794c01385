"""Training loops for the four objectives and the two comparison protocols."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .. import _kernels
from ..core import DiffusionSchedule, RngStream, partition
from ..decode import DecodeConfig, decode_batch
from ..masking import MODES, PI_RANGE, sample_masks
from ..model import AdamW, DenoiserConfig, TinyDenoiser, ce_closure, warmup_cosine_lr
from .tasks import SyntheticTask, as_arrays, generate_corpus

OBJECTIVES = MODES
PROTOCOLS = ("equal_flops", "equal_tokens")
CSV_HEADER = ["step", "loss_ema", "acc", "supervised_tokens", "traversal", "seconds"]
EMA_DECAY = 0.98


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "blockwise"
    block_size: int = 4
    batch_size: int = 32
    steps: int = 2000
    lr: float = 3e-3
    num_steps: int = 4  # diffusion steps T, uniform weights
    pi_range: tuple = PI_RANGE
    pi_fixed: float | None = None
    pi_prefix: float = 0.0
    pi_suffix: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1 or self.steps < 1 or self.block_size < 1:
            raise ValueError("batch_size, steps and block_size must be >= 1")


@dataclass(frozen=True)
class Protocol:
    kind: str = "equal_flops"
    steps: int = 2000  # equal_flops: optimizer steps for every arm
    tau: float = 1.0  # equal_tokens: traversal target
    batch_size: int = 32
    block_size: int = 4

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.kind!r}")

    def steps_for(self, objective: str, n_train: int, response_len: int) -> int:
        if self.kind == "equal_flops":
            return self.steps
        epochs = self.tau if objective == "classical" else self.tau * response_len / _mean_block(response_len, self.block_size)
        return max(1, math.ceil(epochs * n_train / self.batch_size))


def _mean_block(response_len, block_size):
    part = partition((0, response_len), block_size)
    return response_len / part.num_blocks


@dataclass
class TrainState:
    model: TinyDenoiser
    opt: AdamW
    step: int = 0
    loss_ema: float | None = None
    supervised_tokens: int = 0


def default_model_config(task: SyntheticTask, **over) -> DenoiserConfig:
    kw = dict(vocab_size=task.vocab_size, max_len=task.prompt_len + task.response_len,
              d_model=32, n_layers=4, n_heads=4, num_steps=4, dtype="float32")
    kw.update(over)
    return DenoiserConfig(**kw)


def build_batch(cfg: TrainConfig, prompts: np.ndarray, responses: np.ndarray, step: int, mask_id: int):
    """Masks, noised tokens, steps and loss weights for one batch.

    Draw order per batch is fixed for every objective (active block, pi, mask
    uniforms, t) so that objectives which coincide produce identical batches.
    """
    N, Lc = prompts.shape
    Lr = responses.shape[1]
    part = partition((Lc, Lr), cfg.block_size)
    schedule = DiffusionSchedule.uniform(cfg.num_steps)
    g = RngStream(cfg.seed, ("train", step)).generator()
    a = g.integers(1, part.num_blocks + 1, size=N)
    if cfg.pi_fixed is None:
        pi = g.uniform(cfg.pi_range[0], cfg.pi_range[1], size=N)
    else:
        pi = np.full(N, float(cfg.pi_fixed))
    masks = sample_masks(cfg.objective, part, N, g, a=a, pi=pi,
                         pi_prefix=cfg.pi_prefix, pi_suffix=cfg.pi_suffix)
    t = np.array([schedule.sample_step(g) for _ in range(N)])
    x = np.concatenate([prompts, responses], axis=1)
    tokens = np.where(masks.astype(bool), mask_id, x)
    region = np.zeros_like(masks, dtype=bool)
    if cfg.objective == "classical":
        region[:, Lc:] = True
    else:
        bounds = np.asarray(part.bounds)
        pos = np.arange(Lc + Lr)[None, :]
        region = (pos >= bounds[a - 1, 0][:, None]) & (pos < bounds[a - 1, 1][:, None])
    weights = schedule.Z * (region & masks.astype(bool)) / N
    return tokens, t, x, weights, int(region.sum())


def train_step(state: TrainState, cfg: TrainConfig, prompts, responses, total_steps: int) -> float:
    tokens, t, x, weights, n_sup = build_batch(cfg, prompts, responses, state.step, state.model.vocab_size)
    loss, grad = state.model.loss_and_grad(tokens, t, ce_closure(x, weights))
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite loss/gradient at step {state.step}: loss={loss}")
    lr = warmup_cosine_lr(state.step, total_steps, cfg.lr)
    state.model.params = state.opt.step(state.model.params, grad, lr).astype(state.model.dtype)
    state.loss_ema = loss if state.loss_ema is None else EMA_DECAY * state.loss_ema + (1 - EMA_DECAY) * loss
    state.supervised_tokens += n_sup
    state.step += 1
    return loss


def exact_match(model, prompts, responses, dcfg: DecodeConfig, batch: int = 512) -> float:
    hits = 0
    for s in range(0, len(prompts), batch):
        out = decode_batch(model, prompts[s:s + batch], dcfg)
        hits += int(np.all(out == responses[s:s + batch], axis=1).sum())
    return hits / len(prompts)


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    record_time: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            secs = f"{r['seconds']:.3f}" if self.record_time else ""
            w.writerow([r["step"], repr(float(r["loss_ema"])), repr(float(r["acc"])), r["supervised_tokens"],
                        repr(float(r["traversal"])), secs])
        return buf.getvalue()

    @property
    def final_acc(self) -> float:
        return self.rows[-1]["acc"]


def checkpoint_grid(total: int) -> list[int]:
    """Every 10% of training, as step counts (1-based, after the update)."""
    return sorted({max(1, round(total * k / 10)) for k in range(1, 11)})


def train(task: SyntheticTask, cfg: TrainConfig, dcfg: DecodeConfig | None = None,
          model_cfg: DenoiserConfig | None = None, *, corpus=None, eval_blocks=None,
          record_time: bool = False, log=None):
    """Train one arm; returns (final state, RunMetrics, {B_infer: acc} at the end)."""
    train_set, test_set = corpus if corpus is not None else generate_corpus(task)
    prompts, responses = as_arrays(train_set)
    tp, tr = as_arrays(test_set)
    mcfg = model_cfg or default_model_config(task, num_steps=cfg.num_steps)
    model = TinyDenoiser(mcfg, seed=cfg.seed)
    state = TrainState(model, AdamW(lr=cfg.lr))
    dcfg = dcfg or DecodeConfig(cfg.block_size, task.response_len, num_steps=cfg.num_steps)
    total_resp = len(train_set) * task.response_len
    grid = set(checkpoint_grid(cfg.steps))
    metrics = RunMetrics(record_time=record_time)
    order_g = None
    perm = np.array([], dtype=np.int64)
    cursor = 0
    epoch = 0
    start = time.perf_counter()
    while state.step < cfg.steps:
        if cursor + cfg.batch_size > len(perm):
            order_g = RngStream(cfg.seed, ("shuffle", epoch)).generator()
            perm = np.concatenate([perm[cursor:], order_g.permutation(len(train_set))])
            cursor = 0
            epoch += 1
        idx = perm[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        train_step(state, cfg, prompts[idx], responses[idx], cfg.steps)
        if state.step in grid:
            acc = exact_match(model, tp, tr, dcfg)
            metrics.rows.append(dict(step=state.step, loss_ema=state.loss_ema, acc=acc,
                                     supervised_tokens=state.supervised_tokens,
                                     traversal=state.supervised_tokens / total_resp,
                                     seconds=time.perf_counter() - start))
            if log:
                log(f"[{cfg.objective}] step {state.step} loss_ema {state.loss_ema:.4f} acc {acc:.4f}")
    finals = {}
    for b in eval_blocks or []:
        finals[b] = exact_match(model, tp, tr, replace(dcfg, block_size=b, steps_per_block=b))
    return state, metrics, finals


def run_protocol(protocol: Protocol, objective: str, task: SyntheticTask, dcfg: DecodeConfig | None = None,
                 *, seed: int = 0, lr: float = 3e-3, num_steps: int = 4, model_cfg=None,
                 record_time: bool = False, log=None, **train_kw):
    steps = protocol.steps_for(objective, task.n_train, task.response_len)
    cfg = TrainConfig(objective=objective, block_size=protocol.block_size, batch_size=protocol.batch_size,
                      steps=steps, lr=lr, num_steps=num_steps, seed=seed, **train_kw)
    state, metrics, _ = train(task, cfg, dcfg, model_cfg, record_time=record_time, log=log)
    return state, metrics
