"""Tiny bidirectional transformer denoiser with a hand-written backward pass.

The denoiser maps a noised sequence (mask token = V) and a diffusion step to
per-position distributions over the V real tokens.  Parameters live in one flat
vector; ``ParamRegistry`` records where each tensor sits inside it.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .core import NoisedState

__all__ = [
    "DenoiserConfig",
    "ParamRegistry",
    "TinyDenoiser",
    "ScalarProbe",
    "ce_closure",
    "predict",
    "loss_and_grad",
    "finite_difference_check",
    "AdamW",
    "warmup_cosine_lr",
    "adamw_step",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

LN_EPS = 1e-5


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int
    max_len: int
    d_model: int = 16
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 0  # 0 -> 4 * d_model
    num_steps: int = 4
    use_positions: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("vocab_size", "max_len", "d_model", "n_layers", "n_heads", "d_ff", "num_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")


class ParamRegistry:
    """Ordered name -> (offset, shape) map over a flat parameter vector."""

    def __init__(self, shapes: list[tuple[str, tuple[int, ...]]]):
        self.shapes = list(shapes)
        self.offsets = {}
        off = 0
        for name, shape in self.shapes:
            self.offsets[name] = (off, tuple(shape))
            off += int(np.prod(shape))
        self.size = off

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got {flat.shape}")
        return {n: flat[o:o + int(np.prod(s))].reshape(s) for n, (o, s) in self.offsets.items()}

    def slice(self, name: str) -> slice:
        o, s = self.offsets[name]
        return slice(o, o + int(np.prod(s)))

    def to_json(self) -> list:
        return [[n, list(s)] for n, s in self.shapes]


def _sinusoid(L: int, d: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def ce_closure(targets: np.ndarray, weights: np.ndarray) -> Callable:
    """Weighted cross-entropy: sum over (n, i) of weights[n, i] * -log p(targets[n, i]).

    Positions with zero weight contribute nothing, including through gradients.
    """
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)

    def closure(logits):
        lp = _kernels.log_softmax(logits)
        tgt = np.where(weights != 0, targets, 0)
        picked = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
        loss = float(-(weights * picked).sum())
        d = np.exp(lp)
        np.put_along_axis(d, tgt[..., None], np.take_along_axis(d, tgt[..., None], axis=-1) - 1.0, axis=-1)
        return loss, (d * weights[..., None]).astype(logits.dtype)

    return closure


class TinyDenoiser:
    """Pre-LN transformer encoder; bidirectional attention, GELU feed-forward.

    Input embedding = token embedding + sinusoidal position + (t / T) * time vector.
    """

    def __init__(self, config: DenoiserConfig, params: np.ndarray | None = None, *,
                 seed: int = 0, zero_head: bool = False):
        self.config = config
        c = config
        d, f, V = c.d_model, c.d_ff, c.vocab_size
        shapes = [("tok_emb", (V + 1, d)), ("time_w", (d,))]
        for l in range(c.n_layers):
            shapes += [
                (f"l{l}.ln1_g", (d,)), (f"l{l}.ln1_b", (d,)),
                (f"l{l}.w_qkv", (d, 3 * d)), (f"l{l}.b_qkv", (3 * d,)),
                (f"l{l}.w_o", (d, d)), (f"l{l}.b_o", (d,)),
                (f"l{l}.ln2_g", (d,)), (f"l{l}.ln2_b", (d,)),
                (f"l{l}.w_1", (d, f)), (f"l{l}.b_1", (f,)),
                (f"l{l}.w_2", (f, d)), (f"l{l}.b_2", (d,)),
            ]
        shapes += [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_out", (d, V)), ("b_out", (V,))]
        self.registry = ParamRegistry(shapes)
        self.dtype = np.dtype(c.dtype)
        if params is None:
            params = self._init(seed, zero_head)
        self.params = np.ascontiguousarray(params, dtype=self.dtype)
        if self.params.shape != (self.registry.size,):
            raise ValueError("parameter vector does not match the registry")
        self._pos = _sinusoid(c.max_len, d) if c.use_positions else np.zeros((c.max_len, d))

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def num_params(self) -> int:
        return self.registry.size

    def _init(self, seed, zero_head):
        c = self.config
        rng = np.random.default_rng(seed)
        flat = np.zeros(self.registry.size)
        p = self.registry.views(flat)
        resid = 1.0 / math.sqrt(2 * c.n_layers)
        for name, arr in p.items():
            short = name.split(".")[-1]
            if short.endswith("_g"):
                arr[...] = 1.0
            elif short == "tok_emb":
                arr[...] = rng.normal(0, 1.0, arr.shape)
            elif short == "time_w":
                arr[...] = rng.normal(0, 0.5, arr.shape)
            elif short.startswith("w_"):
                std = 1.0 / math.sqrt(arr.shape[0])
                if short in ("w_o", "w_2"):
                    std *= resid
                arr[...] = rng.normal(0, std, arr.shape)
        if zero_head:
            p["w_out"][...] = 0.0
            p["b_out"][...] = 0.0
        return flat

    def copy(self) -> "TinyDenoiser":
        return TinyDenoiser(self.config, self.params.copy())

    def with_params(self, params: np.ndarray) -> "TinyDenoiser":
        return TinyDenoiser(self.config, params)

    # ------------------------------------------------------------------ forward

    def _prepare(self, tokens, t):
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        N, L = tokens.shape
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        if tokens.min() < 0 or tokens.max() > self.config.vocab_size:
            raise ValueError("token id outside vocabulary (mask token is V)")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (N,))
        return tokens, t

    def _forward(self, tokens, t, keep_cache):
        c = self.config
        p = self.registry.views(self.params)
        N, L = tokens.shape
        d, h = c.d_model, c.n_heads
        dh = d // h
        tfrac = (t / c.num_steps).astype(self.dtype)
        x = p["tok_emb"][tokens] + self._pos[:L].astype(self.dtype) + tfrac[:, None, None] * p["time_w"]
        caches = []
        scale = 1.0 / math.sqrt(dh)
        for l in range(c.n_layers):
            a_in, ln1 = _layer_norm(x, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
            qkv = a_in @ p[f"l{l}.w_qkv"] + p[f"l{l}.b_qkv"]
            qkv = qkv.reshape(N, L, 3, h, dh).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            s = (q @ k.transpose(0, 1, 3, 2)) * scale
            s = s - s.max(axis=-1, keepdims=True)
            att = np.exp(s)
            att /= att.sum(axis=-1, keepdims=True)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(N, L, d)
            x = x + ctx @ p[f"l{l}.w_o"] + p[f"l{l}.b_o"]
            f_in, ln2 = _layer_norm(x, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
            u = f_in @ p[f"l{l}.w_1"] + p[f"l{l}.b_1"]
            g, th = _kernels.gelu_forward(u)
            x = x + g @ p[f"l{l}.w_2"] + p[f"l{l}.b_2"]
            if keep_cache:
                caches.append((a_in, ln1, q, k, v, att, ctx, f_in, ln2, u, g, th))
        y, lnf = _layer_norm(x, p["lnf_g"], p["lnf_b"])
        logits = y @ p["w_out"] + p["b_out"]
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite activations in denoiser forward pass")
        return logits, (tokens, tfrac, caches, y, lnf)

    def logits(self, tokens, t) -> np.ndarray:
        tokens, t = self._prepare(tokens, t)
        return self._forward(tokens, t, keep_cache=False)[0]

    def log_probs(self, tokens, t) -> np.ndarray:
        return _kernels.log_softmax(self.logits(tokens, t))

    def predict(self, tokens, t) -> np.ndarray:
        return np.exp(self.log_probs(tokens, t))

    # ----------------------------------------------------------------- backward

    def loss_and_grad(self, tokens, t, closure: Callable) -> tuple[float, np.ndarray]:
        """Run ``closure(logits) -> (loss, dloss/dlogits)`` and backprop to the flat params."""
        tokens, t = self._prepare(tokens, t)
        logits, cache = self._forward(tokens, t, keep_cache=True)
        loss, dlogits = closure(logits)
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite loss")
        return loss, self._backward(np.asarray(dlogits, dtype=self.dtype), cache)

    def _backward(self, dlogits, cache):
        c = self.config
        tokens, tfrac, caches, y, lnf = cache
        p = self.registry.views(self.params)
        grad = np.zeros(self.registry.size, dtype=self.dtype)
        gp = self.registry.views(grad)
        N, L, V = dlogits.shape
        d, h = c.d_model, c.n_heads
        dh = d // h
        scale = 1.0 / math.sqrt(dh)

        flat_dl = dlogits.reshape(-1, V)
        gp["w_out"][...] = y.reshape(-1, d).T @ flat_dl
        gp["b_out"][...] = flat_dl.sum(axis=0)
        dy = dlogits @ p["w_out"].T
        dx, gp["lnf_g"][...], gp["lnf_b"][...] = _layer_norm_back(dy, p["lnf_g"], lnf)

        for l in reversed(range(c.n_layers)):
            a_in, ln1, q, k, v, att, ctx, f_in, ln2, u, g, th = caches[l]
            # feed-forward
            dg = dx @ p[f"l{l}.w_2"].T
            gp[f"l{l}.w_2"][...] = g.reshape(-1, g.shape[-1]).T @ dx.reshape(-1, d)
            gp[f"l{l}.b_2"][...] = dx.reshape(-1, d).sum(axis=0)
            du = _kernels.gelu_backward(u, th, dg)
            gp[f"l{l}.w_1"][...] = f_in.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
            gp[f"l{l}.b_1"][...] = du.reshape(-1, du.shape[-1]).sum(axis=0)
            df_in = du @ p[f"l{l}.w_1"].T
            dres, gp[f"l{l}.ln2_g"][...], gp[f"l{l}.ln2_b"][...] = _layer_norm_back(df_in, p[f"l{l}.ln2_g"], ln2)
            dx = dx + dres
            # attention
            gp[f"l{l}.w_o"][...] = ctx.reshape(-1, d).T @ dx.reshape(-1, d)
            gp[f"l{l}.b_o"][...] = dx.reshape(-1, d).sum(axis=0)
            dctx = (dx @ p[f"l{l}.w_o"].T).reshape(N, L, h, dh).transpose(0, 2, 1, 3)
            datt = dctx @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ dctx
            ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(N, L, 3 * d)
            gp[f"l{l}.w_qkv"][...] = a_in.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
            gp[f"l{l}.b_qkv"][...] = dqkv.reshape(-1, 3 * d).sum(axis=0)
            da_in = dqkv @ p[f"l{l}.w_qkv"].T
            dres, gp[f"l{l}.ln1_g"][...], gp[f"l{l}.ln1_b"][...] = _layer_norm_back(da_in, p[f"l{l}.ln1_g"], ln1)
            dx = dx + dres

        np.add.at(gp["tok_emb"], tokens.reshape(-1), dx.reshape(-1, d))
        gp["time_w"][...] = (dx * tfrac[:, None, None]).reshape(-1, d).sum(axis=0)
        return grad


class ScalarProbe:
    """One-parameter denoiser whose logits are theta everywhere on token 0.

    Used to check the closure/gradient plumbing against hand derivatives.
    """

    def __init__(self, theta: float, vocab_size: int = 2):
        self.params = np.array([float(theta)])
        self.vocab_size = vocab_size

    def logits(self, tokens, t):
        tokens = np.atleast_2d(tokens)
        out = np.zeros(tokens.shape + (self.vocab_size,))
        out[..., 0] = self.params[0]
        return out

    def log_probs(self, tokens, t):
        return _kernels.log_softmax(self.logits(tokens, t))

    def predict(self, tokens, t):
        return np.exp(self.log_probs(tokens, t))

    def with_params(self, params):
        return ScalarProbe(float(params[0]), self.vocab_size)

    def loss_and_grad(self, tokens, t, closure):
        loss, dlogits = closure(self.logits(tokens, t))
        return loss, np.array([dlogits[..., 0].sum()])


def _tokens_of(noised):
    if isinstance(noised, NoisedState):
        return noised.tokens, noised.step
    raise TypeError("expected a NoisedState")


def predict(model, noised: NoisedState) -> np.ndarray:
    """Per-position distributions over the V real tokens, shape (L, V)."""
    tokens, step = _tokens_of(noised)
    return model.predict(np.asarray(tokens)[None, :], step)[0]


def loss_and_grad(model, tokens, t, closure) -> tuple[float, np.ndarray]:
    return model.loss_and_grad(tokens, t, closure)


def finite_difference_check(model, tokens, t, closure, coords, h: float = 1e-4):
    """Central differences on selected coordinates; returns (analytic, numeric) arrays."""
    _, grad = model.loss_and_grad(tokens, t, closure)
    base = np.array(model.params, dtype=np.float64)
    numeric = np.empty(len(coords))
    for n, j in enumerate(coords):
        plus, minus = base.copy(), base.copy()
        plus[j] += h
        minus[j] -= h
        lp = closure(model.with_params(plus).logits(tokens, t))[0]
        lm = closure(model.with_params(minus).logits(tokens, t))[0]
        numeric[n] = (lp - lm) / (2 * h)
    return grad[np.asarray(coords)], numeric


# ----------------------------------------------------------------- optimizer

@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.95
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        if params.shape != grad.shape:
            raise ValueError("gradient shape does not match parameters")
        lr = self.lr if lr is None else lr
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.step_count)
        vhat = self.v / (1 - self.beta2 ** self.step_count)
        return params - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * params)


def adamw_step(params, grad, state: AdamW, lr: float | None = None) -> np.ndarray:
    return state.step(params, grad, lr)


def warmup_cosine_lr(step: int, total: int, peak: float, warmup_frac: float = 0.1,
                     min_ratio: float = 0.1) -> float:
    """Linear warm-up, then cosine decay from ``peak`` to ``min_ratio * peak``.  ``step`` is 0-based."""
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return peak * (step + 1) / warm
    span = max(1, total - warm)
    frac = min(1.0, (step - warm) / span)
    return peak * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"BWSFTCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_checkpoint(model: TinyDenoiser, path) -> None:
    """magic | u32 version | u32 header len | JSON header | f8-LE payload | u64 checksum."""
    header = json.dumps({"config": asdict(model.config), "registry": model.registry.to_json()},
                        sort_keys=True).encode("utf-8")
    payload = np.asarray(model.params, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<Q", _checksum(payload)))


def load_checkpoint(path) -> TinyDenoiser:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, hlen = struct.unpack_from("<II", blob, 8)
    except struct.error:
        raise CheckpointError("truncated checkpoint") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16:16 + hlen])
        config = DenoiserConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    model = TinyDenoiser(config)
    if model.registry.to_json() != header["registry"]:
        raise CheckpointError("shape registry mismatch")
    start = 16 + hlen
    stop = start + 8 * model.registry.size
    payload = blob[start:stop]
    if len(blob) != stop + 8:
        raise CheckpointError("truncated checkpoint")
    (stored,) = struct.unpack_from("<Q", blob, stop)
    if stored != _checksum(payload):
        raise CheckpointError("checksum mismatch")
    return TinyDenoiser(config, np.frombuffer(payload, dtype="<f8").copy())


class TabularDenoiser:
    """Explicit conditional table p(x_i = v | whole visible sequence, i, t).

    Logits for an unseen key are drawn from a stream keyed by (seed, key), so
    the table is fixed but only materialised where it is queried.  ``scale=0``
    gives the uniform model.  ``overrides`` maps (tokens tuple, 0-based position,
    t) -> probability vector and takes precedence.
    """

    def __init__(self, vocab_size: int, *, seed: int = 0, scale: float = 1.0,
                 time_dependent: bool = True, overrides: dict | None = None, fn: Callable | None = None):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        self.vocab_size = vocab_size
        self.seed = seed
        self.scale = scale
        self.time_dependent = time_dependent
        self.overrides = dict(overrides or {})
        self.fn = fn
        self._table: dict = {}

    def _row(self, ctx: tuple, i: int, t: int) -> np.ndarray:
        key = (ctx, i, t if self.time_dependent else 0)
        row = self._table.get(key)
        if row is not None:
            return row
        if key in self.overrides or (ctx, i, t) in self.overrides:
            p = np.asarray(self.overrides.get(key, self.overrides.get((ctx, i, t))), dtype=np.float64)
            row = np.log(p)
        elif self.fn is not None:
            row = np.log(np.asarray(self.fn(ctx, i, t), dtype=np.float64))
        else:
            words = [self.seed & 0xFFFFFFFF, i, key[2]] + [int(v) for v in ctx]
            g = np.random.default_rng(words)
            row = _kernels.log_softmax_np(self.scale * g.standard_normal(self.vocab_size))
        self._table[key] = row
        return row

    def log_probs(self, tokens, t) -> np.ndarray:
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        N, L = tokens.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (N,))
        out = np.empty((N, L, self.vocab_size))
        for n in range(N):
            ctx = tuple(int(v) for v in tokens[n])
            for i in range(L):
                out[n, i] = self._row(ctx, i, int(t[n]))
        return out

    def predict(self, tokens, t) -> np.ndarray:
        return np.exp(self.log_probs(tokens, t))

    def logits(self, tokens, t) -> np.ndarray:
        return self.log_probs(tokens, t)
