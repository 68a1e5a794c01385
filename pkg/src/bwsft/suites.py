"""Verification suites behind ``bwsft verify`` and the acceptance tests.

Everything here runs on the small float64 "desk" denoiser so that finite
differences and exhaustive enumeration stay cheap.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import CERT_HEADER, bias_curve, certify_unbiasedness, clean_block_gradient
from .core import DiffusionSchedule, Example, RngStream, partition
from .decode import elbo_bound_check
from .diffusion import forward_noise
from .masking import MODES, sample_masks
from .model import DenoiserConfig, TabularDenoiser, TinyDenoiser, ce_closure, finite_difference_check

DESK_CONFIG = DenoiserConfig(vocab_size=4, max_len=12, d_model=4, n_layers=1, n_heads=1, num_steps=2)
DESK_EXAMPLE = Example((0, 1, 2), (3, 0, 1, 2, 3, 1, 0, 2))
DESK_BLOCK = 2
SKEWED_RHO = (0.7, 0.1, 0.1, 0.1)

FD_FLOOR = 1e-6  # gradients below this are compared absolutely


def desk_model(seed: int = 0) -> TinyDenoiser:
    return TinyDenoiser(DESK_CONFIG, seed=seed)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class SuiteResult:
    name: str
    passed: bool
    csv: str
    detail: dict = field(default_factory=dict)


def relative_error(analytic, numeric, floor: float = FD_FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def gradient_suite(seed: int = 0, n_coords: int = 50, tol: float = 1e-4, h: float = 1e-4) -> SuiteResult:
    """Reverse mode against central differences, one masked loss per mask mode."""
    model = desk_model(seed)
    ex = DESK_EXAMPLE
    part = partition(ex, DESK_BLOCK)
    g = RngStream(seed, ("gradcheck",)).generator()
    coords = np.sort(g.choice(model.num_params, size=min(n_coords, model.num_params), replace=False))
    rows = []
    worst = 0.0
    for mode in MODES:
        a = 2 if part.num_blocks > 2 else 1
        m = sample_masks(mode, part, 1, g, a=a, pi=0.5, pi_prefix=0.5, pi_suffix=0.5)[0]
        noised = forward_noise(ex, m, 1, model.vocab_size)
        region = np.zeros(part.length)
        region[part.block_slice(a) if mode != "classical" else slice(ex.prompt_len, part.length)] = 1.0
        weights = region * m
        tokens = np.asarray(noised.tokens)[None, :]
        closure = ce_closure(ex.tokens[None, :], weights[None, :])
        an, nu = finite_difference_check(model, tokens, np.array([1]), closure, coords, h=h)
        err = float(relative_error(an, nu).max())
        worst = max(worst, err)
        rows.append([mode, len(coords), repr(err), tol])
    return SuiteResult("gradients", worst <= tol, _csv(["mode", "coords", "max_rel_err", "tol"], rows),
                       {"max_rel_err": worst})


def bound_suite(seed: int = 0, n_models: int = 20, tol: float = 1e-9) -> SuiteResult:
    """Exact block NLL against the harmonic surrogate on random tabular models."""
    g = RngStream(seed, ("bound",)).generator()
    rows = []
    ok = True
    for n in range(n_models):
        V = int(g.integers(2, 6))
        k = int(g.integers(2, 4))
        nblocks = int(g.integers(1, 4))
        Lc = int(g.integers(0, 3))
        resp = g.integers(0, V, size=k * nblocks)
        ex = Example(tuple(int(v) for v in g.integers(0, V, size=Lc)), tuple(int(v) for v in resp))
        part = partition(ex, k)
        a = int(g.integers(1, part.num_blocks + 1))
        model = TabularDenoiser(V, seed=int(g.integers(2 ** 31)), scale=float(g.uniform(0.5, 3.0)))
        rep = elbo_bound_check(model, ex, part, a, tol=tol)
        ok &= rep.passed
        rows.append([n, V, part.block_len(a), a, repr(rep.nll), repr(rep.surrogate), repr(rep.gap),
                     "pass" if rep.passed else "fail"])
    # the uniform model is the tight case: surrogate and NLL agree up to the constant
    V, k = 5, 3
    ex = Example((1, 2), (0, 4, 3))
    rep = elbo_bound_check(TabularDenoiser(V, scale=0.0), ex, partition(ex, k), 1, tol=tol)
    tight = abs(rep.gap) <= 1e-9 and abs(rep.nll - k * math.log(V)) <= 1e-9
    ok &= tight
    rows.append(["uniform", V, k, 1, repr(rep.nll), repr(rep.surrogate), repr(rep.gap),
                 "pass" if tight else "fail"])
    header = ["model", "V", "block_len", "a", "nll", "surrogate", "gap", "status"]
    return SuiteResult("bound", bool(ok), _csv(header, rows))


def certification_suite(seed: int = 0, N: int = 100_000, threshold: float = 4.0) -> SuiteResult:
    model = desk_model(seed)
    ex = DESK_EXAMPLE
    part = partition(ex, DESK_BLOCK)
    schedule = DiffusionSchedule.uniform(DESK_CONFIG.num_steps)
    stream = RngStream(seed, ("certify",))
    masks = None
    reports = []
    M = part.num_blocks
    for rho in ((1.0 / M,) * M, SKEWED_RHO):
        rep = certify_unbiasedness(model, ex, part, rho, schedule, N, stream.child(len(reports)),
                                   masks=masks, threshold=threshold)
        reports.append(rep)
    ok = all(r.passed for r in reports)
    return SuiteResult("certification", ok, _csv(CERT_HEADER, [r.to_csv_row() for r in reports]),
                       {"reports": reports})


def bias_suite(seed: int = 0, N: int = 2000, a_mid: int = 2, pi_mid: float = 0.5,
               pi_high: float = 0.999, se_threshold: float = 5.0, floor_ratio: float = 4.0) -> SuiteResult:
    """Classical-SFT gradient bias against the clean block gradient.

    At a mid-sequence block and moderate pi the bias must clear
    ``se_threshold`` standard errors; at a = 1 and pi near one the classical
    mask almost always equals the clean one, so the bias must sit within
    ``floor_ratio`` times its noise floor.
    """
    model = desk_model(seed)
    ex = DESK_EXAMPLE
    part = partition(ex, DESK_BLOCK)
    stream = RngStream(seed, ("bias",))
    mid = bias_curve(model, ex, part, a_mid, [pi_mid], N, stream.child("mid"))
    first = bias_curve(model, ex, part, 1, [pi_high], N, stream.child("first"))
    z_mid = mid.bias_norm[0] / mid.se_norm[0]
    z_first = first.bias_norm[0] / first.se_norm[0] if first.se_norm[0] > 0 else 0.0
    ok = z_mid > se_threshold and z_first <= floor_ratio
    rows = [[a_mid, pi_mid, repr(mid.bias_norm[0]), repr(mid.se_norm[0]), repr(z_mid), f">{se_threshold}"],
            [1, pi_high, repr(first.bias_norm[0]), repr(first.se_norm[0]), repr(z_first), f"<={floor_ratio}"]]
    return SuiteResult("bias", bool(ok), _csv(["a", "pi", "bias_norm", "se_norm", "ratio", "criterion"], rows),
                       {"z_mid": z_mid, "z_first": z_first})


def run_all(seed: int = 0, *, draws: int = 100_000, log=None) -> list[SuiteResult]:
    out = []
    for fn, kw in ((gradient_suite, {}), (bound_suite, {}), (certification_suite, {"N": draws}), (bias_suite, {})):
        res = fn(seed, **kw)
        if log:
            log(f"{res.name}: {'pass' if res.passed else 'FAIL'}")
        out.append(res)
    return out
