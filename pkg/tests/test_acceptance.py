"""Acceptance gate: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest -v -s tests/test_acceptance.py`` to see the lines inline, or
``python3 tests/test_acceptance.py`` for just the summary.  Criteria 7 and 8
train real models and take several minutes each on one CPU core.
"""
from __future__ import annotations

import contextlib
import io
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from bwsft.cli import main as cli_main
from bwsft.core import RngStream, partition
from bwsft.harness import Protocol, SyntheticTask, blocksize_grid, default_model_config, run_protocol
from bwsft.masking import PI_RANGE, mismatch_probabilities, sample_masks
from bwsft.model import TinyDenoiser
from bwsft.suites import bias_suite, bound_suite, certification_suite, gradient_suite

N_DRAWS = 100_000
RESULTS: dict[int, tuple[bool, str]] = {}


def report(n: int, name: str, passed: bool, detail: str):
    line = f"ACCEPTANCE {n} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    RESULTS[n] = (passed, line)
    print(line, flush=True)
    return passed


# ----------------------------------------------------------------- helpers

def _last_rate(p_of, k):
    """Mask rate of the min-one position: own draw, or forced when all k draws miss."""
    return p_of(lambda pi: pi + (1 - pi) ** k)


def _fixed(pi):
    return lambda f: f(pi)


def _uniform_pi(f):
    lo, hi = PI_RANGE
    from scipy.integrate import quad
    return quad(f, lo, hi, epsabs=1e-14, epsrel=1e-12)[0] / (hi - lo)


def expected_rates(mode, part, a, p_of, pi_prefix, pi_suffix):
    Lc = part.prompt_len
    rates = np.zeros(part.length)
    mean_pi = p_of(lambda pi: pi)
    if mode == "classical":
        rates[Lc:] = mean_pi
        rates[-1] = _last_rate(p_of, part.response_len)
        return rates
    blk = part.block_slice(a)
    rates[blk] = mean_pi
    rates[blk.stop - 1] = _last_rate(p_of, blk.stop - blk.start)
    rates[part.suffix_slice(a)] = pi_suffix if mode == "leaky_suffix" else 1.0
    rates[part.prefix_slice(a)] = pi_prefix if mode == "noisy_prefix" else 0.0
    return rates


# ----------------------------------------------------------------- criteria

def check_1():
    t0 = time.perf_counter()
    part = partition((3, 12), 4)
    worst = 0.0
    for a in (1, 2, 3):
        for label, p_of, pi in (("fixed", _fixed(0.3), 0.3), ("uniform", _uniform_pi, None)):
            for mode in ("classical", "blockwise", "noisy_prefix", "leaky_suffix"):
                g = RngStream(1, ("acc1", mode, a, label)).generator()
                pis = g.uniform(*PI_RANGE, size=N_DRAWS) if pi is None else pi
                masks = sample_masks(mode, part, N_DRAWS, g, a=a, pi=pis, pi_prefix=0.4, pi_suffix=0.6)
                emp = masks.mean(axis=0)
                exp = expected_rates(mode, part, a, p_of, 0.4, 0.6)
                band = 4 * np.sqrt(exp * (1 - exp) / N_DRAWS)
                deg = (exp == 0) | (exp == 1)
                if np.any(emp[deg] != exp[deg]):
                    return report(1, "mask-law fidelity", False, f"{mode} a={a}: degenerate position violated")
                z = np.abs(emp - exp)[~deg] / band[~deg] * 4
                worst = max(worst, float(z.max()))
    exact = True
    for seed in range(5):
        for a in (1, 2, 3):
            kw = dict(a=a, pi=0.5)
            base = sample_masks("blockwise", part, N_DRAWS // 5, RngStream(seed).generator(), **kw)
            pre = sample_masks("noisy_prefix", part, N_DRAWS // 5, RngStream(seed).generator(), pi_prefix=0.0, **kw)
            suf = sample_masks("leaky_suffix", part, N_DRAWS // 5, RngStream(seed).generator(), pi_suffix=1.0, **kw)
            exact &= np.array_equal(base, pre) and np.array_equal(base, suf)
    dt = time.perf_counter() - t0
    ok = worst <= 4.0 and exact and dt < 10
    return report(1, "mask-law fidelity", ok,
                  f"max |z| {worst:.2f} of 4, reductions bit-exact {exact}, {dt:.1f} s < 10 s")


def check_2():
    t0 = time.perf_counter()
    worst_digits = math.inf
    for k, pi in enumerate(np.linspace(0.0, 1.0, 20)):
        n_pre, n_suf = 1 + k % 5, 1 + (3 * k) % 7
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = cli_main(["probe", "--pi", repr(float(pi)), "--prefix-len", str(n_pre),
                             "--suffix-len", str(n_suf)])
        if code != 0:
            return report(2, "mismatch probabilities", False, f"probe exit {code}")
        got = eval(buf.getvalue().strip())
        want = (1 - (1 - pi) ** n_pre, 1 - pi ** n_suf)
        for gv, wv in zip(got, want):
            err = abs(gv - wv)
            worst_digits = min(worst_digits, -math.log10(err) if err > 0 else math.inf)
    # empirical event frequencies under classical masking
    part = partition((0, 16), 4)
    worst_z = 0.0
    for pi in (0.2, 0.5, 0.8):
        masks = sample_masks("classical", part, N_DRAWS, RngStream(2, ("acc2", repr(pi))).generator(), pi=pi)
        a = 2  # suffix of two blocks, so the min-one rule cannot touch the leak event
        p_pre, p_suf = mismatch_probabilities(part, a, pi)
        f_pre = masks[:, part.prefix_slice(a)].any(axis=1).mean()
        f_suf = (masks[:, part.suffix_slice(a)] == 0).any(axis=1).mean()
        for f, p in ((f_pre, p_pre), (f_suf, p_suf)):
            se = math.sqrt(p * (1 - p) / N_DRAWS)
            worst_z = max(worst_z, abs(f - p) / se if se > 0 else (0.0 if f == p else math.inf))
    dt = time.perf_counter() - t0
    ok = worst_digits >= 12 and worst_z <= 4 and dt < 30
    digits = "exact" if math.isinf(worst_digits) else f"{worst_digits:.1f} digits"
    return report(2, "mismatch probabilities", ok,
                  f"20-point grid {digits}, event-frequency max |z| {worst_z:.2f} of 4, {dt:.1f} s < 30 s")


def check_3():
    t0 = time.perf_counter()
    worst = 0.0
    coords = 0
    for seed in (0, 1, 2):
        res = gradient_suite(seed, n_coords=50, tol=1e-4)
        worst = max(worst, res.detail["max_rel_err"])
        coords = 50
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 120
    return report(3, "gradient correctness", ok,
                  f"max rel err {worst:.2e} <= 1e-4 over {coords} coords x 4 modes x 3 seeds, {dt:.1f} s < 120 s")


def check_4():
    t0 = time.perf_counter()
    res = certification_suite(0, N=N_DRAWS, threshold=4.0)
    dt = time.perf_counter() - t0
    zs = ", ".join(f"rho={'|'.join(f'{r:g}' for r in rep.rho)}: max |z| {rep.max_abs_z:.2f} {rep.status}"
                   for rep in res.detail["reports"])
    return report(4, "estimator unbiasedness", res.passed and dt < 600, f"{zs}, {dt:.1f} s < 600 s")


def check_5():
    t0 = time.perf_counter()
    res = bound_suite(0, n_models=20)
    rows = [r.split(",") for r in res.csv.splitlines()[1:]]
    min_gap = min(float(r[6]) for r in rows[:-1])
    tight = rows[-1][-1] == "pass"
    dt = time.perf_counter() - t0
    return report(5, "variational bound suite", res.passed and dt < 300,
                  f"min gap {min_gap:.3g} >= -1e-9 over 20 models, uniform tight {tight}, {dt:.1f} s < 300 s")


def check_6():
    t0 = time.perf_counter()
    res = bias_suite(0)
    dt = time.perf_counter() - t0
    d = res.detail
    return report(6, "classical-SFT bias", res.passed and dt < 600,
                  f"mid-block pi=0.5 bias {d['z_mid']:.1f} SE > 5; a=1 pi=0.999 bias {d['z_first']:.2f} "
                  f"x noise floor <= 4; {dt:.1f} s < 600 s")


COPY = SyntheticTask("copy_blocks", vocab_size=16, prompt_len=8, response_len=16, block_size=4,
                     n_train=2048, n_test=256)


_DIRECTIONAL: dict[int, tuple[float, float]] = {}


def directional_runs(seeds=(0, 1, 2, 3, 4)):
    """Final exact match (blockwise, classical) per seed; cached so both gates share the runs."""
    proto = Protocol("equal_flops", steps=2000, batch_size=32, block_size=4)
    for seed in seeds:
        if seed in _DIRECTIONAL:
            continue
        task = SyntheticTask(**{**COPY.__dict__, "seed": seed})
        acc = {}
        for obj in ("classical", "blockwise"):
            _, metrics = run_protocol(proto, obj, task, seed=seed)
            acc[obj] = metrics.final_acc
        _DIRECTIONAL[seed] = (acc["blockwise"], acc["classical"])
    return [(s, *_DIRECTIONAL[s]) for s in seeds]


def check_7():
    t0 = time.perf_counter()
    n_params = TinyDenoiser(default_model_config(COPY)).num_params
    rows = directional_runs()
    strict = sum(b > c for _, b, c in rows)
    not_worse = sum(b >= c for _, b, c in rows)
    dt = time.perf_counter() - t0
    per_seed = " ".join(f"s{s}:{b:.3f}/{c:.3f}" for s, b, c in rows)
    return report(7, "directional end-to-end", strict >= 4 and dt < 1800,
                  f"blockwise beats classical in {strict}/5 seeds, need 4 (not worse in {not_worse}/5); "
                  f"bw/cls {per_seed}; {n_params} params; {dt / 60:.1f} min < 30 min")


def check_8():
    t0 = time.perf_counter()
    res = blocksize_grid(COPY, sizes=(2, 4, 8), seeds=(0, 1, 2), steps=2000)
    diag, off = res.diagonal_mean(), res.off_diagonal_mean()
    dt = time.perf_counter() - t0
    cells = " ".join(f"{bt}->{bi}:{res.mean[i, j]:.3f}" for i, bt in enumerate(res.sizes)
                     for j, bi in enumerate(res.sizes))
    return report(8, "block-size consistency", diag > off and dt < 5400,
                  f"diagonal {diag:.4f} > off-diagonal {off:.4f}; {cells}; {dt / 60:.1f} min < 90 min")


def check_9():
    t0 = time.perf_counter()
    tiny = ["--n-train", "64", "--n-test", "16", "--steps", "20", "--batch-size", "8"]
    runs = {
        "verify": (["verify", "--seed", "3"], ["verify_gradients.csv", "verify_bound.csv",
                                                "verify_certification.csv", "verify_bias.csv"]),
        "train": (["train", "--objective", "blockwise", "--seed", "3", *tiny], ["metrics_blockwise.csv"]),
        "grid": (["grid", "--sizes", "2,4", "--seeds", "0,1", *tiny], ["grid.csv"]),
    }
    same = {}
    with tempfile.TemporaryDirectory() as tmp:
        for name, (argv, files) in runs.items():
            outs = []
            for rep in ("a", "b"):
                d = Path(tmp) / f"{name}_{rep}"
                with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
                    code = cli_main([*argv, "--out-dir", str(d)])
                if code != 0:
                    return report(9, "determinism", False, f"{name} exited {code}")
                outs.append([(d / f).read_bytes() for f in files])
            same[name] = outs[0] == outs[1]
    dt = time.perf_counter() - t0
    return report(9, "determinism", all(same.values()),
                  ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()) + f", {dt:.1f} s")


CHECKS = {1: check_1, 2: check_2, 3: check_3, 4: check_4, 5: check_5, 6: check_6, 7: check_7, 8: check_8,
          9: check_9}


@pytest.fixture
def gate(capsys):
    """Run a check with capture off so its PASS/FAIL line always reaches the terminal."""
    def run(n):
        with capsys.disabled():
            print()
            ok = CHECKS[n]()
        assert ok, RESULTS[n][1]
    return run


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6])
def test_acceptance_fast(gate, n):
    gate(n)


@pytest.mark.slow
def test_acceptance_7_directional(gate):
    gate(7)


@pytest.mark.slow
def test_directional_majority_not_worse():
    # weaker companion to criterion 7: blockwise >= classical in a majority of seeds
    rows = directional_runs()
    assert sum(b >= c for _, b, c in rows) >= 3, rows


@pytest.mark.slow
def test_acceptance_8_block_grid(gate):
    gate(8)


def test_acceptance_9_determinism(gate):
    gate(9)


if __name__ == "__main__":
    picked = [int(a) for a in sys.argv[1:]] or sorted(CHECKS)
    for n in picked:
        CHECKS[n]()
    print("\nsummary")
    print("\n".join(RESULTS[n][1] for n in picked))
    sys.exit(0 if all(RESULTS[n][0] for n in picked) else 1)
