"""Command line entry point: ``bwsft <subcommand> [flags]``.

Exit codes: 0 success, 1 configuration error (including unknown flags),
2 a verification suite failed.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .core import RngStream, partition
from .decode import DecodeConfig, decode_sequence
from .harness.config import ConfigError, load_config
from .harness.experiments import ablation_sweep, blocksize_grid
from .harness.tasks import GENERATORS, SyntheticTask, as_arrays, generate_corpus, read_corpus, write_corpus
from .harness.training import OBJECTIVES, Protocol, exact_match, run_protocol
from .masking import mismatch_probabilities
from .model import CheckpointError, load_checkpoint, save_checkpoint


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _protocol_name(text: str) -> str:
    name = text.replace("-", "_")
    if name not in ("equal_flops", "equal_tokens"):
        raise argparse.ArgumentTypeError(f"unknown protocol {text!r}")
    return name


def _add_common(p):
    p.add_argument("--config", help="key=value file; flags given on the command line win")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")


def _add_task(p):
    p.add_argument("--generator", choices=GENERATORS)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--prompt-len", type=int)
    p.add_argument("--response-len", type=int)
    p.add_argument("--task-block-size", type=int, help="block structure of the synthetic responses")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)


def _add_training(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--num-steps", type=int, help="diffusion steps T")


DEFAULTS = dict(seed=0, out_dir=".", generator="copy_blocks", vocab_size=16, prompt_len=8, response_len=16,
                task_block_size=4, n_train=2048, n_test=256, steps=2000, lr=3e-3, batch_size=32, num_steps=4,
                objective="blockwise", protocol="equal_flops", tau=1.0, block_size_train=4,
                block_size_infer=None, pi_prefix=0.0, pi_suffix=1.0, draws=100_000, sizes=[2, 4, 8],
                seeds=[0, 1, 2], axis="prefix", rates=None, pi=None, prefix_len=None, suffix_len=None,
                a=2, n=2000, record_time=False, max_new_tokens=None, instruction=None, checkpoint=None,
                corpus=None, trace=False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bwsft", description="Blockwise SFT desk laboratory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic corpus")
    _add_common(p)
    _add_task(p)

    p = sub.add_parser("train", help="train one arm and write its metrics CSV")
    _add_common(p)
    _add_task(p)
    _add_training(p)
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--protocol", type=_protocol_name)
    p.add_argument("--tau", type=float, help="traversal target for equal-tokens")
    p.add_argument("--block-size-train", type=int)
    p.add_argument("--block-size-infer", type=int)
    p.add_argument("--pi-prefix", type=float)
    p.add_argument("--pi-suffix", type=float)
    p.add_argument("--record-time", action="store_true", default=None,
                   help="fill the seconds column (breaks byte-identical reruns)")

    p = sub.add_parser("decode", help="decode one instruction with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--instruction", help="comma-separated token ids")
    p.add_argument("--block-size-infer", type=int)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--num-steps", type=int)
    p.add_argument("--trace", action="store_true", default=None)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint on a corpus file")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--block-size-infer", type=int)
    p.add_argument("--num-steps", type=int)

    p = sub.add_parser("verify", help="gradient, bound, certification and bias suites")
    _add_common(p)
    p.add_argument("--draws", type=int, help="importance-sampling draws per certification")

    p = sub.add_parser("probe", help="mismatch probabilities, or a bias curve with --pi-grid")
    _add_common(p)
    p.add_argument("--pi", type=float)
    p.add_argument("--prefix-len", type=int)
    p.add_argument("--suffix-len", type=int)
    p.add_argument("--pi-grid", type=_floats)
    p.add_argument("--a", type=int, help="active block for the bias curve")
    p.add_argument("--n", type=int, help="Monte-Carlo draws per pi")

    p = sub.add_parser("grid", help="block-size consistency grid")
    _add_common(p)
    _add_task(p)
    _add_training(p)
    p.add_argument("--sizes", type=_ints)
    p.add_argument("--seeds", type=_ints)

    p = sub.add_parser("ablate", help="prefix or suffix ablation sweep")
    _add_common(p)
    _add_task(p)
    _add_training(p)
    p.add_argument("--axis", choices=("prefix", "suffix"))
    p.add_argument("--rates", type=_floats)
    p.add_argument("--block-size-train", type=int)
    return parser


_CONVERTERS = {"sizes": _ints, "seeds": _ints, "rates": _floats, "pi_grid": _floats,
               "protocol": _protocol_name, "block_size_infer": int, "pi": float, "prefix_len": int,
               "suffix_len": int, "max_new_tokens": int}


def _resolve(parser, args) -> argparse.Namespace:
    """Fill unset flags from --config, then from DEFAULTS."""
    values = vars(args)
    from_file = load_config(args.config) if args.config else {}
    for key, raw in from_file.items():
        if key not in values:
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        if values[key] is not None:
            continue
        default = DEFAULTS.get(key)
        try:
            if key in _CONVERTERS:
                values[key] = _CONVERTERS[key](raw)
            elif isinstance(default, bool):
                values[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                values[key] = int(raw)
            elif isinstance(default, float):
                values[key] = float(raw)
            else:
                values[key] = raw
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None
    for key, val in list(values.items()):
        if val is None and key in DEFAULTS:
            values[key] = DEFAULTS[key]
    return argparse.Namespace(**values)


def _task(args) -> SyntheticTask:
    return SyntheticTask(args.generator, args.vocab_size, args.prompt_len, args.response_len,
                         args.task_block_size, args.n_train, args.n_test, seed=args.seed)


def _out(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="")
    print(f"wrote {path}")


def cmd_gen(args) -> int:
    task = _task(args)
    train_set, test_set = generate_corpus(task)
    d = _out(args)
    write_corpus(d / "train.jsonl", train_set)
    write_corpus(d / "test.jsonl", test_set)
    print(f"wrote {len(train_set)} train / {len(test_set)} test examples to {d}")
    return 0


def cmd_train(args) -> int:
    task = _task(args)
    proto = Protocol(args.protocol, steps=args.steps, tau=args.tau, batch_size=args.batch_size,
                     block_size=args.block_size_train)
    b_infer = args.block_size_infer or args.block_size_train
    dcfg = DecodeConfig(b_infer, task.response_len, num_steps=args.num_steps)
    extra = {}
    if args.objective == "noisy_prefix":
        extra["pi_prefix"] = args.pi_prefix
    if args.objective == "leaky_suffix":
        extra["pi_suffix"] = args.pi_suffix
    state, metrics = run_protocol(proto, args.objective, task, dcfg, seed=args.seed, lr=args.lr,
                                  num_steps=args.num_steps, record_time=args.record_time,
                                  log=lambda s: print(s, file=sys.stderr), **extra)
    d = _out(args)
    _write(d / f"metrics_{args.objective}.csv", metrics.to_csv())
    save_checkpoint(state.model, d / f"model_{args.objective}.ckpt")
    print(f"final exact match {metrics.final_acc:.4f}")
    return 0


def cmd_decode(args) -> int:
    if not args.checkpoint or args.instruction is None:
        raise ConfigError("decode needs --checkpoint and --instruction")
    model = load_checkpoint(args.checkpoint)
    instr = _ints(args.instruction)
    B = args.block_size_infer or 4
    n = args.max_new_tokens or model.config.max_len - len(instr)
    cfg = DecodeConfig(B, n, num_steps=args.num_steps or model.config.num_steps)
    out, trace = decode_sequence(model, instr, cfg, with_trace=True)
    print(",".join(str(int(v)) for v in out))
    if args.trace:
        print(trace.dump())
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.corpus:
        raise ConfigError("eval needs --checkpoint and --corpus")
    model = load_checkpoint(args.checkpoint)
    examples = read_corpus(args.corpus)
    prompts, responses = as_arrays(examples)
    cfg = DecodeConfig(args.block_size_infer or 4, responses.shape[1],
                       num_steps=args.num_steps or model.config.num_steps)
    print(f"exact_match {exact_match(model, prompts, responses, cfg):.6f}")
    return 0


def cmd_verify(args) -> int:
    from .suites import run_all

    d = _out(args)
    results = run_all(args.seed, draws=args.draws, log=print)
    for r in results:
        _write(d / f"verify_{r.name}.csv", r.csv)
    return 0 if all(r.passed for r in results) else 2


def cmd_probe(args) -> int:
    if args.pi_grid:
        from .analysis import bias_curve
        from .suites import DESK_BLOCK, DESK_EXAMPLE, desk_model

        part = partition(DESK_EXAMPLE, DESK_BLOCK)
        rep = bias_curve(desk_model(args.seed), DESK_EXAMPLE, part, args.a, args.pi_grid, args.n,
                         RngStream(args.seed, ("probe",)))
        _write(_out(args) / f"bias_a{args.a}.csv", rep.to_csv())
        return 0
    if args.pi is None or args.prefix_len is None or args.suffix_len is None:
        raise ConfigError("probe needs --pi, --prefix-len and --suffix-len (or --pi-grid)")
    if not 0.0 <= args.pi <= 1.0 or args.prefix_len < 0 or args.suffix_len < 0:
        raise ConfigError("pi must lie in [0, 1] and lengths must be >= 0")
    p_pre, p_suf = mismatch_probabilities((args.prefix_len, args.suffix_len), pi=args.pi)
    print(f"({p_pre!r}, {p_suf!r})")
    return 0


def cmd_grid(args) -> int:
    res = blocksize_grid(_task(args), args.sizes, args.seeds, steps=args.steps, lr=args.lr,
                         batch_size=args.batch_size, num_steps=args.num_steps,
                         log=lambda s: print(s, file=sys.stderr))
    _write(_out(args) / "grid.csv", res.to_csv())
    print(f"diagonal {res.diagonal_mean():.4f} off-diagonal {res.off_diagonal_mean():.4f}")
    return 0


def cmd_ablate(args) -> int:
    rates = args.rates or ([0.0, 0.33, 0.66, 1.0] if args.axis == "prefix" else [1.0, 0.66, 0.33, 0.0])
    res = ablation_sweep(_task(args), args.axis, rates, seed=args.seed, steps=args.steps, lr=args.lr,
                         batch_size=args.batch_size, block_size=args.block_size_train,
                         num_steps=args.num_steps, log=lambda s: print(s, file=sys.stderr))
    d = _out(args)
    for r in res.rates:
        _write(d / f"ablate_{args.axis}_{r:g}.csv", res.runs[r].to_csv())
    _write(d / f"ablate_{args.axis}.csv", res.to_csv())
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "decode": cmd_decode, "eval": cmd_eval,
            "verify": cmd_verify, "probe": cmd_probe, "grid": cmd_grid, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _resolve(parser, parser.parse_args(argv))
        return COMMANDS[args.command](args)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, ValueError, OSError) as e:
        print(f"bwsft: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
