"""Command-line surface: train, eval, spectrum, scan-bench, gen-data,
check-grads."""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .backprop import finite_diff_check, report_passed
from .checkpoint import load_checkpoint
from .datasets import DatasetSpec, SequenceBatch, gen_harmonic, load_dataset_dir, write_dataset_dir
from .dynamics import build_transition, forcing_sequence, init_params
from .model import init_model_params, flatten_params
from .scan import solve_recurrence_arrays
from .spectral import moment_im, spectrum_report
from .training import (
    ModelConfig,
    evaluate_model,
    load_config,
    model_loss_and_grads,
    train,
)


def _preset_dir() -> str:
    return os.path.join(os.path.dirname(__file__), "presets")


def preset_names() -> list[str]:
    d = _preset_dir()
    if not os.path.isdir(d):
        return []
    return sorted(os.path.splitext(f)[0] for f in os.listdir(d) if f.endswith(".cfg"))


def resolve_config_path(name_or_path: str) -> str:
    """A config argument is a file path, or the name of a shipped preset."""
    if os.path.exists(name_or_path):
        return name_or_path
    candidate = os.path.join(_preset_dir(), f"{name_or_path}.cfg")
    if os.path.exists(candidate):
        return candidate
    names = ", ".join(preset_names()) or "none available"
    raise FileNotFoundError(
        f"config {name_or_path!r} is neither a file nor a preset name "
        f"(presets: {names})"
    )


def _dataset_spec(config: ModelConfig) -> DatasetSpec:
    return DatasetSpec(
        task=config.task,
        normalization="zscore",
        include_time=config.include_time,
        seed=config.seed,
    )


def _print_metrics(metrics: dict, prefix: str = "") -> None:
    for key in ("loss", "accuracy", "mse", "mae"):
        if key in metrics:
            print(f"{prefix}{key} = {metrics[key]:.6g}")
    if "mse_steps" in metrics:
        curve = np.asarray(metrics["mse_steps"])
        d = max(1, len(curve) // 10)
        print(f"{prefix}mse_first_decile = {float(curve[:d].mean()):.6g}")
        print(f"{prefix}mse_final_decile = {float(curve[-d:].mean()):.6g}")


def cmd_train(args) -> int:
    config = load_config(resolve_config_path(args.config))
    data = load_dataset_dir(args.data, _dataset_spec(config))
    result = train(config, data, out_dir=args.out)
    print(f"best validation loss {result.best_val:.6g} at epoch {result.epoch}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.bin')}")
    print(f"metrics: {os.path.join(args.out, 'metrics.csv')}")
    test_rows = [r for r in result.metrics if r[1] == "test" and "_step_" not in r[2]]
    for _, _, metric, value in test_rows:
        print(f"test {metric} = {value:.6g}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data = load_dataset_dir(args.data, _dataset_spec(ckpt.config))
    from .training import _prepare_split

    test = _prepare_split(data[2], ckpt.config)
    metrics = evaluate_model(ckpt.params, ckpt.config, test)
    _print_metrics(metrics, prefix="test ")
    return 0


def cmd_spectrum(args) -> int:
    m = args.m
    if m < 1:
        raise ValueError("--m must be at least 1")
    if args.amax <= 0:
        raise ValueError("--amax must be positive")
    a_diag = args.amax * np.arange(1, m + 1) / m
    report = spectrum_report(args.scheme, a_diag, args.dt)
    print(f"scheme {args.scheme}, dt {args.dt:g}, {m} modes, A up to {args.amax:g}")
    print(f"max |lambda| = {report.max_modulus:.12f}")
    print(f"min |lambda| = {report.min_modulus:.12f}")
    for i, real, imag, modulus in report.rows():
        print(f"lambda[{i}] = {real:+.9f} {imag:+.9f}i  |lambda| = {modulus:.9f}")
    if args.moments:
        if args.scheme != "im":
            raise ValueError("closed-form moments are only available for scheme 'im'")
        for n_power in args.moments:
            value = moment_im(n_power, args.dt, args.amax)
            print(f"E|lambda|^{n_power} = {value:.12g}")
    return 0


def cmd_scan_bench(args) -> int:
    if args.n < 1 or args.m < 1:
        raise ValueError("--n and --m must be positive")
    rng = np.random.default_rng(0)
    params = init_params((args.m, 2, 2), dt=1.0, init_mode="uniform01", seed=1)
    trans = build_transition(params.effective_a(), 0.5, "imex")
    drive = rng.normal(size=(args.n, args.m))
    forcings = forcing_sequence(trans, drive)
    mode = {"seq": "sequential", "par": "parallel"}[args.mode]
    t0 = time.perf_counter()
    states = solve_recurrence_arrays(trans, forcings, mode=mode, chunk_size=args.chunk)
    elapsed = time.perf_counter() - t0
    rate = args.n / max(elapsed, 1e-12)
    print(f"n={args.n} m={args.m} mode={args.mode} chunk={args.chunk or 'auto'}")
    print(f"elapsed {elapsed:.4f} s ({rate:,.0f} steps/s)")
    print(f"final state norm {np.linalg.norm(states[-1]):.6g}")
    return 0


def cmd_gen_data(args) -> int:
    if args.kind != "harmonic":
        raise ValueError(f"unknown dataset kind {args.kind!r}")
    splits = gen_harmonic(seed=args.seed)
    write_dataset_dir(args.out, splits, task="regress", seed=args.seed)
    print(f"wrote harmonic dataset (2000/500/500 sequences, 1000 steps) to {args.out}")
    return 0


def _synthetic_batch(config: ModelConfig, rng) -> SequenceBatch:
    if config.task == "forecast" and config.forecast_l1 + config.forecast_l2 > 0:
        steps = config.forecast_l1 + config.forecast_l2
    else:
        steps = 16
    n = 3
    inputs = rng.normal(size=(n, steps, config.p_in))
    lengths = np.full(n, steps, dtype=np.int64)
    if config.task == "classify":
        targets = rng.integers(0, config.out, size=n)
    elif config.task == "forecast":
        targets = rng.normal(size=(n, steps, config.out))
    else:
        targets = rng.normal(size=(n, steps, config.out))
    return SequenceBatch(inputs=inputs, lengths=lengths, targets=targets)


def cmd_check_grads(args) -> int:
    config = load_config(resolve_config_path(args.config))
    rng = np.random.default_rng(config.seed)
    batch = _synthetic_batch(config, rng)
    from .training import _prepare_split

    batch = _prepare_split(batch, config)
    model = init_model_params(
        p_in=config.p_in,
        hidden=config.hidden,
        state=config.state,
        out=config.out,
        n_blocks=config.n_blocks,
        dt=config.dt,
        init_mode=config.init_mode,
        param_mode=config.param_mode,
        seed=config.seed,
    )
    params = flatten_params(model)

    def loss_fn(p):
        return model_loss_and_grads(p, config, batch)[0]

    _, analytic = model_loss_and_grads(params, config, batch)
    skip = None
    if config.param_mode == "relu":
        # derivative checks are meaningless within 1e-4 of the kink
        skip = {
            name: np.abs(arr) < 1e-4
            for name, arr in params.items()
            if name.endswith(".a_hat")
        }
    report = finite_diff_check(loss_fn, params, analytic, skip=skip)
    worst = 0.0
    for name, entry in report.items():
        status = "ok" if entry["passed"] else "MISMATCH"
        print(
            f"{name}: checked {entry['checked']}, "
            f"max rel err {entry['max_rel_err']:.3g} [{status}]"
        )
        worst = max(worst, entry["max_rel_err"])
    if report_passed(report):
        print(f"gradient check passed (worst relative error {worst:.3g})")
        return 0
    print("gradient check FAILED")
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linoss",
        description="Oscillatory linear state-space sequence models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="config file path or preset name")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectrum", help="propagator eigenvalues and moments")
    p.add_argument("--scheme", required=True, choices=("im", "imex", "vv"))
    p.add_argument("--m", required=True, type=int, help="number of modes")
    p.add_argument("--dt", required=True, type=float)
    p.add_argument("--amax", required=True, type=float, help="top of the stiffness range")
    p.add_argument(
        "--moments",
        type=lambda s: [int(x) for x in s.split(",") if x],
        default=None,
        help="comma-separated powers N for E|lambda|^N",
    )
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("scan-bench", help="time the recurrence scan")
    p.add_argument("--n", required=True, type=int, help="sequence length")
    p.add_argument("--m", required=True, type=int, help="state modes")
    p.add_argument("--mode", required=True, choices=("seq", "par"))
    p.add_argument("--chunk", type=int, default=None)
    p.set_defaults(func=cmd_scan_bench)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("kind", choices=("harmonic",))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("check-grads", help="finite-difference gradient check")
    p.add_argument("--config", required=True, help="config file path or preset name")
    p.set_defaults(func=cmd_check_grads)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
