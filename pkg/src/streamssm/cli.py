"""Command-line entry point: ``streamssm <command>``.

Commands:
    bench          streaming vs recomputation latency across memory lengths
    verify         equivalence, causality, scan, gradient and loss suites
    pretrain-toy   toy pretraining with and without teacher alignment
    gen-data       write synthetic clips as tensor files
    bench-kernels  compiled vs numpy selective-scan kernel timing

Settings are layered: built-in defaults, then ``--config`` JSON, then
``STREAMSSM_<FIELD>`` environment variables, then command-line flags.
Exit codes: 0 pass, 1 suite failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

from streamssm.backbone import ConfigError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
ENV_PREFIX = "STREAMSSM_"


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if "," in raw:
            return [_parse_env_value(part.strip()) for part in raw.split(",")]
        return raw


def env_overrides(cls, environ=None) -> dict:
    """Fields of dataclass ``cls`` set through ``STREAMSSM_<FIELD>`` variables."""
    environ = os.environ if environ is None else environ
    found = {}
    for f in dataclasses.fields(cls):
        key = ENV_PREFIX + f.name.upper()
        if key in environ:
            found[f.name] = _parse_env_value(environ[key])
    return found


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def build_settings(cls, args, flags: dict):
    """Merge defaults, config file, environment and flags into an instance of ``cls``."""
    data = _read_config(args.config)
    data.update(env_overrides(cls))
    data.update({k: v for k, v in flags.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    if "model" in names:
        model = data.get("model") or {}
        if isinstance(model, str):
            model = json.loads(model)
        if not isinstance(model, dict):
            raise ConfigError("model must be a JSON object of backbone settings")
        model = {**cls().model.to_dict(), **model}
        if args.f64 or os.environ.get(ENV_PREFIX + "F64") == "1":
            model["dtype"] = "float64"
        data["model"] = model
    try:
        return cls.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def cmd_bench(args) -> int:
    from streamssm.bench import RunConfig, run_bench, write_report

    config = build_settings(
        RunConfig, args,
        {"t_sweep": args.t_sweep, "repeat": args.repeat, "frames": args.frames, "warmup": args.warmup, "seed": args.seed,
         "out": args.out, "pin_cpu": args.pin_cpu, "modes": args.modes},
    )
    report = run_bench(config, progress=print)
    out = Path(config.out or "bench_out")
    csv_path, json_path = write_report(report, out)
    for mode, growth in report.to_dict()["growth"].items():
        print(f"{mode:>24} latency T={config.t_sweep[-1]} / T={config.t_sweep[0]}: {growth:.2f}x")
    floor_ok = report.timer_floor_ratio <= 0.05
    print(f"timer floor {report.noop_mean_us:.3f} us = {report.timer_floor_ratio:.2e} of smallest sample"
          f" ({'ok' if floor_ok else 'TOO LARGE'})")
    print(f"reference workload median {report.reference_median_us:.1f} us (compare across runs to judge machine drift)")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK if floor_ok else EXIT_FAILURE


def cmd_verify(args) -> int:
    from streamssm.verify import run_suites

    f64 = args.f64 or os.environ.get(ENV_PREFIX + "F64") == "1"
    seed = args.seed if args.seed is not None else int(os.environ.get(ENV_PREFIX + "SEED", 0))
    try:
        results = run_suites(args.suite, f64=f64, fault=args.inject_fault, seed=seed, report=print)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    if args.out:
        _write_json(Path(args.out), [dataclasses.asdict(r) for r in results])
    return EXIT_FAILURE if failed else EXIT_OK


def _write_trajectory(path: Path, rows: list[dict]) -> None:
    columns = ["step", "l_total", "l_rec"] + (["l_align"] if rows and "l_align" in rows[0] else [])
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def cmd_pretrain_toy(args) -> int:
    from streamssm.pretrain import ToyRunConfig, run_toy_comparison

    config = build_settings(
        ToyRunConfig, args,
        {"steps": args.steps, "lr": args.lr, "alpha": args.alpha, "seed": args.seed, "data": args.data,
         "out": args.out, "optimizer": args.optimizer},
    )
    runs = run_toy_comparison(config)
    out = Path(config.out or "pretrain_out")
    summary = {"config": config.to_dict(), "runs": []}
    ok = True
    for run in runs:
        path = out / f"trajectory_alpha_{run.alpha:g}.csv"
        _write_trajectory(path, run.trajectory)
        passed = not run.diverged and run.ratio <= config.target_ratio
        ok &= passed
        state = "DIVERGED" if run.diverged else f"final/initial {run.ratio:.4f}"
        print(f"alpha={run.alpha:<5g} {len(run.trajectory)} steps  {state}  {'ok' if passed else 'FAIL'}  -> {path}")
        summary["runs"].append(
            {"alpha": run.alpha, "steps": len(run.trajectory), "diverged": run.diverged, "ratio": run.ratio,
             "passed": passed, "trajectory": path.name}
        )
    _write_json(out / "summary.json", summary)
    return EXIT_OK if ok else EXIT_FAILURE


@dataclasses.dataclass
class GenDataConfig:
    count: int = 4
    frames: int = 8
    height: int = 32
    width: int = 32
    seed: int = 0
    out: str = "clips"

    def __post_init__(self) -> None:
        if min(self.count, self.frames, self.height, self.width) < 1:
            raise ConfigError("count, frames, height and width must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> GenDataConfig:
        unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown gen-data config keys: {unknown}")
        return cls(**data)


def cmd_gen_data(args) -> int:
    from streamssm.data import write_synthetic_clips

    config = build_settings(
        GenDataConfig, args,
        {"count": args.count, "frames": args.frames, "height": args.height, "width": args.width,
         "seed": args.seed, "out": args.out},
    )
    import numpy as np

    paths = write_synthetic_clips(
        config.out, config.count, seed=config.seed, frames=config.frames, height=config.height,
        width=config.width, dtype=np.float64 if args.f64 else np.float32,
    )
    print(f"wrote {len(paths)} clips of shape (3, {config.frames}, {config.height}, {config.width}) to {config.out}")
    return EXIT_OK


def cmd_bench_kernels(args) -> int:
    import numpy as np

    from streamssm.bench import bench_kernels

    if min(args.length, args.inner_dim, args.state_dim, args.repeat) < 1:
        raise ConfigError("length, inner-dim, state-dim and repeat must be positive")
    rows = bench_kernels(
        length=args.length, inner_dim=args.inner_dim, state_dim=args.state_dim, repeat=args.repeat,
        dtype=np.float64 if args.f64 else np.float32, seed=args.seed or 0,
    )
    for r in rows:
        print(f"{r['backend']:>8}  median {r['median_us']:12.1f} us  speedup {r['speedup']:6.2f}x"
              f"  max |diff| {r['max_abs_diff']:.2e}")
    if args.out:
        _write_json(Path(args.out), rows)
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamssm", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings for this command")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path or directory")
    common.add_argument("--f64", action="store_true", help="run in 64-bit floating point")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", parents=[common], help="streaming vs recomputation latency")
    p.add_argument("--t-sweep", type=_int_list, help="comma-separated memory lengths, e.g. 32,64,128")
    p.add_argument("--repeat", type=int, help="repetitions per mode and length (>= 3)")
    p.add_argument("--frames", type=int, help="timed frames per repetition")
    p.add_argument("--warmup", type=int)
    p.add_argument("--pin-cpu", type=int)
    p.add_argument("--modes", type=lambda s: s.split(","), help="subset of streaming,recompute-causal,recompute-bidirectional")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", parents=[common], help="run the self-check suites")
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.add_argument("--inject-fault", choices=["swap-token-order"], help="deliberately break the parallel forward")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pretrain-toy", parents=[common], help="toy pretraining with and without teacher")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--optimizer", choices=["adamw", "momentum", "sgd"])
    p.add_argument("--data", help="directory of .tensor clips (default: one synthetic clip)")
    p.set_defaults(func=cmd_pretrain_toy)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic clips")
    p.add_argument("--count", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("bench-kernels", parents=[common], help="compiled vs numpy scan kernel")
    p.add_argument("--length", type=int, default=1024)
    p.add_argument("--inner-dim", type=int, default=384)
    p.add_argument("--state-dim", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    p.set_defaults(func=cmd_bench_kernels)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
