"""Per-frame latency of streaming inference against full-window recomputation.

For every memory length T in the sweep, three modes are timed on the same
pre-generated frames:

* ``streaming``: a session is stepped through frames ``0..T-1`` untimed,
  then each following step is timed.
* ``recompute-causal``: every new frame triggers ``forward_parallel`` on the
  window of the last T frames with the causal model.
* ``recompute-bidirectional``: the same with a bidirectional temporal stage,
  which has no recurrent shortcut.

Each row collects ``repeat * frames`` timed frames.
Latency in microseconds is the primitive measurement and fps is derived as
``1e6 / mean``. The timed region is a single model call; data generation,
report building and I/O happen outside it. A no-op model run through the
same harness bounds the timer's own overhead, and a fixed numpy workload
timed alongside the rows records how steady the machine was.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from streamssm import autograd as ag
from streamssm.backbone import Backbone, BackboneConfig, ConfigError, build_model
from streamssm.kernels import BACKEND, available_backends, get_backend
from streamssm.streaming import session_new, session_step

MODES = ("streaming", "recompute-causal", "recompute-bidirectional")
CSV_COLUMNS = ("mode", "T", "frame_index", "latency_us")
REPORT_FORMAT = "streamssm-bench"
REPORT_VERSION = 1
TIMER_FLOOR_LIMIT = 0.05


class BenchError(RuntimeError):
    """Raised when a measurement cannot be trusted."""


def bench_model_config() -> BackboneConfig:
    return BackboneConfig(channels=192, m_spatial=4, n_temporal=4)


@dataclass
class RunConfig:
    """What to benchmark and how.

    Attributes:
        model: causal backbone configuration; the bidirectional baseline is
            derived from it.
        t_sweep: memory lengths, strictly increasing.
        repeat: repetitions per (mode, T) row, at least 3.
        frames: timed frames per repetition; a row holds
            ``repeat * frames`` samples, taken round-robin across rows.
        warmup: untimed calls of each mode before its row is measured.
        seed: seeds both the model weights and the frames.
        out: output directory for ``bench.csv`` and ``bench.json``.
        pin_cpu: CPU index to pin the process to, if given.
        modes: subset of :data:`MODES` to run.
    """

    model: BackboneConfig = field(default_factory=bench_model_config)
    t_sweep: tuple[int, ...] = (32, 64, 128)
    repeat: int = 5
    frames: int = 4
    warmup: int = 16
    seed: int = 0
    out: str | None = None
    pin_cpu: int | None = None
    modes: tuple[str, ...] = MODES

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = BackboneConfig.from_dict(self.model)
        self.t_sweep = tuple(int(t) for t in self.t_sweep)
        self.modes = tuple(self.modes)
        self.validate()

    def validate(self) -> None:
        if not self.t_sweep:
            raise ConfigError("t_sweep is empty")
        if any(t < 1 for t in self.t_sweep):
            raise ConfigError("memory lengths must be positive")
        if any(b <= a for a, b in zip(self.t_sweep, self.t_sweep[1:])):
            raise ConfigError(f"t_sweep must be strictly increasing, got {list(self.t_sweep)}")
        if self.repeat < 3:
            raise ConfigError(f"repeat must be at least 3, got {self.repeat}")
        if self.frames < 1:
            raise ConfigError(f"frames per repetition must be positive, got {self.frames}")
        if self.warmup < 0:
            raise ConfigError("warmup must be non-negative")
        unknown = set(self.modes) - set(MODES)
        if unknown or not self.modes:
            raise ConfigError(f"modes must be a non-empty subset of {MODES}, got {list(self.modes)}")
        if self.model.temporal != "causal":
            raise ConfigError("the benchmark model must be causal; the bidirectional baseline is derived")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["model"] = self.model.to_dict()
        data["t_sweep"] = list(self.t_sweep)
        data["modes"] = list(self.modes)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown bench config keys: {unknown}")
        return cls(**data)


@dataclass
class BenchRow:
    mode: str
    T: int
    frame_indices: list[int]
    samples_us: list[float]

    @property
    def mean_us(self) -> float:
        return float(np.mean(self.samples_us))

    @property
    def median_us(self) -> float:
        return float(np.median(self.samples_us))

    @property
    def p95_us(self) -> float:
        return float(np.percentile(self.samples_us, 95))

    @property
    def fps(self) -> float:
        return 1e6 / self.mean_us

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "T": self.T,
            "frame_indices": list(self.frame_indices),
            "samples_us": list(self.samples_us),
            "mean_us": self.mean_us,
            "median_us": self.median_us,
            "p95_us": self.p95_us,
            "fps": self.fps,
        }


@dataclass
class BenchReport:
    config: RunConfig
    rows: list[BenchRow]
    noop_mean_us: float
    reference_us: list[float] = field(default_factory=list)
    backend: str = BACKEND

    @property
    def reference_median_us(self) -> float:
        """Median latency of the fixed reference workload; compare across runs to judge machine drift."""
        return float(np.median(self.reference_us)) if self.reference_us else float("nan")

    def row(self, mode: str, T: int) -> BenchRow:
        for r in self.rows:
            if r.mode == mode and r.T == T:
                return r
        raise KeyError((mode, T))

    @property
    def smallest_sample_us(self) -> float:
        return min(min(r.samples_us) for r in self.rows)

    @property
    def timer_floor_ratio(self) -> float:
        return self.noop_mean_us / self.smallest_sample_us

    def growth(self, mode: str) -> float:
        """Mean latency at the longest memory length over the shortest."""
        sweep = self.config.t_sweep
        return self.row(mode, sweep[-1]).mean_us / self.row(mode, sweep[0]).mean_us

    def to_dict(self) -> dict:
        modes = [m for m in MODES if m in self.config.modes]
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "csv_columns": list(CSV_COLUMNS),
            "backend": self.backend,
            "config": self.config.to_dict(),
            "rows": [r.to_dict() for r in self.rows],
            "timer_floor": {
                "noop_mean_us": self.noop_mean_us,
                "smallest_sample_us": self.smallest_sample_us,
                "ratio": self.timer_floor_ratio,
                "limit": TIMER_FLOOR_LIMIT,
                "ok": self.timer_floor_ratio <= TIMER_FLOOR_LIMIT,
            },
            "growth": {m: self.growth(m) for m in modes},
            "reference": {
                "median_us": self.reference_median_us,
                "p95_us": float(np.percentile(self.reference_us, 95)) if self.reference_us else None,
                "samples": len(self.reference_us),
            },
        }


def _timed(call: Callable, args: Sequence) -> list[float]:
    samples = []
    for arg in args:
        start = time.perf_counter_ns()
        call(arg)
        stop = time.perf_counter_ns()
        if stop < start:
            raise BenchError("monotonic clock went backwards")
        samples.append((stop - start) / 1e3)
    return samples


def _check_samples(samples: list[float], expected: int, label: str) -> None:
    if len(samples) < max(expected, 3):
        raise BenchError(f"{label}: {len(samples)} samples, need {max(expected, 3)}")


def _frames(config: RunConfig, count: int) -> np.ndarray:
    cfg = config.model
    rng = np.random.default_rng(config.seed)
    return rng.random((1, 3, count, cfg.frame_h, cfg.frame_w), dtype=np.float64).astype(cfg.np_dtype)


class _StreamingProbe:
    """A session kept at memory length >= T; each call times one more step."""

    def __init__(self, model: Backbone, frames: np.ndarray, T: int):
        self.clip = frames[0]
        self.session = session_new(model)
        for t in range(T):
            session_step(self.session, self.clip[:, t])
        self.next = T

    def warm(self, count: int, model: Backbone) -> None:
        scratch = session_new(model)
        for t in range(count):
            session_step(scratch, self.clip[:, t % self.clip.shape[1]])

    def __call__(self) -> tuple[int, float]:
        t = self.next
        (sample,) = _timed(lambda i: session_step(self.session, self.clip[:, i]), [t])
        self.next += 1
        return t, sample


class _RecomputeProbe:
    """Each call times a full forward over the T frames ending at the next new frame."""

    def __init__(self, model: Backbone, frames: np.ndarray, T: int):
        self.model, self.frames, self.T = model, frames, T
        self.next = T

    def warm(self, count: int, model: Backbone) -> None:
        with ag.no_grad():
            for _ in range(count):
                self.model.forward_parallel(self.frames[:, :, : self.T])

    def __call__(self) -> tuple[int, float]:
        t, T = self.next, self.T
        with ag.no_grad():
            (sample,) = _timed(lambda i: self.model.forward_parallel(self.frames[:, :, i - T + 1 : i + 1]), [t])
        self.next += 1
        return t, sample


class _ReferenceProbe:
    """A fixed numpy workload independent of the model.

    Timed in the same round-robin as the real rows, its spread tells how
    steady the machine itself was while the rows were measured.
    """

    def __init__(self, seed: int = 0):
        self.a = np.random.default_rng(seed).random((256, 256))

    def work(self, _=None) -> None:
        for _ in range(3):
            self.a @ self.a

    def __call__(self) -> float:
        return _timed(self.work, [0])[0]


def measure_noop(count: int) -> float:
    """Mean latency of the harness around a model that does nothing."""
    samples = _timed(lambda t: None, range(count))
    return float(np.mean(samples))


def run_bench(config: RunConfig, progress: Callable[[str], None] | None = None) -> BenchReport:
    """Measure every (mode, T) row.

    After warming up every row, samples are taken round-robin: one frame of
    each (T, mode) row in turn, ``repeat * frames`` rounds. Every row's
    samples therefore span the whole run, so a slow spell on a shared
    machine touches all rows alike instead of skewing one of them, and the
    rows being compared see the same machine conditions.
    """
    if config.pin_cpu is not None:
        os.sched_setaffinity(0, {config.pin_cpu})
    modes = [m for m in MODES if m in config.modes]
    models = {}
    if "streaming" in modes or "recompute-causal" in modes:
        models["causal"] = build_model(config.model, seed=config.seed)
    if "recompute-bidirectional" in modes:
        models["bidirectional"] = build_model(config.model.replace(temporal="bidirectional"), seed=config.seed)
    model_of = {"streaming": "causal", "recompute-causal": "causal", "recompute-bidirectional": "bidirectional"}
    rounds = config.repeat * config.frames
    frames = _frames(config, config.t_sweep[-1] + rounds)
    probes = {}
    for T in config.t_sweep:
        for mode in modes:
            model = models[model_of[mode]]
            probe = (_StreamingProbe if mode == "streaming" else _RecomputeProbe)(model, frames, T)
            probe.warm(config.warmup, model)
            probes[(mode, T)] = probe
    reference = _ReferenceProbe(config.seed)
    for _ in range(config.warmup):
        reference()
    reference_samples = []
    collected = {key: ([], []) for key in probes}
    for _ in range(rounds):
        reference_samples.append(reference())
        for key, probe in probes.items():
            index, sample = probe()
            collected[key][0].append(index)
            collected[key][1].append(sample)
    rows = []
    for T in config.t_sweep:
        for mode in modes:
            indices, samples = collected[(mode, T)]
            _check_samples(samples, rounds, f"{mode} T={T}")
            row = BenchRow(mode, T, indices, samples)
            rows.append(row)
            if progress is not None:
                progress(f"{mode:>24} T={T:<5d} mean {row.mean_us:12.1f} us  median {row.median_us:12.1f} us"
                         f"  fps {row.fps:9.2f}")
    noop = measure_noop(max(100, rounds))
    return BenchReport(config, rows, noop, reference_us=reference_samples)


def schema() -> dict:
    text = resources.files("streamssm").joinpath("schemas/bench_report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_report(data: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``data`` does not fit the shipped schema."""
    import jsonschema

    jsonschema.validate(data, schema())


def write_report(report: BenchReport, out_dir) -> tuple[Path, Path]:
    """Write ``bench.csv`` (one line per sample) and ``bench.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "bench.csv"
    json_path = out_dir / "bench.json"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in report.rows:
            for index, sample in zip(row.frame_indices, row.samples_us):
                writer.writerow([row.mode, row.T, index, f"{sample:.3f}"])
    data = report.to_dict()
    validate_report(data)
    json_path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    return csv_path, json_path


def bench_kernels(
    length: int = 1024,
    inner_dim: int = 384,
    state_dim: int = 16,
    batch: int = 1,
    repeat: int = 5,
    dtype=np.float32,
    seed: int = 0,
) -> list[dict]:
    """Time the selective-scan forward of every importable backend on the same inputs.

    Returns one dict per backend with ``backend``, ``mean_us``, ``median_us``,
    ``speedup`` (relative to the numpy backend) and ``max_abs_diff`` against
    the numpy backend's output.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, length, inner_dim)).astype(dtype)
    delta = rng.uniform(1e-3, 0.1, size=(batch, length, inner_dim)).astype(dtype)
    A = -np.tile(np.arange(1, state_dim + 1, dtype=dtype), (inner_dim, 1))
    B = rng.normal(size=(batch, length, state_dim)).astype(dtype)
    C = rng.normal(size=(batch, length, state_dim)).astype(dtype)
    reference = get_backend("python").selective_scan_fwd(x, delta, A, B, C)[0]
    results = []
    for name in available_backends():
        fwd = get_backend(name).selective_scan_fwd
        fwd(x, delta, A, B, C)
        samples = _timed(lambda _: fwd(x, delta, A, B, C), range(repeat))
        y = fwd(x, delta, A, B, C)[0]
        results.append(
            {
                "backend": name,
                "mean_us": float(np.mean(samples)),
                "median_us": float(np.median(samples)),
                "max_abs_diff": float(np.abs(y.astype(np.float64) - reference).max()),
            }
        )
    base = next(r["median_us"] for r in results if r["backend"] == "python")
    for r in results:
        r["speedup"] = base / r["median_us"]
    return results
