"""Self-checks runnable from the command line.

Each suite returns a :class:`SuiteResult` with the largest error it observed
and the tolerance it was held to. ``fault="swap-token-order"`` runs the
parallel forward with patch-major token order, which the causality and
equivalence suites must catch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from streamssm import autograd as ag
from streamssm.backbone import Backbone, BackboneConfig, build_model
from streamssm.pretrain import PretrainModel, ReferenceTeacher, grad_total, loss_align, loss_rec, loss_total, make_mask
from streamssm.ssm import DiscreteSsm, ScanState, SsmParams, discretize, scan_naive, scan_parallel, scan_step
from streamssm.streaming import session_new, session_run

FAULTS = ("swap-token-order",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status}  {self.name:<22} max error {self.max_error:.3e}  (tol {self.tolerance:.0e})  {self.seconds:6.2f}s"
        return f"{text}  {self.detail}" if self.detail else text


def _token_order(fault: str | None) -> str:
    return "patch-major" if fault == "swap-token-order" else "frame-major"


def _dtype_name(f64: bool) -> str:
    return "float64" if f64 else "float32"


def suite_streaming_equivalence(f64: bool = False, fault: str | None = None, seed: int = 0) -> SuiteResult:
    """Session stepping against the parallel forward on an 8-frame clip."""
    tol = 1e-9 if f64 else 1e-4
    model = build_model(BackboneConfig(dtype=_dtype_name(f64)), seed=seed)
    video = np.random.default_rng(seed).random((1, 3, 8, 32, 32))
    with ag.no_grad():
        ref = model.forward_parallel(video, token_order=_token_order(fault))
    outs = session_run(session_new(model), video[0])
    err = max(
        np.abs(np.stack([o.logits for o in outs]) - ref.logits.data[0]).max(),
        np.abs(np.stack([o.features for o in outs]) - ref.features.data[0]).max(),
    )
    return SuiteResult("streaming-equivalence", bool(err <= tol), float(err), tol)


def suite_causality(f64: bool = False, fault: str | None = None, seed: int = 0) -> SuiteResult:
    """Perturbing frames after t must leave outputs at frames up to t untouched."""
    tol = 1e-6
    model = build_model(BackboneConfig(dtype=_dtype_name(f64)), seed=seed)
    rng = np.random.default_rng(seed)
    video = rng.random((1, 3, 8, 32, 32))
    order = _token_order(fault)
    err = 0.0
    with ag.no_grad():
        base = model.forward_parallel(video, token_order=order).logits.data
        for t in (0, 3, 7):
            noisy = video.copy()
            noisy[:, :, t + 1 :] = rng.random(noisy[:, :, t + 1 :].shape) * 4 - 2
            out = model.forward_parallel(noisy, token_order=order).logits.data
            err = max(err, float(np.abs(out[:, : t + 1] - base[:, : t + 1]).max()))
    return SuiteResult("causality", err <= tol, err, tol, detail="t in {0, 3, 7}")


def _random_ssm(rng: np.random.Generator, dtype) -> tuple[DiscreteSsm, np.ndarray, np.ndarray, ScanState]:
    heads, state_dim, length = int(rng.integers(1, 5)), int(rng.integers(1, 17)), int(rng.integers(1, 65))
    params = SsmParams(
        A=-rng.uniform(0.1, 2.0, (heads, state_dim)),
        B=rng.normal(size=(length, heads, state_dim)),
        C=rng.normal(size=(length, heads, state_dim)),
        delta=rng.uniform(1e-3, 0.5, (length, heads)),
    )
    disc = discretize(params)
    disc = DiscreteSsm(disc.A_bar.astype(dtype), disc.B_bar.astype(dtype))
    x = rng.normal(size=(length, heads)).astype(dtype)
    h0 = ScanState(rng.normal(size=(heads, state_dim)).astype(dtype))
    return disc, params.C.astype(dtype), x, h0


def suite_scan_oracle(f64: bool = False, fault: str | None = None, seed: int = 0, cases: int = 100) -> SuiteResult:
    """Prefix scan and folded single steps against the sequential loop, plus ZOH spot values."""
    dtype = np.float64 if f64 else np.float32
    tol = 1e-12 if f64 else 1e-5
    rng = np.random.default_rng(seed)
    err = 0.0
    fold_ok = True
    for _ in range(cases):
        disc, C, x, h0 = _random_ssm(rng, dtype)
        y_ref, h_ref = scan_naive(disc, C, x, h0)
        y_par, h_par = scan_parallel(disc, C, x, h0)
        err = max(err, float(np.abs(y_par - y_ref).max()), float(np.abs(h_par.h - h_ref.h).max()))
        state = h0
        ys = []
        for t in range(x.shape[0]):
            y_t, state = scan_step(disc.at(t), C[t], x[t], state)
            ys.append(y_t)
        fold_ok &= np.array_equal(np.stack(ys), y_ref) and np.array_equal(state.h, h_ref.h)
    half = discretize(SsmParams(np.array([[-1.0]]), np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.array([[np.log(2.0)]])))
    zoh_err = max(abs(half.A_bar.item() - 0.5), abs(half.B_bar.item() - 0.5))
    tiny = discretize(SsmParams(np.array([[-1.0]]), np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.array([[1e-6]])))
    limit_err = abs(tiny.B_bar.item() - 1e-6)
    passed = err <= tol and fold_ok and zoh_err <= 1e-12 and limit_err <= 1e-8
    detail = f"{cases} cases, fold {'bitwise' if fold_ok else 'MISMATCH'}, zoh {zoh_err:.1e}, small-delta {limit_err:.1e}"
    return SuiteResult("scan-oracle", passed, err, tol, detail=detail)


def gradient_check_model(seed: int = 0):
    """A float64 pretraining model small enough to check every parameter by finite differences."""
    config = BackboneConfig(
        frame_h=4, frame_w=4, patch_k=2, channels=8, m_spatial=1, n_temporal=1, state_dim=4,
        head_hidden=4, head_out_dim=1, max_frames=3, dtype="float64",
    )
    teacher = ReferenceTeacher(config.replace(channels=4), seed=seed + 5)
    model = PretrainModel(Backbone(config, np.random.default_rng(seed)), teacher.dim, decoder_hidden=8, seed=seed + 1)
    video = np.random.default_rng(seed).uniform(size=(1, 3, 3, 4, 4))
    plan = make_mask(12, 0.5, seed=seed + 3, frames=3, patches=4)
    return model, teacher, video, plan


def finite_difference_errors(model, video, plan, alpha: float, feats, eps: float = 1e-5, target: float = 1e-3):
    """Relative error of every analytic gradient entry against central differences.

    The denominator is floored at the resolution of the central difference
    itself (a few ulps of the loss divided by eps, scaled by ``target``), so
    that gradients far below what finite differences can resolve are judged
    on absolute agreement.
    """
    grads = grad_total(video, model, None, plan, alpha, feats)

    def loss() -> float:
        with ag.no_grad():
            return loss_total(video, model, None, plan, alpha, feats).l_total.item()

    base = loss()
    floor = 4 * np.finfo(np.float64).eps * abs(base) / eps / target
    worst = 0.0
    count = 0
    for name, param in model.named_parameters():
        flat = param.data.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss()
            flat[i] = orig - eps
            down = loss()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), floor))
            count += 1
    return worst, count


def suite_gradient(f64: bool = False, fault: str | None = None, seed: int = 0) -> SuiteResult:
    """Every parameter of a 2,201-parameter model, alpha in {0, 0.25}; always float64."""
    tol = 1e-3
    model, teacher, video, plan = gradient_check_model(seed)
    feats = teacher.features(video)
    worst = 0.0
    for alpha in (0.0, 0.25):
        err, count = finite_difference_errors(model, video, plan, alpha, feats)
        worst = max(worst, err)
    return SuiteResult("gradient", worst <= tol, worst, tol, detail=f"{count} parameters, alpha 0 and 0.25")


def suite_loss_property(f64: bool = False, fault: str | None = None, seed: int = 0) -> SuiteResult:
    """Exact zeros and twos, bounds over random pairs, and affinity in alpha."""
    rng = np.random.default_rng(seed)
    plan = make_mask(16, 0.5, seed=seed, frames=4, patches=4)
    target = rng.normal(size=(1, 4, 4, 12))
    err = loss_rec(target, target.copy(), plan).item()
    pairs_plan = make_mask(2000, 0.5, seed=seed)
    x_t = rng.normal(size=(1, 1, 2000, 8))
    x_f = rng.normal(size=(1, 1, 2000, 8)) * rng.uniform(0.01, 100, size=(1, 1, 2000, 1))
    value = loss_align(x_f, x_t, pairs_plan).item()
    bound_err = max(0.0, -value, value - 2.0)
    err = max(err, bound_err, abs(loss_align(x_t.copy(), x_t, pairs_plan).item()))
    err = max(err, abs(loss_align(-x_t, x_t, pairs_plan).item() - 2.0))
    for _ in range(1000 // 50):
        f = rng.normal(size=(1, 1, 100, 8))
        t = rng.normal(size=(1, 1, 100, 8))
        v = loss_align(f, t, make_mask(100, 0.5, seed=int(rng.integers(1 << 30)))).item()
        err = max(err, max(0.0, -v, v - 2.0))
    model, teacher, video, small_plan = gradient_check_model(seed)
    feats = teacher.features(video)
    ulps = 0.0
    with ag.no_grad():
        for alpha in (0.0, 0.1, 0.25, 1.0, 3.0):
            out = loss_total(video, model, None, small_plan, alpha, feats)
            total = out.l_total.item()
            ulps = max(ulps, abs(total - (out.l_rec.item() + alpha * out.l_align.item())) / np.spacing(total))
    passed = err == 0.0 and ulps <= 1.0
    return SuiteResult("loss-property", passed, err, 0.0, detail=f"affine in alpha to {ulps:.0f} ulp")


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "streaming-equivalence": suite_streaming_equivalence,
    "causality": suite_causality,
    "scan-oracle": suite_scan_oracle,
    "gradient": suite_gradient,
    "loss-property": suite_loss_property,
}


def run_suites(
    names=None, f64: bool = False, fault: str | None = None, seed: int = 0, report: Callable[[str], None] | None = None
) -> list[SuiteResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suites {unknown}; choose from {list(SUITES)}")
    results = []
    for name in names:
        start = time.perf_counter()
        result = SUITES[name](f64=f64, fault=fault, seed=seed)
        result.seconds = time.perf_counter() - start
        results.append(result)
        if report is not None:
            report(result.line())
    return results
