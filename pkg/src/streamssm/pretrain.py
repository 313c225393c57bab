"""Masked reconstruction plus teacher feature alignment.

A :class:`MaskPlan` splits the T*P tokens of a clip into a masked set (omega)
and its complement (omega_bar). The student sees the clip with masked tokens
replaced by a learnable mask token. A per-token decoder predicts pixels, and
the reconstruction loss reads only omega. An alignment head maps student
features into the teacher's channel space, and the cosine alignment loss
reads only omega_bar. The objective is ``l_rec + alpha * l_align``.

Conventions:

* ``l_rec`` is the mean over masked tokens of the per-token mean square
  error, i.e. ``||x - x_hat||^2 / patch_dim`` averaged over omega (and batch).
* ``l_align`` is ``1 - mean cos`` over omega_bar with
  ``cos = <f, t> / sqrt(|f|^2 |t|^2)`` clipped to [-1, 1]; a pair with a zero
  vector counts as ``cos = 0`` and is tallied in :class:`AlignStats`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Protocol

import numpy as np

from streamssm import autograd as ag
from streamssm.autograd import Tensor, make_result
from streamssm.backbone import Backbone, BackboneConfig, ConfigError, extract_patches
from streamssm.data import read_tensor
from streamssm.nn import MLP, Linear, Module, parameter

DEFAULT_ALPHA = 0.25
DEFAULT_MASK_RATIO = 0.75


# masks -----------------------------------------------------------------------


@dataclass(frozen=True)
class MaskPlan:
    """Masked / visible token split over a (frames, patches) grid, frame-major."""

    omega: np.ndarray
    omega_bar: np.ndarray
    mask_ratio: float
    frames: int
    patches: int
    tube: bool = False

    @property
    def token_count(self) -> int:
        return self.frames * self.patches

    @property
    def grid(self) -> np.ndarray:
        """Boolean (frames, patches) array, true where masked."""
        flat = np.zeros(self.token_count, dtype=bool)
        flat[self.omega] = True
        return flat.reshape(self.frames, self.patches)


def make_mask(
    token_count: int,
    mask_ratio: float = DEFAULT_MASK_RATIO,
    seed: int = 0,
    tube: bool = False,
    frames: int | None = None,
    patches: int | None = None,
) -> MaskPlan:
    """Draw a mask uniformly without replacement.

    Random mode masks ``round(mask_ratio * token_count)`` tokens. Tube mode
    masks ``round(mask_ratio * patches)`` spatial positions in every frame.

    Args:
        token_count: frames * patches.
        mask_ratio: fraction in (0, 1).
        seed: RNG seed; equal seeds give equal plans.
        tube: mask the same spatial positions across frames.
        frames, patches: grid shape; defaults to a single frame row.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if frames is None and patches is None:
        frames, patches = 1, token_count
    elif frames is None:
        frames = token_count // patches
    elif patches is None:
        patches = token_count // frames
    if frames * patches != token_count:
        raise ValueError(f"{frames} frames x {patches} patches != {token_count} tokens")
    rng = np.random.default_rng(seed)
    if tube:
        n_spatial = round(mask_ratio * patches)
        if n_spatial in (0, patches):
            raise ValueError(f"ratio {mask_ratio} leaves an empty set over {patches} spatial positions")
        spatial = np.sort(rng.choice(patches, n_spatial, replace=False))
        omega = (np.arange(frames)[:, None] * patches + spatial[None, :]).reshape(-1)
    else:
        n_masked = round(mask_ratio * token_count)
        if n_masked in (0, token_count):
            raise ValueError(f"ratio {mask_ratio} leaves an empty set over {token_count} tokens")
        omega = np.sort(rng.choice(token_count, n_masked, replace=False))
    omega_bar = np.setdiff1d(np.arange(token_count), omega)
    return MaskPlan(omega, omega_bar, float(mask_ratio), frames, patches, tube)


# losses ----------------------------------------------------------------------


def _token_rows(x, plan: MaskPlan, index: np.ndarray, what: str) -> Tensor:
    """Select tokens ``index`` from a (B, T, P, D) grid as (B, |index|, D)."""
    x = ag.as_tensor(x)
    if x.ndim != 4 or x.shape[1:3] != (plan.frames, plan.patches):
        raise ValueError(f"{what} must be (B, {plan.frames}, {plan.patches}, D), got {x.shape}")
    flat = x.reshape(x.shape[0], plan.token_count, x.shape[3])
    return flat[:, index]


def loss_rec(target, x_hat, plan: MaskPlan) -> Tensor:
    """Per-token mean-square reconstruction error averaged over omega.

    Args:
        target: (B, T, P, D) ground-truth patch pixels (see :func:`patch_targets`).
        x_hat: (B, T, P, D) predictions; only entries in omega are read.
        plan: the mask.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    x_hat = ag.as_tensor(x_hat)
    if x_hat.shape != target.shape:
        raise ValueError(f"x_hat shape {x_hat.shape} does not cover target shape {target.shape}")
    err = _token_rows(x_hat, plan, plan.omega, "x_hat") - _token_rows(Tensor(target), plan, plan.omega, "target")
    return ag.mean(err * err)


@dataclass
class AlignStats:
    """Diagnostics from :func:`loss_align`."""

    pairs: int = 0
    zero_norm: int = 0


def _cosine_rows(f: Tensor, t: Tensor, stats: AlignStats | None) -> Tensor:
    fd, td = f.data, t.data
    dot = (fd * td).sum(-1)
    nf2 = (fd * fd).sum(-1)
    nt2 = (td * td).sum(-1)
    denom = np.sqrt(nf2 * nt2)
    ok = denom > 0
    safe = np.where(ok, denom, 1)
    raw = np.where(ok, dot / safe, 0)
    cos = np.clip(raw, -1, 1)
    if stats is not None:
        stats.pairs += int(ok.size)
        stats.zero_norm += int((~ok).sum())
    live = ok & (raw == cos)

    def backward(g):
        # d cos / d f = t / (|f||t|) - cos * f / |f|^2, symmetric for t
        gs = np.where(live, g, 0)[..., None]
        c = cos[..., None]
        nf2s = np.where(ok, nf2, 1)[..., None]
        nt2s = np.where(ok, nt2, 1)[..., None]
        s = safe[..., None]
        return gs * (td / s - c * fd / nf2s), gs * (fd / s - c * td / nt2s)

    return make_result(cos, (f, t), backward)


def loss_align(x_f, x_t, plan: MaskPlan, stats: AlignStats | None = None) -> Tensor:
    """``1 - mean cos`` between student and teacher features over omega_bar.

    Args:
        x_f: (B, T, P, Ct) student features after the alignment head.
        x_t: (B, T, P, Ct) teacher features; only omega_bar is read.
        plan: the mask.
        stats: optional counter of pairs and zero-norm pairs.
    """
    x_f, x_t = ag.as_tensor(x_f), ag.as_tensor(x_t)
    if x_f.shape != x_t.shape:
        raise ValueError(f"student features {x_f.shape} and teacher features {x_t.shape} differ")
    cos = _cosine_rows(
        _token_rows(x_f, plan, plan.omega_bar, "x_f"), _token_rows(x_t, plan, plan.omega_bar, "x_t"), stats
    )
    return 1.0 - ag.mean(cos)


# teacher ---------------------------------------------------------------------


class TeacherOracle(Protocol):
    """Maps a full, unmasked clip (B, 3, T, H, W) to (B, T, P, dim) features."""

    dim: int

    def features(self, video: np.ndarray) -> np.ndarray: ...


class ReferenceTeacher:
    """Frozen, randomly initialised backbone with a bidirectional temporal stage."""

    def __init__(self, config: BackboneConfig, seed: int = 1234):
        self.config = config.replace(temporal="bidirectional")
        self.model = Backbone(self.config, np.random.default_rng(seed))
        self.dim = self.config.channels

    def features(self, video: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return self.model.forward_parallel(video).tokens.data.copy()


class FileTeacher:
    """Teacher features read from tensor files, one per clip, in call order.

    Args:
        paths: feature files holding (T, P, dim) or (B, T, P, dim) arrays.
    """

    def __init__(self, paths):
        self._arrays = [read_tensor(p) for p in paths]
        dims = {a.shape[-1] for a in self._arrays}
        if len(dims) != 1:
            raise ValueError(f"teacher files disagree on feature dim: {sorted(dims)}")
        self.dim = dims.pop()
        self._next = 0

    def features(self, video: np.ndarray) -> np.ndarray:
        arr = self._arrays[self._next % len(self._arrays)]
        self._next += 1
        arr = arr if arr.ndim == 4 else arr[None]
        expected = (video.shape[0], video.shape[2])
        if arr.shape[:2] != expected:
            raise ValueError(f"teacher features {arr.shape} do not match clip batch/frames {expected}")
        return arr


# student ---------------------------------------------------------------------


class PretrainModel(Module):
    """Backbone plus mask token, pixel decoder and alignment head."""

    def __init__(self, backbone: Backbone, teacher_dim: int, decoder_hidden: int | None = None, seed: int = 0):
        cfg = backbone.config
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        self.backbone = backbone
        self.mask_token = parameter((0.02 * rng.standard_normal(cfg.channels)).astype(dt))
        self.decoder = MLP(cfg.channels, decoder_hidden or 2 * cfg.channels, cfg.patch_dim, rng, dtype=dt)
        self.align_head = Linear(cfg.channels, teacher_dim, rng, dtype=dt)
        self._teacher_dim = teacher_dim

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    @property
    def teacher_dim(self) -> int:
        return self._teacher_dim


@dataclass
class PretrainOutput:
    x_hat: Tensor  # (B, T, P, patch_dim), meaningful on omega
    x_f: Tensor  # (B, T, P, teacher_dim), meaningful on omega_bar
    l_rec: Tensor
    l_align: Tensor
    l_total: Tensor
    alpha: float
    stats: AlignStats = field(default_factory=AlignStats)


def patch_targets(video: np.ndarray, config: BackboneConfig) -> np.ndarray:
    """Ground-truth pixels per token, (B, T, P, patch_dim)."""
    return extract_patches(np.asarray(video, dtype=config.np_dtype), config.patch_k)


def loss_total(
    video: np.ndarray,
    model: PretrainModel,
    teacher: TeacherOracle | None,
    plan: MaskPlan,
    alpha: float = DEFAULT_ALPHA,
    teacher_features: np.ndarray | None = None,
) -> PretrainOutput:
    """Evaluate both losses and ``l_total = l_rec + alpha * l_align``.

    ``teacher_features`` may be passed to reuse a cached teacher pass; the
    teacher is always run on the unmasked clip.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    video = np.asarray(video)
    cfg = model.config
    if (video.shape[2], cfg.patches) != (plan.frames, plan.patches):
        raise ValueError(f"plan covers {plan.frames}x{plan.patches} tokens, clip has {video.shape[2]}x{cfg.patches}")
    out = model.backbone.forward_parallel(video, mask=plan.grid, mask_token=model.mask_token)
    x_hat = model.decoder(out.tokens)
    x_f = model.align_head(out.tokens)
    l_rec = loss_rec(patch_targets(video, cfg), x_hat, plan)
    stats = AlignStats()
    if teacher_features is None and teacher is not None:
        teacher_features = teacher.features(video)
    if teacher_features is None:
        l_align = Tensor(np.asarray(math.nan, dtype=cfg.np_dtype))
        l_total = l_rec
    else:
        teacher_features = np.asarray(teacher_features, dtype=cfg.np_dtype)
        if teacher_features.shape[-1] != model.teacher_dim:
            raise ValueError(
                f"alignment head outputs {model.teacher_dim} channels, teacher provides {teacher_features.shape[-1]}"
            )
        l_align = loss_align(x_f, teacher_features, plan, stats)
        l_total = l_rec + alpha * l_align
    return PretrainOutput(x_hat, x_f, l_rec, l_align, l_total, alpha, stats)


def grad_total(
    video: np.ndarray,
    model: PretrainModel,
    teacher: TeacherOracle | None,
    plan: MaskPlan,
    alpha: float = DEFAULT_ALPHA,
    teacher_features: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Exact gradient of ``l_total`` for every trainable parameter, by name.

    Parameters off the loss path get zero arrays. Raises
    ``FloatingPointError`` naming the first parameter with a non-finite
    gradient.
    """
    model.zero_grad()
    out = loss_total(video, model, teacher, plan, alpha, teacher_features)
    out.l_total.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        grads[name] = g
    return grads


# training --------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trajectory: list[dict]):
        super().__init__(message)
        self.trajectory = trajectory


class AdamW:
    """Decoupled weight-decay Adam over a fixed parameter list."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)


class Momentum:
    """Heavy-ball gradient descent; ``momentum=0`` is plain gradient descent."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.momentum
            b += g
            p.data = (p.data - self.lr * b).astype(p.dtype)


OPTIMIZERS = ("adamw", "momentum", "sgd")


def make_optimizer(name: str, params, lr: float):
    if name == "adamw":
        return AdamW(params, lr)
    if name == "momentum":
        return Momentum(params, lr, 0.9)
    if name == "sgd":
        return Momentum(params, lr, 0.0)
    raise ValueError(f"unknown optimizer {name!r}; choose from {OPTIMIZERS}")


def train_toy(
    model: PretrainModel,
    teacher: TeacherOracle | None,
    clips,
    steps: int = 200,
    lr: float = 1e-3,
    alpha: float = DEFAULT_ALPHA,
    mask_ratio: float = DEFAULT_MASK_RATIO,
    seed: int = 0,
    tube: bool = False,
    optimizer: str = "adamw",
) -> list[dict]:
    """Fit ``model`` to ``clips`` with a fixed mask per clip.

    Each step uses clip ``step % len(clips)``; teacher features are computed
    once per clip. Returns one row per step with ``step``, ``l_total``,
    ``l_rec`` and (when alpha > 0) ``l_align``, measured before the update.

    Raises:
        TrainingDiverged: on a non-finite loss, carrying the rows so far.
    """
    clips = [np.asarray(c)[None] if np.asarray(c).ndim == 4 else np.asarray(c) for c in clips]
    if not clips:
        raise ValueError("train_toy needs at least one clip")
    cfg = model.config
    plans = [
        make_mask(c.shape[2] * cfg.patches, mask_ratio, seed + i, tube=tube, frames=c.shape[2], patches=cfg.patches)
        for i, c in enumerate(clips)
    ]
    use_teacher = alpha > 0 and teacher is not None
    targets = [teacher.features(c) if use_teacher else None for c in clips]
    params = model.parameters()
    opt = make_optimizer(optimizer, params, lr)
    trajectory: list[dict] = []
    for step in range(steps):
        i = step % len(clips)
        model.zero_grad()
        out = loss_total(clips[i], model, teacher if use_teacher else None, plans[i], alpha if use_teacher else 0.0,
                         targets[i])
        row = {"step": step, "l_total": float(out.l_total.data), "l_rec": float(out.l_rec.data)}
        if use_teacher:
            row["l_align"] = float(out.l_align.data)
        if not np.isfinite(row["l_total"]):
            raise TrainingDiverged(f"loss became non-finite at step {step}", trajectory)
        trajectory.append(row)
        out.l_total.backward()
        opt.step([np.zeros_like(p.data) if p.grad is None else p.grad for p in params])
    return trajectory


# with/without teacher comparison -----------------------------------------------


@dataclass
class ToyRunConfig:
    """Settings for the paired toy runs (with and without teacher alignment).

    Attributes:
        model: student backbone; the reference teacher shares its shape.
        steps, lr, mask_ratio, tube, optimizer: passed to :func:`train_toy`.
        alpha: teacher weight of the aligned run; the other run uses 0.
        seed: seeds the student weights and the mask.
        clip_seed: seeds the synthetic clip when ``data`` is unset.
        teacher_seed: seeds the reference teacher.
        data: directory of ``.tensor`` clips to train on instead.
        out: directory for the trajectory files.
        target_ratio: final / initial loss each run must reach.
    """

    model: BackboneConfig = field(default_factory=BackboneConfig)
    steps: int = 200
    lr: float = 1e-3
    alpha: float = DEFAULT_ALPHA
    mask_ratio: float = DEFAULT_MASK_RATIO
    tube: bool = False
    optimizer: str = "adamw"
    seed: int = 0
    clip_seed: int = 0
    teacher_seed: int = 1234
    data: str | None = None
    out: str | None = None
    target_ratio: float = 0.1

    def __post_init__(self) -> None:
        if isinstance(self.model, dict):
            self.model = BackboneConfig.from_dict(self.model)
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError("lr must be a finite non-negative number")
        if self.alpha <= 0:
            raise ConfigError("alpha of the aligned run must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["model"] = self.model.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> ToyRunConfig:
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown pretrain-toy config keys: {unknown}")
        return cls(**data)


@dataclass
class ToyRun:
    alpha: float
    trajectory: list[dict]
    diverged: bool = False

    @property
    def ratio(self) -> float:
        return self.trajectory[-1]["l_total"] / self.trajectory[0]["l_total"] if self.trajectory else math.nan


def run_toy_comparison(config: ToyRunConfig) -> list[ToyRun]:
    """Train two fresh students on the same clips, with ``config.alpha`` and with 0."""
    if config.data:
        from streamssm.data import load_clips

        clips = load_clips(config.data)
    else:
        from streamssm.data import synthetic_clip

        cfg = config.model
        clips = [synthetic_clip(config.clip_seed, frames=cfg.max_frames, height=cfg.frame_h, width=cfg.frame_w)]
    teacher = ReferenceTeacher(config.model, seed=config.teacher_seed)
    runs = []
    for alpha in (config.alpha, 0.0):
        student = PretrainModel(Backbone(config.model, np.random.default_rng(config.seed)), teacher.dim, seed=config.seed)
        try:
            trajectory = train_toy(
                student, teacher, clips, steps=config.steps, lr=config.lr, alpha=alpha,
                mask_ratio=config.mask_ratio, seed=config.seed, tube=config.tube, optimizer=config.optimizer,
            )
            runs.append(ToyRun(alpha, trajectory))
        except TrainingDiverged as exc:
            runs.append(ToyRun(alpha, exc.trajectory, diverged=True))
    return runs
